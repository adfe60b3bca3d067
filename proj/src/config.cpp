#include "fcc/config.hpp"

#include <algorithm>

#include "fcc/errors.hpp"

namespace fcc {

ObjectReader::ObjectReader(const Json& value, std::string path) : value_(value), path_(std::move(path)) {
  if (!value_.is_object()) throw ConfigError((path_.empty() ? "config" : path_) + ": expected an object");
}

std::string ObjectReader::key_path(const char* key) const { return path_.empty() ? key : path_ + "." + key; }

bool ObjectReader::has(const char* key) const { return value_.contains(key); }

const Json* ObjectReader::find(const char* key) {
  seen_.emplace_back(key);
  auto it = value_.find(key);
  return it == value_.end() ? nullptr : &*it;
}

void ObjectReader::read_unsigned(const char* key, std::uint64_t& out) {
  if (const Json* v = find(key)) {
    if (!v->is_number_integer() || (v->is_number_integer() && !v->is_number_unsigned() && v->get<std::int64_t>() < 0)) {
      throw ConfigError(key_path(key) + ": expected a non-negative integer");
    }
    out = v->get<std::uint64_t>();
  }
}

void ObjectReader::read(const char* key, double& out) {
  if (const Json* v = find(key)) {
    if (!v->is_number()) throw ConfigError(key_path(key) + ": expected a number");
    out = v->get<double>();
  }
}

void ObjectReader::read(const char* key, bool& out) {
  if (const Json* v = find(key)) {
    if (!v->is_boolean()) throw ConfigError(key_path(key) + ": expected true or false");
    out = v->get<bool>();
  }
}

void ObjectReader::read(const char* key, std::string& out) {
  if (const Json* v = find(key)) {
    if (!v->is_string()) throw ConfigError(key_path(key) + ": expected a string");
    out = v->get<std::string>();
  }
}

void ObjectReader::read(const char* key, std::vector<std::size_t>& out) {
  if (const Json* v = find(key)) {
    if (!v->is_array()) throw ConfigError(key_path(key) + ": expected an array of non-negative integers");
    std::vector<std::size_t> values;
    for (const auto& item : *v) {
      if (!item.is_number_unsigned()) {
        throw ConfigError(key_path(key) + ": expected an array of non-negative integers");
      }
      values.push_back(item.get<std::size_t>());
    }
    out = std::move(values);
  }
}

void ObjectReader::read(const char* key, std::vector<std::string>& out) {
  if (const Json* v = find(key)) {
    if (!v->is_array()) throw ConfigError(key_path(key) + ": expected an array of strings");
    std::vector<std::string> values;
    for (const auto& item : *v) {
      if (!item.is_string()) throw ConfigError(key_path(key) + ": expected an array of strings");
      values.push_back(item.get<std::string>());
    }
    out = std::move(values);
  }
}

const Json* ObjectReader::child(const char* key) {
  const Json* v = find(key);
  if (v && !v->is_object()) throw ConfigError(key_path(key) + ": expected an object");
  return v;
}

void ObjectReader::finish() const {
  for (auto it = value_.begin(); it != value_.end(); ++it) {
    if (std::find(seen_.begin(), seen_.end(), it.key()) == seen_.end()) {
      throw ConfigError("unknown config key '" + key_path(it.key().c_str()) + "'");
    }
  }
}

namespace {

template <typename Enum, typename Parse>
void read_enum(ObjectReader& r, const char* key, Enum& out, Parse parse) {
  const bool present = r.has(key);
  std::string name;
  r.read(key, name);
  if (!present) return;
  try {
    out = parse(name);
  } catch (const ConfigError& e) {
    throw ConfigError(r.key_path(key) + ": " + e.what());
  }
}

Activation parse_activation(std::string_view name) {
  if (name == "identity") return Activation::kIdentity;
  if (name == "tanh") return Activation::kTanh;
  if (name == "relu") return Activation::kRelu;
  throw ConfigError("unknown activation '" + std::string(name) + "' (expected identity, tanh or relu)");
}

std::string activation_name(Activation a) {
  switch (a) {
    case Activation::kIdentity: return "identity";
    case Activation::kTanh: return "tanh";
    case Activation::kRelu: return "relu";
  }
  return "?";
}

}  // namespace

Json to_json(const TextLimits& l) {
  return Json{{"max_turns", l.max_turns},
              {"max_len_utterance", l.max_len_utterance},
              {"max_len_candidate", l.max_len_candidate},
              {"max_len_provenance", l.max_len_provenance}};
}

Json to_json(const ConvStackConfig& c) {
  return Json{{"in_channels", c.in_channels},   {"filters", c.filters},
              {"kernels", c.kernels},           {"conv_strides", c.conv_strides},
              {"pool_kernels", c.pool_kernels}, {"pool_strides", c.pool_strides}};
}

Json to_json(const ModelConfig& c) {
  return Json{{"variant", variant_name(c.variant)},
              {"vocab_size", c.vocab_size},
              {"embedding_dim", c.embedding_dim},
              {"gru_hidden", c.gru_hidden},
              {"conv", to_json(c.conv)},
              {"attention_heads", c.attention_heads},
              {"attention_blocks", c.attention_blocks},
              {"projection_dim", c.projection_dim},
              {"ff_multiplier", c.ff_multiplier},
              {"limits", to_json(c.limits)},
              {"mlp_hidden", c.mlp_hidden},
              {"mlp_activation", activation_name(c.mlp_activation)},
              {"ranking_input", ranking_input_name(c.ranking_input)},
              {"train_embeddings", c.train_embeddings}};
}

Json to_json(const TrainConfig& c) {
  return Json{{"loss", loss_name(c.loss)},
              {"margin", c.margin},
              {"learning_rate", c.learning_rate},
              {"beta1", c.beta1},
              {"beta2", c.beta2},
              {"epsilon", c.epsilon},
              {"epochs", c.epochs},
              {"batch_size", c.batch_size},
              {"seed", c.seed},
              {"clip_norm", c.clip_norm},
              {"eval_every", c.eval_every},
              {"threads", c.threads}};
}

Json to_json(const SkipGramOptions& o) {
  return Json{{"dim", o.dim},       {"window", o.window},
              {"negatives", o.negatives}, {"epochs", o.epochs},
              {"learning_rate", o.learning_rate}, {"seed", o.seed}};
}

Json to_json(const SyntheticOptions& o) {
  return Json{{"num_lists", o.num_lists},
              {"mode", signal_mode_name(o.mode)},
              {"seed", o.seed},
              {"min_turns", o.min_turns},
              {"max_turns", o.max_turns},
              {"utterance_length", o.utterance_length},
              {"candidate_length", o.candidate_length},
              {"provenance_length", o.provenance_length},
              {"num_keywords", o.num_keywords},
              {"num_fillers", o.num_fillers}};
}

TextLimits text_limits_from_json(const Json& value, const std::string& path, TextLimits l) {
  ObjectReader r(value, path);
  r.read("max_turns", l.max_turns);
  r.read("max_len_utterance", l.max_len_utterance);
  r.read("max_len_candidate", l.max_len_candidate);
  r.read("max_len_provenance", l.max_len_provenance);
  r.finish();
  return l;
}

ConvStackConfig conv_from_json(const Json& value, const std::string& path, ConvStackConfig c) {
  ObjectReader r(value, path);
  r.read("in_channels", c.in_channels);
  r.read("filters", c.filters);
  r.read("kernels", c.kernels);
  r.read("conv_strides", c.conv_strides);
  r.read("pool_kernels", c.pool_kernels);
  r.read("pool_strides", c.pool_strides);
  r.finish();
  return c;
}

ModelConfig model_config_from_json(const Json& value, const std::string& path, ModelConfig c) {
  ObjectReader r(value, path);
  read_enum(r, "variant", c.variant, parse_variant);
  r.read("vocab_size", c.vocab_size);
  r.read("embedding_dim", c.embedding_dim);
  r.read("gru_hidden", c.gru_hidden);
  if (const Json* conv = r.child("conv")) c.conv = conv_from_json(*conv, r.key_path("conv"), c.conv);
  r.read("attention_heads", c.attention_heads);
  r.read("attention_blocks", c.attention_blocks);
  r.read("projection_dim", c.projection_dim);
  r.read("ff_multiplier", c.ff_multiplier);
  if (const Json* limits = r.child("limits")) c.limits = text_limits_from_json(*limits, r.key_path("limits"), c.limits);
  r.read("mlp_hidden", c.mlp_hidden);
  read_enum(r, "mlp_activation", c.mlp_activation, parse_activation);
  read_enum(r, "ranking_input", c.ranking_input, parse_ranking_input);
  r.read("train_embeddings", c.train_embeddings);
  r.finish();
  return c;
}

TrainConfig train_config_from_json(const Json& value, const std::string& path, TrainConfig c) {
  ObjectReader r(value, path);
  read_enum(r, "loss", c.loss, parse_loss);
  r.read("margin", c.margin);
  r.read("learning_rate", c.learning_rate);
  r.read("beta1", c.beta1);
  r.read("beta2", c.beta2);
  r.read("epsilon", c.epsilon);
  r.read("epochs", c.epochs);
  r.read("batch_size", c.batch_size);
  r.read("seed", c.seed);
  r.read("clip_norm", c.clip_norm);
  r.read("eval_every", c.eval_every);
  r.read("threads", c.threads);
  r.finish();
  return c;
}

SkipGramOptions skipgram_from_json(const Json& value, const std::string& path, SkipGramOptions o) {
  ObjectReader r(value, path);
  r.read("dim", o.dim);
  r.read("window", o.window);
  r.read("negatives", o.negatives);
  r.read("epochs", o.epochs);
  r.read("learning_rate", o.learning_rate);
  r.read("seed", o.seed);
  r.finish();
  return o;
}

SyntheticOptions synthetic_from_json(const Json& value, const std::string& path, SyntheticOptions o) {
  ObjectReader r(value, path);
  r.read("num_lists", o.num_lists);
  read_enum(r, "mode", o.mode, parse_signal_mode);
  r.read("seed", o.seed);
  r.read("min_turns", o.min_turns);
  r.read("max_turns", o.max_turns);
  r.read("utterance_length", o.utterance_length);
  r.read("candidate_length", o.candidate_length);
  r.read("provenance_length", o.provenance_length);
  r.read("num_keywords", o.num_keywords);
  r.read("num_fillers", o.num_fillers);
  r.finish();
  return o;
}

}  // namespace fcc
