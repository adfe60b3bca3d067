#include "fcc/model.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>
#include <set>

#include "fcc/config.hpp"
#include "fcc/errors.hpp"

namespace fcc {

Variant parse_variant(std::string_view name) {
  if (name == "DMN_GRU") return Variant::kDmnGru;
  if (name == "DMN_ATTENTION") return Variant::kDmnAttention;
  if (name == "FCC_GRU") return Variant::kFccGru;
  if (name == "FCC_ATTENTION") return Variant::kFccAttention;
  throw ConfigError("unknown variant '" + std::string(name) +
                    "' (expected DMN_GRU, DMN_ATTENTION, FCC_GRU or FCC_ATTENTION)");
}

std::string_view variant_name(Variant v) {
  switch (v) {
    case Variant::kDmnGru: return "DMN_GRU";
    case Variant::kDmnAttention: return "DMN_ATTENTION";
    case Variant::kFccGru: return "FCC_GRU";
    case Variant::kFccAttention: return "FCC_ATTENTION";
  }
  return "?";
}

bool uses_provenance(Variant v) { return v == Variant::kFccGru || v == Variant::kFccAttention; }
bool uses_attention(Variant v) { return v == Variant::kDmnAttention || v == Variant::kFccAttention; }

RankingInput parse_ranking_input(std::string_view name) {
  if (name == "all_turns") return RankingInput::kAllTurns;
  if (name == "last_turn") return RankingInput::kLastTurn;
  throw ConfigError("unknown ranking input '" + std::string(name) + "' (expected all_turns or last_turn)");
}

std::string_view ranking_input_name(RankingInput r) {
  return r == RankingInput::kAllTurns ? "all_turns" : "last_turn";
}

void ModelConfig::validate() const {
  if (vocab_size < 2) throw ConfigError("model.vocab_size must cover the reserved PAD and UNK ids");
  if (embedding_dim == 0 || gru_hidden == 0 || projection_dim == 0) {
    throw ConfigError("model dimensions must be positive");
  }
  limits.validate();
  conv.validate();
  if (conv.in_channels != 2) throw ConfigError("model.conv.in_channels must be 2 (embedding and hidden channels)");
  if (uses_attention(variant)) {
    if (attention_heads == 0 || projection_dim % attention_heads != 0) {
      throw ConfigError("model.projection_dim " + std::to_string(projection_dim) + " is not divisible by " +
                        std::to_string(attention_heads) + " attention heads");
    }
    if (attention_blocks == 0 || ff_multiplier == 0) throw ConfigError("model attention sizes must be positive");
  }
  for (auto h : mlp_hidden) {
    if (h == 0) throw ConfigError("model.mlp_hidden sizes must be positive");
  }
  try {
    candidate_feature_dim();
    if (uses_provenance(variant)) provenance_feature_dim();
  } catch (const DimensionError& e) {
    throw ConfigError(std::string("model text limits too small for the conv stack: ") + e.what());
  }
}

std::size_t ModelConfig::candidate_feature_dim() const {
  return conv.output_dim(limits.max_len_utterance, limits.max_len_candidate);
}

std::size_t ModelConfig::provenance_feature_dim() const {
  return conv.output_dim(limits.max_len_utterance, limits.max_len_provenance);
}

std::size_t ModelConfig::ranking_input_dim() const {
  const std::size_t per_channel = (ranking_input == RankingInput::kAllTurns ? limits.max_turns : 1) * projection_dim;
  return uses_provenance(variant) ? 2 * per_channel : per_channel;
}

// ---------------------------------------------------------------------------
// Parameters

namespace {

template <typename T>
void declare_channel(ParamStore<T>& store, const std::string& prefix, const ModelConfig& cfg,
                     std::size_t feature_dim, Rng& rng) {
  ConvStackParams<T>::declare(store, prefix + ".cnn", cfg.conv, rng);
  store.add_uniform(prefix + ".proj.weight", {feature_dim, cfg.projection_dim}, feature_dim, rng);
  store.add_uniform(prefix + ".proj.bias", {cfg.projection_dim}, feature_dim, rng);
  if (uses_attention(cfg.variant)) {
    AttentionParams<T>::declare(store, prefix + ".encoder", cfg.projection_dim, cfg.attention_heads,
                                cfg.attention_blocks, cfg.ff_multiplier * cfg.projection_dim, rng);
  } else {
    GruParams<T>::declare(store, prefix + ".turn_gru", cfg.projection_dim, cfg.projection_dim, rng);
  }
}

template <typename T>
typename ModelParams<T>::Channel bind_channel(const ParamStore<T>& store, const std::string& prefix,
                                              const ModelConfig& cfg) {
  typename ModelParams<T>::Channel c;
  c.cnn = ConvStackParams<T>::bind(store, prefix + ".cnn", cfg.conv);
  c.proj_weight = store.get(prefix + ".proj.weight");
  c.proj_bias = store.get(prefix + ".proj.bias");
  if (uses_attention(cfg.variant)) {
    c.attention = AttentionParams<T>::bind(store, prefix + ".encoder", cfg.attention_heads, cfg.attention_blocks);
  } else {
    c.turn_gru = GruParams<T>::bind(store, prefix + ".turn_gru");
  }
  return c;
}

template <typename T>
Tensor<T> embedding_param(const EmbeddingTable& table, bool trainable) {
  std::vector<T> values(table.values.size());
  for (std::size_t i = 0; i < values.size(); ++i) values[i] = static_cast<T>(table.values[i]);
  auto t = Tensor<T>::from_vector({table.vocab_size, table.dim}, std::move(values), trainable);
  t.set_sparse_grad(true);
  return t;
}

}  // namespace

template <typename T>
void ModelParams<T>::declare(ParamStore<T>& store, const ModelConfig& cfg, Rng& rng) {
  cfg.validate();
  store.add("embedding", embedding_param<T>(random_embeddings(cfg.vocab_size, cfg.embedding_dim, rng.next()),
                                            cfg.train_embeddings));
  GruParams<T>::declare(store, "bigru.fwd", cfg.embedding_dim, cfg.gru_hidden, rng);
  GruParams<T>::declare(store, "bigru.bwd", cfg.embedding_dim, cfg.gru_hidden, rng);
  declare_channel(store, "candidate", cfg, cfg.candidate_feature_dim(), rng);
  if (uses_provenance(cfg.variant)) declare_channel(store, "provenance", cfg, cfg.provenance_feature_dim(), rng);
  std::vector<std::size_t> sizes{cfg.ranking_input_dim()};
  sizes.insert(sizes.end(), cfg.mlp_hidden.begin(), cfg.mlp_hidden.end());
  sizes.push_back(1);
  MlpParams<T>::declare(store, "mlp", sizes, rng);
}

template <typename T>
ModelParams<T> ModelParams<T>::bind(const ParamStore<T>& store, const ModelConfig& cfg) {
  ModelParams p;
  p.embedding = store.get("embedding");
  p.fwd = GruParams<T>::bind(store, "bigru.fwd");
  p.bwd = GruParams<T>::bind(store, "bigru.bwd");
  p.candidate = bind_channel(store, "candidate", cfg);
  if (uses_provenance(cfg.variant)) p.provenance = bind_channel(store, "provenance", cfg);
  p.mlp = MlpParams<T>::bind(store, "mlp", cfg.mlp_activation);
  return p;
}

template <typename T>
ParamStore<T> init_params(const ModelConfig& cfg, std::uint64_t seed, const EmbeddingTable* embeddings) {
  ParamStore<T> store;
  Rng rng(seed);
  ModelParams<T>::declare(store, cfg, rng);
  if (embeddings) {
    if (embeddings->vocab_size != cfg.vocab_size || embeddings->dim != cfg.embedding_dim) {
      throw ConfigError("embedding table is " + std::to_string(embeddings->vocab_size) + "x" +
                        std::to_string(embeddings->dim) + " but the model expects " + std::to_string(cfg.vocab_size) +
                        "x" + std::to_string(cfg.embedding_dim));
    }
    auto& slot = store.get("embedding");
    slot = embedding_param<T>(*embeddings, cfg.train_embeddings);
  }
  return store;
}

template <typename T>
void check_params(const ParamStore<T>& store, const ModelConfig& cfg) {
  ParamStore<T> reference;
  Rng rng(0);
  ModelParams<T>::declare(reference, cfg, rng);
  std::set<std::string> expected;
  for (const auto& [name, t] : reference.entries()) {
    expected.insert(name);
    if (!store.contains(name)) {
      throw ConfigError("parameter '" + name + "' required by " + std::string(variant_name(cfg.variant)) +
                        " is missing");
    }
    const auto& have = store.get(name);
    if (have.shape() != t.shape()) {
      throw ConfigError("parameter '" + name + "' has shape " + shape_to_string(have.shape()) + ", config expects " +
                        shape_to_string(t.shape()));
    }
  }
  for (const auto& [name, t] : store.entries()) {
    if (!expected.count(name)) {
      throw ConfigError("parameter '" + name + "' is not part of a " + std::string(variant_name(cfg.variant)) +
                        " model");
    }
  }
}

// ---------------------------------------------------------------------------
// Forward pass

template <typename T>
FccModel<T>::FccModel(ModelConfig cfg, const ParamStore<T>& store) : cfg_(std::move(cfg)) {
  cfg_.validate();
  p_ = ModelParams<T>::bind(store, cfg_);
  if (p_.embedding.dim(0) != cfg_.vocab_size || p_.embedding.dim(1) != cfg_.embedding_dim) {
    throw ConfigError("embedding parameter " + shape_to_string(p_.embedding.shape()) + " does not match config");
  }
}

template <typename T>
IdSeq FccModel<T>::real_tokens(const PaddedText& text, std::size_t limit) {
  const std::size_t n = std::min(text.length(), limit);
  return IdSeq(text.ids.begin(), text.ids.begin() + static_cast<std::ptrdiff_t>(n));
}

template <typename T>
std::vector<IdSeq> FccModel<T>::real_turns(const PaddedContext& context) const {
  std::vector<IdSeq> turns;
  for (const auto& turn : context.turns) {
    auto ids = real_tokens(turn, cfg_.limits.max_len_utterance);
    if (!ids.empty()) turns.push_back(std::move(ids));
  }
  if (turns.size() > cfg_.limits.max_turns) {
    turns.erase(turns.begin(), turns.end() - static_cast<std::ptrdiff_t>(cfg_.limits.max_turns));
  }
  return turns;
}

template <typename T>
EncodedText<T> FccModel<T>::encode_text(const IdSeq& ids, std::size_t length) const {
  if (ids.empty()) {
    return {Tensor<T>::zeros({length, cfg_.embedding_dim}), Tensor<T>::zeros({length, 2 * cfg_.gru_hidden})};
  }
  if (ids.size() > length) throw ContractError("encode_text: text longer than its padded length");
  for (auto id : ids) {
    if (id < 0 || static_cast<std::size_t>(id) >= cfg_.vocab_size) {
      throw DataError("token id " + std::to_string(id) + " outside model vocabulary of size " +
                      std::to_string(cfg_.vocab_size));
    }
  }
  auto embedded = embedding_lookup(p_.embedding, std::span<const std::int32_t>(ids));
  auto hidden = bigru_forward(p_.fwd, p_.bwd, embedded, std::vector<bool>(ids.size(), true));
  return {pad_rows(embedded, length), pad_rows(hidden, length)};
}

template <typename T>
std::vector<EncodedText<T>> FccModel<T>::encode_context(const PaddedContext& context) const {
  std::vector<EncodedText<T>> out;
  for (const auto& ids : real_turns(context)) out.push_back(encode_text(ids, cfg_.limits.max_len_utterance));
  if (out.empty()) throw ContractError("context has no non-empty turn");
  return out;
}

template <typename T>
Tensor<T> FccModel<T>::interaction_image(const EncodedText<T>& turn, const EncodedText<T>& text) {
  const std::size_t lu = turn.embedded.dim(0), lx = text.embedded.dim(0);
  auto m_e = matmul(turn.embedded, transpose(text.embedded));
  auto m_h = matmul(turn.hidden, transpose(text.hidden));
  return reshape(concat<T>({m_e, m_h}, 0), {2, lu, lx});
}

template <typename T>
ChannelOutput<T> FccModel<T>::channel_forward(const typename ModelParams<T>::Channel& channel,
                                              const std::vector<EncodedText<T>>& turns, const EncodedText<T>& text,
                                              AttentionTrace<T>* trace) const {
  if (turns.empty()) throw ContractError("channel_forward: no context turns");
  std::vector<Tensor<T>> rows;
  rows.reserve(turns.size());
  for (const auto& turn : turns) {
    auto features = cnn_turn_features(channel.cnn, interaction_image(turn, text));
    rows.push_back(reshape(features, {1, features.numel()}));
  }
  ChannelOutput<T> out;
  out.turn_features = rows.size() == 1 ? rows[0] : concat(rows, 0);
  auto projected = add_row(matmul(out.turn_features, channel.proj_weight), channel.proj_bias);
  const std::size_t n = turns.size();
  Tensor<T> encoded = uses_attention(cfg_.variant)
                          ? self_attention_encode(channel.attention, projected, std::vector<bool>(n, true), trace)
                          : gru_sequence(channel.turn_gru, projected, n, false);
  out.encoded = pad_rows(encoded, cfg_.limits.max_turns);
  return out;
}

template <typename T>
Tensor<T> FccModel<T>::rank(const std::vector<EncodedText<T>>& turns, const EncodedText<T>& cand,
                            const EncodedText<T>* prov, ScoreTrace<T>* trace) const {
  const std::size_t n = turns.size();
  auto flatten = [&](const Tensor<T>& encoded) {
    if (cfg_.ranking_input == RankingInput::kLastTurn) {
      return reshape(slice_rows(encoded, n - 1, n), {cfg_.projection_dim});
    }
    return reshape(encoded, {encoded.numel()});
  };
  auto c = channel_forward(p_.candidate, turns, cand, trace ? &trace->candidate_attention : nullptr);
  Tensor<T> features = flatten(c.encoded);
  if (uses_provenance(cfg_.variant)) {
    auto p = channel_forward(p_.provenance, turns, *prov, trace ? &trace->provenance_attention : nullptr);
    features = concat<T>({features, flatten(p.encoded)}, 0);
    if (trace) trace->provenance = p;
  }
  if (trace) trace->candidate = c;
  return mlp_score(p_.mlp, features);
}

template <typename T>
Tensor<T> FccModel<T>::score(const PaddedContext& context, const PaddedText& candidate, const PaddedText* provenance,
                             ScoreTrace<T>* trace) const {
  const bool fcc = uses_provenance(cfg_.variant);
  if (fcc && provenance == nullptr) {
    throw ContractError(std::string(variant_name(cfg_.variant)) + " needs a provenance for every candidate");
  }
  const auto turns = encode_context(context);
  const auto cand = encode_text(real_tokens(candidate, cfg_.limits.max_len_candidate), cfg_.limits.max_len_candidate);
  if (!fcc) return rank(turns, cand, nullptr, trace);
  const auto prov =
      encode_text(real_tokens(*provenance, cfg_.limits.max_len_provenance), cfg_.limits.max_len_provenance);
  return rank(turns, cand, &prov, trace);
}

template <typename T>
Tensor<T> FccModel<T>::score_list(const PaddedList& list) const {
  const bool fcc = uses_provenance(cfg_.variant);
  if (fcc && list.provenances.size() != list.candidates.size()) {
    throw ContractError(std::string(variant_name(cfg_.variant)) + " needs a provenance for every candidate");
  }
  const auto turns = encode_context(list.context);
  std::vector<Tensor<T>> scores;
  for (std::size_t k = 0; k < list.candidates.size(); ++k) {
    const auto cand =
        encode_text(real_tokens(list.candidates[k], cfg_.limits.max_len_candidate), cfg_.limits.max_len_candidate);
    Tensor<T> s;
    if (fcc) {
      const auto prov = encode_text(real_tokens(list.provenances[k], cfg_.limits.max_len_provenance),
                                    cfg_.limits.max_len_provenance);
      s = rank(turns, cand, &prov, nullptr);
    } else {
      s = rank(turns, cand, nullptr, nullptr);
    }
    scores.push_back(reshape(s, {1}));
  }
  return concat(scores, 0);
}

// ---------------------------------------------------------------------------
// Checkpoints

namespace {

constexpr char kMagic[4] = {'F', 'C', 'C', '1'};

void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

class ByteReader {
 public:
  ByteReader(const std::string& bytes, std::string source) : bytes_(bytes), source_(std::move(source)) {}

  const char* take(std::size_t n, const char* what) {
    if (bytes_.size() - offset_ < n) {
      throw DataError("checkpoint " + source_ + " is truncated at byte " + std::to_string(bytes_.size()) +
                      " while reading " + what + " at byte offset " + std::to_string(offset_));
    }
    const char* p = bytes_.data() + offset_;
    offset_ += n;
    return p;
  }

  std::uint64_t u64(const char* what) {
    const auto* p = reinterpret_cast<const unsigned char*>(take(8, what));
    std::uint64_t v = 0;
    for (int i = 7; i >= 0; --i) v = (v << 8) | p[i];
    return v;
  }

  std::uint32_t u32(const char* what) {
    const auto* p = reinterpret_cast<const unsigned char*>(take(4, what));
    std::uint32_t v = 0;
    for (int i = 3; i >= 0; --i) v = (v << 8) | p[i];
    return v;
  }

  std::size_t offset() const { return offset_; }
  std::size_t remaining() const { return bytes_.size() - offset_; }

 private:
  const std::string& bytes_;
  std::string source_;
  std::size_t offset_ = 0;
};

}  // namespace

template <typename T>
void save_checkpoint(const std::filesystem::path& path, const ModelConfig& cfg, const Vocabulary& vocab,
                     const ParamStore<T>& params) {
  check_params(params, cfg);
  if (vocab.size() != cfg.vocab_size) {
    throw ConfigError("vocabulary has " + std::to_string(vocab.size()) + " tokens but the model config says " +
                      std::to_string(cfg.vocab_size));
  }
  const std::string header = Json{{"config", to_json(cfg)}, {"vocabulary", vocab.tokens()}}.dump();
  std::string out(kMagic, sizeof kMagic);
  put_u64(out, header.size());
  out += header;
  put_u64(out, params.size());
  for (const auto& [name, t] : params.entries()) {
    put_u32(out, static_cast<std::uint32_t>(name.size()));
    out += name;
    put_u32(out, static_cast<std::uint32_t>(t.rank()));
    for (auto d : t.shape()) put_u64(out, d);
    for (T v : t.values()) put_u64(out, std::bit_cast<std::uint64_t>(static_cast<double>(v)));
  }
  std::ofstream file(path, std::ios::binary);
  if (!file) throw DataError("cannot write checkpoint " + path.string());
  file.write(out.data(), static_cast<std::streamsize>(out.size()));
  if (!file) throw DataError("failed writing checkpoint " + path.string());
}

template <typename T>
Checkpoint<T> load_checkpoint(const std::filesystem::path& path) {
  std::ifstream file(path, std::ios::binary);
  if (!file) throw DataError("cannot open checkpoint " + path.string());
  const std::string bytes((std::istreambuf_iterator<char>(file)), std::istreambuf_iterator<char>());
  ByteReader in(bytes, path.string());
  if (std::memcmp(in.take(4, "magic bytes"), kMagic, 4) != 0) {
    throw DataError("checkpoint " + path.string() + " does not start with FCC1 magic bytes");
  }
  const std::uint64_t header_len = in.u64("header length");
  const std::size_t header_at = in.offset();
  const char* header_bytes = in.take(header_len, "header");
  Json header;
  try {
    header = Json::parse(header_bytes, header_bytes + header_len);
  } catch (const Json::exception& e) {
    throw DataError("checkpoint " + path.string() + ": corrupt header at byte offset " + std::to_string(header_at) +
                    ": " + e.what());
  }
  if (!header.is_object() || !header.contains("config") || !header.contains("vocabulary")) {
    throw DataError("checkpoint " + path.string() + ": header lacks config or vocabulary");
  }
  Checkpoint<T> ck;
  ck.config = model_config_from_json(header["config"], "checkpoint.config");
  ck.config.validate();
  ck.vocabulary = Vocabulary::from_tokens(header["vocabulary"].get<std::vector<std::string>>());
  if (ck.vocabulary.size() != ck.config.vocab_size) {
    throw ConfigError("checkpoint " + path.string() + ": vocabulary size does not match config vocab_size");
  }
  const std::uint64_t count = in.u64("tensor count");
  for (std::uint64_t i = 0; i < count; ++i) {
    const std::uint32_t name_len = in.u32("tensor name length");
    const char* name_bytes = in.take(name_len, "tensor name");
    std::string name(name_bytes, name_len);
    const std::uint32_t rank = in.u32("tensor rank");
    if (rank > 8) {
      throw DataError("checkpoint " + path.string() + ": tensor '" + name + "' has implausible rank " +
                      std::to_string(rank) + " at byte offset " + std::to_string(in.offset() - 4));
    }
    Shape shape(rank);
    for (auto& d : shape) d = in.u64("tensor shape");
    const std::size_t numel = shape_numel(shape);
    if (numel > in.remaining() / 8) {
      throw DataError("checkpoint " + path.string() + " is truncated at byte " + std::to_string(bytes.size()) +
                      " while reading values of '" + name + "' at byte offset " + std::to_string(in.offset()));
    }
    std::vector<T> values(numel);
    for (auto& v : values) v = static_cast<T>(std::bit_cast<double>(in.u64("tensor values")));
    const bool frozen = name == "embedding" && !ck.config.train_embeddings;
    auto t = Tensor<T>::from_vector(std::move(shape), std::move(values), !frozen);
    if (name == "embedding") t.set_sparse_grad(true);
    if (ck.params.contains(name)) throw DataError("checkpoint " + path.string() + ": duplicate tensor '" + name + "'");
    ck.params.add(name, std::move(t));
  }
  if (in.remaining() != 0) {
    throw DataError("checkpoint " + path.string() + ": " + std::to_string(in.remaining()) +
                    " trailing bytes after byte offset " + std::to_string(in.offset()));
  }
  check_params(ck.params, ck.config);
  return ck;
}

template <typename T>
Checkpoint<T> load_checkpoint(const std::filesystem::path& path, Variant expected) {
  auto ck = load_checkpoint<T>(path);
  if (ck.config.variant != expected) {
    throw ConfigError("checkpoint " + path.string() + " holds a " + std::string(variant_name(ck.config.variant)) +
                      " model, expected " + std::string(variant_name(expected)));
  }
  return ck;
}

#define FCC_INSTANTIATE_MODEL(T)                                                                              \
  template struct ModelParams<T>;                                                                             \
  template class FccModel<T>;                                                                                 \
  template ParamStore<T> init_params<T>(const ModelConfig&, std::uint64_t, const EmbeddingTable*);            \
  template void check_params<T>(const ParamStore<T>&, const ModelConfig&);                                    \
  template void save_checkpoint<T>(const std::filesystem::path&, const ModelConfig&, const Vocabulary&,       \
                                   const ParamStore<T>&);                                                     \
  template Checkpoint<T> load_checkpoint<T>(const std::filesystem::path&);                                    \
  template Checkpoint<T> load_checkpoint<T>(const std::filesystem::path&, Variant);

FCC_INSTANTIATE_MODEL(float)
FCC_INSTANTIATE_MODEL(double)

}  // namespace fcc
