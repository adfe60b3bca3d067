#pragma once

#include <json.hpp>

#include <concepts>
#include <cstdint>
#include <string>
#include <vector>

#include "fcc/data.hpp"
#include "fcc/embeddings.hpp"
#include "fcc/model.hpp"
#include "fcc/training.hpp"

namespace fcc {

using Json = nlohmann::ordered_json;

// Reads an object's keys into typed fields, reporting errors by key path
// ("train.epochs"), and rejects keys that were never read.
class ObjectReader {
 public:
  ObjectReader(const Json& value, std::string path);

  template <std::unsigned_integral U>
  void read(const char* key, U& out) {
    std::uint64_t value = out;
    read_unsigned(key, value);
    out = static_cast<U>(value);
  }
  void read(const char* key, double& out);
  void read(const char* key, bool& out);
  void read(const char* key, std::string& out);
  void read(const char* key, std::vector<std::size_t>& out);
  void read(const char* key, std::vector<std::string>& out);
  // Nested object, or null when absent.
  const Json* child(const char* key);
  std::string key_path(const char* key) const;
  bool has(const char* key) const;

  void finish() const;

 private:
  const Json* find(const char* key);
  void read_unsigned(const char* key, std::uint64_t& out);

  const Json& value_;
  std::string path_;
  std::vector<std::string> seen_;
};

Json to_json(const TextLimits& limits);
Json to_json(const ConvStackConfig& conv);
Json to_json(const ModelConfig& cfg);
Json to_json(const TrainConfig& cfg);
Json to_json(const SkipGramOptions& opt);
Json to_json(const SyntheticOptions& opt);

// Each reader starts from `base` and overrides the keys present in `value`.
TextLimits text_limits_from_json(const Json& value, const std::string& path, TextLimits base = {});
ConvStackConfig conv_from_json(const Json& value, const std::string& path, ConvStackConfig base = {});
ModelConfig model_config_from_json(const Json& value, const std::string& path, ModelConfig base = {});
TrainConfig train_config_from_json(const Json& value, const std::string& path, TrainConfig base = {});
SkipGramOptions skipgram_from_json(const Json& value, const std::string& path, SkipGramOptions base = {});
SyntheticOptions synthetic_from_json(const Json& value, const std::string& path, SyntheticOptions base = {});

}  // namespace fcc
