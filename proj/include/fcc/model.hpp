#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "fcc/data.hpp"
#include "fcc/embeddings.hpp"
#include "fcc/layers.hpp"
#include "fcc/params.hpp"
#include "fcc/tensor.hpp"

namespace fcc {

enum class Variant { kDmnGru, kDmnAttention, kFccGru, kFccAttention };

Variant parse_variant(std::string_view name);
std::string_view variant_name(Variant v);
bool uses_provenance(Variant v);
bool uses_attention(Variant v);

// What the ranking layer sees of each channel's encoded turns.
enum class RankingInput { kAllTurns, kLastTurn };

RankingInput parse_ranking_input(std::string_view name);
std::string_view ranking_input_name(RankingInput r);

struct ModelConfig {
  Variant variant = Variant::kFccAttention;
  std::size_t vocab_size = 0;
  std::size_t embedding_dim = 200;
  std::size_t gru_hidden = 100;  // per direction
  ConvStackConfig conv;
  std::size_t attention_heads = 2;
  std::size_t attention_blocks = 2;
  std::size_t projection_dim = 256;
  std::size_t ff_multiplier = 4;
  TextLimits limits;
  std::vector<std::size_t> mlp_hidden{256, 64};
  Activation mlp_activation = Activation::kTanh;
  RankingInput ranking_input = RankingInput::kAllTurns;
  bool train_embeddings = true;

  void validate() const;
  std::size_t candidate_feature_dim() const;
  std::size_t provenance_feature_dim() const;
  std::size_t ranking_input_dim() const;
};

// Parameters bound to named entries of a ParamStore.
//   embedding                      [vocab, emb]   (row-sparse gradient)
//   bigru.fwd.* / bigru.bwd.*      shared by every text
//   candidate.cnn.*, candidate.proj.{weight,bias}, candidate.{encoder|turn_gru}.*
//   provenance.*                   same layout, FCC variants only
//   mlp.*
template <typename T>
struct ModelParams {
  struct Channel {
    ConvStackParams<T> cnn;
    Tensor<T> proj_weight;  // [feature_dim, projection_dim]
    Tensor<T> proj_bias;
    AttentionParams<T> attention;  // attention variants
    GruParams<T> turn_gru;         // GRU variants
  };
  Tensor<T> embedding;
  GruParams<T> fwd, bwd;
  Channel candidate;
  Channel provenance;
  MlpParams<T> mlp;

  static void declare(ParamStore<T>& store, const ModelConfig& cfg, Rng& rng);
  static ModelParams bind(const ParamStore<T>& store, const ModelConfig& cfg);
};

// Fresh parameter store for `cfg`; `embeddings`, when given, replaces the
// random embedding init.
template <typename T>
ParamStore<T> init_params(const ModelConfig& cfg, std::uint64_t seed, const EmbeddingTable* embeddings = nullptr);

// Throws ConfigError unless `store` has exactly the names and shapes `cfg` declares.
template <typename T>
void check_params(const ParamStore<T>& store, const ModelConfig& cfg);

// Per-text encodings: token embeddings and BiGRU states, both padded with
// zero rows to the configured length.
template <typename T>
struct EncodedText {
  Tensor<T> embedded;  // [L, emb]
  Tensor<T> hidden;    // [L, 2*gru_hidden]
};

template <typename T>
struct ChannelOutput {
  Tensor<T> turn_features;  // C: [turns, feature_dim]
  Tensor<T> encoded;        // R: [max_turns, projection_dim], padded rows zero
};

// Optional intermediate values for inspection.
template <typename T>
struct ScoreTrace {
  ChannelOutput<T> candidate;
  ChannelOutput<T> provenance;
  AttentionTrace<T> candidate_attention;
  AttentionTrace<T> provenance_attention;
};

template <typename T>
class FccModel {
 public:
  FccModel(ModelConfig cfg, const ParamStore<T>& store);

  const ModelConfig& config() const { return cfg_; }
  const ModelParams<T>& params() const { return p_; }

  // Real (unmasked) token ids cut to `limit`.
  static IdSeq real_tokens(const PaddedText& text, std::size_t limit);
  // Non-empty turns, latest max_turns of them.
  std::vector<IdSeq> real_turns(const PaddedContext& context) const;

  EncodedText<T> encode_text(const IdSeq& ids, std::size_t length) const;
  std::vector<EncodedText<T>> encode_context(const PaddedContext& context) const;

  // M_e = E_u E_x^T and M_h = H_u H_x^T stacked as [2, L_u, L_x].
  static Tensor<T> interaction_image(const EncodedText<T>& turn, const EncodedText<T>& text);

  ChannelOutput<T> channel_forward(const typename ModelParams<T>::Channel& channel,
                                   const std::vector<EncodedText<T>>& turns, const EncodedText<T>& text,
                                   AttentionTrace<T>* trace = nullptr) const;

  // One score; `provenance` may be null only for DMN variants.
  Tensor<T> score(const PaddedContext& context, const PaddedText& candidate, const PaddedText* provenance,
                  ScoreTrace<T>* trace = nullptr) const;

  // Scores of all candidates of a list as a [candidates] tensor; the context
  // is encoded once.
  Tensor<T> score_list(const PaddedList& list) const;

 private:
  Tensor<T> rank(const std::vector<EncodedText<T>>& turns, const EncodedText<T>& cand,
                 const EncodedText<T>* prov, ScoreTrace<T>* trace) const;

  ModelConfig cfg_;
  ModelParams<T> p_;
};

// ---------------------------------------------------------------------------
// Checkpoints
//
// "FCC1" | u64 header length | header JSON {config, vocabulary} |
// u64 tensor count | per tensor: u32 name length, name, u32 rank, u64 dims, f64 values.
// All integers and reals little-endian.

template <typename T>
struct Checkpoint {
  ModelConfig config;
  Vocabulary vocabulary;
  ParamStore<T> params;
};

template <typename T>
void save_checkpoint(const std::filesystem::path& path, const ModelConfig& cfg, const Vocabulary& vocab,
                     const ParamStore<T>& params);

// Reads any checkpoint; values are converted to T.
template <typename T>
Checkpoint<T> load_checkpoint(const std::filesystem::path& path);

// As load_checkpoint, and rejects a checkpoint whose variant differs.
template <typename T>
Checkpoint<T> load_checkpoint(const std::filesystem::path& path, Variant expected);

}  // namespace fcc
