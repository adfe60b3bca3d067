#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "fcc/params.hpp"
#include "fcc/tensor.hpp"

namespace fcc {

// ---------------------------------------------------------------------------
// GRU

// Row-vector convention: gate pre-activations are x * W + h * U + b.
template <typename T>
struct GruParams {
  std::size_t input_dim = 0;
  std::size_t hidden_dim = 0;
  Tensor<T> w_z, w_r, w_h;  // [input_dim, hidden_dim]
  Tensor<T> u_z, u_r, u_h;  // [hidden_dim, hidden_dim]
  Tensor<T> b_z, b_r, b_h;  // [hidden_dim]

  static void declare(ParamStore<T>& store, const std::string& prefix, std::size_t input_dim,
                      std::size_t hidden_dim, Rng& rng);
  static GruParams bind(const ParamStore<T>& store, const std::string& prefix);
};

// One GRU update; x is [input_dim], h_prev is [hidden_dim].
template <typename T>
Tensor<T> gru_cell_step(const GruParams<T>& p, const Tensor<T>& x, const Tensor<T>& h_prev);

// Runs `p` over the first `length` rows of seq ([L, input_dim]) and returns
// the [length, hidden_dim] state sequence. Reversed runs right to left but
// keeps the output rows in input order.
template <typename T>
Tensor<T> gru_sequence(const GruParams<T>& p, const Tensor<T>& seq, std::size_t length, bool reversed);

// Bidirectional GRU over a trailing-padded sequence. Output is
// [L, 2 * hidden_dim]; padded rows are zero.
template <typename T>
Tensor<T> bigru_forward(const GruParams<T>& fwd, const GruParams<T>& bwd, const Tensor<T>& seq,
                        const std::vector<bool>& mask);

// Number of leading true entries; throws ContractError when a true follows a false.
std::size_t trailing_mask_length(const std::vector<bool>& mask);

// ---------------------------------------------------------------------------
// CNN feature stack

struct ConvStackConfig {
  std::size_t in_channels = 2;
  std::vector<std::size_t> filters{16, 16};
  std::vector<std::size_t> kernels{3, 3};
  std::vector<std::size_t> conv_strides{1, 1};
  std::vector<std::size_t> pool_kernels{2, 2};
  std::vector<std::size_t> pool_strides{2, 2};

  void validate() const;
  // Flattened feature length for an [in_channels, height, width] input.
  std::size_t output_dim(std::size_t height, std::size_t width) const;
};

template <typename T>
struct ConvStackParams {
  struct Stage {
    Tensor<T> kernel;  // [out, in, k, k]
    Tensor<T> bias;    // [out]
    std::size_t conv_stride = 1;
    std::size_t pool_kernel = 2;
    std::size_t pool_stride = 2;
  };
  std::vector<Stage> stages;

  static void declare(ParamStore<T>& store, const std::string& prefix, const ConvStackConfig& cfg, Rng& rng);
  static ConvStackParams bind(const ParamStore<T>& store, const std::string& prefix, const ConvStackConfig& cfg);
};

// conv('same') -> relu -> max-pool per stage, then flatten.
template <typename T>
Tensor<T> cnn_turn_features(const ConvStackParams<T>& p, const Tensor<T>& image);

// ---------------------------------------------------------------------------
// Self-attention encoder

template <typename T>
struct AttentionParams {
  struct Head {
    Tensor<T> query, key, value;  // [model_dim, head_dim]
  };
  struct Block {
    Tensor<T> norm1_scale, norm1_shift;  // [model_dim]
    std::vector<Head> heads;
    Tensor<T> out_weight, out_bias;  // [model_dim, model_dim], [model_dim]
    Tensor<T> norm2_scale, norm2_shift;
    Tensor<T> ff1_weight, ff1_bias;  // [model_dim, ff_dim]
    Tensor<T> ff2_weight, ff2_bias;  // [ff_dim, model_dim]
  };
  std::size_t model_dim = 0;
  std::size_t num_heads = 2;
  std::vector<Block> blocks;

  static void declare(ParamStore<T>& store, const std::string& prefix, std::size_t model_dim,
                      std::size_t num_heads, std::size_t num_blocks, std::size_t ff_dim, Rng& rng);
  static AttentionParams bind(const ParamStore<T>& store, const std::string& prefix, std::size_t num_heads,
                              std::size_t num_blocks);
};

// Attention weights recorded per block, per head ([T, T] each).
template <typename T>
struct AttentionTrace {
  std::vector<std::vector<Tensor<T>>> weights;
};

template <typename T>
Tensor<T> sinusoidal_positions(std::size_t length, std::size_t dim);

// Inputs are scaled by sqrt(model_dim) before the turn-position sinusoids are added.
template <typename T>
Tensor<T> self_attention_encode(const AttentionParams<T>& p, const Tensor<T>& seq, const std::vector<bool>& mask,
                                AttentionTrace<T>* trace = nullptr);

// ---------------------------------------------------------------------------
// Ranking MLP

enum class Activation { kIdentity, kTanh, kRelu };

template <typename T>
struct MlpParams {
  struct Layer {
    Tensor<T> weight;  // [in, out]
    Tensor<T> bias;    // [out]
    Activation activation = Activation::kIdentity;
  };
  std::vector<Layer> layers;

  // sizes = {in, hidden..., 1}; hidden layers use `hidden_activation`, the last is linear.
  static void declare(ParamStore<T>& store, const std::string& prefix, const std::vector<std::size_t>& sizes,
                      Rng& rng);
  static MlpParams bind(const ParamStore<T>& store, const std::string& prefix, Activation hidden_activation);
};

template <typename T>
Tensor<T> mlp_score(const MlpParams<T>& p, const Tensor<T>& x);

}  // namespace fcc
