#include "fcc/layers.hpp"

#include <cmath>

#include "fcc/errors.hpp"

namespace fcc {

// ---------------------------------------------------------------------------
// GRU

template <typename T>
void GruParams<T>::declare(ParamStore<T>& store, const std::string& prefix, std::size_t input_dim,
                           std::size_t hidden_dim, Rng& rng) {
  for (const char* gate : {"z", "r", "h"}) {
    store.add_uniform(prefix + ".w_" + gate, {input_dim, hidden_dim}, input_dim, rng);
    store.add_uniform(prefix + ".u_" + gate, {hidden_dim, hidden_dim}, hidden_dim, rng);
    store.add_uniform(prefix + ".b_" + gate, {hidden_dim}, hidden_dim, rng);
  }
}

template <typename T>
GruParams<T> GruParams<T>::bind(const ParamStore<T>& store, const std::string& prefix) {
  GruParams p;
  p.w_z = store.get(prefix + ".w_z");
  p.w_r = store.get(prefix + ".w_r");
  p.w_h = store.get(prefix + ".w_h");
  p.u_z = store.get(prefix + ".u_z");
  p.u_r = store.get(prefix + ".u_r");
  p.u_h = store.get(prefix + ".u_h");
  p.b_z = store.get(prefix + ".b_z");
  p.b_r = store.get(prefix + ".b_r");
  p.b_h = store.get(prefix + ".b_h");
  p.input_dim = p.w_z.dim(0);
  p.hidden_dim = p.w_z.dim(1);
  return p;
}

namespace {

// xz/xr/xh already hold x * W + b for this step; all operands are [1, H].
template <typename T>
Tensor<T> gru_update(const GruParams<T>& p, const Tensor<T>& xz, const Tensor<T>& xr, const Tensor<T>& xh,
                     const Tensor<T>& h) {
  auto z = sigmoid(add(xz, matmul(h, p.u_z)));
  auto r = sigmoid(add(xr, matmul(h, p.u_r)));
  auto candidate = tanh(add(xh, matmul(mul(r, h), p.u_h)));
  // (1 - z) * h + z * candidate
  return add(h, mul(z, sub(candidate, h)));
}

}  // namespace

template <typename T>
Tensor<T> gru_cell_step(const GruParams<T>& p, const Tensor<T>& x, const Tensor<T>& h_prev) {
  if (x.numel() != p.input_dim || h_prev.numel() != p.hidden_dim) {
    throw DimensionError("gru_cell_step: input " + shape_to_string(x.shape()) + " / state " +
                         shape_to_string(h_prev.shape()) + " for GRU " + std::to_string(p.input_dim) + "->" +
                         std::to_string(p.hidden_dim));
  }
  auto xr = reshape(x, {1, p.input_dim});
  auto h = reshape(h_prev, {1, p.hidden_dim});
  auto next = gru_update(p, add_row(matmul(xr, p.w_z), p.b_z), add_row(matmul(xr, p.w_r), p.b_r),
                         add_row(matmul(xr, p.w_h), p.b_h), h);
  return reshape(next, {p.hidden_dim});
}

template <typename T>
Tensor<T> gru_sequence(const GruParams<T>& p, const Tensor<T>& seq, std::size_t length, bool reversed) {
  if (seq.rank() != 2 || seq.dim(1) != p.input_dim) {
    throw DimensionError("gru_sequence: sequence " + shape_to_string(seq.shape()) + " for GRU input dim " +
                         std::to_string(p.input_dim));
  }
  if (length == 0 || length > seq.dim(0)) {
    throw DimensionError("gru_sequence: length " + std::to_string(length) + " for sequence " +
                         shape_to_string(seq.shape()));
  }
  auto x = length == seq.dim(0) ? seq : slice_rows(seq, 0, length);
  auto xz = add_row(matmul(x, p.w_z), p.b_z);
  auto xr = add_row(matmul(x, p.w_r), p.b_r);
  auto xh = add_row(matmul(x, p.w_h), p.b_h);

  std::vector<Tensor<T>> states(length);
  auto h = Tensor<T>::zeros({1, p.hidden_dim});
  for (std::size_t step = 0; step < length; ++step) {
    const std::size_t i = reversed ? length - 1 - step : step;
    h = gru_update(p, slice_rows(xz, i, i + 1), slice_rows(xr, i, i + 1), slice_rows(xh, i, i + 1), h);
    states[i] = h;
  }
  return length == 1 ? states[0] : concat(states, 0);
}

std::size_t trailing_mask_length(const std::vector<bool>& mask) {
  std::size_t n = 0;
  while (n < mask.size() && mask[n]) ++n;
  for (std::size_t i = n; i < mask.size(); ++i) {
    if (mask[i]) {
      throw ContractError("mask has an interior gap at position " + std::to_string(n) +
                          "; only trailing padding is allowed");
    }
  }
  return n;
}

template <typename T>
Tensor<T> bigru_forward(const GruParams<T>& fwd, const GruParams<T>& bwd, const Tensor<T>& seq,
                        const std::vector<bool>& mask) {
  if (seq.rank() != 2 || mask.size() != seq.dim(0)) {
    throw DimensionError("bigru_forward: sequence " + shape_to_string(seq.shape()) + " with mask of length " +
                         std::to_string(mask.size()));
  }
  if (fwd.hidden_dim != bwd.hidden_dim || fwd.input_dim != bwd.input_dim) {
    throw DimensionError("bigru_forward: forward and backward GRUs disagree on dimensions");
  }
  const std::size_t length = trailing_mask_length(mask);
  const std::size_t rows = seq.dim(0);
  if (length == 0) return Tensor<T>::zeros({rows, 2 * fwd.hidden_dim});
  auto out = concat<T>({gru_sequence(fwd, seq, length, false), gru_sequence(bwd, seq, length, true)}, 1);
  return pad_rows(out, rows);
}

// ---------------------------------------------------------------------------
// CNN stack

void ConvStackConfig::validate() const {
  const std::size_t n = filters.size();
  if (n == 0) throw ConfigError("conv stack needs at least one stage");
  if (kernels.size() != n || conv_strides.size() != n || pool_kernels.size() != n || pool_strides.size() != n) {
    throw ConfigError("conv stack: filters, kernels, conv_strides, pool_kernels and pool_strides must have equal length");
  }
  if (in_channels == 0) throw ConfigError("conv stack: in_channels must be positive");
  for (std::size_t i = 0; i < n; ++i) {
    if (filters[i] == 0 || kernels[i] == 0 || conv_strides[i] == 0 || pool_kernels[i] == 0 || pool_strides[i] == 0) {
      throw ConfigError("conv stack stage " + std::to_string(i) + ": all sizes must be positive");
    }
  }
}

std::size_t ConvStackConfig::output_dim(std::size_t height, std::size_t width) const {
  validate();
  std::size_t h = height, w = width;
  for (std::size_t i = 0; i < filters.size(); ++i) {
    h = (h + conv_strides[i] - 1) / conv_strides[i];
    w = (w + conv_strides[i] - 1) / conv_strides[i];
    if (h < pool_kernels[i] || w < pool_kernels[i]) {
      throw DimensionError("conv stack: input " + std::to_string(height) + "x" + std::to_string(width) +
                           " shrinks to " + std::to_string(h) + "x" + std::to_string(w) + " before pool stage " +
                           std::to_string(i) + " (kernel " + std::to_string(pool_kernels[i]) + ")");
    }
    h = (h - pool_kernels[i]) / pool_strides[i] + 1;
    w = (w - pool_kernels[i]) / pool_strides[i] + 1;
  }
  return filters.back() * h * w;
}

template <typename T>
void ConvStackParams<T>::declare(ParamStore<T>& store, const std::string& prefix, const ConvStackConfig& cfg,
                                 Rng& rng) {
  cfg.validate();
  std::size_t in = cfg.in_channels;
  for (std::size_t i = 0; i < cfg.filters.size(); ++i) {
    const std::size_t k = cfg.kernels[i];
    const std::size_t fan_in = in * k * k;
    const std::string stage = prefix + ".stage" + std::to_string(i);
    store.add_uniform(stage + ".kernel", {cfg.filters[i], in, k, k}, fan_in, rng);
    store.add_uniform(stage + ".bias", {cfg.filters[i]}, fan_in, rng);
    in = cfg.filters[i];
  }
}

template <typename T>
ConvStackParams<T> ConvStackParams<T>::bind(const ParamStore<T>& store, const std::string& prefix,
                                            const ConvStackConfig& cfg) {
  cfg.validate();
  ConvStackParams p;
  for (std::size_t i = 0; i < cfg.filters.size(); ++i) {
    const std::string stage = prefix + ".stage" + std::to_string(i);
    p.stages.push_back(Stage{store.get(stage + ".kernel"), store.get(stage + ".bias"), cfg.conv_strides[i],
                             cfg.pool_kernels[i], cfg.pool_strides[i]});
  }
  return p;
}

template <typename T>
Tensor<T> cnn_turn_features(const ConvStackParams<T>& p, const Tensor<T>& image) {
  if (p.stages.empty()) throw ContractError("cnn_turn_features: empty conv stack");
  if (image.rank() != 3 || image.dim(0) != p.stages[0].kernel.dim(1)) {
    throw DimensionError("cnn_turn_features: input " + shape_to_string(image.shape()) + " for kernels " +
                         shape_to_string(p.stages[0].kernel.shape()));
  }
  auto x = image;
  for (std::size_t i = 0; i < p.stages.size(); ++i) {
    const auto& stage = p.stages[i];
    x = relu(add_channel_bias(conv2d(x, stage.kernel, stage.conv_stride, Padding::kSame), stage.bias));
    if (x.dim(1) < stage.pool_kernel || x.dim(2) < stage.pool_kernel) {
      throw DimensionError("cnn_turn_features: input " + shape_to_string(image.shape()) + " too small; stage " +
                           std::to_string(i) + " produced " + shape_to_string(x.shape()));
    }
    x = max_pool2d(x, stage.pool_kernel, stage.pool_stride);
  }
  return reshape(x, {x.numel()});
}

// ---------------------------------------------------------------------------
// Self-attention

template <typename T>
void AttentionParams<T>::declare(ParamStore<T>& store, const std::string& prefix, std::size_t model_dim,
                                 std::size_t num_heads, std::size_t num_blocks, std::size_t ff_dim, Rng& rng) {
  if (num_heads == 0 || model_dim % num_heads != 0) {
    throw ConfigError("attention: model_dim " + std::to_string(model_dim) + " not divisible by " +
                      std::to_string(num_heads) + " heads");
  }
  const std::size_t head_dim = model_dim / num_heads;
  for (std::size_t b = 0; b < num_blocks; ++b) {
    const std::string block = prefix + ".block" + std::to_string(b);
    store.add_constant(block + ".norm1.scale", {model_dim}, T(1));
    store.add_constant(block + ".norm1.shift", {model_dim}, T(0));
    for (std::size_t h = 0; h < num_heads; ++h) {
      const std::string head = block + ".head" + std::to_string(h);
      store.add_uniform(head + ".query", {model_dim, head_dim}, model_dim, rng);
      store.add_uniform(head + ".key", {model_dim, head_dim}, model_dim, rng);
      store.add_uniform(head + ".value", {model_dim, head_dim}, model_dim, rng);
    }
    store.add_uniform(block + ".out.weight", {model_dim, model_dim}, model_dim, rng);
    store.add_uniform(block + ".out.bias", {model_dim}, model_dim, rng);
    store.add_constant(block + ".norm2.scale", {model_dim}, T(1));
    store.add_constant(block + ".norm2.shift", {model_dim}, T(0));
    store.add_uniform(block + ".ff1.weight", {model_dim, ff_dim}, model_dim, rng);
    store.add_uniform(block + ".ff1.bias", {ff_dim}, model_dim, rng);
    store.add_uniform(block + ".ff2.weight", {ff_dim, model_dim}, ff_dim, rng);
    store.add_uniform(block + ".ff2.bias", {model_dim}, ff_dim, rng);
  }
}

template <typename T>
AttentionParams<T> AttentionParams<T>::bind(const ParamStore<T>& store, const std::string& prefix,
                                            std::size_t num_heads, std::size_t num_blocks) {
  AttentionParams p;
  p.num_heads = num_heads;
  for (std::size_t b = 0; b < num_blocks; ++b) {
    const std::string block = prefix + ".block" + std::to_string(b);
    Block blk;
    blk.norm1_scale = store.get(block + ".norm1.scale");
    blk.norm1_shift = store.get(block + ".norm1.shift");
    for (std::size_t h = 0; h < num_heads; ++h) {
      const std::string head = block + ".head" + std::to_string(h);
      blk.heads.push_back(Head{store.get(head + ".query"), store.get(head + ".key"), store.get(head + ".value")});
    }
    blk.out_weight = store.get(block + ".out.weight");
    blk.out_bias = store.get(block + ".out.bias");
    blk.norm2_scale = store.get(block + ".norm2.scale");
    blk.norm2_shift = store.get(block + ".norm2.shift");
    blk.ff1_weight = store.get(block + ".ff1.weight");
    blk.ff1_bias = store.get(block + ".ff1.bias");
    blk.ff2_weight = store.get(block + ".ff2.weight");
    blk.ff2_bias = store.get(block + ".ff2.bias");
    p.blocks.push_back(std::move(blk));
  }
  if (!p.blocks.empty()) p.model_dim = p.blocks[0].out_weight.dim(0);
  return p;
}

template <typename T>
Tensor<T> sinusoidal_positions(std::size_t length, std::size_t dim) {
  std::vector<T> values(length * dim);
  for (std::size_t pos = 0; pos < length; ++pos) {
    for (std::size_t i = 0; i < dim; ++i) {
      const double rate = std::pow(10000.0, -static_cast<double>(2 * (i / 2)) / static_cast<double>(dim));
      const double angle = static_cast<double>(pos) * rate;
      values[pos * dim + i] = static_cast<T>(i % 2 == 0 ? std::sin(angle) : std::cos(angle));
    }
  }
  return Tensor<T>::from_vector({length, dim}, std::move(values));
}

namespace {

constexpr double kNormEps = 1e-5;

template <typename T>
Tensor<T> affine_norm(const Tensor<T>& x, const Tensor<T>& scale_row, const Tensor<T>& shift_row) {
  return add_row(mul_row(layer_norm_rows(x, static_cast<T>(kNormEps)), scale_row), shift_row);
}

}  // namespace

template <typename T>
Tensor<T> self_attention_encode(const AttentionParams<T>& p, const Tensor<T>& seq, const std::vector<bool>& mask,
                                AttentionTrace<T>* trace) {
  if (seq.rank() != 2 || seq.dim(1) != p.model_dim || mask.size() != seq.dim(0)) {
    throw DimensionError("self_attention_encode: sequence " + shape_to_string(seq.shape()) + " with mask of length " +
                         std::to_string(mask.size()) + " for model dim " + std::to_string(p.model_dim));
  }
  if (std::none_of(mask.begin(), mask.end(), [](bool m) { return m; })) {
    throw ContractError("self_attention_encode: every position is masked");
  }
  const std::size_t length = seq.dim(0), dim = p.model_dim;
  const std::size_t head_dim = dim / p.num_heads;
  const T inv_scale = T(1) / std::sqrt(static_cast<T>(head_dim));

  std::vector<T> keep(length * dim, T(0));
  for (std::size_t t = 0; t < length; ++t)
    if (mask[t]) std::fill_n(keep.begin() + static_cast<std::ptrdiff_t>(t * dim), dim, T(1));
  const auto row_mask = Tensor<T>::from_vector({length, dim}, std::move(keep));

  auto x = mul(add(scale(seq, std::sqrt(static_cast<T>(dim))), sinusoidal_positions<T>(length, dim)), row_mask);
  if (trace) trace->weights.clear();
  for (const auto& block : p.blocks) {
    auto normed = affine_norm(x, block.norm1_scale, block.norm1_shift);
    std::vector<Tensor<T>> head_out;
    std::vector<Tensor<T>> head_weights;
    for (const auto& head : block.heads) {
      auto q = matmul(normed, head.query);
      auto k = matmul(normed, head.key);
      auto v = matmul(normed, head.value);
      auto weights = masked_softmax_rows(scale(matmul(q, transpose(k)), inv_scale), mask, mask);
      head_out.push_back(matmul(weights, v));
      head_weights.push_back(weights);
    }
    if (trace) trace->weights.push_back(std::move(head_weights));
    auto joined = head_out.size() == 1 ? head_out[0] : concat(head_out, 1);
    x = add(x, add_row(matmul(joined, block.out_weight), block.out_bias));
    auto normed2 = affine_norm(x, block.norm2_scale, block.norm2_shift);
    auto hidden = relu(add_row(matmul(normed2, block.ff1_weight), block.ff1_bias));
    x = add(x, add_row(matmul(hidden, block.ff2_weight), block.ff2_bias));
    x = mul(x, row_mask);
  }
  return x;
}

// ---------------------------------------------------------------------------
// MLP

template <typename T>
void MlpParams<T>::declare(ParamStore<T>& store, const std::string& prefix, const std::vector<std::size_t>& sizes,
                           Rng& rng) {
  if (sizes.size() < 2) throw ConfigError("mlp: need at least input and output sizes");
  for (std::size_t i = 0; i + 1 < sizes.size(); ++i) {
    const std::string layer = prefix + ".layer" + std::to_string(i);
    store.add_uniform(layer + ".weight", {sizes[i], sizes[i + 1]}, sizes[i], rng);
    store.add_uniform(layer + ".bias", {sizes[i + 1]}, sizes[i], rng);
  }
}

template <typename T>
MlpParams<T> MlpParams<T>::bind(const ParamStore<T>& store, const std::string& prefix,
                                Activation hidden_activation) {
  MlpParams p;
  for (std::size_t i = 0;; ++i) {
    const std::string layer = prefix + ".layer" + std::to_string(i);
    if (!store.contains(layer + ".weight")) break;
    p.layers.push_back(Layer{store.get(layer + ".weight"), store.get(layer + ".bias"), hidden_activation});
  }
  if (p.layers.empty()) throw ContractError("mlp: no layers under " + prefix);
  p.layers.back().activation = Activation::kIdentity;
  return p;
}

template <typename T>
Tensor<T> mlp_score(const MlpParams<T>& p, const Tensor<T>& x) {
  if (p.layers.empty()) throw ContractError("mlp_score: no layers");
  if (x.numel() != p.layers[0].weight.dim(0)) {
    throw DimensionError("mlp_score: input " + shape_to_string(x.shape()) + " for first layer " +
                         shape_to_string(p.layers[0].weight.shape()));
  }
  auto h = reshape(x, {1, x.numel()});
  for (const auto& layer : p.layers) {
    if (h.dim(1) != layer.weight.dim(0)) {
      throw DimensionError("mlp_score: activations " + shape_to_string(h.shape()) + " for layer " +
                           shape_to_string(layer.weight.shape()));
    }
    h = add_row(matmul(h, layer.weight), layer.bias);
    switch (layer.activation) {
      case Activation::kTanh: h = tanh(h); break;
      case Activation::kRelu: h = relu(h); break;
      case Activation::kIdentity: break;
    }
  }
  if (h.numel() != 1) throw DimensionError("mlp_score: final layer must have one output, got " +
                                           shape_to_string(h.shape()));
  return reshape(h, Shape{});
}

#define FCC_INSTANTIATE_LAYERS(T)                                                                          \
  template struct GruParams<T>;                                                                            \
  template struct ConvStackParams<T>;                                                                      \
  template struct AttentionParams<T>;                                                                      \
  template struct MlpParams<T>;                                                                            \
  template Tensor<T> gru_cell_step(const GruParams<T>&, const Tensor<T>&, const Tensor<T>&);               \
  template Tensor<T> gru_sequence(const GruParams<T>&, const Tensor<T>&, std::size_t, bool);               \
  template Tensor<T> bigru_forward(const GruParams<T>&, const GruParams<T>&, const Tensor<T>&,             \
                                   const std::vector<bool>&);                                              \
  template Tensor<T> cnn_turn_features(const ConvStackParams<T>&, const Tensor<T>&);                       \
  template Tensor<T> sinusoidal_positions<T>(std::size_t, std::size_t);                                    \
  template Tensor<T> self_attention_encode(const AttentionParams<T>&, const Tensor<T>&,                    \
                                           const std::vector<bool>&, AttentionTrace<T>*);                  \
  template Tensor<T> mlp_score(const MlpParams<T>&, const Tensor<T>&);

FCC_INSTANTIATE_LAYERS(float)
FCC_INSTANTIATE_LAYERS(double)

}  // namespace fcc
