#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace fcc {

using Shape = std::vector<std::size_t>;

std::string shape_to_string(const Shape& shape);
std::size_t shape_numel(const Shape& shape);

// Row-wise gradient accumulator used by embedding tables: only rows touched
// by a lookup are materialized.
template <typename T>
using SparseRows = std::map<std::size_t, std::vector<T>>;

namespace detail {

template <typename T>
struct Node {
  Shape shape;
  std::shared_ptr<std::vector<T>> data;
  std::vector<T> grad;  // empty until first accumulation
  SparseRows<T> sparse_grad;
  bool requires_grad = false;
  bool sparse = false;
  std::uint64_t id = 0;
  std::string_view op = "leaf";
  std::vector<std::shared_ptr<Node>> inputs;
  std::function<void(Node&)> backward;

  std::vector<T>& grad_buffer() {
    if (grad.empty()) grad.assign(data->size(), T(0));
    return grad;
  }
};

std::uint64_t next_node_id();

}  // namespace detail

// Disables tape recording on the current thread while alive.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

  static bool grad_enabled();

 private:
  bool previous_;
};

// Dense row-major tensor with define-by-run reverse-mode differentiation.
// Copies are shallow handles onto the same node.
template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, T value, bool requires_grad = false);
  static Tensor from_vector(Shape shape, std::vector<T> values, bool requires_grad = false);
  static Tensor scalar(T value, bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const;
  std::size_t rank() const { return shape().size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t numel() const;

  std::span<const T> values() const;
  // Writable view; only legal on leaves (parameter updates, finite differences).
  std::span<T> mutable_values();
  T item() const;
  T at(std::initializer_list<std::size_t> index) const;

  bool requires_grad() const;
  bool has_grad() const;
  // Dense gradient; zeros when nothing has been accumulated yet.
  std::vector<T> grad() const;
  const SparseRows<T>& sparse_grad() const;
  void zero_grad();

  // Embedding tables accumulate lookups row-sparsely.
  void set_sparse_grad(bool sparse);
  bool sparse_grad_enabled() const;

  // New leaf sharing this tensor's storage with an independent gradient.
  Tensor shared_leaf() const;
  // Constant copy cut from the tape.
  Tensor detach() const;

  std::string_view op_name() const;
  std::uint64_t node_id() const;

  // Populates gradients of every requires_grad leaf reachable from this
  // scalar. Leaf gradients accumulate across calls.
  void backward() const;

  // Internal: op implementations build nodes through these.
  explicit Tensor(std::shared_ptr<detail::Node<T>> node) : node_(std::move(node)) {}
  const std::shared_ptr<detail::Node<T>>& node() const { return node_; }

 private:
  std::shared_ptr<detail::Node<T>> node_;
};

enum class Padding { kSame, kValid };

// ---- elementwise ----
template <typename T> Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> scale(const Tensor<T>& a, T factor);
template <typename T> Tensor<T> add_scalar(const Tensor<T>& a, T offset);
template <typename T> Tensor<T> tanh(const Tensor<T>& a);
template <typename T> Tensor<T> sigmoid(const Tensor<T>& a);
template <typename T> Tensor<T> relu(const Tensor<T>& a);
// log(1 + exp(x)), overflow-safe.
template <typename T> Tensor<T> softplus(const Tensor<T>& a);

// ---- broadcasting over the last axis ----
// a: [..., n], row: [n]
template <typename T> Tensor<T> add_row(const Tensor<T>& a, const Tensor<T>& row);
template <typename T> Tensor<T> mul_row(const Tensor<T>& a, const Tensor<T>& row);
// x: [C, H, W], bias: [C]
template <typename T> Tensor<T> add_channel_bias(const Tensor<T>& x, const Tensor<T>& bias);

// ---- linear algebra / structure ----
template <typename T> Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> transpose(const Tensor<T>& a);
template <typename T> Tensor<T> reshape(const Tensor<T>& a, Shape shape);
template <typename T> Tensor<T> concat(const std::vector<Tensor<T>>& parts, std::size_t axis);
// Rows [begin, end) of the leading axis.
template <typename T> Tensor<T> slice_rows(const Tensor<T>& a, std::size_t begin, std::size_t end);
// Appends zero rows along the leading axis until it has `rows` entries.
template <typename T> Tensor<T> pad_rows(const Tensor<T>& a, std::size_t rows);

// ---- reductions ----
template <typename T> Tensor<T> sum(const Tensor<T>& a);
template <typename T> Tensor<T> mean(const Tensor<T>& a);

// ---- normalization ----
template <typename T> Tensor<T> softmax(const Tensor<T>& a, std::size_t axis);
// Row softmax of a square score matrix restricted to unmasked keys; masked
// query rows come out as zeros.
template <typename T>
Tensor<T> masked_softmax_rows(const Tensor<T>& scores, const std::vector<bool>& key_mask,
                              const std::vector<bool>& query_mask);
// Per-row standardization (x - mean) / sqrt(var + eps), no affine part.
template <typename T> Tensor<T> layer_norm_rows(const Tensor<T>& a, T eps);

// ---- lookup / convolution ----
template <typename T>
Tensor<T> embedding_lookup(const Tensor<T>& table, std::span<const std::int32_t> ids);
// x: [C_in, H, W], kernels: [C_out, C_in, kh, kw]; cross-correlation.
template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& kernels, std::size_t stride, Padding padding);
template <typename T>
Tensor<T> max_pool2d(const Tensor<T>& x, std::size_t kernel, std::size_t stride);

}  // namespace fcc
