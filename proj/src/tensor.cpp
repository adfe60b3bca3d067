#include "fcc/tensor.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>
#include <unordered_set>

#include "fcc/errors.hpp"

namespace fcc {

std::string shape_to_string(const Shape& shape) {
  std::ostringstream out;
  out << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out << 'x';
    out << shape[i];
  }
  out << ']';
  return out.str();
}

std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

namespace detail {

std::uint64_t next_node_id() {
  static std::atomic<std::uint64_t> counter{1};
  return counter.fetch_add(1, std::memory_order_relaxed);
}

}  // namespace detail

namespace {

thread_local bool g_grad_enabled = true;

template <typename T>
using NodePtr = std::shared_ptr<detail::Node<T>>;

template <typename T>
NodePtr<T> make_leaf(Shape shape, std::vector<T> values, bool requires_grad) {
  if (shape_numel(shape) != values.size()) {
    throw DimensionError("tensor of shape " + shape_to_string(shape) + " needs " +
                         std::to_string(shape_numel(shape)) + " values, got " +
                         std::to_string(values.size()));
  }
  for (std::size_t extent : shape) {
    if (extent == 0) throw DimensionError("zero extent in shape " + shape_to_string(shape));
  }
  auto node = std::make_shared<detail::Node<T>>();
  node->shape = std::move(shape);
  node->data = std::make_shared<std::vector<T>>(std::move(values));
  node->requires_grad = requires_grad;
  node->id = detail::next_node_id();
  return node;
}

// Builds an op output; the backward closure is kept only when some input
// participates in differentiation.
template <typename T>
Tensor<T> make_result(Shape shape, std::vector<T> values, std::string_view op,
                      std::vector<NodePtr<T>> inputs, std::function<void(detail::Node<T>&)> backward) {
  auto node = make_leaf<T>(std::move(shape), std::move(values), false);
  node->op = op;
  const bool needs_grad =
      g_grad_enabled &&
      std::any_of(inputs.begin(), inputs.end(), [](const NodePtr<T>& in) { return in->requires_grad; });
  if (needs_grad) {
    node->requires_grad = true;
    node->inputs = std::move(inputs);
    node->backward = std::move(backward);
  }
  return Tensor<T>(std::move(node));
}

template <typename T>
const detail::Node<T>& checked(const Tensor<T>& t, std::string_view op) {
  if (!t.defined()) throw ContractError(std::string(op) + ": undefined tensor operand");
  return *t.node();
}

template <typename T>
void require_same_shape(const Tensor<T>& a, const Tensor<T>& b, std::string_view op) {
  if (checked(a, op).shape != checked(b, op).shape) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_to_string(a.shape()) + " vs " +
                         shape_to_string(b.shape()));
  }
}

template <typename T>
void require_rank(const Tensor<T>& a, std::size_t rank, std::string_view op) {
  if (checked(a, op).shape.size() != rank) {
    throw DimensionError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got shape " +
                         shape_to_string(a.shape()));
  }
}

// Applies f elementwise; df(x, y) is the local derivative given input and output.
template <typename T, typename F, typename DF>
Tensor<T> unary(const Tensor<T>& a, std::string_view op, F f, DF df) {
  const auto& in = checked(a, op);
  std::vector<T> out(in.data->size());
  std::transform(in.data->begin(), in.data->end(), out.begin(), f);
  return make_result<T>(in.shape, std::move(out), op, {a.node()}, [df](detail::Node<T>& self) {
    auto& src = *self.inputs[0];
    auto& g = src.grad_buffer();
    const auto& x = *src.data;
    const auto& y = *self.data;
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * df(x[i], y[i]);
  });
}

template <typename T>
void accumulate(detail::Node<T>& target, const std::vector<T>& delta) {
  if (!target.requires_grad) return;
  auto& g = target.grad_buffer();
  for (std::size_t i = 0; i < g.size(); ++i) g[i] += delta[i];
}

}  // namespace

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }
bool NoGradGuard::grad_enabled() { return g_grad_enabled; }

// ---------------------------------------------------------------------------
// Tensor

template <typename T>
Tensor<T> Tensor<T>::zeros(Shape shape, bool requires_grad) {
  const std::size_t n = shape_numel(shape);
  return Tensor(make_leaf<T>(std::move(shape), std::vector<T>(n, T(0)), requires_grad));
}

template <typename T>
Tensor<T> Tensor<T>::full(Shape shape, T value, bool requires_grad) {
  const std::size_t n = shape_numel(shape);
  return Tensor(make_leaf<T>(std::move(shape), std::vector<T>(n, value), requires_grad));
}

template <typename T>
Tensor<T> Tensor<T>::from_vector(Shape shape, std::vector<T> values, bool requires_grad) {
  return Tensor(make_leaf<T>(std::move(shape), std::move(values), requires_grad));
}

template <typename T>
Tensor<T> Tensor<T>::scalar(T value, bool requires_grad) {
  return Tensor(make_leaf<T>(Shape{}, std::vector<T>{value}, requires_grad));
}

template <typename T>
const Shape& Tensor<T>::shape() const {
  return checked(*this, "shape").shape;
}

template <typename T>
std::size_t Tensor<T>::dim(std::size_t axis) const {
  const auto& s = shape();
  if (axis >= s.size()) {
    throw DimensionError("axis " + std::to_string(axis) + " out of range for shape " + shape_to_string(s));
  }
  return s[axis];
}

template <typename T>
std::size_t Tensor<T>::numel() const {
  return checked(*this, "numel").data->size();
}

template <typename T>
std::span<const T> Tensor<T>::values() const {
  return *checked(*this, "values").data;
}

template <typename T>
std::span<T> Tensor<T>::mutable_values() {
  if (checked(*this, "mutable_values").backward) {
    throw ContractError("mutable_values: only leaf tensors may be written in place");
  }
  return *node_->data;
}

template <typename T>
T Tensor<T>::item() const {
  if (numel() != 1) throw DimensionError("item() on tensor of shape " + shape_to_string(shape()));
  return (*node_->data)[0];
}

template <typename T>
T Tensor<T>::at(std::initializer_list<std::size_t> index) const {
  const auto& s = shape();
  if (index.size() != s.size()) {
    throw DimensionError("index rank " + std::to_string(index.size()) + " for shape " + shape_to_string(s));
  }
  std::size_t flat = 0;
  std::size_t axis = 0;
  for (std::size_t i : index) {
    if (i >= s[axis]) throw DimensionError("index out of range for shape " + shape_to_string(s));
    flat = flat * s[axis] + i;
    ++axis;
  }
  return (*node_->data)[flat];
}

template <typename T>
bool Tensor<T>::requires_grad() const {
  return checked(*this, "requires_grad").requires_grad;
}

template <typename T>
bool Tensor<T>::has_grad() const {
  const auto& n = checked(*this, "has_grad");
  return !n.grad.empty() || !n.sparse_grad.empty();
}

template <typename T>
std::vector<T> Tensor<T>::grad() const {
  const auto& n = checked(*this, "grad");
  if (n.sparse) {
    std::vector<T> dense(n.data->size(), T(0));
    const std::size_t width = n.shape.back();
    for (const auto& [row, values] : n.sparse_grad) {
      std::copy(values.begin(), values.end(), dense.begin() + static_cast<std::ptrdiff_t>(row * width));
    }
    return dense;
  }
  if (n.grad.empty()) return std::vector<T>(n.data->size(), T(0));
  return n.grad;
}

template <typename T>
const SparseRows<T>& Tensor<T>::sparse_grad() const {
  return checked(*this, "sparse_grad").sparse_grad;
}

template <typename T>
void Tensor<T>::zero_grad() {
  auto& n = *node_;
  n.grad.clear();
  n.sparse_grad.clear();
}

template <typename T>
void Tensor<T>::set_sparse_grad(bool sparse) {
  if (checked(*this, "set_sparse_grad").shape.size() != 2) {
    throw DimensionError("sparse gradients need a rank-2 table, got " + shape_to_string(shape()));
  }
  node_->sparse = sparse;
}

template <typename T>
bool Tensor<T>::sparse_grad_enabled() const {
  return checked(*this, "sparse_grad_enabled").sparse;
}

template <typename T>
Tensor<T> Tensor<T>::shared_leaf() const {
  const auto& src = checked(*this, "shared_leaf");
  auto node = std::make_shared<detail::Node<T>>();
  node->shape = src.shape;
  node->data = src.data;
  node->requires_grad = src.requires_grad;
  node->sparse = src.sparse;
  node->id = detail::next_node_id();
  return Tensor(std::move(node));
}

template <typename T>
Tensor<T> Tensor<T>::detach() const {
  const auto& src = checked(*this, "detach");
  return from_vector(src.shape, *src.data, false);
}

template <typename T>
std::string_view Tensor<T>::op_name() const {
  return checked(*this, "op_name").op;
}

template <typename T>
std::uint64_t Tensor<T>::node_id() const {
  return checked(*this, "node_id").id;
}

template <typename T>
void Tensor<T>::backward() const {
  const auto& root = checked(*this, "backward");
  if (root.data->size() != 1) {
    throw ContractError("backward() needs a scalar loss, got shape " + shape_to_string(root.shape));
  }
  if (!root.requires_grad) {
    throw ContractError("backward() on a tensor that does not depend on any requires_grad leaf");
  }

  std::vector<detail::Node<T>*> order;
  std::unordered_set<const detail::Node<T>*> seen;
  std::vector<detail::Node<T>*> stack{node_.get()};
  seen.insert(node_.get());
  while (!stack.empty()) {
    auto* n = stack.back();
    stack.pop_back();
    order.push_back(n);
    for (const auto& in : n->inputs) {
      if (in->requires_grad && seen.insert(in.get()).second) stack.push_back(in.get());
    }
  }
  // Inputs are always created before their consumers, so descending ids is a
  // reverse topological order.
  std::sort(order.begin(), order.end(), [](const auto* a, const auto* b) { return a->id > b->id; });

  for (auto* n : order) {
    if (n->backward) n->grad.assign(n->data->size(), T(0));
  }
  node_->grad_buffer()[0] += T(1);
  for (auto* n : order) {
    if (n->backward) n->backward(*n);
  }
}

// ---------------------------------------------------------------------------
// Elementwise

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape(a, b, "add");
  const auto& x = *a.node()->data;
  const auto& y = *b.node()->data;
  std::vector<T> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] + y[i];
  return make_result<T>(a.shape(), std::move(out), "add", {a.node(), b.node()}, [](detail::Node<T>& self) {
    accumulate(*self.inputs[0], self.grad);
    accumulate(*self.inputs[1], self.grad);
  });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape(a, b, "sub");
  const auto& x = *a.node()->data;
  const auto& y = *b.node()->data;
  std::vector<T> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] - y[i];
  return make_result<T>(a.shape(), std::move(out), "sub", {a.node(), b.node()}, [](detail::Node<T>& self) {
    accumulate(*self.inputs[0], self.grad);
    auto& rhs = *self.inputs[1];
    if (!rhs.requires_grad) return;
    auto& g = rhs.grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] -= self.grad[i];
  });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape(a, b, "mul");
  const auto& x = *a.node()->data;
  const auto& y = *b.node()->data;
  std::vector<T> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] * y[i];
  return make_result<T>(a.shape(), std::move(out), "mul", {a.node(), b.node()}, [](detail::Node<T>& self) {
    auto& lhs = *self.inputs[0];
    auto& rhs = *self.inputs[1];
    if (lhs.requires_grad) {
      auto& g = lhs.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * (*rhs.data)[i];
    }
    if (rhs.requires_grad) {
      auto& g = rhs.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * (*lhs.data)[i];
    }
  });
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T factor) {
  return unary<T>(
      a, "scale", [factor](T x) { return x * factor; }, [factor](T, T) { return factor; });
}

template <typename T>
Tensor<T> add_scalar(const Tensor<T>& a, T offset) {
  return unary<T>(
      a, "add_scalar", [offset](T x) { return x + offset; }, [](T, T) { return T(1); });
}

template <typename T>
Tensor<T> tanh(const Tensor<T>& a) {
  return unary<T>(
      a, "tanh", [](T x) { return std::tanh(x); }, [](T, T y) { return T(1) - y * y; });
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& a) {
  return unary<T>(
      a, "sigmoid",
      [](T x) {
        if (x >= T(0)) return T(1) / (T(1) + std::exp(-x));
        const T e = std::exp(x);
        return e / (T(1) + e);
      },
      [](T, T y) { return y * (T(1) - y); });
}

template <typename T>
Tensor<T> relu(const Tensor<T>& a) {
  return unary<T>(
      a, "relu", [](T x) { return x > T(0) || x != x ? x : T(0); }, [](T x, T) { return x > T(0) ? T(1) : T(0); });
}

template <typename T>
Tensor<T> softplus(const Tensor<T>& a) {
  return unary<T>(
      a, "softplus",
      [](T x) { return x > T(0) ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x)); },
      [](T x, T) {
        if (x >= T(0)) return T(1) / (T(1) + std::exp(-x));
        const T e = std::exp(x);
        return e / (T(1) + e);
      });
}

// ---------------------------------------------------------------------------
// Broadcasting

namespace {

template <typename T>
void require_row(const Tensor<T>& a, const Tensor<T>& row, std::string_view op) {
  checked(a, op);
  checked(row, op);
  if (a.rank() == 0 || row.rank() != 1 || row.dim(0) != a.shape().back()) {
    throw DimensionError(std::string(op) + ": cannot broadcast " + shape_to_string(row.shape()) + " over " +
                         shape_to_string(a.shape()));
  }
}

}  // namespace

template <typename T>
Tensor<T> add_row(const Tensor<T>& a, const Tensor<T>& row) {
  require_row(a, row, "add_row");
  const auto& x = *a.node()->data;
  const auto& r = *row.node()->data;
  const std::size_t n = r.size();
  std::vector<T> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] + r[i % n];
  return make_result<T>(a.shape(), std::move(out), "add_row", {a.node(), row.node()},
                        [n](detail::Node<T>& self) {
                          accumulate(*self.inputs[0], self.grad);
                          auto& rn = *self.inputs[1];
                          if (!rn.requires_grad) return;
                          auto& g = rn.grad_buffer();
                          for (std::size_t i = 0; i < self.grad.size(); ++i) g[i % n] += self.grad[i];
                        });
}

template <typename T>
Tensor<T> mul_row(const Tensor<T>& a, const Tensor<T>& row) {
  require_row(a, row, "mul_row");
  const auto& x = *a.node()->data;
  const auto& r = *row.node()->data;
  const std::size_t n = r.size();
  std::vector<T> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] * r[i % n];
  return make_result<T>(a.shape(), std::move(out), "mul_row", {a.node(), row.node()},
                        [n](detail::Node<T>& self) {
                          auto& an = *self.inputs[0];
                          auto& rn = *self.inputs[1];
                          const auto& xv = *an.data;
                          const auto& rv = *rn.data;
                          if (an.requires_grad) {
                            auto& g = an.grad_buffer();
                            for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * rv[i % n];
                          }
                          if (rn.requires_grad) {
                            auto& g = rn.grad_buffer();
                            for (std::size_t i = 0; i < self.grad.size(); ++i) g[i % n] += self.grad[i] * xv[i];
                          }
                        });
}

template <typename T>
Tensor<T> add_channel_bias(const Tensor<T>& x, const Tensor<T>& bias) {
  require_rank(x, 3, "add_channel_bias");
  require_rank(bias, 1, "add_channel_bias");
  if (bias.dim(0) != x.dim(0)) {
    throw DimensionError("add_channel_bias: bias " + shape_to_string(bias.shape()) + " vs input " +
                         shape_to_string(x.shape()));
  }
  const std::size_t plane = x.dim(1) * x.dim(2);
  const auto& xv = *x.node()->data;
  const auto& bv = *bias.node()->data;
  std::vector<T> out(xv.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = xv[i] + bv[i / plane];
  return make_result<T>(x.shape(), std::move(out), "add_channel_bias", {x.node(), bias.node()},
                        [plane](detail::Node<T>& self) {
                          accumulate(*self.inputs[0], self.grad);
                          auto& bn = *self.inputs[1];
                          if (!bn.requires_grad) return;
                          auto& g = bn.grad_buffer();
                          for (std::size_t i = 0; i < self.grad.size(); ++i) g[i / plane] += self.grad[i];
                        });
}

// ---------------------------------------------------------------------------
// Linear algebra and structure

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  checked(a, "matmul");
  checked(b, "matmul");
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
    throw DimensionError("matmul: cannot multiply " + shape_to_string(a.shape()) + " by " +
                         shape_to_string(b.shape()));
  }
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  const T* x = a.node()->data->data();
  const T* y = b.node()->data->data();
  std::vector<T> out(m * n, T(0));
  for (std::size_t i = 0; i < m; ++i) {
    T* orow = out.data() + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const T xip = x[i * k + p];
      if (xip == T(0)) continue;
      const T* yrow = y + p * n;
      for (std::size_t j = 0; j < n; ++j) orow[j] += xip * yrow[j];
    }
  }
  return make_result<T>(Shape{m, n}, std::move(out), "matmul", {a.node(), b.node()},
                        [m, k, n](detail::Node<T>& self) {
                          auto& an = *self.inputs[0];
                          auto& bn = *self.inputs[1];
                          const T* g = self.grad.data();
                          if (an.requires_grad) {
                            auto& ga = an.grad_buffer();
                            const T* y = bn.data->data();
                            for (std::size_t i = 0; i < m; ++i) {
                              const T* grow = g + i * n;
                              for (std::size_t p = 0; p < k; ++p) {
                                const T* yrow = y + p * n;
                                T acc = T(0);
                                for (std::size_t j = 0; j < n; ++j) acc += grow[j] * yrow[j];
                                ga[i * k + p] += acc;
                              }
                            }
                          }
                          if (bn.requires_grad) {
                            auto& gb = bn.grad_buffer();
                            const T* x = an.data->data();
                            for (std::size_t i = 0; i < m; ++i) {
                              const T* grow = g + i * n;
                              for (std::size_t p = 0; p < k; ++p) {
                                const T xip = x[i * k + p];
                                if (xip == T(0)) continue;
                                T* gbrow = gb.data() + p * n;
                                for (std::size_t j = 0; j < n; ++j) gbrow[j] += xip * grow[j];
                              }
                            }
                          }
                        });
}

template <typename T>
Tensor<T> transpose(const Tensor<T>& a) {
  require_rank(a, 2, "transpose");
  const std::size_t m = a.dim(0), n = a.dim(1);
  const auto& x = *a.node()->data;
  std::vector<T> out(x.size());
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[j * m + i] = x[i * n + j];
  return make_result<T>(Shape{n, m}, std::move(out), "transpose", {a.node()}, [m, n](detail::Node<T>& self) {
    auto& g = self.inputs[0]->grad_buffer();
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) g[i * n + j] += self.grad[j * m + i];
  });
}

template <typename T>
Tensor<T> reshape(const Tensor<T>& a, Shape shape) {
  if (shape_numel(shape) != a.numel()) {
    throw DimensionError("reshape: cannot view " + shape_to_string(a.shape()) + " as " + shape_to_string(shape));
  }
  return make_result<T>(std::move(shape), *a.node()->data, "reshape", {a.node()},
                        [](detail::Node<T>& self) { accumulate(*self.inputs[0], self.grad); });
}

template <typename T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, std::size_t axis) {
  if (parts.empty()) throw ContractError("concat: no operands");
  const Shape& first = checked(parts[0], "concat").shape;
  if (axis >= first.size()) {
    throw DimensionError("concat: axis " + std::to_string(axis) + " out of range for " + shape_to_string(first));
  }
  Shape out_shape = first;
  out_shape[axis] = 0;
  for (const auto& p : parts) {
    const Shape& s = checked(p, "concat").shape;
    bool ok = s.size() == first.size();
    for (std::size_t d = 0; ok && d < s.size(); ++d) ok = d == axis || s[d] == first[d];
    if (!ok) {
      throw DimensionError("concat: shape " + shape_to_string(s) + " incompatible with " + shape_to_string(first) +
                           " along axis " + std::to_string(axis));
    }
    out_shape[axis] += s[axis];
  }
  std::size_t outer = 1;
  for (std::size_t d = 0; d < axis; ++d) outer *= first[d];
  std::vector<std::size_t> chunk(parts.size());
  std::size_t out_chunk = 0;
  for (std::size_t i = 0; i < parts.size(); ++i) {
    chunk[i] = parts[i].numel() / outer;
    out_chunk += chunk[i];
  }
  std::vector<T> out(outer * out_chunk);
  std::vector<NodePtr<T>> inputs;
  std::size_t offset = 0;
  for (std::size_t i = 0; i < parts.size(); ++i) {
    const auto& src = *parts[i].node()->data;
    for (std::size_t o = 0; o < outer; ++o) {
      std::copy_n(src.begin() + static_cast<std::ptrdiff_t>(o * chunk[i]), chunk[i],
                  out.begin() + static_cast<std::ptrdiff_t>(o * out_chunk + offset));
    }
    offset += chunk[i];
    inputs.push_back(parts[i].node());
  }
  return make_result<T>(std::move(out_shape), std::move(out), "concat", std::move(inputs),
                        [outer, chunk, out_chunk](detail::Node<T>& self) {
                          std::size_t off = 0;
                          for (std::size_t i = 0; i < self.inputs.size(); ++i) {
                            auto& in = *self.inputs[i];
                            if (in.requires_grad) {
                              auto& g = in.grad_buffer();
                              for (std::size_t o = 0; o < outer; ++o)
                                for (std::size_t j = 0; j < chunk[i]; ++j)
                                  g[o * chunk[i] + j] += self.grad[o * out_chunk + off + j];
                            }
                            off += chunk[i];
                          }
                        });
}

template <typename T>
Tensor<T> slice_rows(const Tensor<T>& a, std::size_t begin, std::size_t end) {
  checked(a, "slice_rows");
  if (a.rank() == 0 || begin >= end || end > a.dim(0)) {
    throw DimensionError("slice_rows: range [" + std::to_string(begin) + ", " + std::to_string(end) +
                         ") invalid for " + shape_to_string(a.shape()));
  }
  const std::size_t row = a.numel() / a.dim(0);
  Shape shape = a.shape();
  shape[0] = end - begin;
  const auto& x = *a.node()->data;
  std::vector<T> out(x.begin() + static_cast<std::ptrdiff_t>(begin * row),
                     x.begin() + static_cast<std::ptrdiff_t>(end * row));
  return make_result<T>(std::move(shape), std::move(out), "slice_rows", {a.node()},
                        [begin, row](detail::Node<T>& self) {
                          auto& g = self.inputs[0]->grad_buffer();
                          for (std::size_t i = 0; i < self.grad.size(); ++i) g[begin * row + i] += self.grad[i];
                        });
}

template <typename T>
Tensor<T> pad_rows(const Tensor<T>& a, std::size_t rows) {
  checked(a, "pad_rows");
  if (a.rank() == 0 || rows < a.dim(0)) {
    throw DimensionError("pad_rows: cannot pad " + shape_to_string(a.shape()) + " to " + std::to_string(rows) +
                         " rows");
  }
  if (rows == a.dim(0)) return a;
  Shape shape = a.shape();
  shape[0] = rows;
  std::vector<T> out(shape_numel(shape), T(0));
  const auto& x = *a.node()->data;
  std::copy(x.begin(), x.end(), out.begin());
  return make_result<T>(std::move(shape), std::move(out), "pad_rows", {a.node()}, [](detail::Node<T>& self) {
    auto& g = self.inputs[0]->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
  });
}

// ---------------------------------------------------------------------------
// Reductions

template <typename T>
Tensor<T> sum(const Tensor<T>& a) {
  const auto& x = *checked(a, "sum").data;
  const T total = std::accumulate(x.begin(), x.end(), T(0));
  return make_result<T>(Shape{}, std::vector<T>{total}, "sum", {a.node()}, [](detail::Node<T>& self) {
    auto& g = self.inputs[0]->grad_buffer();
    for (auto& v : g) v += self.grad[0];
  });
}

template <typename T>
Tensor<T> mean(const Tensor<T>& a) {
  const auto& x = *checked(a, "mean").data;
  const T n = static_cast<T>(x.size());
  const T total = std::accumulate(x.begin(), x.end(), T(0));
  return make_result<T>(Shape{}, std::vector<T>{total / n}, "mean", {a.node()}, [n](detail::Node<T>& self) {
    auto& g = self.inputs[0]->grad_buffer();
    for (auto& v : g) v += self.grad[0] / n;
  });
}

// ---------------------------------------------------------------------------
// Normalization

template <typename T>
Tensor<T> softmax(const Tensor<T>& a, std::size_t axis) {
  const Shape& s = checked(a, "softmax").shape;
  if (axis >= s.size()) {
    throw DimensionError("softmax: axis " + std::to_string(axis) + " out of range for " + shape_to_string(s));
  }
  std::size_t outer = 1, inner = 1;
  for (std::size_t d = 0; d < axis; ++d) outer *= s[d];
  for (std::size_t d = axis + 1; d < s.size(); ++d) inner *= s[d];
  const std::size_t n = s[axis];
  const auto& x = *a.node()->data;
  std::vector<T> out(x.size());
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t in = 0; in < inner; ++in) {
      const std::size_t base = o * n * inner + in;
      T hi = -std::numeric_limits<T>::infinity();
      for (std::size_t i = 0; i < n; ++i) hi = std::max(hi, x[base + i * inner]);
      T total = T(0);
      for (std::size_t i = 0; i < n; ++i) {
        out[base + i * inner] = std::exp(x[base + i * inner] - hi);
        total += out[base + i * inner];
      }
      for (std::size_t i = 0; i < n; ++i) out[base + i * inner] /= total;
    }
  }
  return make_result<T>(s, std::move(out), "softmax", {a.node()}, [outer, inner, n](detail::Node<T>& self) {
    auto& g = self.inputs[0]->grad_buffer();
    const auto& y = *self.data;
    for (std::size_t o = 0; o < outer; ++o) {
      for (std::size_t in = 0; in < inner; ++in) {
        const std::size_t base = o * n * inner + in;
        T dot = T(0);
        for (std::size_t i = 0; i < n; ++i) dot += self.grad[base + i * inner] * y[base + i * inner];
        for (std::size_t i = 0; i < n; ++i) {
          const std::size_t k = base + i * inner;
          g[k] += y[k] * (self.grad[k] - dot);
        }
      }
    }
  });
}

template <typename T>
Tensor<T> masked_softmax_rows(const Tensor<T>& scores, const std::vector<bool>& key_mask,
                              const std::vector<bool>& query_mask) {
  require_rank(scores, 2, "masked_softmax_rows");
  const std::size_t rows = scores.dim(0), cols = scores.dim(1);
  if (key_mask.size() != cols || query_mask.size() != rows) {
    throw DimensionError("masked_softmax_rows: masks of length " + std::to_string(query_mask.size()) + "/" +
                         std::to_string(key_mask.size()) + " for scores " + shape_to_string(scores.shape()));
  }
  if (std::none_of(key_mask.begin(), key_mask.end(), [](bool m) { return m; })) {
    throw ContractError("masked_softmax_rows: every key position is masked");
  }
  const auto& x = *scores.node()->data;
  std::vector<T> out(x.size(), T(0));
  for (std::size_t r = 0; r < rows; ++r) {
    if (!query_mask[r]) continue;
    const T* row = x.data() + r * cols;
    T hi = -std::numeric_limits<T>::infinity();
    for (std::size_t c = 0; c < cols; ++c)
      if (key_mask[c]) hi = std::max(hi, row[c]);
    T total = T(0);
    for (std::size_t c = 0; c < cols; ++c) {
      if (!key_mask[c]) continue;
      out[r * cols + c] = std::exp(row[c] - hi);
      total += out[r * cols + c];
    }
    for (std::size_t c = 0; c < cols; ++c) out[r * cols + c] /= total;
  }
  return make_result<T>(scores.shape(), std::move(out), "masked_softmax_rows", {scores.node()},
                        [rows, cols](detail::Node<T>& self) {
                          auto& g = self.inputs[0]->grad_buffer();
                          const auto& y = *self.data;
                          for (std::size_t r = 0; r < rows; ++r) {
                            T dot = T(0);
                            for (std::size_t c = 0; c < cols; ++c) dot += self.grad[r * cols + c] * y[r * cols + c];
                            for (std::size_t c = 0; c < cols; ++c) {
                              const std::size_t k = r * cols + c;
                              g[k] += y[k] * (self.grad[k] - dot);
                            }
                          }
                        });
}

template <typename T>
Tensor<T> layer_norm_rows(const Tensor<T>& a, T eps) {
  const Shape& s = checked(a, "layer_norm_rows").shape;
  if (s.empty()) throw DimensionError("layer_norm_rows: scalar input");
  const std::size_t n = s.back();
  const std::size_t rows = a.numel() / n;
  const auto& x = *a.node()->data;
  std::vector<T> out(x.size());
  std::vector<T> inv_std(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const T* row = x.data() + r * n;
    T mu = T(0);
    for (std::size_t i = 0; i < n; ++i) mu += row[i];
    mu /= static_cast<T>(n);
    T var = T(0);
    for (std::size_t i = 0; i < n; ++i) var += (row[i] - mu) * (row[i] - mu);
    var /= static_cast<T>(n);
    inv_std[r] = T(1) / std::sqrt(var + eps);
    for (std::size_t i = 0; i < n; ++i) out[r * n + i] = (row[i] - mu) * inv_std[r];
  }
  return make_result<T>(s, std::move(out), "layer_norm_rows", {a.node()},
                        [rows, n, inv_std = std::move(inv_std)](detail::Node<T>& self) {
                          auto& g = self.inputs[0]->grad_buffer();
                          const auto& y = *self.data;
                          for (std::size_t r = 0; r < rows; ++r) {
                            const T* dy = self.grad.data() + r * n;
                            const T* yr = y.data() + r * n;
                            T mean_dy = T(0), mean_dy_y = T(0);
                            for (std::size_t i = 0; i < n; ++i) {
                              mean_dy += dy[i];
                              mean_dy_y += dy[i] * yr[i];
                            }
                            mean_dy /= static_cast<T>(n);
                            mean_dy_y /= static_cast<T>(n);
                            for (std::size_t i = 0; i < n; ++i)
                              g[r * n + i] += inv_std[r] * (dy[i] - mean_dy - yr[i] * mean_dy_y);
                          }
                        });
}

// ---------------------------------------------------------------------------
// Lookup and convolution

template <typename T>
Tensor<T> embedding_lookup(const Tensor<T>& table, std::span<const std::int32_t> ids) {
  require_rank(table, 2, "embedding_lookup");
  if (ids.empty()) throw DimensionError("embedding_lookup: empty id sequence");
  const std::size_t rows = table.dim(0), width = table.dim(1);
  const auto& w = *table.node()->data;
  std::vector<T> out(ids.size() * width);
  std::vector<std::size_t> saved(ids.size());
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= rows) {
      throw DimensionError("embedding_lookup: id " + std::to_string(ids[i]) + " outside table " +
                           shape_to_string(table.shape()));
    }
    saved[i] = static_cast<std::size_t>(ids[i]);
    std::copy_n(w.begin() + static_cast<std::ptrdiff_t>(saved[i] * width), width,
                out.begin() + static_cast<std::ptrdiff_t>(i * width));
  }
  return make_result<T>(Shape{ids.size(), width}, std::move(out), "embedding_lookup", {table.node()},
                        [width, saved = std::move(saved)](detail::Node<T>& self) {
                          auto& tn = *self.inputs[0];
                          for (std::size_t i = 0; i < saved.size(); ++i) {
                            const T* src = self.grad.data() + i * width;
                            T* dst;
                            if (tn.sparse) {
                              auto& row = tn.sparse_grad[saved[i]];
                              if (row.empty()) row.assign(width, T(0));
                              dst = row.data();
                            } else {
                              dst = tn.grad_buffer().data() + saved[i] * width;
                            }
                            for (std::size_t j = 0; j < width; ++j) dst[j] += src[j];
                          }
                        });
}

namespace {

struct ConvGeometry {
  std::size_t in_c, in_h, in_w, out_c, kh, kw, out_h, out_w, stride, pad_top, pad_left;
};

// Output range [lo, hi) of positions whose tap `k` lands inside [0, extent).
inline void tap_range(std::size_t k, std::size_t pad, std::size_t stride, std::size_t extent, std::size_t out,
                      std::size_t& lo, std::size_t& hi) {
  // input index = o * stride + k - pad
  lo = pad > k ? (pad - k + stride - 1) / stride : 0;
  if (extent + pad <= k) {
    hi = 0;
    return;
  }
  hi = std::min(out, (extent - 1 + pad - k) / stride + 1);
}

}  // namespace

template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& kernels, std::size_t stride, Padding padding) {
  require_rank(x, 3, "conv2d");
  require_rank(kernels, 4, "conv2d");
  if (stride == 0) throw ContractError("conv2d: stride must be positive");
  if (kernels.dim(1) != x.dim(0)) {
    throw DimensionError("conv2d: kernels " + shape_to_string(kernels.shape()) + " expect " +
                         std::to_string(kernels.dim(1)) + " input channels, input is " + shape_to_string(x.shape()));
  }
  ConvGeometry geo{x.dim(0), x.dim(1), x.dim(2), kernels.dim(0), kernels.dim(2), kernels.dim(3), 0, 0, stride, 0, 0};
  if (padding == Padding::kSame) {
    geo.out_h = (geo.in_h + stride - 1) / stride;
    geo.out_w = (geo.in_w + stride - 1) / stride;
    const std::size_t need_h = (geo.out_h - 1) * stride + geo.kh;
    const std::size_t need_w = (geo.out_w - 1) * stride + geo.kw;
    const std::size_t pad_h = need_h > geo.in_h ? need_h - geo.in_h : 0;
    const std::size_t pad_w = need_w > geo.in_w ? need_w - geo.in_w : 0;
    geo.pad_top = pad_h / 2;
    geo.pad_left = pad_w / 2;
    if (geo.kh > geo.in_h + pad_h || geo.kw > geo.in_w + pad_w) {
      throw DimensionError("conv2d: kernel " + shape_to_string(kernels.shape()) + " larger than padded input " +
                           shape_to_string(x.shape()));
    }
  } else {
    if (geo.kh > geo.in_h || geo.kw > geo.in_w) {
      throw DimensionError("conv2d: kernel " + shape_to_string(kernels.shape()) + " larger than input " +
                           shape_to_string(x.shape()));
    }
    geo.out_h = (geo.in_h - geo.kh) / stride + 1;
    geo.out_w = (geo.in_w - geo.kw) / stride + 1;
  }

  const T* in = x.node()->data->data();
  const T* w = kernels.node()->data->data();
  std::vector<T> out(geo.out_c * geo.out_h * geo.out_w, T(0));
  for (std::size_t co = 0; co < geo.out_c; ++co) {
    T* oplane = out.data() + co * geo.out_h * geo.out_w;
    for (std::size_t ci = 0; ci < geo.in_c; ++ci) {
      const T* iplane = in + ci * geo.in_h * geo.in_w;
      for (std::size_t ki = 0; ki < geo.kh; ++ki) {
        std::size_t oy_lo, oy_hi;
        tap_range(ki, geo.pad_top, stride, geo.in_h, geo.out_h, oy_lo, oy_hi);
        for (std::size_t kj = 0; kj < geo.kw; ++kj) {
          const T wv = w[((co * geo.in_c + ci) * geo.kh + ki) * geo.kw + kj];
          if (wv == T(0)) continue;
          std::size_t ox_lo, ox_hi;
          tap_range(kj, geo.pad_left, stride, geo.in_w, geo.out_w, ox_lo, ox_hi);
          for (std::size_t oy = oy_lo; oy < oy_hi; ++oy) {
            const T* irow = iplane + (oy * stride + ki - geo.pad_top) * geo.in_w;
            T* orow = oplane + oy * geo.out_w;
            for (std::size_t ox = ox_lo; ox < ox_hi; ++ox) orow[ox] += wv * irow[ox * stride + kj - geo.pad_left];
          }
        }
      }
    }
  }
  return make_result<T>(
      Shape{geo.out_c, geo.out_h, geo.out_w}, std::move(out), "conv2d", {x.node(), kernels.node()},
      [geo](detail::Node<T>& self) {
        auto& xn = *self.inputs[0];
        auto& kn = *self.inputs[1];
        const T* in = xn.data->data();
        const T* w = kn.data->data();
        const T* dout = self.grad.data();
        T* dx = xn.requires_grad ? xn.grad_buffer().data() : nullptr;
        T* dw = kn.requires_grad ? kn.grad_buffer().data() : nullptr;
        for (std::size_t co = 0; co < geo.out_c; ++co) {
          const T* gplane = dout + co * geo.out_h * geo.out_w;
          for (std::size_t ci = 0; ci < geo.in_c; ++ci) {
            const std::size_t ioff = ci * geo.in_h * geo.in_w;
            for (std::size_t ki = 0; ki < geo.kh; ++ki) {
              std::size_t oy_lo, oy_hi;
              tap_range(ki, geo.pad_top, geo.stride, geo.in_h, geo.out_h, oy_lo, oy_hi);
              for (std::size_t kj = 0; kj < geo.kw; ++kj) {
                const std::size_t widx = ((co * geo.in_c + ci) * geo.kh + ki) * geo.kw + kj;
                const T wv = w[widx];
                std::size_t ox_lo, ox_hi;
                tap_range(kj, geo.pad_left, geo.stride, geo.in_w, geo.out_w, ox_lo, ox_hi);
                T wacc = T(0);
                for (std::size_t oy = oy_lo; oy < oy_hi; ++oy) {
                  const std::size_t irow = ioff + (oy * geo.stride + ki - geo.pad_top) * geo.in_w;
                  const T* grow = gplane + oy * geo.out_w;
                  for (std::size_t ox = ox_lo; ox < ox_hi; ++ox) {
                    const std::size_t ii = irow + ox * geo.stride + kj - geo.pad_left;
                    if (dx) dx[ii] += wv * grow[ox];
                    wacc += in[ii] * grow[ox];
                  }
                }
                if (dw) dw[widx] += wacc;
              }
            }
          }
        }
      });
}

template <typename T>
Tensor<T> max_pool2d(const Tensor<T>& x, std::size_t kernel, std::size_t stride) {
  require_rank(x, 3, "max_pool2d");
  if (kernel == 0 || stride == 0) throw ContractError("max_pool2d: kernel and stride must be positive");
  const std::size_t c = x.dim(0), h = x.dim(1), w = x.dim(2);
  if (h < kernel || w < kernel) {
    throw DimensionError("max_pool2d: input " + shape_to_string(x.shape()) + " smaller than kernel " +
                         std::to_string(kernel));
  }
  const std::size_t oh = (h - kernel) / stride + 1, ow = (w - kernel) / stride + 1;
  const auto& in = *x.node()->data;
  std::vector<T> out(c * oh * ow);
  std::vector<std::size_t> argmax(out.size());
  for (std::size_t ch = 0; ch < c; ++ch) {
    for (std::size_t oy = 0; oy < oh; ++oy) {
      for (std::size_t ox = 0; ox < ow; ++ox) {
        std::size_t best = ch * h * w + oy * stride * w + ox * stride;
        for (std::size_t ky = 0; ky < kernel; ++ky) {
          for (std::size_t kx = 0; kx < kernel; ++kx) {
            const std::size_t idx = ch * h * w + (oy * stride + ky) * w + ox * stride + kx;
            if (in[idx] > in[best]) best = idx;
          }
        }
        const std::size_t o = (ch * oh + oy) * ow + ox;
        out[o] = in[best];
        argmax[o] = best;
      }
    }
  }
  return make_result<T>(Shape{c, oh, ow}, std::move(out), "max_pool2d", {x.node()},
                        [argmax = std::move(argmax)](detail::Node<T>& self) {
                          auto& g = self.inputs[0]->grad_buffer();
                          for (std::size_t o = 0; o < argmax.size(); ++o) g[argmax[o]] += self.grad[o];
                        });
}

// ---------------------------------------------------------------------------
// Instantiations

#define FCC_INSTANTIATE_TENSOR(T)                                                                          \
  template class Tensor<T>;                                                                                \
  template Tensor<T> add(const Tensor<T>&, const Tensor<T>&);                                              \
  template Tensor<T> sub(const Tensor<T>&, const Tensor<T>&);                                              \
  template Tensor<T> mul(const Tensor<T>&, const Tensor<T>&);                                              \
  template Tensor<T> scale(const Tensor<T>&, T);                                                           \
  template Tensor<T> add_scalar(const Tensor<T>&, T);                                                      \
  template Tensor<T> tanh(const Tensor<T>&);                                                               \
  template Tensor<T> sigmoid(const Tensor<T>&);                                                            \
  template Tensor<T> relu(const Tensor<T>&);                                                               \
  template Tensor<T> softplus(const Tensor<T>&);                                                           \
  template Tensor<T> add_row(const Tensor<T>&, const Tensor<T>&);                                          \
  template Tensor<T> mul_row(const Tensor<T>&, const Tensor<T>&);                                          \
  template Tensor<T> add_channel_bias(const Tensor<T>&, const Tensor<T>&);                                 \
  template Tensor<T> matmul(const Tensor<T>&, const Tensor<T>&);                                           \
  template Tensor<T> transpose(const Tensor<T>&);                                                          \
  template Tensor<T> reshape(const Tensor<T>&, Shape);                                                     \
  template Tensor<T> concat(const std::vector<Tensor<T>>&, std::size_t);                                   \
  template Tensor<T> slice_rows(const Tensor<T>&, std::size_t, std::size_t);                               \
  template Tensor<T> pad_rows(const Tensor<T>&, std::size_t);                                              \
  template Tensor<T> sum(const Tensor<T>&);                                                                \
  template Tensor<T> mean(const Tensor<T>&);                                                               \
  template Tensor<T> softmax(const Tensor<T>&, std::size_t);                                               \
  template Tensor<T> masked_softmax_rows(const Tensor<T>&, const std::vector<bool>&, const std::vector<bool>&); \
  template Tensor<T> layer_norm_rows(const Tensor<T>&, T);                                                 \
  template Tensor<T> embedding_lookup(const Tensor<T>&, std::span<const std::int32_t>);                    \
  template Tensor<T> conv2d(const Tensor<T>&, const Tensor<T>&, std::size_t, Padding);                     \
  template Tensor<T> max_pool2d(const Tensor<T>&, std::size_t, std::size_t);

FCC_INSTANTIATE_TENSOR(float)
FCC_INSTANTIATE_TENSOR(double)

}  // namespace fcc
