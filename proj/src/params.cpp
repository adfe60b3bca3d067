#include "fcc/params.hpp"

#include <cmath>

#include "fcc/errors.hpp"

namespace fcc {

template <typename T>
Tensor<T>& ParamStore<T>::add_uniform(const std::string& name, Shape shape, std::size_t fan_in, Rng& rng) {
  if (fan_in == 0) throw ConfigError("parameter " + name + ": fan_in must be positive");
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  std::vector<T> values(shape_numel(shape));
  for (auto& v : values) v = static_cast<T>(rng.uniform(-bound, bound));
  return add(name, Tensor<T>::from_vector(std::move(shape), std::move(values), true));
}

template <typename T>
Tensor<T>& ParamStore<T>::add_constant(const std::string& name, Shape shape, T value) {
  return add(name, Tensor<T>::full(std::move(shape), value, true));
}

template <typename T>
Tensor<T>& ParamStore<T>::add(const std::string& name, Tensor<T> tensor) {
  if (contains(name)) throw ContractError("duplicate parameter name: " + name);
  index_.emplace(name, entries_.size());
  entries_.emplace_back(name, std::move(tensor));
  return entries_.back().second;
}

template <typename T>
const Tensor<T>& ParamStore<T>::get(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw ContractError("unknown parameter: " + name);
  return entries_[it->second].second;
}

template <typename T>
Tensor<T>& ParamStore<T>::get(const std::string& name) {
  auto it = index_.find(name);
  if (it == index_.end()) throw ContractError("unknown parameter: " + name);
  return entries_[it->second].second;
}

template <typename T>
std::size_t ParamStore<T>::scalar_count() const {
  std::size_t total = 0;
  for (const auto& [name, t] : entries_) total += t.numel();
  return total;
}

template <typename T>
ParamStore<T> ParamStore<T>::shared_leaves() const {
  ParamStore out;
  for (const auto& [name, t] : entries_) out.add(name, t.shared_leaf());
  return out;
}

template <typename T>
ParamStore<T> ParamStore<T>::clone() const {
  ParamStore out;
  for (const auto& [name, t] : entries_) {
    auto copy = Tensor<T>::from_vector(t.shape(), std::vector<T>(t.values().begin(), t.values().end()),
                                       t.requires_grad());
    if (t.sparse_grad_enabled()) copy.set_sparse_grad(true);
    out.add(name, std::move(copy));
  }
  return out;
}

template <typename T>
void ParamStore<T>::zero_grad() {
  for (auto& [name, t] : entries_) t.zero_grad();
}

template class ParamStore<float>;
template class ParamStore<double>;

}  // namespace fcc
