#pragma once

#include <cstddef>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "fcc/random.hpp"
#include "fcc/tensor.hpp"

namespace fcc {

// Named trainable tensors in declaration order. Order is significant: the
// optimizer, gradient clipping and checkpoints all walk it.
template <typename T>
class ParamStore {
 public:
  using Entry = std::pair<std::string, Tensor<T>>;

  // Declares a parameter drawn from uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)).
  Tensor<T>& add_uniform(const std::string& name, Shape shape, std::size_t fan_in, Rng& rng);
  Tensor<T>& add_constant(const std::string& name, Shape shape, T value);
  Tensor<T>& add(const std::string& name, Tensor<T> tensor);

  bool contains(const std::string& name) const { return index_.count(name) != 0; }
  const Tensor<T>& get(const std::string& name) const;
  Tensor<T>& get(const std::string& name);

  const std::vector<Entry>& entries() const { return entries_; }
  std::vector<Entry>& entries() { return entries_; }
  std::size_t size() const { return entries_.size(); }
  std::size_t scalar_count() const;

  // Same storage, fresh gradient slots; one per independent tape.
  ParamStore shared_leaves() const;
  // Deep copy of the current values.
  ParamStore clone() const;
  void zero_grad();

 private:
  std::vector<Entry> entries_;
  std::unordered_map<std::string, std::size_t> index_;
};

}  // namespace fcc
