#pragma once

#include <map>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include "frozenlm/tensor.hpp"

namespace frozenlm {

enum class Partition { frozen, trainable };

inline const char* partition_name(Partition p) {
  return p == Partition::frozen ? "frozen" : "trainable";
}

// Named parameter registry. Every parameter carries exactly one partition
// tag; optimizers update trainable entries only, and frozen entries are
// auditable via per-tensor byte hashes.
template <class S>
class ParamStore {
 public:
  Tensor<S> add(const std::string& name, Shape shape, Partition part, std::vector<S> init) {
    if (map_.count(name)) throw std::invalid_argument("parameter already registered: " + name);
    auto t = Tensor<S>::make(std::move(shape), std::move(init), /*needs_grad=*/true, name);
    map_.emplace(name, Entry{t, part});
    order_.push_back(name);
    return t;
  }

  Tensor<S> add_normal(const std::string& name, Shape shape, Partition part, Rng& rng,
                       double stddev) {
    std::vector<S> d(size_t(numel(shape)));
    for (auto& x : d) x = S(rng.normal(0.0, stddev));
    return add(name, std::move(shape), part, std::move(d));
  }

  Tensor<S> add_full(const std::string& name, Shape shape, Partition part, S value) {
    std::vector<S> d(size_t(numel(shape)), value);
    return add(name, std::move(shape), part, std::move(d));
  }

  bool contains(const std::string& name) const { return map_.count(name) != 0; }

  Tensor<S> get(const std::string& name) const {
    auto it = map_.find(name);
    if (it == map_.end()) throw std::out_of_range("no such parameter: " + name);
    return it->second.tensor;
  }

  Partition partition(const std::string& name) const {
    auto it = map_.find(name);
    if (it == map_.end()) throw std::out_of_range("no such parameter: " + name);
    return it->second.part;
  }

  void set_partition(const std::string& name, Partition p) {
    auto it = map_.find(name);
    if (it == map_.end()) throw std::out_of_range("no such parameter: " + name);
    it->second.part = p;
  }

  void set_partition_prefix(const std::string& prefix, Partition p) {
    for (const auto& name : order_)
      if (name.rfind(prefix, 0) == 0) map_.at(name).part = p;
  }

  const std::vector<std::string>& names() const { return order_; }

  std::vector<std::pair<std::string, Tensor<S>>> items(Partition part) const {
    std::vector<std::pair<std::string, Tensor<S>>> out;
    for (const auto& name : order_) {
      const auto& e = map_.at(name);
      if (e.part == part) out.emplace_back(name, e.tensor);
    }
    return out;
  }

  std::vector<Tensor<S>> tensors(Partition part) const {
    std::vector<Tensor<S>> out;
    for (const auto& name : order_)
      if (map_.at(name).part == part) out.push_back(map_.at(name).tensor);
    return out;
  }

  int64_t param_count(Partition part) const {
    int64_t n = 0;
    for (const auto& name : order_)
      if (map_.at(name).part == part) n += map_.at(name).tensor.size();
    return n;
  }

  void zero_grads() {
    for (const auto& name : order_) map_.at(name).tensor.node()->zero_grad();
  }

  uint64_t tensor_hash(const std::string& name) const {
    const auto t = get(name);
    return fnv1a64(t.val().data(), t.val().size() * sizeof(S));
  }

  // name -> hex byte-hash for one side of the partition (ordered map so
  // serialized audits are stable)
  std::map<std::string, std::string> hashes(Partition part) const {
    std::map<std::string, std::string> out;
    for (const auto& name : order_)
      if (map_.at(name).part == part) out[name] = hex64(tensor_hash(name));
    return out;
  }

  // combined hash over the frozen side, in registration order
  uint64_t frozen_hash() const {
    uint64_t h = 0xcbf29ce484222325ull;
    for (const auto& name : order_) {
      const auto& e = map_.at(name);
      if (e.part != Partition::frozen) continue;
      h = fnv1a64(name.data(), name.size(), h);
      h = fnv1a64(e.tensor.val().data(), e.tensor.val().size() * sizeof(S), h);
    }
    return h;
  }

  // deep copy of trainable payloads, for checkpoint-selection snapshots
  std::unordered_map<std::string, std::vector<S>> snapshot(Partition part) const {
    std::unordered_map<std::string, std::vector<S>> out;
    for (const auto& name : order_)
      if (map_.at(name).part == part) out[name] = map_.at(name).tensor.val();
    return out;
  }

  void restore(const std::unordered_map<std::string, std::vector<S>>& snap) {
    for (const auto& [name, data] : snap) {
      auto t = get(name);
      if (t.val().size() != data.size())
        throw std::runtime_error("restore: size mismatch for " + name);
      t.val() = data;
    }
  }

 private:
  struct Entry {
    Tensor<S> tensor;
    Partition part;
  };
  std::vector<std::string> order_;
  std::unordered_map<std::string, Entry> map_;
};

}  // namespace frozenlm
