#pragma once

#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "sdah/rng.hpp"
#include "sdah/tensor.hpp"

namespace sdah {

/// FNV-1a over the bytes of `s`.
inline std::uint64_t fnv1a(const std::string& s) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ull;
  }
  return h;
}

/// Ordered named parameters; the order is the checkpoint entry order. Each
/// tensor draws from its own SplitMix64 stream seeded by derive_seed(seed,
/// fnv1a(name)), so a value never depends on which other parameters exist.
template <typename T>
class ParamRegistry {
 public:
  explicit ParamRegistry(std::uint64_t seed) : seed_(seed) {}

  /// Uniform in [-1/sqrt(fan_in), +1/sqrt(fan_in)].
  Tensor<T> uniform(const std::string& name, Shape shape, int fan_in) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
    SplitMix64 rng(derive_seed(seed_, fnv1a(name)));
    std::vector<T> v(shape_numel(shape));
    for (auto& x : v) x = static_cast<T>(rng.uniform(-bound, bound));
    return add(name, Tensor<T>(std::move(shape), std::move(v), true));
  }
  Tensor<T> zeros(const std::string& name, Shape shape) {
    return add(name, Tensor<T>::full(std::move(shape), T(0), true));
  }
  Tensor<T> ones(const std::string& name, Shape shape) {
    return add(name, Tensor<T>::full(std::move(shape), T(1), true));
  }

  const std::vector<std::pair<std::string, Tensor<T>>>& entries() const { return entries_; }
  std::vector<std::pair<std::string, Tensor<T>>> release() { return std::move(entries_); }

 private:
  Tensor<T> add(const std::string& name, Tensor<T> t) {
    for (const auto& [n, _] : entries_)
      if (n == name) throw ShapeError("duplicate parameter name " + name);
    entries_.emplace_back(name, t);
    return t;
  }

  std::uint64_t seed_;
  std::vector<std::pair<std::string, Tensor<T>>> entries_;
};

}  // namespace sdah
