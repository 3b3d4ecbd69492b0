#pragma once

#include <cstdint>

namespace sdah {

// FLOP conventions shared by the op counters and the analytic model count:
// matmul/conv/deconv = 2 per multiply-accumulate, bilinear sampling = 8 per
// point per channel, softmax = 5 per element. Elementwise ops are not counted.
inline constexpr std::uint64_t kBilinearFlopsPerSample = 8;
inline constexpr std::uint64_t kSoftmaxFlopsPerElement = 5;

/// Accumulates FLOPs reported by ops on this thread while alive. Scopes nest;
/// each sees everything executed during its lifetime.
class FlopScope {
 public:
  FlopScope();
  ~FlopScope();
  FlopScope(const FlopScope&) = delete;
  FlopScope& operator=(const FlopScope&) = delete;

  std::uint64_t count() const;

 private:
  std::uint64_t start_;
};

namespace detail {
void add_flops(std::uint64_t n);
}

}  // namespace sdah
