#pragma once

#include <ATen/core/Generator.h>
#include <torch/types.h>

#include <cstdint>
#include <vector>

namespace forceworld {

/// Explicit random stream. Wraps a torch CPU generator so the same state drives
/// both scalar draws and tensor sampling, and can be checkpointed.
class Rng {
 public:
  explicit Rng(uint64_t seed);
  /// Copies are independent streams that start from the same state.
  Rng(const Rng& other);
  Rng& operator=(const Rng& other);
  Rng(Rng&&) = default;
  Rng& operator=(Rng&&) = default;

  uint64_t next_u64();
  /// Uniform on [0, 1).
  double uniform();
  double uniform(double lo, double hi);
  /// Uniform integer on the closed range [lo, hi].
  int64_t uniform_int(int64_t lo, int64_t hi);
  bool bernoulli(double p);
  double normal();

  torch::Tensor randn(at::IntArrayRef shape, torch::Dtype dtype = torch::kFloat32);

  /// Derive an independent stream, e.g. one per clip or per probe.
  Rng fork(uint64_t stream);

  torch::Tensor state() const;
  void set_state(const torch::Tensor& state);

  at::Generator& generator() { return gen_; }

 private:
  at::Generator gen_;
};

/// Stable 64-bit hash (splitmix64 of the combined words).
uint64_t mix_seed(uint64_t seed, uint64_t stream);

}  // namespace forceworld
