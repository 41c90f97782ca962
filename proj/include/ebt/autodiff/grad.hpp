#pragma once

#include <cstdint>
#include <functional>
#include <random>
#include <span>
#include <vector>

#include "ebt/autodiff/tensor.hpp"

namespace ebt {

/// d output / d wrt[i] for a scalar `output`.
///
/// Inputs that `output` does not depend on get an exact zero gradient. With
/// `create_graph` the returned gradients carry history and may be
/// differentiated again; otherwise they are plain leaves.
std::vector<Tensor> grad(const Tensor& output, std::span<const Tensor> wrt, bool create_graph = false);
Tensor grad(const Tensor& output, const Tensor& wrt, bool create_graph = false);

/// Central-difference check of grad(f)(x). Returns
/// max_i |a_i - b_i| / max(|a_i|, |b_i|, 1e-8).
double finite_difference_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x, double eps = 1e-5);

/// Deterministic generator shared by every stochastic component.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : engine_(seed) {}

    double normal() { return normal_(engine_); }
    double uniform() { return uniform_(engine_); }
    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
    std::int64_t uniform_int(std::int64_t lo, std::int64_t hi);  // inclusive
    std::uint64_t next_u64() { return engine_(); }

    Tensor normal_tensor(const Shape& shape, double stddev = 1.0);

private:
    std::mt19937_64 engine_;
    std::normal_distribution<double> normal_{0.0, 1.0};
    std::uniform_real_distribution<double> uniform_{0.0, 1.0};
};

/// Independent stream seed: derive_seed(s, 0) == s.
std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream);

}  // namespace ebt
