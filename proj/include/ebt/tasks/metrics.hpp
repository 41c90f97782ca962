#pragma once

#include <cstdint>
#include <vector>

#include "ebt/autodiff/tensor.hpp"

namespace ebt::tasks {

/// Mean categorical cross-entropy of logits [B, S, V] against target ids
/// [B*S]. With `weights` (one per target) the mean is weighted.
Tensor cross_entropy(const Tensor& logits, const std::vector<std::int64_t>& targets,
                     const std::vector<double>& weights = {});
/// Per-position cross-entropy [B, S], no reduction.
Tensor cross_entropy_per_position(const Tensor& logits, const std::vector<std::int64_t>& targets);
double perplexity(double cross_entropy);

/// Mean smooth-L1 (Huber) loss with threshold beta.
Tensor smooth_l1(const Tensor& prediction, const Tensor& target, double beta = 1.0);

/// Per-position smooth-L1 averaged over the last axis, [B, S].
Tensor smooth_l1_per_position(const Tensor& prediction, const Tensor& target, double beta = 1.0);

}  // namespace ebt::tasks
