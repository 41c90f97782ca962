#include "ebt/tasks/metrics.hpp"

#include <cmath>

#include "ebt/autodiff/ops.hpp"
#include "ebt/errors.hpp"

namespace ebt::tasks {
namespace o = ebt::ops;

Tensor cross_entropy_per_position(const Tensor& logits, const std::vector<std::int64_t>& targets) {
    EBT_REQUIRE(logits.rank() == 3, "logits must be [B, S, V], got " + shape_str(logits.shape()));
    const auto b = logits.dim(0), s = logits.dim(1), v = logits.dim(2);
    EBT_REQUIRE(static_cast<std::int64_t>(targets.size()) == b * s,
                "expected " + std::to_string(b * s) + " targets, got " + std::to_string(targets.size()));
    for (auto t : targets) EBT_REQUIRE(t >= 0 && t < v, "target id " + std::to_string(t) + " outside vocabulary");
    return o::reshape(o::neg(o::gather_last(o::log_softmax(logits), targets, 1)), {b, s});
}

Tensor cross_entropy(const Tensor& logits, const std::vector<std::int64_t>& targets,
                     const std::vector<double>& weights) {
    const auto per = cross_entropy_per_position(logits, targets);
    if (weights.empty()) return o::mean_all(per);
    EBT_REQUIRE(weights.size() == targets.size(), "one weight per target expected");
    double total = 0.0;
    for (double w : weights) total += w;
    EBT_REQUIRE(total > 0.0, "weights sum to zero");
    return o::mul_scalar(o::sum_all(o::mul(per, Tensor::from_data(per.shape(), weights))), 1.0 / total);
}

double perplexity(double cross_entropy) { return std::exp(cross_entropy); }

Tensor smooth_l1_per_position(const Tensor& prediction, const Tensor& target, double beta) {
    EBT_REQUIRE(prediction.shape() == target.shape(),
                "smooth-L1 shapes differ: " + shape_str(prediction.shape()) + " vs " + shape_str(target.shape()));
    EBT_REQUIRE(beta > 0.0, "smooth-L1 beta must be > 0");
    // c·(d − c/2)/β with c = clamp(d, ±β): quadratic inside, linear outside.
    const auto d = o::sub(prediction, target);
    const auto c = o::clamp(d, -beta, beta);
    const auto per = o::mul_scalar(o::mul(c, o::sub(d, o::mul_scalar(c, 0.5))), 1.0 / beta);
    return o::mean(per, -1);
}

Tensor smooth_l1(const Tensor& prediction, const Tensor& target, double beta) {
    return o::mean_all(smooth_l1_per_position(prediction, target, beta));
}

}  // namespace ebt::tasks
