#include "ebt/harness/flops.hpp"

#include <numeric>
#include <string>

namespace ebt::harness {

Rational make_rational(std::int64_t num, std::int64_t den) {
    EBT_REQUIRE(den != 0, "rational with zero denominator");
    const auto g = std::gcd(num, den);
    Rational r{num / g, den / g};
    if (r.den < 0) r = {-r.num, -r.den};
    return r;
}

double flops_ff_per_token(double n) {
    EBT_REQUIRE(n > 0, "non-embedding parameter count must be positive");
    return 6.0 * n;
}

double flops_ebt_per_token(double n, std::int64_t steps) {
    EBT_REQUIRE(n > 0, "non-embedding parameter count must be positive");
    EBT_REQUIRE(steps >= 1, "steps must be >= 1, got " + std::to_string(steps));
    return static_cast<double>(steps) * (2.0 * n + 4.0 * n + 4.0 * n) * 2.0;
}

Rational ebt_to_ff_ratio(std::int64_t steps) {
    EBT_REQUIRE(steps >= 1, "steps must be >= 1, got " + std::to_string(steps));
    return make_rational((2 + 4 + 4) * 2 * steps, 6);
}

FlopReport ebt_flop_report(double n, std::int64_t steps, double tokens_per_step, std::int64_t training_steps) {
    FlopReport r;
    r.nonembedding_params = n;
    r.per_token_flops = flops_ebt_per_token(n, steps);
    r.per_step_flops = r.per_token_flops * tokens_per_step;
    r.total = r.per_step_flops * static_cast<double>(training_steps);
    r.ratio_vs_ff = ebt_to_ff_ratio(steps).value();
    return r;
}

FlopReport ff_flop_report(double n, double tokens_per_step, std::int64_t training_steps) {
    FlopReport r;
    r.nonembedding_params = n;
    r.per_token_flops = flops_ff_per_token(n);
    r.per_step_flops = r.per_token_flops * tokens_per_step;
    r.total = r.per_step_flops * static_cast<double>(training_steps);
    r.ratio_vs_ff = 1.0;
    return r;
}

}  // namespace ebt::harness
