#pragma once

#include <cstdint>

#include "ebt/errors.hpp"

namespace ebt::harness {

/// Exact ratio of two integers, kept in lowest terms.
struct Rational {
    std::int64_t num = 0;
    std::int64_t den = 1;

    double value() const { return static_cast<double>(num) / static_cast<double>(den); }
    friend bool operator==(const Rational&, const Rational&) = default;
};

Rational make_rational(std::int64_t num, std::int64_t den);

/// Forward + backward cost of a feed-forward transformer: 6N per token.
double flops_ff_per_token(double nonembedding_params);

/// Each energy-minimization step costs a forward and two backward passes,
/// (2N + 4N + 4N), doubled because observed and predicted streams make the
/// effective sequence twice as long: 20N per step.
double flops_ebt_per_token(double nonembedding_params, std::int64_t steps);

/// flops_ebt_per_token / flops_ff_per_token as an exact fraction (20·steps / 6).
Rational ebt_to_ff_ratio(std::int64_t steps);

struct FlopReport {
    double nonembedding_params = 0;
    double per_token_flops = 0;
    double per_step_flops = 0;  // per training step over tokens_per_step tokens
    double total = 0;
    double ratio_vs_ff = 0;
};

FlopReport ebt_flop_report(double nonembedding_params, std::int64_t steps, double tokens_per_step,
                           std::int64_t training_steps);
FlopReport ff_flop_report(double nonembedding_params, double tokens_per_step, std::int64_t training_steps);

}  // namespace ebt::harness
