#pragma once

#include <cstdint>
#include <vector>

#include "ebt/autodiff/tensor.hpp"

namespace ebt::ops {

// Binary ops broadcast numpy-style; backward reduces with sum_to.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);
Tensor neg(const Tensor& a);
Tensor add_scalar(const Tensor& a, double s);
Tensor mul_scalar(const Tensor& a, double s);

Tensor exp(const Tensor& a);
Tensor log(const Tensor& a);
Tensor sqrt(const Tensor& a);
Tensor sigmoid(const Tensor& a);
Tensor silu(const Tensor& a);
Tensor square(const Tensor& a);
/// Clamp to [lo, hi]; the gradient is passed only where the input is inside.
Tensor clamp(const Tensor& a, double lo, double hi);

/// Sum over one axis (negative axes count from the end).
Tensor sum(const Tensor& a, int axis, bool keepdim = false);
Tensor sum_all(const Tensor& a);
Tensor mean(const Tensor& a, int axis, bool keepdim = false);
Tensor mean_all(const Tensor& a);
/// Reduce a broadcast result back to `shape`.
Tensor sum_to(const Tensor& a, const Shape& shape);
Tensor broadcast_to(const Tensor& a, const Shape& shape);

/// Batched matmul over the last two axes. `b` is either rank 2 (shared across
/// the batch) or has the same leading axes as `a`.
Tensor matmul(const Tensor& a, const Tensor& b);
/// Floating-point operations (2 per multiply-add) done by matmul since the last
/// reset, summed over all threads. Includes matmuls issued by backward passes.
std::uint64_t matmul_flops();
void reset_matmul_flops();
Tensor transpose(const Tensor& a);  // swaps the last two axes
Tensor permute(const Tensor& a, const std::vector<int>& perm);
Tensor reshape(const Tensor& a, Shape shape);

Tensor softmax(const Tensor& a);      // over the last axis
Tensor log_softmax(const Tensor& a);  // over the last axis

Tensor concat(const std::vector<Tensor>& parts, int axis);
Tensor slice(const Tensor& a, int axis, std::int64_t begin, std::int64_t end);
/// Inverse of slice: zero tensor of extent `full` on `axis` with `a` at `begin`.
Tensor pad_into(const Tensor& a, int axis, std::int64_t begin, std::int64_t full);

/// Replace entries where `mask` (a constant 0/1 array broadcast against `a`
/// from the right) is nonzero.
Tensor masked_fill(const Tensor& a, const Tensor& mask, double value);

/// out[..., k] = a[..., index[..., k]] along the last axis.
Tensor gather_last(const Tensor& a, const std::vector<std::int64_t>& index, std::int64_t k);
Tensor scatter_last(const Tensor& g, const std::vector<std::int64_t>& index, std::int64_t width);

/// Row lookup into a [rows, D] table; result shape is index_shape + [D].
Tensor take_rows(const Tensor& table, const std::vector<std::int64_t>& index, const Shape& index_shape);
Tensor scatter_rows(const Tensor& g, const std::vector<std::int64_t>& index, std::int64_t rows);

}  // namespace ebt::ops

namespace ebt {

inline Tensor operator+(const Tensor& a, const Tensor& b) { return ops::add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return ops::sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return ops::mul(a, b); }
inline Tensor operator/(const Tensor& a, const Tensor& b) { return ops::div(a, b); }
inline Tensor operator-(const Tensor& a) { return ops::neg(a); }
inline Tensor operator*(const Tensor& a, double s) { return ops::mul_scalar(a, s); }
inline Tensor operator*(double s, const Tensor& a) { return ops::mul_scalar(a, s); }
inline Tensor operator+(const Tensor& a, double s) { return ops::add_scalar(a, s); }

}  // namespace ebt
