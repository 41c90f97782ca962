#include "ebt/autodiff/ops.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <limits>
#include <numeric>

namespace ebt::ops {
namespace {

std::atomic<std::uint64_t> g_matmul_flops{0};

using Vec = std::vector<double>;

int norm_axis(int axis, int rank) {
    const int a = axis < 0 ? axis + rank : axis;
    if (a < 0 || a >= rank) {
        throw ContractViolation("axis " + std::to_string(axis) + " out of range for rank " + std::to_string(rank));
    }
    return a;
}

bool needs(const Tensor& out, std::size_t i) {
    const auto& in = out.node()->inputs;
    return i < in.size() && in[i].defined() && in[i].requires_grad();
}

Shape broadcast_shape(const Shape& a, const Shape& b) {
    const std::size_t r = std::max(a.size(), b.size());
    Shape out(r);
    for (std::size_t i = 0; i < r; ++i) {
        const std::int64_t da = i < r - a.size() ? 1 : a[i - (r - a.size())];
        const std::int64_t db = i < r - b.size() ? 1 : b[i - (r - b.size())];
        if (da != db && da != 1 && db != 1) {
            throw ContractViolation("shape mismatch: " + shape_str(a) + " vs " + shape_str(b));
        }
        out[i] = std::max(da, db);
    }
    return out;
}

// Element strides of `s` aligned to the right of `out`; broadcast axes get 0.
std::vector<std::int64_t> aligned_strides(const Shape& s, const Shape& out) {
    std::vector<std::int64_t> st(out.size(), 0);
    std::int64_t acc = 1;
    for (std::size_t k = 0; k < s.size(); ++k) {
        const std::size_t i = s.size() - 1 - k;
        const std::size_t o = out.size() - 1 - k;
        st[o] = s[i] == 1 ? 0 : acc;
        acc *= s[i];
    }
    return st;
}

bool is_suffix(const Shape& small, const Shape& big) {
    if (small.size() > big.size()) return false;
    return std::equal(small.begin(), small.end(), big.end() - static_cast<std::ptrdiff_t>(small.size()));
}

template <class F>
Tensor binary(const Tensor& a, const Tensor& b, F f, BackwardFn bw, const char* name) {
    const auto& sa = a.shape();
    const auto& sb = b.shape();
    const auto da = a.data();
    const auto db = b.data();
    if (sa == sb) {
        Vec out(da.size());
        for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(da[i], db[i]);
        return Tensor::make_result(sa, std::move(out), {a, b}, std::move(bw), name);
    }
    Shape os = broadcast_shape(sa, sb);
    const auto n = static_cast<std::size_t>(numel(os));
    Vec out(n);
    if (db.size() == 1) {
        for (std::size_t i = 0; i < n; ++i) out[i] = f(da[i], db[0]);
    } else if (da.size() == 1) {
        for (std::size_t i = 0; i < n; ++i) out[i] = f(da[0], db[i]);
    } else if (sa == os && is_suffix(sb, os)) {
        const std::size_t nb = db.size();
        for (std::size_t i = 0; i < n; ++i) out[i] = f(da[i], db[i % nb]);
    } else if (sb == os && is_suffix(sa, os)) {
        const std::size_t na = da.size();
        for (std::size_t i = 0; i < n; ++i) out[i] = f(da[i % na], db[i]);
    } else {
        const auto st_a = aligned_strides(sa, os);
        const auto st_b = aligned_strides(sb, os);
        const std::size_t r = os.size();
        const std::int64_t inner = os[r - 1];
        const std::int64_t ia = st_a[r - 1], ib = st_b[r - 1];
        std::vector<std::int64_t> idx(r, 0);
        std::int64_t off_a = 0, off_b = 0;
        std::size_t o = 0;
        while (o < n) {
            for (std::int64_t j = 0; j < inner; ++j) {
                out[o++] = f(da[static_cast<std::size_t>(off_a + j * ia)], db[static_cast<std::size_t>(off_b + j * ib)]);
            }
            // advance the odometer over all but the last axis
            for (int d = static_cast<int>(r) - 2; d >= 0; --d) {
                ++idx[d];
                off_a += st_a[d];
                off_b += st_b[d];
                if (idx[d] < os[d]) break;
                off_a -= st_a[d] * os[d];
                off_b -= st_b[d] * os[d];
                idx[d] = 0;
            }
        }
    }
    return Tensor::make_result(os, std::move(out), {a, b}, std::move(bw), name);
}

template <class F>
Vec map_data(const Tensor& a, F f) {
    const auto d = a.data();
    Vec out(d.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(d[i]);
    return out;
}

struct AxisSplit {
    std::int64_t outer = 1, extent = 1, inner = 1;
};

AxisSplit split_at(const Shape& s, int axis) {
    AxisSplit r;
    for (int i = 0; i < axis; ++i) r.outer *= s[i];
    r.extent = s[axis];
    for (std::size_t i = axis + 1; i < s.size(); ++i) r.inner *= s[i];
    return r;
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
    return binary(
        a, b, [](double x, double y) { return x + y; },
        [](const Tensor& out, const Tensor& g) -> std::vector<Tensor> {
            const auto& in = out.node()->inputs;
            return {needs(out, 0) ? sum_to(g, in[0].shape()) : Tensor{},
                    needs(out, 1) ? sum_to(g, in[1].shape()) : Tensor{}};
        },
        "add");
}

Tensor sub(const Tensor& a, const Tensor& b) {
    return binary(
        a, b, [](double x, double y) { return x - y; },
        [](const Tensor& out, const Tensor& g) -> std::vector<Tensor> {
            const auto& in = out.node()->inputs;
            return {needs(out, 0) ? sum_to(g, in[0].shape()) : Tensor{},
                    needs(out, 1) ? sum_to(neg(g), in[1].shape()) : Tensor{}};
        },
        "sub");
}

Tensor mul(const Tensor& a, const Tensor& b) {
    return binary(
        a, b, [](double x, double y) { return x * y; },
        [](const Tensor& out, const Tensor& g) -> std::vector<Tensor> {
            const auto& in = out.node()->inputs;
            return {needs(out, 0) ? sum_to(mul(g, in[1]), in[0].shape()) : Tensor{},
                    needs(out, 1) ? sum_to(mul(g, in[0]), in[1].shape()) : Tensor{}};
        },
        "mul");
}

Tensor div(const Tensor& a, const Tensor& b) {
    return binary(
        a, b, [](double x, double y) { return x / y; },
        [](const Tensor& out, const Tensor& g) -> std::vector<Tensor> {
            const auto& in = out.node()->inputs;
            return {needs(out, 0) ? sum_to(div(g, in[1]), in[0].shape()) : Tensor{},
                    needs(out, 1) ? sum_to(neg(div(mul(g, out), in[1])), in[1].shape()) : Tensor{}};
        },
        "div");
}

Tensor neg(const Tensor& a) {
    return Tensor::make_result(
        a.shape(), map_data(a, [](double x) { return -x; }), {a},
        [](const Tensor&, const Tensor& g) -> std::vector<Tensor> { return {neg(g)}; }, "neg");
}

Tensor add_scalar(const Tensor& a, double s) {
    return Tensor::make_result(
        a.shape(), map_data(a, [s](double x) { return x + s; }), {a},
        [](const Tensor&, const Tensor& g) -> std::vector<Tensor> { return {g}; }, "add_scalar");
}

Tensor mul_scalar(const Tensor& a, double s) {
    return Tensor::make_result(
        a.shape(), map_data(a, [s](double x) { return x * s; }), {a},
        [s](const Tensor&, const Tensor& g) -> std::vector<Tensor> { return {mul_scalar(g, s)}; }, "mul_scalar");
}

Tensor exp(const Tensor& a) {
    return Tensor::make_result(
        a.shape(), map_data(a, [](double x) { return std::exp(x); }), {a},
        [](const Tensor& out, const Tensor& g) -> std::vector<Tensor> { return {mul(g, out)}; }, "exp");
}

Tensor log(const Tensor& a) {
    return Tensor::make_result(
        a.shape(), map_data(a, [](double x) { return std::log(x); }), {a},
        [](const Tensor& out, const Tensor& g) -> std::vector<Tensor> { return {div(g, out.node()->inputs[0])}; },
        "log");
}

Tensor sqrt(const Tensor& a) {
    return Tensor::make_result(
        a.shape(), map_data(a, [](double x) { return std::sqrt(x); }), {a},
        [](const Tensor& out, const Tensor& g) -> std::vector<Tensor> { return {div(mul_scalar(g, 0.5), out)}; },
        "sqrt");
}

Tensor sigmoid(const Tensor& a) {
    return Tensor::make_result(
        a.shape(), map_data(a, [](double x) { return 1.0 / (1.0 + std::exp(-x)); }), {a},
        [](const Tensor& out, const Tensor& g) -> std::vector<Tensor> {
            return {mul(g, mul(out, add_scalar(neg(out), 1.0)))};
        },
        "sigmoid");
}

Tensor silu(const Tensor& a) { return mul(a, sigmoid(a)); }

Tensor square(const Tensor& a) {
    return Tensor::make_result(
        a.shape(), map_data(a, [](double x) { return x * x; }), {a},
        [](const Tensor& out, const Tensor& g) -> std::vector<Tensor> {
            return {mul(g, mul_scalar(out.node()->inputs[0], 2.0))};
        },
        "square");
}

Tensor clamp(const Tensor& a, double lo, double hi) {
    EBT_REQUIRE(lo <= hi, "clamp bounds reversed");
    auto pass = Tensor::from_data(a.shape(), map_data(a, [lo, hi](double x) { return (x >= lo && x <= hi) ? 1.0 : 0.0; }));
    return Tensor::make_result(
        a.shape(), map_data(a, [lo, hi](double x) { return std::clamp(x, lo, hi); }), {a},
        [pass](const Tensor&, const Tensor& g) -> std::vector<Tensor> { return {mul(g, pass)}; }, "clamp");
}

Tensor sum(const Tensor& a, int axis, bool keepdim) {
    const int ax = norm_axis(axis, a.rank());
    const auto sp = split_at(a.shape(), ax);
    const auto d = a.data();
    Vec out(static_cast<std::size_t>(sp.outer * sp.inner), 0.0);
    for (std::int64_t o = 0; o < sp.outer; ++o) {
        double* dst = out.data() + o * sp.inner;
        const double* src = d.data() + o * sp.extent * sp.inner;
        for (std::int64_t k = 0; k < sp.extent; ++k) {
            for (std::int64_t i = 0; i < sp.inner; ++i) dst[i] += src[k * sp.inner + i];
        }
    }
    Shape kept = a.shape();
    kept[ax] = 1;
    Shape os = kept;
    if (!keepdim) os.erase(os.begin() + ax);
    Shape in_shape = a.shape();
    return Tensor::make_result(
        os, std::move(out), {a},
        [kept, in_shape](const Tensor&, const Tensor& g) -> std::vector<Tensor> {
            return {broadcast_to(reshape(g, kept), in_shape)};
        },
        "sum");
}

Tensor sum_all(const Tensor& a) {
    const auto d = a.data();
    double s = 0.0;
    for (double v : d) s += v;
    Shape in_shape = a.shape();
    return Tensor::make_result(
        {}, {s}, {a},
        [in_shape](const Tensor&, const Tensor& g) -> std::vector<Tensor> { return {broadcast_to(g, in_shape)}; },
        "sum_all");
}

Tensor mean(const Tensor& a, int axis, bool keepdim) {
    const auto n = a.dim(axis);
    return mul_scalar(sum(a, axis, keepdim), 1.0 / static_cast<double>(n));
}

Tensor mean_all(const Tensor& a) { return mul_scalar(sum_all(a), 1.0 / static_cast<double>(a.numel())); }

Tensor sum_to(const Tensor& a, const Shape& shape) {
    if (a.shape() == shape) return a;
    const Shape& as = a.shape();
    if (broadcast_shape(shape, as) != as) {
        throw ContractViolation("cannot reduce " + shape_str(as) + " to " + shape_str(shape));
    }
    const auto d = a.data();
    Vec out(static_cast<std::size_t>(numel(shape)), 0.0);
    if (out.size() == 1) {
        for (double v : d) out[0] += v;
    } else if (is_suffix(shape, as)) {
        const std::size_t m = out.size();
        for (std::size_t i = 0; i < d.size(); ++i) out[i % m] += d[i];
    } else {
        const auto st = aligned_strides(shape, as);
        const std::size_t r = as.size();
        std::vector<std::int64_t> idx(r, 0);
        std::int64_t off = 0;
        for (std::size_t i = 0; i < d.size(); ++i) {
            out[static_cast<std::size_t>(off)] += d[i];
            for (int k = static_cast<int>(r) - 1; k >= 0; --k) {
                ++idx[k];
                off += st[k];
                if (idx[k] < as[k]) break;
                off -= st[k] * as[k];
                idx[k] = 0;
            }
        }
    }
    Shape in_shape = as;
    return Tensor::make_result(
        shape, std::move(out), {a},
        [in_shape](const Tensor&, const Tensor& g) -> std::vector<Tensor> { return {broadcast_to(g, in_shape)}; },
        "sum_to");
}

Tensor broadcast_to(const Tensor& a, const Shape& shape) {
    if (a.shape() == shape) return a;
    if (broadcast_shape(a.shape(), shape) != shape) {
        throw ContractViolation("cannot broadcast " + shape_str(a.shape()) + " to " + shape_str(shape));
    }
    const auto d = a.data();
    const auto n = static_cast<std::size_t>(numel(shape));
    Vec out(n);
    if (d.size() == 1) {
        std::fill(out.begin(), out.end(), d[0]);
    } else if (is_suffix(a.shape(), shape)) {
        for (std::size_t i = 0; i < n; ++i) out[i] = d[i % d.size()];
    } else {
        const auto st = aligned_strides(a.shape(), shape);
        const std::size_t r = shape.size();
        std::vector<std::int64_t> idx(r, 0);
        std::int64_t off = 0;
        for (std::size_t i = 0; i < n; ++i) {
            out[i] = d[static_cast<std::size_t>(off)];
            for (int k = static_cast<int>(r) - 1; k >= 0; --k) {
                ++idx[k];
                off += st[k];
                if (idx[k] < shape[k]) break;
                off -= st[k] * shape[k];
                idx[k] = 0;
            }
        }
    }
    Shape in_shape = a.shape();
    return Tensor::make_result(
        shape, std::move(out), {a},
        [in_shape](const Tensor&, const Tensor& g) -> std::vector<Tensor> { return {sum_to(g, in_shape)}; },
        "broadcast_to");
}

std::uint64_t matmul_flops() { return g_matmul_flops.load(); }
void reset_matmul_flops() { g_matmul_flops.store(0); }

Tensor matmul(const Tensor& a, const Tensor& b) {
    using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
    using CMap = Eigen::Map<const RowMat>;
    using MMap = Eigen::Map<RowMat>;
    EBT_REQUIRE(a.rank() >= 2 && b.rank() >= 2,
                "matmul needs rank >= 2, got " + shape_str(a.shape()) + " and " + shape_str(b.shape()));
    const auto& sa = a.shape();
    const auto& sb = b.shape();
    const std::int64_t m = sa[sa.size() - 2], k = sa.back();
    const std::int64_t kb = sb[sb.size() - 2], n = sb.back();
    if (k != kb) throw ContractViolation("matmul inner mismatch: " + shape_str(sa) + " vs " + shape_str(sb));
    Shape os = sa;
    os.back() = n;
    Vec out(static_cast<std::size_t>(numel(os)));
    g_matmul_flops.fetch_add(static_cast<std::uint64_t>(2 * (a.numel() / k) * k * n), std::memory_order_relaxed);
    if (b.rank() == 2) {
        const std::int64_t rows = a.numel() / k;
        MMap(out.data(), rows, n).noalias() = CMap(a.data().data(), rows, k) * CMap(b.data().data(), k, n);
    } else {
        EBT_REQUIRE(std::equal(sa.begin(), sa.end() - 2, sb.begin(), sb.end() - 2),
                    "matmul batch mismatch: " + shape_str(sa) + " vs " + shape_str(sb));
        const std::int64_t batch = a.numel() / (m * k);
        for (std::int64_t i = 0; i < batch; ++i) {
            MMap(out.data() + i * m * n, m, n).noalias() =
                CMap(a.data().data() + i * m * k, m, k) * CMap(b.data().data() + i * k * n, k, n);
        }
    }
    return Tensor::make_result(
        os, std::move(out), {a, b},
        [](const Tensor& out, const Tensor& g) -> std::vector<Tensor> {
            const auto& x = out.node()->inputs[0];
            const auto& w = out.node()->inputs[1];
            Tensor ga, gb;
            if (needs(out, 0)) ga = matmul(g, transpose(w));
            if (needs(out, 1)) {
                if (w.rank() == 2) {
                    const auto kk = x.shape().back();
                    const auto nn = g.shape().back();
                    gb = matmul(transpose(reshape(x, {x.numel() / kk, kk})), reshape(g, {g.numel() / nn, nn}));
                } else {
                    gb = matmul(transpose(x), g);
                }
            }
            return {ga, gb};
        },
        "matmul");
}

Tensor transpose(const Tensor& a) {
    const int r = a.rank();
    EBT_REQUIRE(r >= 2, "transpose needs rank >= 2");
    std::vector<int> perm(r);
    std::iota(perm.begin(), perm.end(), 0);
    std::swap(perm[r - 1], perm[r - 2]);
    return permute(a, perm);
}

Tensor permute(const Tensor& a, const std::vector<int>& perm) {
    const int r = a.rank();
    EBT_REQUIRE(static_cast<int>(perm.size()) == r, "permute rank mismatch");
    const auto& s = a.shape();
    Shape os(r);
    std::vector<std::int64_t> in_strides(r);
    std::int64_t acc = 1;
    for (int i = r - 1; i >= 0; --i) {
        in_strides[i] = acc;
        acc *= s[i];
    }
    std::vector<std::int64_t> st(r);
    std::vector<int> inverse(r);
    for (int i = 0; i < r; ++i) {
        os[i] = s[perm[i]];
        st[i] = in_strides[perm[i]];
        inverse[perm[i]] = i;
    }
    const auto d = a.data();
    Vec out(d.size());
    std::vector<std::int64_t> idx(r, 0);
    std::int64_t off = 0;
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] = d[static_cast<std::size_t>(off)];
        for (int k = r - 1; k >= 0; --k) {
            ++idx[k];
            off += st[k];
            if (idx[k] < os[k]) break;
            off -= st[k] * os[k];
            idx[k] = 0;
        }
    }
    return Tensor::make_result(
        os, std::move(out), {a},
        [inverse](const Tensor&, const Tensor& g) -> std::vector<Tensor> { return {permute(g, inverse)}; },
        "permute");
}

Tensor reshape(const Tensor& a, Shape shape) {
    if (numel(shape) != a.numel()) {
        throw ContractViolation("cannot reshape " + shape_str(a.shape()) + " to " + shape_str(shape));
    }
    const auto d = a.data();
    Shape in_shape = a.shape();
    return Tensor::make_result(
        std::move(shape), Vec(d.begin(), d.end()), {a},
        [in_shape](const Tensor&, const Tensor& g) -> std::vector<Tensor> { return {reshape(g, in_shape)}; },
        "reshape");
}

Tensor softmax(const Tensor& a) {
    const auto d = a.data();
    const std::int64_t w = a.shape().back();
    Vec out(d.size());
    for (std::size_t row = 0; row < d.size(); row += static_cast<std::size_t>(w)) {
        double mx = -std::numeric_limits<double>::infinity();
        for (std::int64_t j = 0; j < w; ++j) mx = std::max(mx, d[row + j]);
        double z = 0.0;
        for (std::int64_t j = 0; j < w; ++j) {
            out[row + j] = std::exp(d[row + j] - mx);
            z += out[row + j];
        }
        for (std::int64_t j = 0; j < w; ++j) out[row + j] /= z;
    }
    return Tensor::make_result(
        a.shape(), std::move(out), {a},
        [](const Tensor& out, const Tensor& g) -> std::vector<Tensor> {
            return {mul(out, sub(g, sum(mul(g, out), -1, true)))};
        },
        "softmax");
}

Tensor log_softmax(const Tensor& a) {
    const auto d = a.data();
    const std::int64_t w = a.shape().back();
    Shape ms = a.shape();
    ms.back() = 1;
    Vec mx(d.size() / static_cast<std::size_t>(w));
    for (std::size_t r = 0; r < mx.size(); ++r) {
        mx[r] = *std::max_element(d.begin() + r * w, d.begin() + (r + 1) * w);
    }
    const auto shift = Tensor::from_data(ms, std::move(mx));
    const auto centered = sub(a, shift);
    return sub(centered, log(sum(exp(centered), -1, true)));
}

Tensor concat(const std::vector<Tensor>& parts, int axis) {
    EBT_REQUIRE(!parts.empty(), "concat of nothing");
    const int r = parts[0].rank();
    const int ax = norm_axis(axis, r);
    Shape os = parts[0].shape();
    os[ax] = 0;
    std::vector<std::int64_t> extents;
    for (const auto& p : parts) {
        Shape s = p.shape();
        EBT_REQUIRE(p.rank() == r, "concat rank mismatch: " + shape_str(parts[0].shape()) + " vs " + shape_str(s));
        for (int i = 0; i < r; ++i) {
            if (i != ax && s[i] != parts[0].shape()[i]) {
                throw ContractViolation("concat shape mismatch: " + shape_str(parts[0].shape()) + " vs " +
                                        shape_str(s));
            }
        }
        extents.push_back(s[ax]);
        os[ax] += s[ax];
    }
    const auto sp = split_at(os, ax);
    Vec out(static_cast<std::size_t>(numel(os)));
    std::int64_t at = 0;
    for (std::size_t p = 0; p < parts.size(); ++p) {
        const auto d = parts[p].data();
        const std::int64_t chunk = extents[p] * sp.inner;
        for (std::int64_t o = 0; o < sp.outer; ++o) {
            std::copy_n(d.data() + o * chunk, chunk, out.data() + o * sp.extent * sp.inner + at * sp.inner);
        }
        at += extents[p];
    }
    return Tensor::make_result(
        os, std::move(out), parts,
        [ax, extents](const Tensor& out, const Tensor& g) -> std::vector<Tensor> {
            std::vector<Tensor> gs;
            std::int64_t begin = 0;
            for (std::size_t p = 0; p < extents.size(); ++p) {
                gs.push_back(needs(out, p) ? slice(g, ax, begin, begin + extents[p]) : Tensor{});
                begin += extents[p];
            }
            return gs;
        },
        "concat");
}

Tensor slice(const Tensor& a, int axis, std::int64_t begin, std::int64_t end) {
    const int ax = norm_axis(axis, a.rank());
    const auto full = a.shape()[ax];
    EBT_REQUIRE(0 <= begin && begin <= end && end <= full,
                "slice [" + std::to_string(begin) + "," + std::to_string(end) + ") out of range for " +
                    shape_str(a.shape()));
    const auto sp = split_at(a.shape(), ax);
    Shape os = a.shape();
    os[ax] = end - begin;
    const auto d = a.data();
    Vec out(static_cast<std::size_t>(numel(os)));
    const std::int64_t chunk = (end - begin) * sp.inner;
    for (std::int64_t o = 0; o < sp.outer; ++o) {
        std::copy_n(d.data() + o * sp.extent * sp.inner + begin * sp.inner, chunk, out.data() + o * chunk);
    }
    return Tensor::make_result(
        os, std::move(out), {a},
        [ax, begin, full](const Tensor&, const Tensor& g) -> std::vector<Tensor> {
            return {pad_into(g, ax, begin, full)};
        },
        "slice");
}

Tensor pad_into(const Tensor& a, int axis, std::int64_t begin, std::int64_t full) {
    const int ax = norm_axis(axis, a.rank());
    const auto len = a.shape()[ax];
    EBT_REQUIRE(begin >= 0 && begin + len <= full, "pad_into range out of bounds");
    Shape os = a.shape();
    os[ax] = full;
    const auto sp = split_at(os, ax);
    const auto d = a.data();
    Vec out(static_cast<std::size_t>(numel(os)), 0.0);
    const std::int64_t chunk = len * sp.inner;
    for (std::int64_t o = 0; o < sp.outer; ++o) {
        std::copy_n(d.data() + o * chunk, chunk, out.data() + o * full * sp.inner + begin * sp.inner);
    }
    return Tensor::make_result(
        os, std::move(out), {a},
        [ax, begin, len](const Tensor&, const Tensor& g) -> std::vector<Tensor> {
            return {slice(g, ax, begin, begin + len)};
        },
        "pad_into");
}

Tensor masked_fill(const Tensor& a, const Tensor& mask, double value) {
    EBT_REQUIRE(!mask.requires_grad(), "masked_fill mask must be a constant");
    EBT_REQUIRE(is_suffix(mask.shape(), a.shape()) || mask.shape() == a.shape(),
                "mask shape " + shape_str(mask.shape()) + " does not broadcast onto " + shape_str(a.shape()));
    const auto d = a.data();
    const auto m = mask.data();
    Vec out(d.size());
    const std::size_t nm = m.size();
    for (std::size_t i = 0; i < d.size(); ++i) out[i] = m[i % nm] != 0.0 ? value : d[i];
    return Tensor::make_result(
        a.shape(), std::move(out), {a},
        [mask](const Tensor&, const Tensor& g) -> std::vector<Tensor> { return {masked_fill(g, mask, 0.0)}; },
        "masked_fill");
}

Tensor gather_last(const Tensor& a, const std::vector<std::int64_t>& index, std::int64_t k) {
    const std::int64_t w = a.shape().back();
    const std::int64_t rows = a.numel() / w;
    EBT_REQUIRE(static_cast<std::int64_t>(index.size()) == rows * k, "gather index length mismatch");
    const auto d = a.data();
    Vec out(index.size());
    for (std::int64_t r = 0; r < rows; ++r) {
        for (std::int64_t j = 0; j < k; ++j) {
            const auto ix = index[r * k + j];
            EBT_REQUIRE(ix >= 0 && ix < w, "gather index " + std::to_string(ix) + " out of range " + std::to_string(w));
            out[r * k + j] = d[r * w + ix];
        }
    }
    Shape os = a.shape();
    os.back() = k;
    return Tensor::make_result(
        os, std::move(out), {a},
        [index, w](const Tensor&, const Tensor& g) -> std::vector<Tensor> { return {scatter_last(g, index, w)}; },
        "gather_last");
}

Tensor scatter_last(const Tensor& g, const std::vector<std::int64_t>& index, std::int64_t width) {
    const std::int64_t k = g.shape().back();
    const std::int64_t rows = g.numel() / k;
    const auto d = g.data();
    Shape os = g.shape();
    os.back() = width;
    Vec out(static_cast<std::size_t>(rows * width), 0.0);
    for (std::int64_t r = 0; r < rows; ++r) {
        for (std::int64_t j = 0; j < k; ++j) out[r * width + index[r * k + j]] += d[r * k + j];
    }
    return Tensor::make_result(
        os, std::move(out), {g},
        [index, k](const Tensor&, const Tensor& gg) -> std::vector<Tensor> { return {gather_last(gg, index, k)}; },
        "scatter_last");
}

Tensor take_rows(const Tensor& table, const std::vector<std::int64_t>& index, const Shape& index_shape) {
    EBT_REQUIRE(table.rank() == 2, "take_rows expects a [rows, D] table");
    EBT_REQUIRE(static_cast<std::int64_t>(index.size()) == numel(index_shape), "take_rows index shape mismatch");
    const std::int64_t rows = table.dim(0), width = table.dim(1);
    const auto d = table.data();
    Vec out(index.size() * static_cast<std::size_t>(width));
    for (std::size_t i = 0; i < index.size(); ++i) {
        EBT_REQUIRE(index[i] >= 0 && index[i] < rows,
                    "row index " + std::to_string(index[i]) + " out of range " + std::to_string(rows));
        std::copy_n(d.data() + index[i] * width, width, out.data() + i * width);
    }
    Shape os = index_shape;
    os.push_back(width);
    return Tensor::make_result(
        os, std::move(out), {table},
        [index, rows](const Tensor&, const Tensor& g) -> std::vector<Tensor> {
            return {scatter_rows(g, index, rows)};
        },
        "take_rows");
}

Tensor scatter_rows(const Tensor& g, const std::vector<std::int64_t>& index, std::int64_t rows) {
    const std::int64_t width = g.shape().back();
    const auto d = g.data();
    Vec out(static_cast<std::size_t>(rows * width), 0.0);
    for (std::size_t i = 0; i < index.size(); ++i) {
        for (std::int64_t j = 0; j < width; ++j) out[index[i] * width + j] += d[i * width + j];
    }
    Shape index_shape(g.shape().begin(), g.shape().end() - 1);
    return Tensor::make_result(
        {rows, width}, std::move(out), {g},
        [index, index_shape](const Tensor&, const Tensor& gg) -> std::vector<Tensor> {
            return {take_rows(gg, index, index_shape)};
        },
        "scatter_rows");
}

}  // namespace ebt::ops
