#include "ebt/autodiff/grad.hpp"

#include <cmath>
#include <optional>
#include <unordered_map>
#include <unordered_set>

#include "ebt/autodiff/ops.hpp"

namespace ebt {

std::vector<Tensor> grad(const Tensor& output, std::span<const Tensor> wrt, bool create_graph) {
    EBT_REQUIRE(output.defined() && output.numel() == 1,
                "grad() needs a scalar output, got " + (output.defined() ? shape_str(output.shape()) : "undefined"));

    std::unordered_set<const Node*> targets;
    for (const auto& w : wrt) targets.insert(w.node());

    // Post-order over the recorded graph, keeping only nodes with a path to a target.
    std::vector<const Node*> order;
    std::unordered_map<const Node*, bool> leads;
    {
        struct Frame {
            const Node* node;
            std::size_t next;
        };
        std::vector<Frame> stack;
        if (output.requires_grad() || targets.count(output.node())) stack.push_back({output.node(), 0});
        leads[output.node()] = false;
        while (!stack.empty()) {
            auto& f = stack.back();
            if (f.next < f.node->inputs.size()) {
                const auto& in = f.node->inputs[f.next++];
                if (!in.defined() || !in.requires_grad()) continue;
                if (leads.emplace(in.node(), false).second) stack.push_back({in.node(), 0});
                continue;
            }
            bool l = targets.count(f.node) > 0;
            for (const auto& in : f.node->inputs) {
                if (in.defined() && in.requires_grad()) l = l || leads[in.node()];
            }
            leads[f.node] = l;
            order.push_back(f.node);
            stack.pop_back();
        }
    }

    std::optional<NoGradGuard> guard;
    if (!create_graph) guard.emplace();

    std::unordered_map<const Node*, Tensor> adjoint;
    std::unordered_map<const Node*, Tensor> handles;
    handles[output.node()] = output;
    adjoint[output.node()] = Tensor::ones(output.shape());

    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        const Node* node = *it;
        auto found = adjoint.find(node);
        if (found == adjoint.end() || !leads[node] || node->inputs.empty()) continue;
        const Tensor& self = handles.at(node);
        auto in_grads = node->backward(self, found->second);
        for (std::size_t i = 0; i < node->inputs.size(); ++i) {
            const auto& in = node->inputs[i];
            if (!in.defined() || !in.requires_grad() || !leads[in.node()]) continue;
            if (i >= in_grads.size() || !in_grads[i].defined()) continue;
            handles.emplace(in.node(), in);
            auto [slot, fresh] = adjoint.emplace(in.node(), in_grads[i]);
            if (!fresh) slot->second = ops::add(slot->second, in_grads[i]);
        }
    }

    std::vector<Tensor> out;
    out.reserve(wrt.size());
    for (const auto& w : wrt) {
        auto found = adjoint.find(w.node());
        if (found == adjoint.end()) {
            out.push_back(Tensor::zeros(w.shape()));
        } else {
            out.push_back(create_graph ? found->second : found->second.detach());
        }
    }
    return out;
}

Tensor grad(const Tensor& output, const Tensor& wrt, bool create_graph) {
    return grad(output, std::span<const Tensor>(&wrt, 1), create_graph)[0];
}

double finite_difference_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x, double eps) {
    EBT_REQUIRE(eps > 0.0, "finite_difference_check needs eps > 0");
    EBT_REQUIRE(precision() == Precision::F64, "finite_difference_check runs in 64-bit mode only");
    const Tensor probe = x.detach_requires_grad();
    const Tensor value = f(probe);
    if (!std::isfinite(value.item())) throw ContractViolation("non-finite function value at the unperturbed input");
    const Tensor analytic = grad(value, probe, false);
    for (std::size_t i = 0; i < analytic.data().size(); ++i) {
        if (!std::isfinite(analytic.data()[i])) {
            throw ContractViolation("non-finite analytic gradient at element " + std::to_string(i));
        }
    }

    const auto base = x.data();
    double worst = 0.0;
    for (std::size_t i = 0; i < base.size(); ++i) {
        std::vector<double> plus(base.begin(), base.end());
        std::vector<double> minus(base.begin(), base.end());
        plus[i] += eps;
        minus[i] -= eps;
        const double fp = f(Tensor::from_data(x.shape(), std::move(plus))).item();
        const double fm = f(Tensor::from_data(x.shape(), std::move(minus))).item();
        if (!std::isfinite(fp) || !std::isfinite(fm)) {
            throw ContractViolation("non-finite function value while perturbing element " + std::to_string(i));
        }
        const double numeric = (fp - fm) / (2.0 * eps);
        const double a = analytic.data()[i];
        const double denom = std::max({std::abs(a), std::abs(numeric), 1e-8});
        worst = std::max(worst, std::abs(a - numeric) / denom);
    }
    return worst;
}

std::int64_t Rng::uniform_int(std::int64_t lo, std::int64_t hi) {
    std::uniform_int_distribution<std::int64_t> dist(lo, hi);
    return dist(engine_);
}

Tensor Rng::normal_tensor(const Shape& shape, double stddev) {
    std::vector<double> v(static_cast<std::size_t>(numel(shape)));
    for (auto& e : v) e = stddev * normal();
    return Tensor::from_data(shape, std::move(v));
}

std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream) {
    if (stream == 0) return seed;
    // splitmix64 finalizer
    std::uint64_t z = seed + 0x9E3779B97F4A7C15ULL * stream;
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
}

}  // namespace ebt
