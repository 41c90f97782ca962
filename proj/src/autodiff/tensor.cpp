#include "ebt/autodiff/tensor.hpp"

#include <atomic>
#include <sstream>

namespace ebt {
namespace {

std::atomic<Precision> g_precision{Precision::F64};
thread_local bool t_grad_enabled = true;

void round_to_storage(std::vector<double>& data) {
    if (g_precision.load(std::memory_order_relaxed) == Precision::F32) {
        for (auto& v : data) v = static_cast<double>(static_cast<float>(v));
    }
}

}  // namespace

std::int64_t numel(const Shape& shape) {
    std::int64_t n = 1;
    for (auto e : shape) n *= e;
    return n;
}

std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
    os << ']';
    return os.str();
}

void set_precision(Precision p) { g_precision.store(p); }
Precision precision() { return g_precision.load(); }

NoGradGuard::NoGradGuard() : previous_(t_grad_enabled) { t_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { t_grad_enabled = previous_; }
bool grad_mode_enabled() { return t_grad_enabled; }

Tensor Tensor::from_data(Shape shape, std::vector<double> data, bool requires_grad) {
    if (static_cast<std::int64_t>(data.size()) != ebt::numel(shape)) {
        throw ContractViolation("data length " + std::to_string(data.size()) + " does not match shape " +
                                shape_str(shape));
    }
    round_to_storage(data);
    auto node = std::make_shared<Node>();
    node->shape = std::move(shape);
    node->storage = std::make_shared<const std::vector<double>>(std::move(data));
    node->requires_grad = requires_grad;
    return Tensor(std::move(node));
}

Tensor Tensor::scalar(double v, bool requires_grad) { return from_data({}, {v}, requires_grad); }

Tensor Tensor::zeros(const Shape& shape) { return full(shape, 0.0); }
Tensor Tensor::ones(const Shape& shape) { return full(shape, 1.0); }
Tensor Tensor::full(const Shape& shape, double v) {
    return from_data(shape, std::vector<double>(static_cast<std::size_t>(ebt::numel(shape)), v));
}

std::int64_t Tensor::dim(int axis) const {
    const int r = rank();
    if (axis < 0) axis += r;
    EBT_REQUIRE(axis >= 0 && axis < r, "axis out of range for shape " + shape_str(shape()));
    return node_->shape[static_cast<std::size_t>(axis)];
}

double Tensor::item() const {
    EBT_REQUIRE(numel() == 1, "item() on non-scalar of shape " + shape_str(shape()));
    return (*node_->storage)[0];
}

double Tensor::at(std::initializer_list<std::int64_t> index) const {
    EBT_REQUIRE(static_cast<int>(index.size()) == rank(), "index rank mismatch for " + shape_str(shape()));
    std::int64_t flat = 0;
    std::size_t d = 0;
    for (auto i : index) {
        EBT_REQUIRE(i >= 0 && i < node_->shape[d], "index out of range for " + shape_str(shape()));
        flat = flat * node_->shape[d] + i;
        ++d;
    }
    return (*node_->storage)[static_cast<std::size_t>(flat)];
}

Tensor Tensor::detach() const {
    auto node = std::make_shared<Node>();
    node->shape = node_->shape;
    node->storage = node_->storage;
    return Tensor(std::move(node));
}

Tensor Tensor::detach_requires_grad() const {
    auto t = detach();
    t.node_->requires_grad = true;
    return t;
}

Tensor Tensor::make_result(Shape shape, std::vector<double> data, std::vector<Tensor> inputs, BackwardFn backward,
                           const char* op) {
    round_to_storage(data);
    auto node = std::make_shared<Node>();
    node->shape = std::move(shape);
    node->storage = std::make_shared<const std::vector<double>>(std::move(data));
    node->op = op;
    if (t_grad_enabled) {
        bool any = false;
        for (const auto& in : inputs) any = any || (in.defined() && in.requires_grad());
        if (any) {
            node->requires_grad = true;
            node->inputs = std::move(inputs);
            node->backward = std::move(backward);
        }
    }
    return Tensor(std::move(node));
}

}  // namespace ebt
