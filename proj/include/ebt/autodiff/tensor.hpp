#pragma once

// Reverse-mode autodiff over dense row-major arrays.
//
// Every backward rule is written in terms of the same differentiable ops the
// forward pass uses, so gradients produced with create_graph=true are ordinary
// graph values and can be differentiated again.

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "ebt/errors.hpp"

namespace ebt {

using Shape = std::vector<std::int64_t>;

std::int64_t numel(const Shape& shape);
std::string shape_str(const Shape& shape);

enum class Precision { F64, F32 };

/// Global storage precision. In F32 mode every op result is rounded to the
/// nearest float, emulating 32-bit storage with 64-bit arithmetic.
void set_precision(Precision p);
Precision precision();

/// Disables graph recording on the current thread for its lifetime.
class NoGradGuard {
public:
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool previous_;
};

bool grad_mode_enabled();

class Tensor;

// Maps the output adjoint to one adjoint per input. Undefined entries mean
// "no contribution". `out` is the tensor the rule belongs to.
using BackwardFn = std::function<std::vector<Tensor>(const Tensor& out, const Tensor& grad)>;

struct Node {
    Shape shape;
    std::shared_ptr<const std::vector<double>> storage;
    bool requires_grad = false;
    std::vector<Tensor> inputs;
    BackwardFn backward;
    const char* op = "leaf";
};

class Tensor {
public:
    Tensor() = default;

    static Tensor from_data(Shape shape, std::vector<double> data, bool requires_grad = false);
    static Tensor scalar(double v, bool requires_grad = false);
    static Tensor zeros(const Shape& shape);
    static Tensor ones(const Shape& shape);
    static Tensor full(const Shape& shape, double v);

    bool defined() const { return node_ != nullptr; }
    const Shape& shape() const { return node_->shape; }
    std::int64_t dim(int axis) const;
    int rank() const { return static_cast<int>(node_->shape.size()); }
    std::int64_t numel() const { return static_cast<std::int64_t>(node_->storage->size()); }
    std::span<const double> data() const { return *node_->storage; }
    double item() const;
    double at(std::initializer_list<std::int64_t> index) const;

    bool requires_grad() const { return node_->requires_grad; }
    bool is_leaf() const { return node_->inputs.empty(); }
    const char* op_name() const { return node_->op; }

    /// Same data, no history.
    Tensor detach() const;
    /// Same data as a fresh leaf that records gradients.
    Tensor detach_requires_grad() const;

    const Node* node() const { return node_.get(); }
    const std::shared_ptr<Node>& node_ptr() const { return node_; }

    // Builds an op result. When grad mode is on and any input requires grad,
    // the result records `inputs` and `backward`.
    static Tensor make_result(Shape shape, std::vector<double> data, std::vector<Tensor> inputs,
                              BackwardFn backward, const char* op);

private:
    explicit Tensor(std::shared_ptr<Node> node) : node_(std::move(node)) {}
    std::shared_ptr<Node> node_;
};

}  // namespace ebt
