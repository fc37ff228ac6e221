#include "clsr/tensor.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <sstream>
#include <unordered_set>

#include "clsr/error.hpp"

namespace clsr {

namespace {
std::atomic<uint64_t> g_next_seq{1};
}

int64_t numel_of(const Shape& shape) {
    int64_t n = 1;
    for (int64_t d : shape) n *= d;
    return n;
}

std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << "[";
    for (size_t i = 0; i < shape.size(); ++i) {
        if (i) os << "x";
        os << shape[i];
    }
    os << "]";
    return os.str();
}

std::vector<double>& TensorNode::grad_buffer() {
    if (grad.empty()) grad.assign(values.size(), 0.0);
    return grad;
}

Tensor::Tensor() = default;

Tensor::Tensor(Shape shape, double fill, bool requires_grad) {
    for (int64_t d : shape) {
        if (d <= 0) throw DimensionError("non-positive extent in shape " + shape_str(shape));
    }
    node_ = std::make_shared<TensorNode>();
    node_->shape = std::move(shape);
    node_->values.assign(static_cast<size_t>(numel_of(node_->shape)), fill);
    node_->requires_grad = requires_grad;
    node_->seq = g_next_seq.fetch_add(1, std::memory_order_relaxed);
}

Tensor::Tensor(Shape shape, std::vector<double> values, bool requires_grad) {
    for (int64_t d : shape) {
        if (d <= 0) throw DimensionError("non-positive extent in shape " + shape_str(shape));
    }
    if (numel_of(shape) != static_cast<int64_t>(values.size())) {
        throw DimensionError("shape " + shape_str(shape) + " does not match " +
                             std::to_string(values.size()) + " values");
    }
    node_ = std::make_shared<TensorNode>();
    node_->shape = std::move(shape);
    node_->values = std::move(values);
    node_->requires_grad = requires_grad;
    node_->seq = g_next_seq.fetch_add(1, std::memory_order_relaxed);
}

Tensor Tensor::scalar(double v, bool requires_grad) {
    return Tensor(Shape{1}, std::vector<double>{v}, requires_grad);
}

const Shape& Tensor::shape() const { return node_->shape; }
int64_t Tensor::numel() const { return static_cast<int64_t>(node_->values.size()); }

std::vector<double>& Tensor::values() { return node_->values; }
const std::vector<double>& Tensor::values() const { return node_->values; }

double Tensor::scalar_value() const {
    if (!is_scalar()) throw ContractError("scalar_value on tensor of shape " + shape_str(shape()));
    return node_->values[0];
}

bool Tensor::requires_grad() const { return node_->requires_grad; }

void Tensor::set_requires_grad(bool rg) {
    node_->requires_grad = rg;
    if (!rg) node_->grad.clear();
}

bool Tensor::has_grad() const { return !node_->grad.empty(); }

std::vector<double>& Tensor::grad() {
    if (!node_->requires_grad) throw ContractError("grad on tensor without requires_grad");
    return node_->grad_buffer();
}

const std::vector<double>& Tensor::grad() const {
    if (node_->grad.empty()) throw ContractError("grad accessed before backward");
    return node_->grad;
}

void Tensor::zero_grad() {
    if (!node_->grad.empty()) std::fill(node_->grad.begin(), node_->grad.end(), 0.0);
}

void Tensor::backward() const {
    if (!defined()) throw ContractError("backward on empty tensor");
    if (!is_scalar()) throw ContractError("backward requires a scalar loss, got " + shape_str(shape()));
    // A loss that requires no grad has no trainable ancestors; every gradient
    // is zero and no buffer should appear.
    if (!node_->requires_grad) return;

    // Collect nodes reachable from the loss. Creation order (seq) is a
    // topological order, so a sort replaces explicit graph bookkeeping.
    std::vector<TensorNode*> nodes;
    std::unordered_set<TensorNode*> seen;
    std::vector<TensorNode*> stack{node_.get()};
    seen.insert(node_.get());
    while (!stack.empty()) {
        TensorNode* n = stack.back();
        stack.pop_back();
        nodes.push_back(n);
        for (const auto& p : n->parents) {
            if (seen.insert(p.get()).second) stack.push_back(p.get());
        }
    }
    std::sort(nodes.begin(), nodes.end(),
              [](const TensorNode* a, const TensorNode* b) { return a->seq > b->seq; });

    // Interior gradients are scratch state for this pass; only leaves
    // accumulate across backward calls.
    for (TensorNode* n : nodes) {
        if (!n->parents.empty() && !n->grad.empty()) std::fill(n->grad.begin(), n->grad.end(), 0.0);
    }

    node_->grad_buffer()[0] += 1.0;
    for (TensorNode* n : nodes) {
        if (n->backward_fn && !n->grad.empty()) n->backward_fn(*n);
    }
}

bool all_finite(const Tensor& t) {
    for (double v : t.values()) {
        if (!std::isfinite(v)) return false;
    }
    return true;
}

GradCheckReport finite_difference_check(const std::function<Tensor()>& loss_fn,
                                        const std::vector<std::pair<std::string, Tensor>>& params,
                                        double eps, double abs_floor) {
    if (eps < 1e-7 || eps > 1e-3) {
        throw ParameterError("finite-difference eps must lie in [1e-7, 1e-3]");
    }
    if (abs_floor < 1e-12 || abs_floor > 1e-3) {
        throw ParameterError("finite-difference abs_floor must lie in [1e-12, 1e-3]");
    }

    const double f0 = loss_fn().scalar_value();
    const double f0_again = loss_fn().scalar_value();
    if (f0 != f0_again) {
        throw ContractError("loss function is not deterministic under fixed parameters");
    }

    Tensor loss = loss_fn();
    for (const auto& [name, p] : params) {
        (void)name;
        const_cast<Tensor&>(p).zero_grad();
    }
    loss.backward();

    std::vector<std::vector<double>> analytic;
    analytic.reserve(params.size());
    for (const auto& [name, p] : params) {
        if (!p.requires_grad()) throw ContractError("parameter " + name + " has requires_grad=false");
        analytic.push_back(p.has_grad() ? p.grad() : std::vector<double>(p.numel(), 0.0));
    }

    GradCheckReport report;
    for (size_t pi = 0; pi < params.size(); ++pi) {
        Tensor p = params[pi].second;
        for (int64_t i = 0; i < p.numel(); ++i) {
            const double saved = p.values()[i];
            p.values()[i] = saved + eps;
            const double fp = loss_fn().scalar_value();
            p.values()[i] = saved - eps;
            const double fm = loss_fn().scalar_value();
            p.values()[i] = saved;

            const double numeric = (fp - fm) / (2.0 * eps);
            const double a = analytic[pi][i];
            const double rel =
                std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), abs_floor});
            ++report.entries_checked;
            if (rel > report.max_rel_error) {
                report.max_rel_error = rel;
                report.worst = {params[pi].first, i, a, numeric, rel};
            }
        }
    }
    return report;
}

}  // namespace clsr
