#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

namespace clsr {

using Shape = std::vector<int64_t>;

int64_t numel_of(const Shape& shape);
std::string shape_str(const Shape& shape);

struct TensorNode;

// Dense 64-bit float tensor with reverse-mode autodiff.
//
// Tensor is a cheap value-semantic handle on a shared node. Ops (see ops.hpp)
// record parent links and a backward rule on the output node; backward()
// replays them in reverse execution order. Gradient buffers exist only on
// nodes with requires_grad (leaf parameters and anything derived from them)
// and accumulate by summation: call zero_grad() between optimizer steps.
// The graph stays intact after backward(), so a second backward() on the same
// loss accumulates a second copy of every gradient.
class Tensor {
  public:
    Tensor();  // empty handle
    explicit Tensor(Shape shape, double fill = 0.0, bool requires_grad = false);
    Tensor(Shape shape, std::vector<double> values, bool requires_grad = false);

    static Tensor scalar(double v, bool requires_grad = false);

    bool defined() const { return node_ != nullptr; }
    const Shape& shape() const;
    int64_t numel() const;
    bool is_scalar() const { return numel() == 1; }

    std::vector<double>& values();
    const std::vector<double>& values() const;
    double value_at(int64_t i) const { return values()[i]; }
    double scalar_value() const;

    bool requires_grad() const;
    void set_requires_grad(bool rg);

    // Gradient accumulator; allocated lazily, only for requires_grad tensors.
    bool has_grad() const;
    std::vector<double>& grad();              // allocates zeros on first touch
    const std::vector<double>& grad() const;  // throws if absent
    void zero_grad();

    // Reverse-mode pass from a scalar loss. Seeds d(loss)/d(loss)=1 and
    // distributes gradients to every requires_grad tensor reachable in the
    // recorded graph. Throws ContractError if the loss is not scalar.
    void backward() const;

    TensorNode* node() const { return node_.get(); }
    const std::shared_ptr<TensorNode>& node_ptr() const { return node_; }

  private:
    std::shared_ptr<TensorNode> node_;
};

struct TensorNode {
    Shape shape;
    std::vector<double> values;
    bool requires_grad = false;
    std::vector<double> grad;  // allocated iff requires_grad and touched
    uint64_t seq = 0;          // creation order; ancestors always have lower seq

    // Recorded op: parents plus the rule that scatters this node's grad into them.
    std::vector<std::shared_ptr<TensorNode>> parents;
    std::function<void(TensorNode&)> backward_fn;

    std::vector<double>& grad_buffer();  // lazy zero-init
};

// Verifies every finite value invariant (no NaN/Inf); used by tests and the
// training loop's divergence guard.
bool all_finite(const Tensor& t);

struct GradCheckEntry {
    std::string name;
    int64_t index = 0;
    double analytic = 0.0;
    double numeric = 0.0;
    double rel_error = 0.0;
};

struct GradCheckReport {
    double max_rel_error = 0.0;
    GradCheckEntry worst;
    int64_t entries_checked = 0;
};

// Central finite differences against the autodiff gradient.
//
// `loss_fn` must rebuild the forward graph from the current parameter values
// and return the scalar loss tensor; it must be deterministic (checked by a
// double evaluation). For every entry of every parameter: numeric gradient
// (f(x+eps)-f(x-eps))/(2 eps), relative error |a-n|/max(|a|,|n|,abs_floor).
//
// `abs_floor` grades entries whose gradient magnitude sits below it on an
// absolute scale instead of a relative one. The default keeps the comparison
// fully relative; deep compositions need a floor around 1e-6 because central
// differences cannot resolve relative accuracy for near-zero components.
GradCheckReport finite_difference_check(const std::function<Tensor()>& loss_fn,
                                        const std::vector<std::pair<std::string, Tensor>>& params,
                                        double eps = 1e-5, double abs_floor = 1e-12);

}  // namespace clsr
