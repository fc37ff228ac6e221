// Training losses: label-smoothed cross entropy, the gate budget penalty,
// and distribution-matching terms (JS / KL) for distillation. Distribution
// losses are computed at a temperature that divides the logits; no
// additional temperature rescaling is applied to the loss value.
#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "clsr/model.hpp"
#include "clsr/tensor.hpp"

namespace clsr {

// Mean over counted rows of
//   -( (1 - smoothing) * log p[label] + (smoothing / V) * sum_v log p[v] ).
// Throws ContractError when every row is excluded.
Tensor cross_entropy_smoothed(const Tensor& logits, const std::vector<int>& labels,
                              const std::vector<uint8_t>& counted, double smoothing);

// | (sum of counted gate activations / number of counted activations) - budget |.
// Tokens with counted == 0 (pads, skipped layers) leave both the numerator
// and the denominator. With nothing counted at all the term vanishes.
Tensor gate_budget_loss(const GateRecord& gates, double budget);

// Value-space mean of counted gate activations; -1 when nothing is counted.
double gate_mean_value(const GateRecord& gates);

// Distillation terms over matching [N, V] logits, averaged over counted rows.
// The teacher side is detached: no gradient reaches its inputs.
// kl: KL(teacher || student). js: symmetric, 0.5 KL(p||m) + 0.5 KL(q||m)
// with m the midpoint.
Tensor kl_loss(const Tensor& teacher_logits, const Tensor& student_logits,
               const std::vector<uint8_t>& counted, double temperature);
Tensor js_loss(const Tensor& teacher_logits, const Tensor& student_logits,
               const std::vector<uint8_t>& counted, double temperature);

// Value-space divergences between explicit probability vectors, with the
// 0 log 0 = 0 convention. kl_value returns +inf where absolute continuity
// fails; js_value is always finite and bounded by ln 2.
double kl_value(const std::vector<double>& p, const std::vector<double>& q);
double js_value(const std::vector<double>& p, const std::vector<double>& q);

struct KdConfig {
    std::string kind = "js";  // "js" or "kl"
    double alpha = 0.0;
    double temperature = 1.0;
    void validate() const;
};

struct LossBreakdown {
    Tensor total;
    double ce = 0.0;
    double gate = 0.0;
    double kd = 0.0;
};

// total = ce + gate_budget (when gates given) + alpha * kd (when a teacher is
// given and alpha is nonzero). With alpha == 0 the distillation term is not
// built at all, so the optimization trace is identical to training without a
// teacher.
LossBreakdown combined_loss(const Tensor& student_logits, const std::vector<int>& labels,
                            const std::vector<uint8_t>& counted, double smoothing,
                            const GateRecord* gates, double budget, const Tensor* teacher_logits,
                            const KdConfig& kd);

}  // namespace clsr
