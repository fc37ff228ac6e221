#include "clsr/losses.hpp"

#include <cmath>
#include <limits>

#include "clsr/error.hpp"
#include "clsr/ops.hpp"

namespace clsr {

namespace {

Tensor counted_as_tensor(const std::vector<uint8_t>& counted) {
    std::vector<double> v(counted.size());
    for (size_t i = 0; i < counted.size(); ++i) v[i] = counted[i] ? 1.0 : 0.0;
    return Tensor(Shape{static_cast<int64_t>(counted.size())}, std::move(v), false);
}

int64_t count_of(const std::vector<uint8_t>& counted) {
    int64_t c = 0;
    for (uint8_t f : counted) c += f ? 1 : 0;
    return c;
}

// Guard under the midpoint log; probabilities from log_softmax can underflow
// to exactly zero for extreme logits.
constexpr double kLogFloor = 1e-300;

}  // namespace

Tensor cross_entropy_smoothed(const Tensor& logits, const std::vector<int>& labels,
                              const std::vector<uint8_t>& counted, double smoothing) {
    if (logits.shape().size() != 2) throw DimensionError("cross entropy expects [rows, vocab] logits");
    const int64_t n = logits.shape()[0];
    const int64_t v = logits.shape()[1];
    if (static_cast<int64_t>(labels.size()) != n || static_cast<int64_t>(counted.size()) != n) {
        throw DimensionError("labels/mask of " + std::to_string(labels.size()) + "/" +
                             std::to_string(counted.size()) + " entries for " + std::to_string(n) +
                             " rows");
    }
    if (smoothing < 0.0 || smoothing >= 1.0) {
        throw ParameterError("label smoothing must lie in [0, 1)");
    }
    const int64_t cnt = count_of(counted);
    if (cnt == 0) throw ContractError("cross entropy with every row excluded");

    Tensor lp = log_softmax(logits);
    Tensor picked = gather_last(lp, labels);           // [n]
    Tensor row_sum = sum_last(lp);                     // [n]
    Tensor per_row = add(smul(picked, -(1.0 - smoothing)),
                         smul(row_sum, -(smoothing / static_cast<double>(v))));
    Tensor masked = mul(per_row, counted_as_tensor(counted));
    return smul(sum(masked), 1.0 / static_cast<double>(cnt));
}

Tensor gate_budget_loss(const GateRecord& gates, double budget) {
    if (budget < 0.0 || budget > 1.0) throw ParameterError("gate budget must lie in [0, 1]");
    int64_t total = 0;
    for (const GateEntry& e : gates.entries) total += count_of(e.counted);
    if (total == 0) return Tensor::scalar(0.0);

    Tensor acc = Tensor::scalar(0.0);
    for (const GateEntry& e : gates.entries) {
        if (e.gate.numel() != static_cast<int64_t>(e.counted.size())) {
            throw DimensionError("gate entry " + e.layer + " has mismatched mask");
        }
        acc = add(acc, sum(mul(e.gate, counted_as_tensor(e.counted))));
    }
    Tensor mean_gate = smul(acc, 1.0 / static_cast<double>(total));
    return abs_val(sadd(mean_gate, -budget));
}

double gate_mean_value(const GateRecord& gates) {
    int64_t total = 0;
    double acc = 0.0;
    for (const GateEntry& e : gates.entries) {
        for (size_t i = 0; i < e.counted.size(); ++i) {
            if (e.counted[i]) {
                acc += e.gate.value_at(static_cast<int64_t>(i));
                ++total;
            }
        }
    }
    return total == 0 ? -1.0 : acc / static_cast<double>(total);
}

namespace {

void check_kd_shapes(const Tensor& teacher_logits, const Tensor& student_logits,
                     const std::vector<uint8_t>& counted, double temperature) {
    if (teacher_logits.shape() != student_logits.shape() || student_logits.shape().size() != 2) {
        throw DimensionError("distillation expects matching [rows, vocab] logits, got " +
                             shape_str(teacher_logits.shape()) + " and " +
                             shape_str(student_logits.shape()));
    }
    if (static_cast<int64_t>(counted.size()) != student_logits.shape()[0]) {
        throw DimensionError("distillation mask size mismatch");
    }
    if (!(temperature > 0.0)) throw ParameterError("distillation temperature must be > 0");
}

Tensor masked_row_mean(const Tensor& rows, const std::vector<uint8_t>& counted) {
    const int64_t cnt = count_of(counted);
    if (cnt == 0) throw ContractError("distillation with every row excluded");
    return smul(sum(mul(rows, counted_as_tensor(counted))), 1.0 / static_cast<double>(cnt));
}

Tensor detach(const Tensor& t) { return Tensor(t.shape(), t.values(), false); }

}  // namespace

Tensor kl_loss(const Tensor& teacher_logits, const Tensor& student_logits,
               const std::vector<uint8_t>& counted, double temperature) {
    check_kd_shapes(teacher_logits, student_logits, counted, temperature);
    Tensor lp = log_softmax(detach(teacher_logits), temperature);  // teacher, no grad
    Tensor lq = log_softmax(student_logits, temperature);
    Tensor p = exp_(lp);
    Tensor rows = sum_last(mul(p, sub(lp, lq)));  // KL(p || q) per row
    return masked_row_mean(rows, counted);
}

Tensor js_loss(const Tensor& teacher_logits, const Tensor& student_logits,
               const std::vector<uint8_t>& counted, double temperature) {
    check_kd_shapes(teacher_logits, student_logits, counted, temperature);
    Tensor lp = log_softmax(detach(teacher_logits), temperature);
    Tensor lq = log_softmax(student_logits, temperature);
    Tensor p = exp_(lp);
    Tensor q = exp_(lq);
    Tensor lm = log_(sadd(smul(add(p, q), 0.5), kLogFloor));
    Tensor kl_pm = sum_last(mul(p, sub(lp, lm)));
    Tensor kl_qm = sum_last(mul(q, sub(lq, lm)));
    Tensor rows = smul(add(kl_pm, kl_qm), 0.5);
    return masked_row_mean(rows, counted);
}

double kl_value(const std::vector<double>& p, const std::vector<double>& q) {
    if (p.size() != q.size() || p.empty()) {
        throw ParameterError("divergence needs equal-length non-empty distributions");
    }
    double acc = 0.0;
    for (size_t i = 0; i < p.size(); ++i) {
        if (p[i] < 0.0 || q[i] < 0.0) throw ParameterError("negative probability mass");
        if (p[i] == 0.0) continue;  // 0 log 0 = 0
        if (q[i] == 0.0) return std::numeric_limits<double>::infinity();
        acc += p[i] * std::log(p[i] / q[i]);
    }
    return acc;
}

double js_value(const std::vector<double>& p, const std::vector<double>& q) {
    if (p.size() != q.size() || p.empty()) {
        throw ParameterError("divergence needs equal-length non-empty distributions");
    }
    std::vector<double> m(p.size());
    for (size_t i = 0; i < p.size(); ++i) m[i] = 0.5 * (p[i] + q[i]);
    return 0.5 * kl_value(p, m) + 0.5 * kl_value(q, m);
}

void KdConfig::validate() const {
    if (kind != "js" && kind != "kl") throw ConfigError("distillation kind must be js or kl");
    if (alpha < 0.0) throw ConfigError("distillation weight must be non-negative");
    if (!(temperature > 0.0)) throw ConfigError("distillation temperature must be positive");
}

LossBreakdown combined_loss(const Tensor& student_logits, const std::vector<int>& labels,
                            const std::vector<uint8_t>& counted, double smoothing,
                            const GateRecord* gates, double budget, const Tensor* teacher_logits,
                            const KdConfig& kd) {
    kd.validate();
    LossBreakdown out;
    Tensor total = cross_entropy_smoothed(student_logits, labels, counted, smoothing);
    out.ce = total.scalar_value();
    if (gates != nullptr) {
        Tensor g = gate_budget_loss(*gates, budget);
        out.gate = g.scalar_value();
        total = add(total, g);
    }
    if (teacher_logits != nullptr && kd.alpha != 0.0) {
        Tensor k = kd.kind == "js" ? js_loss(*teacher_logits, student_logits, counted, kd.temperature)
                                   : kl_loss(*teacher_logits, student_logits, counted, kd.temperature);
        out.kd = k.scalar_value();
        total = add(total, smul(k, kd.alpha));
    }
    out.total = total;
    return out;
}

}  // namespace clsr
