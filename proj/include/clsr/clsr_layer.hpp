// Routed feed-forward: each language owns a copy of the layer's feed-forward
// plus a small gate that mixes it with the shared core per token, and a
// low-rank adapter variant used as a parameter-efficient baseline.
#pragma once

#include <random>
#include <string>
#include <vector>

#include "clsr/model.hpp"

namespace clsr {

// Language-specific branch: its own feed-forward core and gate network.
struct LangSlot {
    std::string language;
    FfnCore ls;                                  // starts as a bit-exact copy of the shared core
    Tensor gate_w1, gate_b1, gate_w2, gate_b2;   // d_model -> d_gate -> 1
};

// Per-token mix of a language-specific branch with the shared branch:
//   out = g * ls(x) + (1 - g) * shared(x)
// In training g is a sigmoid of the (noised) gate logit; at inference the
// gate is hard: logit > 0 routes to the language branch, otherwise shared.
class ClsrLayer : public FfnModule {
  public:
    ClsrLayer(std::string layer_name, FfnCore shared, const std::vector<std::string>& languages,
              int64_t d_model, int64_t d_gate, std::mt19937_64& eng);

    Tensor forward(const Tensor& x, ForwardCtx& ctx) override;
    void collect_params(const std::string& prefix, std::vector<NamedParam>& out) override;

    FfnCore& shared() { return shared_; }
    size_t n_languages() const { return slots_.size(); }
    LangSlot& slot(size_t i) { return slots_.at(i); }
    const std::string& name() const { return name_; }

    // Raw gate logits [N] for the given language slot (no noise).
    Tensor gate_logits(const Tensor& x, size_t lang_idx) const;

  private:
    std::string name_;
    FfnCore shared_;
    std::vector<LangSlot> slots_;
};

// Low-rank adapters on both feed-forward maps. The base core stays intact;
// the adapter adds (alpha / rank) * x A U to each map, with U zero at start
// so the wrapped layer is initially identical to the base.
class LoraFfn : public FfnModule {
  public:
    LoraFfn(FfnCore base, int64_t rank, double alpha, std::mt19937_64& eng);

    Tensor forward(const Tensor& x, ForwardCtx& ctx) override;
    void collect_params(const std::string& prefix, std::vector<NamedParam>& out) override;

    FfnCore& base() { return base_; }

  private:
    FfnCore base_;
    Tensor a1_, u1_;  // [d_model, r], [r, d_ff]
    Tensor a2_, u2_;  // [d_ff, r], [r, d_model]
    double scale_ = 1.0;
};

// Linear ramp for the train-time gate noise: zero at the first step, rising
// to sigma_max by the final step, so routing decisions harden as training
// progresses.
struct GateNoiseSchedule {
    double sigma_max = 1.0;
    int64_t total_steps = 1;

    double sigma_at(int64_t step) const {
        if (total_steps <= 0) return 0.0;
        if (step <= 0) return 0.0;
        if (step >= total_steps) return sigma_max;
        return sigma_max * static_cast<double>(step) / static_cast<double>(total_steps);
    }
};

// Replace every dense feed-forward slot in the model. Both conversions
// derive their fresh weights deterministically from the model's init seed.
void convert_ffn_to_clsr(Seq2SeqModel& model, const std::vector<std::string>& languages);
void convert_ffn_to_lora(Seq2SeqModel& model, int64_t rank, double alpha);

}  // namespace clsr
