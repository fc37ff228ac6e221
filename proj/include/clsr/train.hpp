// Training: the learning-rate schedule, a masked-parameter optimizer, the
// multilingual pretraining loop, and the four fine-tuning regimes
//   ft       — every weight trains
//   lora_ft  — only the low-rank adapters train
//   clsr_ft  — only the target language's branch and gates train
//   clsr_kd  — clsr_ft plus a distillation term against a teacher
#pragma once

#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "clsr/eval.hpp"
#include "clsr/model.hpp"
#include "clsr/runrecord.hpp"
#include "clsr/synth.hpp"

namespace clsr {

struct TrainConfig {
    std::string regime = "ft";  // ft | lora_ft | clsr_ft | clsr_kd
    int64_t epochs = 10;
    int64_t warmup_epochs = 1;
    double lr_peak = 1e-4;
    int64_t batch_size = 16;
    double label_smoothing = 0.1;

    std::string kd_kind = "none";  // js | kl | none
    double kd_alpha = 2.0;
    double kd_tau = 1.0;

    double gate_budget = 0.5;
    double skip_prob = 0.2;
    double gate_noise_max = 1.0;  // train-time gate noise ramps 0 -> max

    std::string optimizer = "sgd";  // sgd | adam
    double adam_beta1 = 0.9;
    double adam_beta2 = 0.999;
    double adam_eps = 1e-8;

    uint64_t seed = 1;

    void validate() const;
    nlohmann::json to_json() const;  // snapshot excluding the seed
};

// Linear warmup from zero to lr_peak over warmup_steps, then linear decay
// back to zero at total_steps.
double lr_schedule(int64_t step, int64_t total_steps, int64_t warmup_steps, double lr_peak);

// Gradient-descent (optionally adaptive) update over a fixed parameter list.
class Optimizer {
  public:
    Optimizer(std::vector<Tensor> params, const TrainConfig& cfg);

    // Applies one update from the accumulated gradients, then clears them.
    void step(double lr);

  private:
    std::vector<Tensor> params_;
    bool adaptive_ = false;
    double b1_ = 0.9, b2_ = 0.999, eps_ = 1e-8;
    int64_t t_ = 0;
    std::vector<std::vector<double>> m_, v_;
};

// Everything the harness needs about the synthetic task.
struct DataBundle {
    TaskConfig task;
    std::vector<LanguageSpec> specs;
    TaskVocab vocab;
};

DataBundle make_data(const TaskConfig& task);

// Per-language split sizes used by fine-tuning.
struct SplitSizes {
    int64_t finetune = 300;
    int64_t validation = 100;
    int64_t test = 200;
};

struct PretrainResult {
    std::unique_ptr<Seq2SeqModel> model;
    std::vector<EpochStats> epochs;
};

// Multilingual pretraining with plain cross entropy over the resource-skewed
// mix. The model must use the dense feed-forward variant. Raises
// ContractError with a step diagnostic if the loss turns non-finite.
PretrainResult pretrain(const ModelConfig& model_cfg, const DataBundle& data,
                        const TrainConfig& cfg);

// Fine-tune `student` in place for one language under cfg.regime; `teacher`
// is required exactly when kd_kind != none (regime clsr_kd). The best epoch
// by validation WER is kept (ties favor the earlier epoch) and final metrics
// are measured on the held-out splits with the kept weights.
RunRecord finetune(Seq2SeqModel& student, Seq2SeqModel* teacher, int lang_idx,
                   const DataBundle& data, const SplitSizes& sizes, const TrainConfig& cfg);

// Convenience for tests and pipelines: parameters whose gradients a regime
// unlocks, as collect_params indexes.
std::vector<size_t> trainable_param_indexes(const std::vector<NamedParam>& params,
                                            const std::string& regime,
                                            const std::string& language);

}  // namespace clsr
