// Experiment pipelines: named end-to-end recipes (pretraining, the regime
// matrix, gate analysis, data-size and distillation ablations) driven by a
// JSON config file. Each pipeline writes per-run records, a summary CSV, and
// a plain-text report of directional invariant verdicts into an output
// directory, deterministically for a given config.
#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include "clsr/model.hpp"
#include "clsr/runrecord.hpp"
#include "clsr/synth.hpp"
#include "clsr/train.hpp"

namespace clsr {

struct ExperimentConfig {
    std::string pipeline;    // pretrain | finetune-matrix | gate-analysis |
                             // size-ablation | kd-ablation
    std::string output_dir;  // artifacts root; created if missing
    std::vector<uint64_t> seeds = {1, 2, 3};
    int workers = 1;  // bounded worker pool for independent cells

    TaskConfig task;  // synthetic task ("task" section)

    ModelConfig teacher_model;  // "teacher_model" section; vocab follows task
    ModelConfig student_model;  // "student_model" section

    TrainConfig pretrain_cfg;  // "pretrain" section (cross entropy only)
    TrainConfig finetune_cfg;  // "finetune" section (per-cell regime applied)

    std::vector<std::string> regimes = {"ft", "lora_ft", "clsr_ft", "clsr_kd"};
    std::vector<std::string> languages = {"l4"};  // fine-tune targets
    SplitSizes sizes;                             // per-language split sizes

    std::vector<int64_t> ablation_sizes = {100, 300, 1000};  // size-ablation
    std::vector<std::string> kd_kinds = {"js", "kl"};        // kd-ablation
    std::vector<double> kd_taus = {1.0, 3.0};                // kd-ablation

    // Optional pretrained checkpoints to reuse; pipelines pretrain from
    // scratch (and cache under output_dir) when these are empty.
    std::string teacher_checkpoint;
    std::string student_checkpoint;

    ExperimentConfig();  // desk-scale defaults (documented in the README)

    void validate() const;          // structural checks; throws ConfigError
    nlohmann::json to_json() const;  // full effective config, stable key order
};

// Parses a JSON experiment config, rejecting unknown keys with messages
// anchored to the offending line of `source_name`. Throws ConfigError.
ExperimentConfig parse_experiment_config(const std::string& text, const std::string& source_name);
ExperimentConfig load_experiment_config(const std::string& path);

// Runs the configured pipeline to completion. Returns 0 when every gating
// directional invariant holds over the produced records, 1 otherwise. Throws
// ConfigError for configuration problems; any other exception leaves partial
// artifacts plus a FAILED marker file in the output directory.
int run_pipeline(const ExperimentConfig& cfg, bool verbose = false);

// Re-derives the aggregate table and invariant verdicts from the records in
// `dir` (as written by run_pipeline) and prints them to `out`. Returns 0/1
// like run_pipeline; throws ConfigError when the directory has no records.
int report_directory(const std::string& dir, std::ostream& out);

// One directional-invariant check over a set of run records.
struct InvariantVerdict {
    std::string name;
    bool pass = false;
    bool gating = true;  // informational verdicts never fail the run
    std::string detail;
};

// Evaluates every applicable directional invariant (regime ordering,
// distillation vs plain routing, teacher vs student, data-size monotonicity,
// out-vs-in-domain gate usage) over the records. Exposed for the report
// command and tests.
std::vector<InvariantVerdict> evaluate_invariants(const std::vector<RunRecord>& records);

// Stable text form used in every artifact (CSV cells, report lines).
std::string format_metric(double value);

}  // namespace clsr
