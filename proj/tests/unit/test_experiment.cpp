// Experiment configuration parsing (line-anchored rejection of unknown or
// ill-typed keys), structural validation, metric formatting, and the
// directional-invariant evaluator on hand-built run records.
#include <string>
#include <vector>

#include "clsr/error.hpp"
#include "clsr/experiment.hpp"
#include "doctest.h"

using namespace clsr;

namespace {

// A record shaped like the fine-tuning harness produces: metrics plus the
// config slice the grouping logic reads (train.kd_kind/kd_tau, sizes).
RunRecord tuned_record(const std::string& regime, const std::string& language, uint64_t seed,
                       double wer_in, double wer_out, int64_t size,
                       const std::string& kd_kind = "none", double kd_tau = 1.0) {
    RunRecord r;
    r.regime = regime;
    r.language = language;
    r.seed = seed;
    r.best_epoch = 0;
    r.metrics["wer.test_in"] = wer_in;
    r.metrics["wer.test_out"] = wer_out;
    r.config["train"] = {{"kd_kind", kd_kind}, {"kd_tau", kd_tau}};
    r.config["sizes"] = {{"finetune", size}, {"validation", 100}, {"test", 200}};
    return r;
}

RunRecord baseline(const std::string& regime, const std::string& language, double wer_in,
                   double wer_out) {
    RunRecord r;
    r.regime = regime;
    r.language = language;
    r.seed = 0;
    r.best_epoch = -1;
    r.metrics["wer.test_in"] = wer_in;
    r.metrics["wer.test_out"] = wer_out;
    return r;
}

const InvariantVerdict* find_verdict(const std::vector<InvariantVerdict>& verdicts,
                                     const std::string& prefix) {
    for (const InvariantVerdict& v : verdicts) {
        if (v.name.rfind(prefix, 0) == 0) return &v;
    }
    return nullptr;
}

}  // namespace

TEST_CASE("metric formatting is compact and stable") {
    CHECK(format_metric(0.0) == "0");
    CHECK(format_metric(0.5) == "0.5");
    CHECK(format_metric(1.0) == "1");
    CHECK(format_metric(-2.25) == "-2.25");
    CHECK(format_metric(1.0 / 3.0) == "0.3333333333");
    CHECK(format_metric(1e-17) == "1e-17");
    CHECK(format_metric(1234567890.0) == "1234567890");
    CHECK(format_metric(12345678901.0) == "1.23456789e+10");  // 10 significant digits
}

TEST_CASE("default experiment configuration matches the documented recipe") {
    const ExperimentConfig cfg;
    CHECK(cfg.seeds == std::vector<uint64_t>{1, 2, 3});
    CHECK(cfg.workers == 1);

    CHECK(cfg.teacher_model.d_model == 64);
    CHECK(cfg.teacher_model.d_ff == 256);
    CHECK(cfg.teacher_model.enc_layers == 4);
    CHECK(cfg.teacher_model.dec_layers == 4);
    CHECK(cfg.student_model.d_model == 32);
    CHECK(cfg.student_model.d_ff == 128);
    CHECK(cfg.student_model.enc_layers == 2);
    CHECK(cfg.student_model.dec_layers == 2);

    CHECK(cfg.pretrain_cfg.kd_kind == "none");
    CHECK(cfg.pretrain_cfg.epochs == 6);
    CHECK(cfg.pretrain_cfg.optimizer == "adam");
    CHECK(cfg.pretrain_cfg.lr_peak == 3e-3);
    CHECK(cfg.finetune_cfg.kd_kind == "js");
    CHECK(cfg.finetune_cfg.kd_alpha == 2.0);
    CHECK(cfg.finetune_cfg.kd_tau == 1.0);
    CHECK(cfg.finetune_cfg.gate_budget == 0.5);
    CHECK(cfg.finetune_cfg.skip_prob == 0.2);
    CHECK(cfg.finetune_cfg.label_smoothing == 0.1);
    CHECK(cfg.finetune_cfg.epochs == 10);
    CHECK(cfg.finetune_cfg.warmup_epochs == 1);
    CHECK(cfg.finetune_cfg.optimizer == "adam");
    CHECK(cfg.finetune_cfg.lr_peak == 1e-3);

    CHECK(cfg.regimes == std::vector<std::string>{"ft", "lora_ft", "clsr_ft", "clsr_kd"});
    CHECK(cfg.languages == std::vector<std::string>{"l4"});
    CHECK(cfg.ablation_sizes == std::vector<int64_t>{100, 300, 1000});
    CHECK(cfg.kd_kinds == std::vector<std::string>{"js", "kl"});
    CHECK(cfg.kd_taus == std::vector<double>{1.0, 3.0});
}

TEST_CASE("minimal config parses and keeps defaults") {
    const ExperimentConfig cfg =
        parse_experiment_config(R"({"pipeline": "pretrain"})", "mini.json");
    CHECK(cfg.pipeline == "pretrain");
    CHECK(cfg.task.n_languages == 8);
    CHECK(cfg.finetune_cfg.kd_kind == "js");
    CHECK(cfg.sizes.finetune == 300);
}

TEST_CASE("config round-trips through its own echo") {
    ExperimentConfig cfg;
    cfg.pipeline = "kd-ablation";
    cfg.output_dir = "/tmp/somewhere";
    cfg.seeds = {7, 8};
    cfg.workers = 3;
    cfg.task.n_languages = 4;
    cfg.task.high_resource = 2;
    cfg.student_model.d_model = 48;
    cfg.pretrain_cfg.epochs = 5;
    cfg.finetune_cfg.kd_kind = "kl";
    cfg.finetune_cfg.kd_tau = 3.0;
    cfg.languages = {"l1", "l3"};
    cfg.sizes.finetune = 64;
    cfg.ablation_sizes = {10, 20};
    cfg.kd_taus = {2.0};

    const std::string echoed = cfg.to_json().dump(2);
    const ExperimentConfig back = parse_experiment_config(echoed, "echo.json");
    CHECK(back.to_json() == cfg.to_json());
    CHECK(back.to_json().dump(2) == echoed);
}

TEST_CASE("unknown keys are rejected with the offending line number") {
    const std::string text = R"({
  "pipeline": "pretrain",
  "frobnicate": 1
})";
    CHECK_THROWS_WITH_AS(parse_experiment_config(text, "exp.json"),
                         doctest::Contains("exp.json:3"), ConfigError);
    CHECK_THROWS_WITH_AS(parse_experiment_config(text, "exp.json"),
                         doctest::Contains("unknown key 'frobnicate'"), ConfigError);
}

TEST_CASE("unknown keys inside sections carry section name and line") {
    const std::string text = R"({
  "pipeline": "pretrain",
  "task": {
    "n_languages": 4,
    "alphabet": 26
  },
  "pretrain": {"momentum": 0.9}
})";
    CHECK_THROWS_WITH_AS(parse_experiment_config(text, "cfg"),
                         doctest::Contains("cfg:5: unknown key 'alphabet' in section 'task'"),
                         ConfigError);
    const std::string no_task = R"({
  "pipeline": "pretrain",
  "pretrain": {"momentum": 0.9}
})";
    CHECK_THROWS_WITH_AS(
        parse_experiment_config(no_task, "cfg"),
        doctest::Contains("cfg:3: unknown key 'momentum' in section 'pretrain'"), ConfigError);
    const std::string bad_model = R"({
  "pipeline": "pretrain",
  "student_model": {"n_layers": 2}
})";
    CHECK_THROWS_WITH_AS(
        parse_experiment_config(bad_model, "cfg"),
        doctest::Contains("unknown key 'n_layers' in section 'student_model'"), ConfigError);
    const std::string bad_sizes = R"({
  "pipeline": "pretrain",
  "sizes": {"finetune": 10, "train": 5}
})";
    CHECK_THROWS_WITH_AS(parse_experiment_config(bad_sizes, "cfg"),
                         doctest::Contains("unknown key 'train' in section 'sizes'"),
                         ConfigError);
    // vocab size always follows the task; it is not configurable per model
    const std::string vocab = R"({
  "pipeline": "pretrain",
  "teacher_model": {"vocab_size": 99}
})";
    CHECK_THROWS_WITH_AS(parse_experiment_config(vocab, "cfg"),
                         doctest::Contains("unknown key 'vocab_size'"), ConfigError);
}

TEST_CASE("ill-typed values are rejected with their line") {
    const std::string text = R"({
  "pipeline": "pretrain",
  "pretrain": {
    "epochs": "ten"
  }
})";
    CHECK_THROWS_WITH_AS(parse_experiment_config(text, "cfg"),
                         doctest::Contains("cfg:4: invalid value for 'epochs'"), ConfigError);
    CHECK_THROWS_WITH_AS(parse_experiment_config(R"({"pipeline": "pretrain", "seeds": "all"})",
                                                 "cfg"),
                         doctest::Contains("invalid value for 'seeds'"), ConfigError);
}

TEST_CASE("malformed or non-object configs fail with the source name") {
    CHECK_THROWS_WITH_AS(parse_experiment_config("{ not json", "broken.json"),
                         doctest::Contains("broken.json"), ConfigError);
    CHECK_THROWS_WITH_AS(parse_experiment_config("[1, 2]", "list.json"),
                         doctest::Contains("must be a JSON object"), ConfigError);
    CHECK_THROWS_AS(load_experiment_config("/nonexistent/path/cfg.json"), ConfigError);
}

TEST_CASE("pipeline name is checked at parse time") {
    CHECK_THROWS_WITH_AS(parse_experiment_config(R"({"pipeline": "train-everything"})", "cfg"),
                         doctest::Contains("unknown pipeline 'train-everything'"), ConfigError);
    CHECK_THROWS_WITH_AS(parse_experiment_config(R"({"output_dir": "x"})", "cfg"),
                         doctest::Contains("missing required key 'pipeline'"), ConfigError);
}

TEST_CASE("structural validation rejects out-of-range settings") {
    auto valid = []() {
        ExperimentConfig cfg;
        cfg.pipeline = "finetune-matrix";
        cfg.output_dir = "/tmp/x";
        return cfg;
    };
    CHECK_NOTHROW(valid().validate());

    ExperimentConfig cfg = valid();
    cfg.output_dir.clear();
    CHECK_THROWS_AS(cfg.validate(), ConfigError);

    cfg = valid();
    cfg.seeds.clear();
    CHECK_THROWS_AS(cfg.validate(), ConfigError);

    cfg = valid();
    cfg.workers = 0;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);

    cfg = valid();
    cfg.regimes = {"ft", "sft"};
    CHECK_THROWS_WITH_AS(cfg.validate(), doctest::Contains("unknown regime 'sft'"), ConfigError);

    cfg = valid();
    cfg.regimes.clear();
    CHECK_THROWS_AS(cfg.validate(), ConfigError);

    cfg = valid();
    cfg.languages = {"l8"};  // default task has l0..l7
    CHECK_THROWS_WITH_AS(cfg.validate(), doctest::Contains("unknown language 'l8'"), ConfigError);

    cfg = valid();
    cfg.languages = {"german"};
    CHECK_THROWS_AS(cfg.validate(), ConfigError);

    cfg = valid();
    cfg.sizes.validation = 0;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);

    cfg = valid();
    cfg.ablation_sizes = {100, 0};
    CHECK_THROWS_AS(cfg.validate(), ConfigError);

    cfg = valid();
    cfg.kd_kinds = {"js", "mse"};
    CHECK_THROWS_AS(cfg.validate(), ConfigError);

    cfg = valid();
    cfg.kd_taus = {1.0, 0.0};
    CHECK_THROWS_AS(cfg.validate(), ConfigError);

    cfg = valid();
    cfg.finetune_cfg.kd_kind = "none";
    CHECK_THROWS_AS(cfg.validate(), ConfigError);

    cfg = valid();
    cfg.finetune_cfg.epochs = 0;  // nested train configs are validated too
    CHECK_THROWS_AS(cfg.validate(), ConfigError);

    cfg = valid();
    cfg.pretrain_cfg.batch_size = 0;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);

    cfg = valid();
    cfg.pipeline = "pretrain";
    cfg.teacher_checkpoint = "/tmp/teacher.ckpt";
    CHECK_THROWS_WITH_AS(cfg.validate(), doctest::Contains("pretrain pipeline"), ConfigError);
}

TEST_CASE("invariants pass on records exhibiting every expected trend") {
    std::vector<RunRecord> records;
    records.push_back(baseline("pretrained", "l4", 0.30, 0.90));
    records.push_back(baseline("teacher", "l4", 0.10, 0.30));
    for (uint64_t seed : {1, 2, 3}) {
        records.push_back(tuned_record("ft", "l4", seed, 0.20, 0.50, 300));
        records.push_back(tuned_record("clsr_ft", "l4", seed, 0.18, 0.40, 300));
        RunRecord kd = tuned_record("clsr_kd", "l4", seed, 0.17, 0.35, 300, "js", 1.0);
        kd.metrics["gate_usage.test_in"] = 0.40;
        kd.metrics["gate_usage.test_out"] = seed == 3 ? 0.35 : 0.60;  // 2 of 3 seeds higher
        records.push_back(kd);
    }
    const std::vector<InvariantVerdict> verdicts = evaluate_invariants(records);

    const InvariantVerdict* ordering = find_verdict(verdicts, "regime-ordering[l4");
    REQUIRE(ordering != nullptr);
    CHECK(ordering->pass);
    CHECK(ordering->gating);

    const InvariantVerdict* teacher = find_verdict(verdicts, "teacher-vs-student[l4");
    REQUIRE(teacher != nullptr);
    CHECK(teacher->pass);

    const InvariantVerdict* kd = find_verdict(verdicts, "distillation-vs-routing[");
    REQUIRE(kd != nullptr);
    CHECK(kd->pass);

    const InvariantVerdict* trend = find_verdict(verdicts, "gate-trend[clsr_kd");
    REQUIRE(trend != nullptr);
    CHECK(trend->pass);  // 2/3 seeds meets the two-thirds bar
    CHECK(trend->gating);

    for (const InvariantVerdict& v : verdicts) CHECK(v.pass);
}

TEST_CASE("each invariant fails when its trend is reversed") {
    // Fine-tuning that does not beat the unadapted model.
    {
        std::vector<RunRecord> records;
        records.push_back(baseline("pretrained", "l4", 0.30, 0.50));
        records.push_back(tuned_record("ft", "l4", 1, 0.20, 0.60, 300));
        records.push_back(tuned_record("ft", "l4", 2, 0.20, 0.62, 300));
        const auto verdicts = evaluate_invariants(records);
        const InvariantVerdict* v = find_verdict(verdicts, "regime-ordering[");
        REQUIRE(v != nullptr);
        CHECK_FALSE(v->pass);
        CHECK(v->detail.find("not better") != std::string::npos);
    }
    // Distillation falling behind plain routed fine-tuning.
    {
        std::vector<RunRecord> records;
        records.push_back(tuned_record("clsr_ft", "l4", 1, 0.2, 0.40, 300));
        records.push_back(tuned_record("clsr_ft", "l4", 2, 0.2, 0.40, 300));
        records.push_back(tuned_record("clsr_kd", "l4", 1, 0.2, 0.45, 300, "js", 1.0));
        records.push_back(tuned_record("clsr_kd", "l4", 2, 0.2, 0.45, 300, "js", 1.0));
        const auto verdicts = evaluate_invariants(records);
        const InvariantVerdict* v = find_verdict(verdicts, "distillation-vs-routing[");
        REQUIRE(v != nullptr);
        CHECK_FALSE(v->pass);
    }
    // Teacher no better than the raw student.
    {
        std::vector<RunRecord> records;
        records.push_back(baseline("pretrained", "l4", 0.3, 0.50));
        records.push_back(baseline("teacher", "l4", 0.3, 0.50));
        const auto verdicts = evaluate_invariants(records);
        const InvariantVerdict* v = find_verdict(verdicts, "teacher-vs-student[");
        REQUIRE(v != nullptr);
        CHECK_FALSE(v->pass);
    }
    // Gate usage higher out-of-domain in only 1 of 3 seeds.
    {
        std::vector<RunRecord> records;
        for (uint64_t seed : {1, 2, 3}) {
            RunRecord kd = tuned_record("clsr_kd", "l4", seed, 0.2, 0.35, 300, "js", 1.0);
            kd.metrics["gate_usage.test_in"] = 0.40;
            kd.metrics["gate_usage.test_out"] = seed == 1 ? 0.60 : 0.30;
            records.push_back(kd);
        }
        const auto verdicts = evaluate_invariants(records);
        const InvariantVerdict* v = find_verdict(verdicts, "gate-trend[clsr_kd");
        REQUIRE(v != nullptr);
        CHECK_FALSE(v->pass);
        CHECK(v->detail.find("1/3") != std::string::npos);
    }
}

TEST_CASE("size monotonicity checks both held-out splits across sizes") {
    auto records_with_sizes = [](std::vector<std::pair<int64_t, double>> size_wer) {
        std::vector<RunRecord> records;
        for (const auto& [size, wer] : size_wer) {
            for (uint64_t seed : {1, 2}) {
                records.push_back(tuned_record("clsr_kd", "l4", seed, wer, wer, size, "js", 1.0));
            }
        }
        return records;
    };
    {
        const auto verdicts =
            evaluate_invariants(records_with_sizes({{100, 0.5}, {300, 0.4}, {1000, 0.4}}));
        const InvariantVerdict* v = find_verdict(verdicts, "size-monotonicity[clsr_kd");
        REQUIRE(v != nullptr);
        CHECK(v->pass);  // nonincreasing, ties allowed
    }
    {
        const auto verdicts =
            evaluate_invariants(records_with_sizes({{100, 0.5}, {300, 0.4}, {1000, 0.45}}));
        const InvariantVerdict* v = find_verdict(verdicts, "size-monotonicity[clsr_kd");
        REQUIRE(v != nullptr);
        CHECK_FALSE(v->pass);
    }
    {
        // A single size yields nothing to compare, so no verdict.
        const auto verdicts = evaluate_invariants(records_with_sizes({{300, 0.4}}));
        CHECK(find_verdict(verdicts, "size-monotonicity[") == nullptr);
    }
}

TEST_CASE("invariants needing absent reference groups are simply skipped") {
    std::vector<RunRecord> records;
    records.push_back(tuned_record("ft", "l4", 1, 0.2, 0.5, 300));
    records.push_back(tuned_record("ft", "l4", 2, 0.2, 0.5, 300));
    const auto verdicts = evaluate_invariants(records);
    CHECK(find_verdict(verdicts, "regime-ordering[") == nullptr);
    CHECK(find_verdict(verdicts, "teacher-vs-student[") == nullptr);
    CHECK(find_verdict(verdicts, "distillation-vs-routing[") == nullptr);
    CHECK(evaluate_invariants({}).empty());
}

TEST_CASE("gate trend for plain routed fine-tuning is informational only") {
    std::vector<RunRecord> records;
    for (uint64_t seed : {1, 2}) {
        RunRecord r = tuned_record("clsr_ft", "l4", seed, 0.2, 0.4, 300);
        r.metrics["gate_usage.test_in"] = 0.5;
        r.metrics["gate_usage.test_out"] = 0.4;  // reversed trend
        records.push_back(r);
    }
    const auto verdicts = evaluate_invariants(records);
    const InvariantVerdict* v = find_verdict(verdicts, "gate-trend[clsr_ft");
    REQUIRE(v != nullptr);
    CHECK_FALSE(v->pass);
    CHECK_FALSE(v->gating);  // must not fail a run on its own
}

TEST_CASE("directional claims gate only at the default operating point") {
    // Off-default sizes (a size ablation) still print comparisons, but a
    // barely-trained size-100 cell must not fail the run's verdict.
    std::vector<RunRecord> records;
    for (uint64_t seed : {1, 2}) {
        for (int64_t size : {100, 300}) {
            RunRecord kd = tuned_record("clsr_kd", "l4", seed, 0.3, 0.6, size, "js", 1.0);
            kd.metrics["gate_usage.test_in"] = 0.5;
            kd.metrics["gate_usage.test_out"] = 0.4;  // reversed trend everywhere
            records.push_back(kd);
            records.push_back(tuned_record("clsr_ft", "l4", seed, 0.3, 0.55, size));
        }
    }
    const auto verdicts = evaluate_invariants(records);

    const InvariantVerdict* off = find_verdict(verdicts, "distillation-vs-routing[clsr_kd l4 size100");
    REQUIRE(off != nullptr);
    CHECK_FALSE(off->pass);  // kd 0.6 > clsr_ft 0.55, but off the default point
    CHECK_FALSE(off->gating);
    const InvariantVerdict* at = find_verdict(verdicts, "distillation-vs-routing[clsr_kd l4 size300");
    REQUIRE(at != nullptr);
    CHECK(at->gating);

    const InvariantVerdict* trend100 = find_verdict(verdicts, "gate-trend[clsr_kd l4 size100");
    REQUIRE(trend100 != nullptr);
    CHECK_FALSE(trend100->gating);
    const InvariantVerdict* trend300 = find_verdict(verdicts, "gate-trend[clsr_kd l4 size300");
    REQUIRE(trend300 != nullptr);
    CHECK(trend300->gating);

    // A non-default distillation variant at the default size is an ablation
    // point too: compared, reported, not gating.
    std::vector<RunRecord> ablation;
    for (uint64_t seed : {1, 2}) {
        ablation.push_back(tuned_record("clsr_kd", "l4", seed, 0.3, 0.6, 300, "kl", 3.0));
        ablation.push_back(tuned_record("clsr_ft", "l4", seed, 0.3, 0.55, 300));
    }
    const auto kd_verdicts = evaluate_invariants(ablation);
    const InvariantVerdict* variant = find_verdict(kd_verdicts, "distillation-vs-routing[");
    REQUIRE(variant != nullptr);
    CHECK_FALSE(variant->gating);

    // Regime ordering compares the pretrained baseline against default-point
    // groups only; an off-size group cannot poison the verdict.
    std::vector<RunRecord> ordering;
    ordering.push_back(baseline("pretrained", "l4", 0.8, 0.9));
    for (uint64_t seed : {1, 2}) {
        ordering.push_back(tuned_record("ft", "l4", seed, 0.2, 0.5, 300));
        ordering.push_back(tuned_record("clsr_kd", "l4", seed, 0.4, 0.95, 100, "js", 1.0));
    }
    const auto ord_verdicts = evaluate_invariants(ordering);
    const InvariantVerdict* ord = find_verdict(ord_verdicts, "regime-ordering[");
    REQUIRE(ord != nullptr);
    CHECK(ord->pass);
    CHECK(ord->detail.find("size100") == std::string::npos);
}
