#include "clsr/train.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "clsr/checkpoint.hpp"
#include "clsr/clsr_layer.hpp"
#include "clsr/error.hpp"
#include "clsr/losses.hpp"
#include "clsr/rng.hpp"

namespace clsr {
namespace {

bool known_regime(const std::string& r) {
    return r == "ft" || r == "lora_ft" || r == "clsr_ft" || r == "clsr_kd";
}

std::vector<std::vector<size_t>> batch_slices(size_t n, int64_t batch_size,
                                              std::mt19937_64& eng) {
    std::vector<size_t> order(n);
    std::iota(order.begin(), order.end(), size_t{0});
    deterministic_shuffle(order, eng);
    std::vector<std::vector<size_t>> batches;
    for (size_t begin = 0; begin < n; begin += static_cast<size_t>(batch_size)) {
        const size_t end = std::min(begin + static_cast<size_t>(batch_size), n);
        batches.emplace_back(order.begin() + static_cast<int64_t>(begin),
                             order.begin() + static_cast<int64_t>(end));
    }
    return batches;
}

Batch gather_batch(const TaskVocab& vocab, const Corpus& corpus,
                   const std::vector<size_t>& indexes) {
    std::vector<const Example*> rows;
    rows.reserve(indexes.size());
    for (size_t i : indexes) rows.push_back(&corpus.examples[i]);
    return make_batch(vocab, corpus.lang_idx, rows);
}

void check_finite(double value, const std::string& phase, int64_t epoch, int64_t step) {
    if (!std::isfinite(value)) {
        throw ContractError(phase + " diverged: non-finite loss " + std::to_string(value) +
                            " at epoch " + std::to_string(epoch) + " step " +
                            std::to_string(step));
    }
}

std::vector<std::vector<double>> snapshot_values(std::vector<NamedParam>& params) {
    std::vector<std::vector<double>> snap;
    snap.reserve(params.size());
    for (NamedParam& p : params) snap.push_back(p.tensor.values());
    return snap;
}

void restore_values(std::vector<NamedParam>& params,
                    const std::vector<std::vector<double>>& snap) {
    for (size_t i = 0; i < params.size(); ++i) params[i].tensor.values() = snap[i];
}

}  // namespace

void TrainConfig::validate() const {
    if (!known_regime(regime)) throw ConfigError("unknown regime '" + regime + "'");
    if (epochs < 1) throw ConfigError("epochs must be >= 1");
    if (warmup_epochs < 0 || warmup_epochs >= epochs) {
        throw ConfigError("warmup_epochs must lie in [0, epochs)");
    }
    if (lr_peak <= 0.0) throw ConfigError("lr_peak must be positive");
    if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
    if (label_smoothing < 0.0 || label_smoothing >= 1.0) {
        throw ConfigError("label_smoothing must lie in [0, 1)");
    }
    if (kd_kind != "js" && kd_kind != "kl" && kd_kind != "none") {
        throw ConfigError("kd_kind must be js, kl, or none");
    }
    if ((regime == "clsr_kd") != (kd_kind != "none")) {
        throw ConfigError("distillation regime and kd_kind must agree: regime " + regime +
                          " with kd_kind " + kd_kind);
    }
    if (kd_alpha < 0.0) throw ConfigError("kd_alpha must be non-negative");
    if (kd_tau <= 0.0) throw ConfigError("kd_tau must be positive");
    if (gate_budget < 0.0 || gate_budget > 1.0) throw ConfigError("gate_budget must lie in [0, 1]");
    if (skip_prob < 0.0 || skip_prob >= 1.0) throw ConfigError("skip_prob must lie in [0, 1)");
    if (gate_noise_max < 0.0) throw ConfigError("gate_noise_max must be non-negative");
    if (optimizer != "sgd" && optimizer != "adam") {
        throw ConfigError("optimizer must be sgd or adam");
    }
}

nlohmann::json TrainConfig::to_json() const {
    nlohmann::json j;
    j["regime"] = regime;
    j["epochs"] = epochs;
    j["warmup_epochs"] = warmup_epochs;
    j["lr_peak"] = lr_peak;
    j["batch_size"] = batch_size;
    j["label_smoothing"] = label_smoothing;
    j["kd_kind"] = kd_kind;
    j["kd_alpha"] = kd_alpha;
    j["kd_tau"] = kd_tau;
    j["gate_budget"] = gate_budget;
    j["skip_prob"] = skip_prob;
    j["gate_noise_max"] = gate_noise_max;
    j["optimizer"] = optimizer;
    j["adam_beta1"] = adam_beta1;
    j["adam_beta2"] = adam_beta2;
    j["adam_eps"] = adam_eps;
    return j;
}

double lr_schedule(int64_t step, int64_t total_steps, int64_t warmup_steps, double lr_peak) {
    if (total_steps <= 0) throw ParameterError("lr_schedule: total_steps must be positive");
    if (step < 0 || step > total_steps) {
        throw ParameterError("lr_schedule: step " + std::to_string(step) + " outside [0, " +
                             std::to_string(total_steps) + "]");
    }
    if (warmup_steps < 0 || warmup_steps >= total_steps) {
        throw ParameterError("lr_schedule: warmup_steps must lie in [0, total_steps)");
    }
    if (lr_peak < 0.0) throw ParameterError("lr_schedule: lr_peak must be non-negative");
    if (warmup_steps > 0 && step <= warmup_steps) {
        return lr_peak * static_cast<double>(step) / static_cast<double>(warmup_steps);
    }
    return lr_peak * static_cast<double>(total_steps - step) /
           static_cast<double>(total_steps - warmup_steps);
}

Optimizer::Optimizer(std::vector<Tensor> params, const TrainConfig& cfg)
    : params_(std::move(params)),
      adaptive_(cfg.optimizer == "adam"),
      b1_(cfg.adam_beta1),
      b2_(cfg.adam_beta2),
      eps_(cfg.adam_eps) {
    if (adaptive_) {
        m_.reserve(params_.size());
        v_.reserve(params_.size());
        for (const Tensor& p : params_) {
            m_.emplace_back(p.values().size(), 0.0);
            v_.emplace_back(p.values().size(), 0.0);
        }
    }
}

void Optimizer::step(double lr) {
    ++t_;
    for (size_t k = 0; k < params_.size(); ++k) {
        Tensor& p = params_[k];
        if (!p.has_grad()) continue;  // untouched this step (e.g. skipped layer)
        std::vector<double>& values = p.values();
        const std::vector<double>& g = p.grad();
        if (adaptive_) {
            const double bc1 = 1.0 - std::pow(b1_, static_cast<double>(t_));
            const double bc2 = 1.0 - std::pow(b2_, static_cast<double>(t_));
            for (size_t i = 0; i < values.size(); ++i) {
                m_[k][i] = b1_ * m_[k][i] + (1.0 - b1_) * g[i];
                v_[k][i] = b2_ * v_[k][i] + (1.0 - b2_) * g[i] * g[i];
                values[i] -= lr * (m_[k][i] / bc1) / (std::sqrt(v_[k][i] / bc2) + eps_);
            }
        } else {
            for (size_t i = 0; i < values.size(); ++i) values[i] -= lr * g[i];
        }
        p.zero_grad();
    }
}

DataBundle make_data(const TaskConfig& task) {
    return DataBundle{task, make_language_specs(task), make_vocab(task)};
}

PretrainResult pretrain(const ModelConfig& model_cfg, const DataBundle& data,
                        const TrainConfig& cfg) {
    cfg.validate();
    if (model_cfg.ffn_kind != "dense") {
        throw ContractError("pretraining expects the dense feed-forward variant, got " +
                            model_cfg.ffn_kind);
    }
    if (model_cfg.vocab_size != data.vocab.size()) {
        throw ConfigError("model vocab " + std::to_string(model_cfg.vocab_size) +
                          " does not match task vocab " + std::to_string(data.vocab.size()));
    }
    if (cfg.kd_kind != "none") {
        throw ConfigError("pretraining uses cross entropy only; kd_kind must be none");
    }

    std::vector<Corpus> corpora;
    corpora.reserve(data.specs.size());
    for (int lang = 0; lang < static_cast<int>(data.specs.size()); ++lang) {
        corpora.push_back(build_corpus(data.task, data.specs, lang, Role::kPretrain,
                                       pretrain_count(data.task, lang)));
    }

    PretrainResult result;
    result.model = std::make_unique<Seq2SeqModel>(model_cfg, cfg.seed);
    result.model->set_all_requires_grad(true);

    std::vector<NamedParam> params = result.model->collect_params();
    std::vector<Tensor> tensors;
    tensors.reserve(params.size());
    for (NamedParam& p : params) tensors.push_back(p.tensor);
    Optimizer opt(std::move(tensors), cfg);

    int64_t steps_per_epoch = 0;
    for (const Corpus& c : corpora) {
        steps_per_epoch += static_cast<int64_t>(
            (c.examples.size() + static_cast<size_t>(cfg.batch_size) - 1) /
            static_cast<size_t>(cfg.batch_size));
    }
    const int64_t total_steps = cfg.epochs * steps_per_epoch;
    const int64_t warmup_steps = cfg.warmup_epochs * steps_per_epoch;

    int64_t global_step = 0;
    for (int64_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        // Single-language batches, language-shuffled per epoch.
        std::vector<std::pair<size_t, std::vector<size_t>>> batches;
        for (size_t lang = 0; lang < corpora.size(); ++lang) {
            auto eng = make_engine(derive_seed(cfg.seed, "order." + data.specs[lang].language,
                                               static_cast<uint64_t>(epoch)));
            for (auto& slice : batch_slices(corpora[lang].examples.size(), cfg.batch_size, eng)) {
                batches.emplace_back(lang, std::move(slice));
            }
        }
        auto order_eng =
            make_engine(derive_seed(cfg.seed, "batch_order", static_cast<uint64_t>(epoch)));
        deterministic_shuffle(batches, order_eng);

        EpochStats stats;
        for (const auto& [lang, indexes] : batches) {
            const Batch batch = gather_batch(data.vocab, corpora[lang], indexes);
            const double lr = lr_schedule(global_step + 1, total_steps, warmup_steps, cfg.lr_peak);

            ForwardCtx ctx;
            ctx.train = true;
            const EncodedSource enc = result.model->encode(batch.src, ctx);
            const Tensor logits = result.model->decode_logits(enc, batch.dec_in, ctx);
            Tensor loss = cross_entropy_smoothed(logits, batch.labels, batch.label_mask,
                                                 cfg.label_smoothing);
            const double value = loss.scalar_value();
            check_finite(value, "pretraining", epoch, global_step);
            loss.backward();
            opt.step(lr);

            stats.total += value;
            stats.ce += value;
            ++stats.steps;
            ++global_step;
        }
        if (stats.steps > 0) {
            stats.total /= static_cast<double>(stats.steps);
            stats.ce /= static_cast<double>(stats.steps);
        }
        result.epochs.push_back(stats);
    }
    return result;
}

std::vector<size_t> trainable_param_indexes(const std::vector<NamedParam>& params,
                                            const std::string& regime,
                                            const std::string& language) {
    if (!known_regime(regime)) throw ConfigError("unknown regime '" + regime + "'");
    std::vector<size_t> out;
    for (size_t i = 0; i < params.size(); ++i) {
        const NamedParam& p = params[i];
        bool pick = false;
        if (regime == "ft") {
            pick = true;
        } else if (regime == "lora_ft") {
            pick = p.name.find(".lora.") != std::string::npos;
        } else {
            pick = p.owner == language;
        }
        if (pick) out.push_back(i);
    }
    return out;
}

RunRecord finetune(Seq2SeqModel& student, Seq2SeqModel* teacher, int lang_idx,
                   const DataBundle& data, const SplitSizes& sizes, const TrainConfig& cfg) {
    cfg.validate();
    if (lang_idx < 0 || lang_idx >= static_cast<int>(data.specs.size())) {
        throw ParameterError("finetune: language index out of range");
    }
    const std::string& language = data.specs[static_cast<size_t>(lang_idx)].language;

    const std::string& kind = student.config().ffn_kind;
    const bool routed = cfg.regime == "clsr_ft" || cfg.regime == "clsr_kd";
    if (cfg.regime == "ft" && kind != "dense") {
        throw ContractError("regime ft expects a dense student, got " + kind);
    }
    if (cfg.regime == "lora_ft" && kind != "lora") {
        throw ContractError("regime lora_ft expects an adapter student, got " + kind);
    }
    if (routed && kind != "clsr") {
        throw ContractError("regime " + cfg.regime + " expects a routed student, got " + kind);
    }
    const bool wants_teacher = cfg.kd_kind != "none";
    if (wants_teacher != (teacher != nullptr)) {
        throw ContractError(wants_teacher ? "kd_kind set but no teacher given"
                                          : "teacher given but kd_kind is none");
    }
    if (teacher && teacher->config().vocab_size != student.config().vocab_size) {
        throw ContractError("teacher and student vocabularies differ");
    }
    if (sizes.finetune < 1 || sizes.validation < 1 || sizes.test < 1) {
        throw ConfigError("split sizes must be >= 1");
    }

    int ctx_language = -1;
    if (routed) {
        const auto& langs = student.config().languages;
        const auto it = std::find(langs.begin(), langs.end(), language);
        if (it == langs.end()) {
            throw RoutingError("student has no language branch for '" + language + "'");
        }
        ctx_language = static_cast<int>(it - langs.begin());
    }
    if (teacher) teacher->set_all_requires_grad(false);

    const Corpus train_split =
        build_corpus(data.task, data.specs, lang_idx, Role::kFinetune, sizes.finetune);
    const Corpus val_split =
        build_corpus(data.task, data.specs, lang_idx, Role::kValidation, sizes.validation);
    const Corpus test_in =
        build_corpus(data.task, data.specs, lang_idx, Role::kTestIn, sizes.test);
    const Corpus test_out =
        build_corpus(data.task, data.specs, lang_idx, Role::kTestOut, sizes.test);

    std::vector<NamedParam> params = student.collect_params();
    const std::vector<size_t> trainable = trainable_param_indexes(params, cfg.regime, language);
    if (trainable.empty()) throw ContractError("regime selects no trainable parameters");
    student.set_all_requires_grad(false);
    std::vector<Tensor> tensors;
    tensors.reserve(trainable.size());
    int64_t trainable_count = 0;
    for (size_t i : trainable) {
        params[i].tensor.set_requires_grad(true);
        tensors.push_back(params[i].tensor);
        trainable_count += static_cast<int64_t>(params[i].tensor.values().size());
    }
    Optimizer opt(std::move(tensors), cfg);

    const auto steps_per_epoch = static_cast<int64_t>(
        (train_split.examples.size() + static_cast<size_t>(cfg.batch_size) - 1) /
        static_cast<size_t>(cfg.batch_size));
    const int64_t total_steps = cfg.epochs * steps_per_epoch;
    const int64_t warmup_steps = cfg.warmup_epochs * steps_per_epoch;
    const GateNoiseSchedule noise{cfg.gate_noise_max, total_steps};

    auto train_rng = make_engine(derive_seed(cfg.seed, "train_rng"));
    const KdConfig kd{cfg.kd_kind == "none" ? "js" : cfg.kd_kind,
                      cfg.kd_kind == "none" ? 0.0 : cfg.kd_alpha, cfg.kd_tau};

    RunRecord record;
    record.regime = cfg.regime;
    record.language = language;
    record.seed = cfg.seed;

    double best_wer = 0.0;
    std::vector<std::vector<double>> best_snapshot;

    int64_t global_step = 0;
    for (int64_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        auto order_eng =
            make_engine(derive_seed(cfg.seed, "order", static_cast<uint64_t>(epoch)));
        EpochStats stats;
        for (const auto& indexes :
             batch_slices(train_split.examples.size(), cfg.batch_size, order_eng)) {
            const Batch batch = gather_batch(data.vocab, train_split, indexes);
            const double lr = lr_schedule(global_step + 1, total_steps, warmup_steps, cfg.lr_peak);

            GateRecord gates;
            ForwardCtx ctx;
            ctx.train = true;
            ctx.language = ctx_language;
            ctx.rng = &train_rng;
            if (routed) {
                ctx.gate_noise_sigma = noise.sigma_at(global_step);
                ctx.skip_prob = cfg.skip_prob;
                ctx.gates = &gates;
            }
            const EncodedSource enc = student.encode(batch.src, ctx);
            const Tensor logits = student.decode_logits(enc, batch.dec_in, ctx);

            Tensor teacher_logits;
            if (teacher && kd.alpha > 0.0) {
                ForwardCtx tctx;
                tctx.train = false;
                const EncodedSource tenc = teacher->encode(batch.src, tctx);
                teacher_logits = teacher->decode_logits(tenc, batch.dec_in, tctx);
            }

            const LossBreakdown loss = combined_loss(
                logits, batch.labels, batch.label_mask, cfg.label_smoothing,
                routed ? &gates : nullptr, cfg.gate_budget,
                teacher && kd.alpha > 0.0 ? &teacher_logits : nullptr, kd);
            const double value = loss.total.scalar_value();
            check_finite(value, "fine-tuning", epoch, global_step);
            Tensor total = loss.total;
            total.backward();
            opt.step(lr);

            stats.total += value;
            stats.ce += loss.ce;
            stats.gate += loss.gate;
            stats.kd += loss.kd;
            ++stats.steps;
            ++global_step;
        }
        if (stats.steps > 0) {
            const auto n = static_cast<double>(stats.steps);
            stats.total /= n;
            stats.ce /= n;
            stats.gate /= n;
            stats.kd /= n;
        }
        stats.val_wer = evaluate_wer(student, val_split, data.vocab).wer;
        record.epochs.push_back(stats);

        if (record.best_epoch < 0 || stats.val_wer < best_wer) {
            best_wer = stats.val_wer;
            record.best_epoch = epoch;
            best_snapshot = snapshot_values(params);
        }
    }
    restore_values(params, best_snapshot);

    record.metrics["wer.validation"] = best_wer;
    record.metrics["wer.test_in"] = evaluate_wer(student, test_in, data.vocab).wer;
    record.metrics["wer.test_out"] = evaluate_wer(student, test_out, data.vocab).wer;
    record.param_counts["trainable"] = trainable_count;
    int64_t total_params = 0;
    for (NamedParam& p : params) total_params += static_cast<int64_t>(p.tensor.values().size());
    record.param_counts["total"] = total_params;
    if (routed) {
        record.metrics["gate_usage.test_in"] = gate_usage_stats(student, test_in, data.vocab).overall;
        record.metrics["gate_usage.test_out"] =
            gate_usage_stats(student, test_out, data.vocab).overall;
        const ParamOverhead overhead = param_overhead(student, {language});
        record.param_counts["language_branch"] = overhead.per_language.front().second;
        record.param_counts["shared"] = overhead.shared;
        record.metrics["overhead_ratio"] = overhead.ratio;
    }

    record.config["train"] = cfg.to_json();
    record.config["model"] = nlohmann::json::parse(model_config_to_json(student.config()));
    record.config["task"] = task_to_json(data.task);
    record.config["sizes"] = {{"finetune", sizes.finetune},
                              {"validation", sizes.validation},
                              {"test", sizes.test}};
    return record;
}

}  // namespace clsr
