#include "clsr/clsr_layer.hpp"

#include <cmath>

#include "clsr/error.hpp"
#include "clsr/ops.hpp"
#include "clsr/rng.hpp"

namespace clsr {

namespace {

Tensor normal_init(Shape shape, std::mt19937_64& eng, double stddev = 0.02) {
    std::normal_distribution<double> dist(0.0, stddev);
    std::vector<double> v(static_cast<size_t>(numel_of(shape)));
    for (double& e : v) e = dist(eng);
    return Tensor(std::move(shape), std::move(v), true);
}

}  // namespace

ClsrLayer::ClsrLayer(std::string layer_name, FfnCore shared,
                     const std::vector<std::string>& languages, int64_t d_model, int64_t d_gate,
                     std::mt19937_64& eng)
    : name_(std::move(layer_name)), shared_(std::move(shared)) {
    if (languages.empty()) throw ConfigError("routed layer needs at least one language");
    if (d_gate <= 0) throw ConfigError("gate bottleneck must be positive");
    slots_.reserve(languages.size());
    for (const std::string& lang : languages) {
        LangSlot s;
        s.language = lang;
        s.ls = FfnCore::copy_of(shared_);
        s.gate_w1 = normal_init({d_model, d_gate}, eng);
        s.gate_b1 = Tensor(Shape{d_gate}, 0.0, true);
        // Zero up-map: the initial logit is exactly 0, so the soft gate
        // starts at 0.5 and the hard gate routes to the shared branch.
        s.gate_w2 = Tensor(Shape{d_gate, 1}, 0.0, true);
        s.gate_b2 = Tensor(Shape{1}, 0.0, true);
        slots_.push_back(std::move(s));
    }
}

Tensor ClsrLayer::gate_logits(const Tensor& x, size_t lang_idx) const {
    const LangSlot& s = slots_.at(lang_idx);
    Tensor h = relu(add_bias(matmul(x, s.gate_w1), s.gate_b1));
    Tensor logit = add_bias(matmul(h, s.gate_w2), s.gate_b2);
    return reshape(logit, Shape{x.shape()[0]});
}

Tensor ClsrLayer::forward(const Tensor& x, ForwardCtx& ctx) {
    if (ctx.language < 0 || static_cast<size_t>(ctx.language) >= slots_.size()) {
        throw RoutingError("layer " + name_ + " has no language slot " +
                           std::to_string(ctx.language));
    }
    const auto lang_idx = static_cast<size_t>(ctx.language);
    const int64_t n = x.shape()[0];

    std::vector<uint8_t> counted;
    if (ctx.token_counted) {
        if (static_cast<int64_t>(ctx.token_counted->size()) != n) {
            throw ContractError("token mask of " + std::to_string(ctx.token_counted->size()) +
                                " entries for " + std::to_string(n) + " rows");
        }
        counted = *ctx.token_counted;
    } else {
        counted.assign(static_cast<size_t>(n), 1);
    }

    Tensor shared_out = shared_.forward(x);

    if (ctx.forced_gate) {
        Tensor g(Shape{n}, *ctx.forced_gate, false);
        Tensor ls_out = slots_[lang_idx].ls.forward(x);
        if (ctx.gates) ctx.gates->entries.push_back({name_, g, std::move(counted)});
        return add(scale_rows(ls_out, g), scale_rows(shared_out, sadd(neg(g), 1.0)));
    }

    if (ctx.train) {
        if (ctx.rng == nullptr) throw ContractError("training forward requires an RNG");
        bool skipped = false;
        if (ctx.skip_prob > 0.0) {
            skipped = std::bernoulli_distribution(ctx.skip_prob)(*ctx.rng);
        }
        if (skipped) {
            // The language branch is bypassed entirely this step: the output
            // is the shared branch, no gradient reaches the slot, and the
            // layer's tokens drop out of the budget on both sides.
            std::fill(counted.begin(), counted.end(), uint8_t{0});
            if (ctx.gates) {
                ctx.gates->entries.push_back({name_, Tensor(Shape{n}, 0.0, false), std::move(counted)});
            }
            return shared_out;
        }
        Tensor logit = gate_logits(x, lang_idx);
        if (ctx.gate_noise_sigma > 0.0) {
            std::normal_distribution<double> nd(0.0, ctx.gate_noise_sigma);
            std::vector<double> eps(static_cast<size_t>(n));
            for (double& e : eps) e = nd(*ctx.rng);
            logit = add(logit, Tensor(Shape{n}, std::move(eps), false));
        }
        Tensor g = sigmoid(logit);
        Tensor ls_out = slots_[lang_idx].ls.forward(x);
        if (ctx.gates) ctx.gates->entries.push_back({name_, g, std::move(counted)});
        return add(scale_rows(ls_out, g), scale_rows(shared_out, sadd(neg(g), 1.0)));
    }

    // Inference: hard routing. A zero logit falls back to the shared branch.
    Tensor logit = gate_logits(x, lang_idx);
    std::vector<double> hard(static_cast<size_t>(n));
    for (int64_t i = 0; i < n; ++i) hard[i] = logit.value_at(i) > 0.0 ? 1.0 : 0.0;
    Tensor g(Shape{n}, std::move(hard), false);
    Tensor ls_out = slots_[lang_idx].ls.forward(x);
    if (ctx.gates) ctx.gates->entries.push_back({name_, g, std::move(counted)});
    return add(scale_rows(ls_out, g), scale_rows(shared_out, sadd(neg(g), 1.0)));
}

void ClsrLayer::collect_params(const std::string& prefix, std::vector<NamedParam>& out) {
    shared_.collect(prefix + ".shared", "shared", out);
    for (LangSlot& s : slots_) {
        s.ls.collect(prefix + ".ls." + s.language, s.language, out);
        out.push_back({prefix + ".gate." + s.language + ".w1", s.language, s.gate_w1});
        out.push_back({prefix + ".gate." + s.language + ".b1", s.language, s.gate_b1});
        out.push_back({prefix + ".gate." + s.language + ".w2", s.language, s.gate_w2});
        out.push_back({prefix + ".gate." + s.language + ".b2", s.language, s.gate_b2});
    }
}

// ---------------------------------------------------------------------------

LoraFfn::LoraFfn(FfnCore base, int64_t rank, double alpha, std::mt19937_64& eng)
    : base_(std::move(base)) {
    if (rank <= 0 || alpha <= 0.0) throw ConfigError("adapter rank and alpha must be positive");
    const int64_t d_model = base_.w1.shape()[0];
    const int64_t d_ff = base_.w1.shape()[1];
    a1_ = normal_init({d_model, rank}, eng);
    u1_ = Tensor(Shape{rank, d_ff}, 0.0, true);
    a2_ = normal_init({d_ff, rank}, eng);
    u2_ = Tensor(Shape{rank, d_model}, 0.0, true);
    scale_ = alpha / static_cast<double>(rank);
}

Tensor LoraFfn::forward(const Tensor& x, ForwardCtx&) {
    Tensor pre1 = add(add_bias(matmul(x, base_.w1), base_.b1),
                      smul(matmul(matmul(x, a1_), u1_), scale_));
    Tensor h = relu(pre1);
    return add(add_bias(matmul(h, base_.w2), base_.b2), smul(matmul(matmul(h, a2_), u2_), scale_));
}

void LoraFfn::collect_params(const std::string& prefix, std::vector<NamedParam>& out) {
    base_.collect(prefix + ".base", "shared", out);
    out.push_back({prefix + ".lora.a1", "shared", a1_});
    out.push_back({prefix + ".lora.u1", "shared", u1_});
    out.push_back({prefix + ".lora.a2", "shared", a2_});
    out.push_back({prefix + ".lora.u2", "shared", u2_});
}

// ---------------------------------------------------------------------------

void convert_ffn_to_clsr(Seq2SeqModel& model, const std::vector<std::string>& languages) {
    ModelConfig& cfg = model.mutable_config();
    if (cfg.ffn_kind != "dense") {
        throw ContractError("feed-forward slots already converted to " + cfg.ffn_kind);
    }
    model.for_each_ffn([&](const std::string& layer_name, std::unique_ptr<FfnModule>& slot) {
        auto* dense = dynamic_cast<DenseFfn*>(slot.get());
        if (!dense) throw ContractError("unexpected slot type in layer " + layer_name);
        std::mt19937_64 eng =
            make_engine(derive_seed(model.init_seed(), "clsr_convert." + layer_name));
        slot = std::make_unique<ClsrLayer>(layer_name, std::move(dense->core()), languages,
                                           cfg.d_model, cfg.gate_dim(), eng);
    });
    cfg.ffn_kind = "clsr";
    cfg.languages = languages;
}

void convert_ffn_to_lora(Seq2SeqModel& model, int64_t rank, double alpha) {
    ModelConfig& cfg = model.mutable_config();
    if (cfg.ffn_kind != "dense") {
        throw ContractError("feed-forward slots already converted to " + cfg.ffn_kind);
    }
    model.for_each_ffn([&](const std::string& layer_name, std::unique_ptr<FfnModule>& slot) {
        auto* dense = dynamic_cast<DenseFfn*>(slot.get());
        if (!dense) throw ContractError("unexpected slot type in layer " + layer_name);
        std::mt19937_64 eng =
            make_engine(derive_seed(model.init_seed(), "lora_convert." + layer_name));
        slot = std::make_unique<LoraFfn>(std::move(dense->core()), rank, alpha, eng);
    });
    cfg.ffn_kind = "lora";
    cfg.lora_rank = rank;
    cfg.lora_alpha = alpha;
}

}  // namespace clsr
