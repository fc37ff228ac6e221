#include <doctest.h>

#include <cmath>
#include <random>
#include <set>

#include "clsr/clsr_layer.hpp"
#include "clsr/error.hpp"
#include "clsr/model.hpp"
#include "clsr/ops.hpp"
#include "clsr/rng.hpp"

using namespace clsr;

namespace {

ModelConfig tiny_config() {
    ModelConfig cfg;
    cfg.vocab_size = 12;
    cfg.d_model = 8;
    cfg.n_heads = 2;
    cfg.d_ff = 16;
    cfg.enc_layers = 1;
    cfg.dec_layers = 1;
    cfg.max_len = 16;
    return cfg;
}

Tensor randu(std::mt19937_64& eng, Shape shape, double lo = -1.0, double hi = 1.0) {
    std::uniform_real_distribution<double> d(lo, hi);
    std::vector<double> v(static_cast<size_t>(numel_of(shape)));
    for (double& e : v) e = d(eng);
    return Tensor(std::move(shape), std::move(v));
}

ClsrLayer make_layer(std::mt19937_64& eng, int64_t d_model = 6, int64_t d_ff = 10,
                     std::vector<std::string> langs = {"l0", "l1"}) {
    FfnCore core(d_model, d_ff, eng);
    return ClsrLayer("test", std::move(core), langs, d_model, d_model / 2, eng);
}

void randomize_gate(LangSlot& s, std::mt19937_64& eng) {
    std::normal_distribution<double> nd(0.0, 0.8);
    for (Tensor* t : {&s.gate_w1, &s.gate_b1, &s.gate_w2, &s.gate_b2}) {
        for (double& v : t->values()) v = nd(eng);
    }
}

}  // namespace

TEST_CASE("language branches start as bit-exact copies of the shared core") {
    std::mt19937_64 eng(101);
    ClsrLayer layer = make_layer(eng);
    for (size_t i = 0; i < layer.n_languages(); ++i) {
        CHECK(layer.slot(i).ls.w1.values() == layer.shared().w1.values());
        CHECK(layer.slot(i).ls.b1.values() == layer.shared().b1.values());
        CHECK(layer.slot(i).ls.w2.values() == layer.shared().w2.values());
        CHECK(layer.slot(i).ls.b2.values() == layer.shared().b2.values());
        // but they are distinct tensors
        layer.slot(i).ls.w1.values()[0] += 1.0;
        CHECK(layer.slot(i).ls.w1.values() != layer.shared().w1.values());
        layer.slot(i).ls.w1.values()[0] -= 1.0;
    }
}

TEST_CASE("fresh gates output exactly one half in training mode") {
    std::mt19937_64 eng(103);
    ClsrLayer layer = make_layer(eng);
    Tensor x = randu(eng, {5, 6});
    std::mt19937_64 rng(1);
    GateRecord rec;
    ForwardCtx ctx;
    ctx.train = true;
    ctx.language = 0;
    ctx.rng = &rng;
    ctx.gates = &rec;
    layer.forward(x, ctx);
    REQUIRE(rec.entries.size() == 1);
    for (int64_t i = 0; i < 5; ++i) CHECK(rec.entries[0].gate.value_at(i) == 0.5);
}

TEST_CASE("training output mixes the branches exactly per token") {
    std::mt19937_64 eng(107);
    ClsrLayer layer = make_layer(eng);
    randomize_gate(layer.slot(0), eng);

    // 1000 random tokens in batches to keep graphs small.
    for (int rep = 0; rep < 10; ++rep) {
        Tensor x = randu(eng, {100, 6});
        std::mt19937_64 rng(static_cast<uint64_t>(rep) + 1);
        GateRecord rec;
        ForwardCtx ctx;
        ctx.train = true;
        ctx.language = 0;
        ctx.rng = &rng;
        ctx.gates = &rec;
        Tensor out = layer.forward(x, ctx);

        Tensor ls = layer.slot(0).ls.forward(x);
        Tensor sh = layer.shared().forward(x);
        const Tensor& g = rec.entries[0].gate;
        for (int64_t i = 0; i < 100; ++i) {
            const double gi = g.value_at(i);
            for (int64_t c = 0; c < 6; ++c) {
                const double want = gi * ls.value_at(i * 6 + c) + (1.0 - gi) * sh.value_at(i * 6 + c);
                CHECK(out.value_at(i * 6 + c) == doctest::Approx(want).epsilon(1e-12));
            }
        }
    }
}

TEST_CASE("recorded gates equal the sigmoid of the raw logits when noise is off") {
    std::mt19937_64 eng(109);
    ClsrLayer layer = make_layer(eng);
    randomize_gate(layer.slot(1), eng);
    Tensor x = randu(eng, {7, 6});
    std::mt19937_64 rng(2);
    GateRecord rec;
    ForwardCtx ctx;
    ctx.train = true;
    ctx.language = 1;
    ctx.rng = &rng;
    ctx.gates = &rec;
    layer.forward(x, ctx);
    Tensor logits = layer.gate_logits(x, 1);
    for (int64_t i = 0; i < 7; ++i) {
        const double want = 1.0 / (1.0 + std::exp(-logits.value_at(i)));
        CHECK(rec.entries[0].gate.value_at(i) == doctest::Approx(want).epsilon(1e-12));
    }
}

TEST_CASE("forced gates reduce to a single branch bit-exactly") {
    std::mt19937_64 eng(113);
    ClsrLayer layer = make_layer(eng);
    randomize_gate(layer.slot(0), eng);
    Tensor x = randu(eng, {9, 6});
    Tensor ls = layer.slot(0).ls.forward(x);
    Tensor sh = layer.shared().forward(x);

    ForwardCtx ctx;
    ctx.language = 0;
    ctx.forced_gate = 1.0;
    Tensor out1 = layer.forward(x, ctx);
    for (int64_t i = 0; i < out1.numel(); ++i) CHECK(out1.value_at(i) == ls.value_at(i));

    ctx.forced_gate = 0.0;
    Tensor out0 = layer.forward(x, ctx);
    for (int64_t i = 0; i < out0.numel(); ++i) CHECK(out0.value_at(i) == sh.value_at(i));
}

TEST_CASE("inference routes hard and breaks ties toward the shared branch") {
    std::mt19937_64 eng(127);
    ClsrLayer layer = make_layer(eng);
    randomize_gate(layer.slot(0), eng);
    Tensor x = randu(eng, {50, 6});

    GateRecord rec;
    ForwardCtx ctx;
    ctx.language = 0;
    ctx.gates = &rec;
    Tensor out = layer.forward(x, ctx);

    Tensor logits = layer.gate_logits(x, 0);
    Tensor ls = layer.slot(0).ls.forward(x);
    Tensor sh = layer.shared().forward(x);
    bool saw_ls = false, saw_shared = false;
    for (int64_t i = 0; i < 50; ++i) {
        const double g = rec.entries[0].gate.value_at(i);
        CHECK((g == 0.0 || g == 1.0));
        const bool to_ls = logits.value_at(i) > 0.0;
        CHECK(g == (to_ls ? 1.0 : 0.0));
        saw_ls = saw_ls || to_ls;
        saw_shared = saw_shared || !to_ls;
        for (int64_t c = 0; c < 6; ++c) {
            const double want = to_ls ? ls.value_at(i * 6 + c) : sh.value_at(i * 6 + c);
            CHECK(out.value_at(i * 6 + c) == want);
        }
    }
    CHECK(saw_ls);
    CHECK(saw_shared);

    // A freshly initialized gate has logit exactly 0 everywhere: shared wins.
    ClsrLayer fresh = make_layer(eng);
    GateRecord rec2;
    ForwardCtx ctx2;
    ctx2.language = 0;
    ctx2.gates = &rec2;
    Tensor out2 = fresh.forward(x, ctx2);
    Tensor sh2 = fresh.shared().forward(x);
    for (int64_t i = 0; i < out2.numel(); ++i) CHECK(out2.value_at(i) == sh2.value_at(i));
    for (int64_t i = 0; i < 50; ++i) CHECK(rec2.entries[0].gate.value_at(i) == 0.0);
}

TEST_CASE("skipped layers bypass the language branch and leave the budget") {
    std::mt19937_64 eng(131);
    ClsrLayer layer = make_layer(eng);
    randomize_gate(layer.slot(0), eng);
    Tensor x = randu(eng, {4, 6});
    Tensor sh = layer.shared().forward(x);

    std::mt19937_64 rng(3);
    GateRecord rec;
    ForwardCtx ctx;
    ctx.train = true;
    ctx.language = 0;
    ctx.rng = &rng;
    ctx.skip_prob = 1.0;  // always skip
    ctx.gates = &rec;
    std::vector<uint8_t> tokens{1, 1, 0, 1};
    ctx.token_counted = &tokens;
    Tensor out = layer.forward(x, ctx);
    for (int64_t i = 0; i < out.numel(); ++i) CHECK(out.value_at(i) == sh.value_at(i));
    REQUIRE(rec.entries.size() == 1);
    for (uint8_t c : rec.entries[0].counted) CHECK(c == 0);

    // skip_prob 0 keeps the token mask as counted
    GateRecord rec2;
    ctx.skip_prob = 0.0;
    ctx.gates = &rec2;
    layer.forward(x, ctx);
    CHECK(rec2.entries[0].counted == tokens);
}

TEST_CASE("gate noise perturbs soft gates deterministically") {
    std::mt19937_64 eng(137);
    ClsrLayer layer = make_layer(eng);
    randomize_gate(layer.slot(0), eng);
    Tensor x = randu(eng, {6, 6});

    auto gates_with = [&](double sigma, uint64_t seed) {
        std::mt19937_64 rng(seed);
        GateRecord rec;
        ForwardCtx ctx;
        ctx.train = true;
        ctx.language = 0;
        ctx.rng = &rng;
        ctx.gate_noise_sigma = sigma;
        ctx.gates = &rec;
        layer.forward(x, ctx);
        return rec.entries[0].gate.values();
    };

    auto clean = gates_with(0.0, 7);
    auto noisy1 = gates_with(0.8, 7);
    auto noisy2 = gates_with(0.8, 7);
    auto noisy3 = gates_with(0.8, 8);
    CHECK(noisy1 == noisy2);
    CHECK(noisy1 != clean);
    CHECK(noisy1 != noisy3);
}

TEST_CASE("routing errors surface clearly") {
    std::mt19937_64 eng(139);
    ClsrLayer layer = make_layer(eng);
    Tensor x = randu(eng, {2, 6});
    ForwardCtx ctx;
    ctx.language = 5;
    CHECK_THROWS_AS(layer.forward(x, ctx), RoutingError);
    ctx.language = -1;
    CHECK_THROWS_AS(layer.forward(x, ctx), RoutingError);
    ctx.language = 0;
    ctx.train = true;
    ctx.rng = nullptr;
    CHECK_THROWS_AS(layer.forward(x, ctx), ContractError);
}

TEST_CASE("gate noise schedule ramps linearly") {
    GateNoiseSchedule sch;
    sch.sigma_max = 1.0;
    sch.total_steps = 200;
    CHECK(sch.sigma_at(0) == 0.0);
    CHECK(sch.sigma_at(100) == doctest::Approx(0.5).epsilon(1e-12));
    CHECK(sch.sigma_at(200) == 1.0);
    CHECK(sch.sigma_at(500) == 1.0);
    CHECK(sch.sigma_at(-5) == 0.0);
}

TEST_CASE("model conversion preserves shared weights and adds owned slots") {
    Seq2SeqModel model(tiny_config(), 41);
    auto before = model.collect_params();
    std::vector<double> enc_ffn_w1;
    for (auto& p : before) {
        if (p.name == "enc.l0.ffn.w1") enc_ffn_w1 = p.tensor.values();
    }
    REQUIRE_FALSE(enc_ffn_w1.empty());

    convert_ffn_to_clsr(model, {"l0", "l1", "l2"});
    CHECK(model.config().ffn_kind == "clsr");
    auto after = model.collect_params();

    std::set<std::string> owners;
    bool shared_preserved = false, ls_copied = false;
    for (auto& p : after) {
        owners.insert(p.owner);
        if (p.name == "enc.l0.ffn.shared.w1") shared_preserved = p.tensor.values() == enc_ffn_w1;
        if (p.name == "enc.l0.ffn.ls.l1.w1") ls_copied = p.tensor.values() == enc_ffn_w1;
    }
    CHECK(shared_preserved);
    CHECK(ls_copied);
    CHECK(owners == std::set<std::string>{"shared", "l0", "l1", "l2"});

    CHECK_THROWS_AS(convert_ffn_to_clsr(model, {"l0"}), ContractError);
}

TEST_CASE("routed model forward uses the requested language") {
    Seq2SeqModel model(tiny_config(), 43);
    convert_ffn_to_clsr(model, {"l0", "l1"});
    TokenBatch src = TokenBatch::from_rows({{3, 4, 5}});
    TokenBatch dec = TokenBatch::from_rows({{kBosId, 3}});

    std::mt19937_64 rng(5);
    GateRecord rec;
    ForwardCtx ctx;
    ctx.train = true;
    ctx.language = 0;
    ctx.rng = &rng;
    ctx.gates = &rec;
    Tensor logits = model.decode_logits(model.encode(src, ctx), dec, ctx);
    CHECK(all_finite(logits));
    // one gate entry per routed layer (1 encoder + 1 decoder)
    CHECK(rec.entries.size() == 2);
    // encoder entries count source tokens, decoder entries decoder tokens
    CHECK(rec.entries[0].counted.size() == 3);
    CHECK(rec.entries[1].counted.size() == 2);

    ForwardCtx no_lang;
    CHECK_THROWS_AS(model.encode(src, no_lang), RoutingError);
}

TEST_CASE("adapter conversion is exact at initialization") {
    Seq2SeqModel base(tiny_config(), 47);
    Seq2SeqModel wrapped(tiny_config(), 47);
    convert_ffn_to_lora(wrapped, 4, 8.0);

    TokenBatch src = TokenBatch::from_rows({{3, 4, 5}, {6, 7}});
    TokenBatch dec = TokenBatch::from_rows({{kBosId, 3}, {kBosId, 4}});
    ForwardCtx ctx;
    Tensor a = base.decode_logits(base.encode(src, ctx), dec, ctx);
    Tensor b = wrapped.decode_logits(wrapped.encode(src, ctx), dec, ctx);
    REQUIRE(a.numel() == b.numel());
    for (int64_t i = 0; i < a.numel(); ++i) CHECK(a.value_at(i) == b.value_at(i));

    // Nudging an up-map changes the output.
    bool nudged = false;
    for (auto& p : wrapped.collect_params()) {
        if (p.name == "enc.l0.ffn.lora.u1") {
            p.tensor.values()[0] = 0.5;
            nudged = true;
        }
    }
    REQUIRE(nudged);
    Tensor c = wrapped.decode_logits(wrapped.encode(src, ctx), dec, ctx);
    bool changed = false;
    for (int64_t i = 0; i < a.numel(); ++i) changed = changed || a.value_at(i) != c.value_at(i);
    CHECK(changed);
}

TEST_CASE("adapter parameters are named for masking") {
    Seq2SeqModel model(tiny_config(), 53);
    convert_ffn_to_lora(model, 4, 8.0);
    int adapters = 0, bases = 0;
    for (auto& p : model.collect_params()) {
        if (p.name.find(".lora.") != std::string::npos) {
            ++adapters;
            CHECK(p.owner == "shared");
        }
        if (p.name.find(".ffn.base.") != std::string::npos) ++bases;
    }
    CHECK(adapters == 2 * 4);  // 2 layers, 4 adapter tensors each
    CHECK(bases == 2 * 4);
}

TEST_CASE("routed layer gradients pass finite differences") {
    std::mt19937_64 eng(149);
    ClsrLayer layer = make_layer(eng, 4, 6, {"l0"});
    randomize_gate(layer.slot(0), eng);
    Tensor x = randu(eng, {3, 4});

    std::vector<std::pair<std::string, Tensor>> params;
    std::vector<NamedParam> collected;
    layer.collect_params("ffn", collected);
    std::uniform_real_distribution<double> rd(-0.5, 0.5);
    for (auto& p : collected) {
        // Re-draw at a healthy magnitude so no gradient sits at the noise
        // floor of the finite differences.
        for (double& v : p.tensor.values()) v = rd(eng);
        p.tensor.set_requires_grad(true);
        params.push_back({p.name, p.tensor});
    }
    auto loss_fn = [&] {
        ForwardCtx ctx;
        ctx.language = 0;
        ctx.train = true;
        std::mt19937_64 rng(9);
        ctx.rng = &rng;
        Tensor out = layer.forward(x, ctx);
        std::vector<double> w(static_cast<size_t>(out.numel()));
        for (size_t i = 0; i < w.size(); ++i) w[i] = 0.05 * static_cast<double>(i % 5) - 0.1;
        return sum(mul(out, Tensor(out.shape(), std::move(w))));
    };
    CHECK(finite_difference_check(loss_fn, params).max_rel_error < 1e-4);
}
