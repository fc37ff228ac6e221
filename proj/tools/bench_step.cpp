// Micro-benchmark: wall time of one training step (forward + backward +
// update) and one greedy decode at the default teacher/student sizes. Used
// for sizing pipeline defaults, not part of the test suite.
#include <chrono>
#include <cstdio>

#include "clsr/clsr_layer.hpp"
#include "clsr/losses.hpp"
#include "clsr/model.hpp"
#include "clsr/rng.hpp"
#include "clsr/synth.hpp"
#include "clsr/train.hpp"

using namespace clsr;
using Clock = std::chrono::steady_clock;

namespace {

double ms_since(Clock::time_point t0) {
    return std::chrono::duration<double, std::milli>(Clock::now() - t0).count();
}

void bench(const char* label, ModelConfig mc, const DataBundle& data, bool routed) {
    Seq2SeqModel model(mc, 1);
    if (routed) convert_ffn_to_clsr(model, {"l4"});
    model.set_all_requires_grad(true);

    const Corpus corpus = build_corpus(data.task, data.specs, 4, Role::kFinetune, 16);
    std::vector<const Example*> rows;
    for (const Example& ex : corpus.examples) rows.push_back(&ex);
    const Batch batch = make_batch(data.vocab, 4, rows);

    TrainConfig tc;
    tc.regime = "ft";
    std::vector<NamedParam> params = model.collect_params();
    std::vector<Tensor> tensors;
    for (NamedParam& p : params) tensors.push_back(p.tensor);
    Optimizer opt(std::move(tensors), tc);

    auto rng = make_engine(7);
    // Warm once, then time a few steps.
    const int reps = 3;
    auto t0 = Clock::now();
    for (int r = 0; r < reps; ++r) {
        GateRecord gates;
        ForwardCtx ctx;
        ctx.train = true;
        ctx.rng = &rng;
        if (routed) {
            ctx.language = 0;
            ctx.gates = &gates;
            ctx.skip_prob = 0.2;
            ctx.gate_noise_sigma = 0.5;
        }
        const EncodedSource enc = model.encode(batch.src, ctx);
        const Tensor logits = model.decode_logits(enc, batch.dec_in, ctx);
        const LossBreakdown loss =
            combined_loss(logits, batch.labels, batch.label_mask, 0.1,
                          routed ? &gates : nullptr, 0.5, nullptr, KdConfig{"js", 0.0, 1.0});
        Tensor total = loss.total;
        total.backward();
        opt.step(1e-4);
    }
    const double step_ms = ms_since(t0) / reps;

    // Greedy decode of an out-of-domain batch (the expensive eval path).
    const Corpus out_split = build_corpus(data.task, data.specs, 4, Role::kTestOut, 16);
    std::vector<const Example*> out_rows;
    for (const Example& ex : out_split.examples) out_rows.push_back(&ex);
    const Batch out_batch = make_batch(data.vocab, 4, out_rows);
    const std::vector<int> tags(out_rows.size(), data.vocab.lang_tag(4));
    ForwardCtx ictx;
    ictx.train = false;
    if (routed) ictx.language = 0;
    auto t1 = Clock::now();
    const auto emitted = greedy_decode(model, out_batch.src, tags, 30, ictx);
    const double decode_ms = ms_since(t1);

    std::printf("%-28s step %8.1f ms   decode(16 out-domain) %8.1f ms\n", label, step_ms,
                decode_ms);
}

}  // namespace

int main() {
    TaskConfig task;
    const DataBundle data = make_data(task);

    ModelConfig teacher;
    teacher.vocab_size = data.vocab.size();
    teacher.d_model = 64;
    teacher.n_heads = 4;
    teacher.d_ff = 256;
    teacher.enc_layers = 4;
    teacher.dec_layers = 4;
    teacher.max_len = 64;

    ModelConfig student = teacher;
    student.d_model = 32;
    student.n_heads = 2;
    student.d_ff = 128;
    student.enc_layers = 2;
    student.dec_layers = 2;

    bench("teacher d64 4+4 batch16", teacher, data, false);
    bench("student d32 2+2 batch16", student, data, false);
    bench("student clsr d32 2+2 b16", student, data, true);
    return 0;
}
