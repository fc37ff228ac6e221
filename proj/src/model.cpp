#include "clsr/model.hpp"

#include <algorithm>
#include <cmath>

#include "clsr/error.hpp"
#include "clsr/ops.hpp"
#include "clsr/rng.hpp"

namespace clsr {

namespace {

Tensor normal_init(Shape shape, std::mt19937_64& eng, double stddev) {
    std::normal_distribution<double> dist(0.0, stddev);
    std::vector<double> v(static_cast<size_t>(numel_of(shape)));
    for (double& e : v) e = dist(eng);
    return Tensor(std::move(shape), std::move(v), true);
}

// Fan-scaled init keeps activation and gradient magnitudes of order one at
// depth, which matters at these small widths where a fixed small stddev
// leaves attention logits near zero and stalls early learning.
Tensor glorot_init(Shape shape, std::mt19937_64& eng) {
    const double fan_in = static_cast<double>(shape[0]);
    const double fan_out = static_cast<double>(shape[1]);
    return normal_init(std::move(shape), eng, std::sqrt(2.0 / (fan_in + fan_out)));
}

Tensor zeros_param(Shape shape) { return Tensor(std::move(shape), 0.0, true); }

}  // namespace

void ModelConfig::validate() const {
    if (vocab_size <= kEosId + 1) throw ConfigError("vocab_size must exceed the reserved ids");
    if (d_model <= 0 || d_ff <= 0) throw ConfigError("d_model and d_ff must be positive");
    if (n_heads <= 0 || d_model % n_heads != 0) {
        throw ConfigError("n_heads must divide d_model (" + std::to_string(d_model) + " / " +
                          std::to_string(n_heads) + ")");
    }
    if (enc_layers <= 0 || dec_layers <= 0) throw ConfigError("layer counts must be positive");
    if (max_len < 4) throw ConfigError("max_len must be at least 4");
    if (ffn_kind != "dense" && ffn_kind != "clsr" && ffn_kind != "lora") {
        throw ConfigError("unknown ffn_kind '" + ffn_kind + "'");
    }
    if (ffn_kind == "clsr" && languages.empty()) {
        throw ConfigError("routed feed-forward needs at least one language");
    }
    if (d_gate < 0) throw ConfigError("d_gate must be non-negative");
    if (ffn_kind == "lora" && (lora_rank <= 0 || lora_alpha <= 0.0)) {
        throw ConfigError("adapter rank and alpha must be positive");
    }
}

// ---------------------------------------------------------------------------
// Feed-forward core

FfnCore::FfnCore(int64_t d_model, int64_t d_ff, std::mt19937_64& eng)
    : w1(glorot_init({d_model, d_ff}, eng)),
      b1(zeros_param({d_ff})),
      w2(glorot_init({d_ff, d_model}, eng)),
      b2(zeros_param({d_model})) {}

FfnCore FfnCore::copy_of(const FfnCore& other) {
    FfnCore c;
    c.w1 = Tensor(other.w1.shape(), other.w1.values(), true);
    c.b1 = Tensor(other.b1.shape(), other.b1.values(), true);
    c.w2 = Tensor(other.w2.shape(), other.w2.values(), true);
    c.b2 = Tensor(other.b2.shape(), other.b2.values(), true);
    return c;
}

Tensor FfnCore::forward(const Tensor& x) const {
    Tensor h = relu(add_bias(matmul(x, w1), b1));
    return add_bias(matmul(h, w2), b2);
}

void FfnCore::collect(const std::string& prefix, const std::string& owner,
                      std::vector<NamedParam>& out) {
    out.push_back({prefix + ".w1", owner, w1});
    out.push_back({prefix + ".b1", owner, b1});
    out.push_back({prefix + ".w2", owner, w2});
    out.push_back({prefix + ".b2", owner, b2});
}

Tensor DenseFfn::forward(const Tensor& x, ForwardCtx&) { return core_.forward(x); }

void DenseFfn::collect_params(const std::string& prefix, std::vector<NamedParam>& out) {
    core_.collect(prefix, "shared", out);
}

// ---------------------------------------------------------------------------
// Token batches and masks

TokenBatch TokenBatch::from_rows(const std::vector<std::vector<int>>& rows) {
    if (rows.empty()) throw ContractError("token batch needs at least one row");
    TokenBatch b;
    b.batch = static_cast<int64_t>(rows.size());
    size_t t = 1;
    for (const auto& r : rows) t = std::max(t, r.size());
    b.time = static_cast<int64_t>(t);
    b.ids.assign(static_cast<size_t>(b.batch) * t, kPadId);
    for (size_t r = 0; r < rows.size(); ++r) {
        std::copy(rows[r].begin(), rows[r].end(), b.ids.begin() + r * t);
    }
    b.non_pad.resize(b.ids.size());
    for (size_t i = 0; i < b.ids.size(); ++i) b.non_pad[i] = b.ids[i] != kPadId ? 1 : 0;
    return b;
}

std::vector<uint8_t> self_attention_keep(int64_t batch, int64_t time,
                                         const std::vector<uint8_t>& non_pad, int64_t heads,
                                         bool causal) {
    std::vector<uint8_t> keep(static_cast<size_t>(batch * heads * time * time));
    for (int64_t b = 0; b < batch; ++b) {
        for (int64_t h = 0; h < heads; ++h) {
            const int64_t base = ((b * heads + h) * time) * time;
            for (int64_t q = 0; q < time; ++q) {
                for (int64_t k = 0; k < time; ++k) {
                    const bool ok = non_pad[b * time + k] && (!causal || k <= q);
                    keep[base + q * time + k] = ok ? 1 : 0;
                }
            }
        }
    }
    return keep;
}

std::vector<uint8_t> cross_attention_keep(int64_t batch, int64_t t_q, int64_t t_k,
                                          const std::vector<uint8_t>& src_non_pad, int64_t heads) {
    std::vector<uint8_t> keep(static_cast<size_t>(batch * heads * t_q * t_k));
    for (int64_t b = 0; b < batch; ++b) {
        for (int64_t h = 0; h < heads; ++h) {
            const int64_t base = ((b * heads + h) * t_q) * t_k;
            for (int64_t q = 0; q < t_q; ++q) {
                for (int64_t k = 0; k < t_k; ++k) {
                    keep[base + q * t_k + k] = src_non_pad[b * t_k + k];
                }
            }
        }
    }
    return keep;
}

// ---------------------------------------------------------------------------
// Layer pieces

LayerNormParams::LayerNormParams(int64_t d) : gain(Shape{d}, 1.0, true), bias(Shape{d}, 0.0, true) {}

Tensor LayerNormParams::forward(const Tensor& x) const { return layer_norm(x, gain, bias); }

void LayerNormParams::collect(const std::string& prefix, std::vector<NamedParam>& out) {
    out.push_back({prefix + ".gain", "shared", gain});
    out.push_back({prefix + ".bias", "shared", bias});
}

AttentionParams::AttentionParams(int64_t d_model, int64_t heads, std::mt19937_64& eng)
    : wq(glorot_init({d_model, d_model}, eng)),
      bq(zeros_param({d_model})),
      wk(glorot_init({d_model, d_model}, eng)),
      bk(zeros_param({d_model})),
      wv(glorot_init({d_model, d_model}, eng)),
      bv(zeros_param({d_model})),
      wo(glorot_init({d_model, d_model}, eng)),
      bo(zeros_param({d_model})),
      n_heads(heads) {}

Tensor AttentionParams::forward(const Tensor& q_in, const Tensor& kv_in, int64_t batch, int64_t t_q,
                                int64_t t_k, const std::vector<uint8_t>& keep) const {
    const int64_t d_model = wq.shape()[0];
    const int64_t hd = d_model / n_heads;
    Tensor q = add_bias(matmul(q_in, wq), bq);
    Tensor k = add_bias(matmul(kv_in, wk), bk);
    Tensor v = add_bias(matmul(kv_in, wv), bv);
    Tensor qh = split_heads(q, batch, t_q, n_heads);
    Tensor kh = split_heads(k, batch, t_k, n_heads);
    Tensor vh = split_heads(v, batch, t_k, n_heads);
    Tensor scores = smul(bmm(qh, kh, /*trans_b=*/true), 1.0 / std::sqrt(static_cast<double>(hd)));
    Tensor masked = masked_fill(scores, keep, kMaskedScore);
    Tensor attn = softmax(masked);
    Tensor ctxv = bmm(attn, vh);
    Tensor merged = merge_heads(ctxv, batch, t_q, n_heads);
    return add_bias(matmul(merged, wo), bo);
}

void AttentionParams::collect(const std::string& prefix, std::vector<NamedParam>& out) {
    out.push_back({prefix + ".wq", "shared", wq});
    out.push_back({prefix + ".bq", "shared", bq});
    out.push_back({prefix + ".wk", "shared", wk});
    out.push_back({prefix + ".bk", "shared", bk});
    out.push_back({prefix + ".wv", "shared", wv});
    out.push_back({prefix + ".bv", "shared", bv});
    out.push_back({prefix + ".wo", "shared", wo});
    out.push_back({prefix + ".bo", "shared", bo});
}

// ---------------------------------------------------------------------------
// Model

Seq2SeqModel::Seq2SeqModel(ModelConfig cfg, uint64_t seed) : cfg_(std::move(cfg)), seed_(seed) {
    cfg_.validate();
    std::mt19937_64 eng = make_engine(derive_seed(seed, "model_init"));

    // Unit-scale token features once the embedding is multiplied by sqrt(d).
    embedding_ = normal_init({cfg_.vocab_size, cfg_.d_model}, eng,
                             1.0 / std::sqrt(static_cast<double>(cfg_.d_model)));

    // Fixed sinusoidal position table.
    {
        std::vector<double> pe(static_cast<size_t>(cfg_.max_len * cfg_.d_model));
        for (int64_t pos = 0; pos < cfg_.max_len; ++pos) {
            for (int64_t i = 0; i < cfg_.d_model; i += 2) {
                const double angle =
                    static_cast<double>(pos) /
                    std::pow(10000.0, static_cast<double>(i) / static_cast<double>(cfg_.d_model));
                pe[pos * cfg_.d_model + i] = std::sin(angle);
                if (i + 1 < cfg_.d_model) pe[pos * cfg_.d_model + i + 1] = std::cos(angle);
            }
        }
        pos_table_ = Tensor(Shape{cfg_.max_len, cfg_.d_model}, std::move(pe), false);
    }

    enc_layers_.resize(static_cast<size_t>(cfg_.enc_layers));
    for (int64_t i = 0; i < cfg_.enc_layers; ++i) {
        EncoderLayer& l = enc_layers_[static_cast<size_t>(i)];
        l.name = "enc.l" + std::to_string(i);
        l.ln_attn = LayerNormParams(cfg_.d_model);
        l.attn = AttentionParams(cfg_.d_model, cfg_.n_heads, eng);
        l.ln_ffn = LayerNormParams(cfg_.d_model);
        l.ffn = std::make_unique<DenseFfn>(cfg_.d_model, cfg_.d_ff, eng);
    }
    enc_final_ln_ = LayerNormParams(cfg_.d_model);

    dec_layers_.resize(static_cast<size_t>(cfg_.dec_layers));
    for (int64_t i = 0; i < cfg_.dec_layers; ++i) {
        DecoderLayer& l = dec_layers_[static_cast<size_t>(i)];
        l.name = "dec.l" + std::to_string(i);
        l.ln_self = LayerNormParams(cfg_.d_model);
        l.self_attn = AttentionParams(cfg_.d_model, cfg_.n_heads, eng);
        l.ln_cross = LayerNormParams(cfg_.d_model);
        l.cross_attn = AttentionParams(cfg_.d_model, cfg_.n_heads, eng);
        l.ln_ffn = LayerNormParams(cfg_.d_model);
        l.ffn = std::make_unique<DenseFfn>(cfg_.d_model, cfg_.d_ff, eng);
    }
    dec_final_ln_ = LayerNormParams(cfg_.d_model);

    w_out_ = glorot_init({cfg_.d_model, cfg_.vocab_size}, eng);
    b_out_ = zeros_param({cfg_.vocab_size});

    // Routed / adapter variants are installed by their conversion routines;
    // a config that names them up front is resolved by the loader, which
    // calls those same routines before assigning weights.
}

Tensor Seq2SeqModel::embed_with_positions(const TokenBatch& batch) {
    if (batch.time > cfg_.max_len) {
        throw DimensionError("sequence length " + std::to_string(batch.time) + " exceeds max_len " +
                             std::to_string(cfg_.max_len));
    }
    for (int id : batch.ids) {
        if (id < 0 || id >= cfg_.vocab_size) {
            throw EncodingError("token id " + std::to_string(id) + " outside vocab of " +
                                std::to_string(cfg_.vocab_size));
        }
    }
    Tensor emb = embedding(embedding_, batch.ids);
    Tensor scaled = smul(emb, std::sqrt(static_cast<double>(cfg_.d_model)));
    // Position rows replicated per batch row, as a constant.
    std::vector<double> pe(static_cast<size_t>(batch.batch * batch.time * cfg_.d_model));
    const auto& table = pos_table_.values();
    for (int64_t b = 0; b < batch.batch; ++b) {
        std::copy_n(table.data(), batch.time * cfg_.d_model,
                    pe.data() + b * batch.time * cfg_.d_model);
    }
    Tensor pos(Shape{batch.batch * batch.time, cfg_.d_model}, std::move(pe), false);
    return add(scaled, pos);
}

EncodedSource Seq2SeqModel::encode(const TokenBatch& src, ForwardCtx& ctx) {
    ctx.token_counted = &src.non_pad;
    Tensor x = embed_with_positions(src);
    const auto keep = self_attention_keep(src.batch, src.time, src.non_pad, cfg_.n_heads, false);
    for (EncoderLayer& l : enc_layers_) {
        Tensor n = l.ln_attn.forward(x);
        x = add(x, l.attn.forward(n, n, src.batch, src.time, src.time, keep));
        x = add(x, l.ffn->forward(l.ln_ffn.forward(x), ctx));
    }
    EncodedSource out;
    out.h = enc_final_ln_.forward(x);
    out.batch = src.batch;
    out.time = src.time;
    out.non_pad = src.non_pad;
    return out;
}

Tensor Seq2SeqModel::decode_logits(const EncodedSource& enc, const TokenBatch& dec_in,
                                   ForwardCtx& ctx) {
    if (dec_in.batch != enc.batch) {
        throw DimensionError("decoder batch " + std::to_string(dec_in.batch) +
                             " does not match encoder batch " + std::to_string(enc.batch));
    }
    ctx.token_counted = &dec_in.non_pad;
    Tensor x = embed_with_positions(dec_in);
    const auto self_keep =
        self_attention_keep(dec_in.batch, dec_in.time, dec_in.non_pad, cfg_.n_heads, true);
    const auto cross_keep =
        cross_attention_keep(dec_in.batch, dec_in.time, enc.time, enc.non_pad, cfg_.n_heads);
    for (DecoderLayer& l : dec_layers_) {
        Tensor n1 = l.ln_self.forward(x);
        x = add(x, l.self_attn.forward(n1, n1, dec_in.batch, dec_in.time, dec_in.time, self_keep));
        x = add(x, l.cross_attn.forward(l.ln_cross.forward(x), enc.h, dec_in.batch, dec_in.time,
                                        enc.time, cross_keep));
        x = add(x, l.ffn->forward(l.ln_ffn.forward(x), ctx));
    }
    Tensor h = dec_final_ln_.forward(x);
    return add_bias(matmul(h, w_out_), b_out_);
}

std::vector<NamedParam> Seq2SeqModel::collect_params() {
    std::vector<NamedParam> out;
    out.push_back({"embedding", "shared", embedding_});
    for (EncoderLayer& l : enc_layers_) {
        l.ln_attn.collect(l.name + ".ln_attn", out);
        l.attn.collect(l.name + ".attn", out);
        l.ln_ffn.collect(l.name + ".ln_ffn", out);
        l.ffn->collect_params(l.name + ".ffn", out);
    }
    enc_final_ln_.collect("enc.final_ln", out);
    for (DecoderLayer& l : dec_layers_) {
        l.ln_self.collect(l.name + ".ln_self", out);
        l.self_attn.collect(l.name + ".self_attn", out);
        l.ln_cross.collect(l.name + ".ln_cross", out);
        l.cross_attn.collect(l.name + ".cross_attn", out);
        l.ln_ffn.collect(l.name + ".ln_ffn", out);
        l.ffn->collect_params(l.name + ".ffn", out);
    }
    dec_final_ln_.collect("dec.final_ln", out);
    out.push_back({"out.w", "shared", w_out_});
    out.push_back({"out.b", "shared", b_out_});
    return out;
}

void Seq2SeqModel::set_all_requires_grad(bool rg) {
    for (auto& p : collect_params()) p.tensor.set_requires_grad(rg);
}

std::vector<std::vector<int>> greedy_decode(Seq2SeqModel& model, const TokenBatch& src,
                                            const std::vector<int>& lang_tags, int64_t max_new,
                                            ForwardCtx& ctx) {
    if (static_cast<int64_t>(lang_tags.size()) != src.batch) {
        throw DimensionError("one language tag per source row is required");
    }
    if (ctx.train) throw ContractError("greedy decoding runs in inference mode");
    EncodedSource enc = model.encode(src, ctx);

    const int64_t B = src.batch;
    std::vector<std::vector<int>> rows(static_cast<size_t>(B));
    for (int64_t b = 0; b < B; ++b) rows[b] = {kBosId, lang_tags[b]};
    std::vector<std::vector<int>> out(static_cast<size_t>(B));
    std::vector<uint8_t> done(static_cast<size_t>(B), 0);

    const int64_t budget = std::min<int64_t>(max_new, model.config().max_len - 2);
    for (int64_t step = 0; step < budget; ++step) {
        TokenBatch dec = TokenBatch::from_rows(rows);
        Tensor logits = model.decode_logits(enc, dec, ctx);
        bool all_done = true;
        for (int64_t b = 0; b < B; ++b) {
            if (done[b]) {
                rows[b].push_back(kPadId);
                continue;
            }
            const int64_t row = b * dec.time + (dec.time - 1);
            const int next = static_cast<int>(argmax_row(logits, row));
            if (next == kEosId) {
                done[b] = 1;
                rows[b].push_back(kPadId);
            } else {
                out[b].push_back(next);
                rows[b].push_back(next);
            }
            all_done = all_done && done[b];
        }
        if (all_done) break;
    }
    return out;
}

}  // namespace clsr
