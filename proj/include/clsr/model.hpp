// Small encoder-decoder transformer with pre-norm residual blocks and a
// pluggable feed-forward slot per layer. The slot interface lets a dense
// feed-forward be swapped for a routed (per-language) or adapter variant
// without touching the attention stack.
#pragma once

#include <cstdint>
#include <memory>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "clsr/tensor.hpp"

namespace clsr {

// Reserved token ids shared by the whole stack.
inline constexpr int kPadId = 0;
inline constexpr int kBosId = 1;
inline constexpr int kEosId = 2;

struct ModelConfig {
    int64_t vocab_size = 0;
    int64_t d_model = 64;
    int64_t n_heads = 4;
    int64_t d_ff = 256;
    int64_t enc_layers = 4;
    int64_t dec_layers = 4;
    int64_t max_len = 64;

    // Feed-forward slot variant: "dense", "clsr", or "lora".
    std::string ffn_kind = "dense";
    std::vector<std::string> languages;  // routed variants only
    int64_t d_gate = 0;                  // 0 derives d_model / 4
    int64_t lora_rank = 16;
    double lora_alpha = 32.0;

    int64_t head_dim() const { return d_model / n_heads; }
    int64_t gate_dim() const { return d_gate > 0 ? d_gate : d_model / 4; }
    void validate() const;
};

// One named parameter with its routing owner: "shared" for common weights,
// a language id for language-specific ones.
struct NamedParam {
    std::string name;
    std::string owner;
    Tensor tensor;
};

// Per-layer gate activations captured during a forward pass, for the budget
// loss and usage statistics. `counted` marks tokens that participate in the
// budget (pads and skipped layers are excluded).
struct GateEntry {
    std::string layer;
    Tensor gate;                  // [batch*time]
    std::vector<uint8_t> counted;  // [batch*time]
};

struct GateRecord {
    std::vector<GateEntry> entries;
};

// Mutable context threaded through a forward pass.
struct ForwardCtx {
    bool train = false;
    int language = -1;             // index into the model's language list
    double gate_noise_sigma = 0.0;  // train-time gate logit noise
    double skip_prob = 0.0;         // train-time chance to bypass a routed layer
    std::mt19937_64* rng = nullptr;  // required when train draws noise or skips
    GateRecord* gates = nullptr;     // optional sink for gate activations
    std::optional<double> forced_gate;  // test hook: pins every gate to a constant

    // Set by the model as it enters the encoder / decoder stream: non-pad
    // flags for the flattened [batch*time] token rows.
    const std::vector<uint8_t>* token_counted = nullptr;
};

// Feed-forward slot: consumes the pre-normed activations [N, d_model].
class FfnModule {
  public:
    virtual ~FfnModule() = default;
    virtual Tensor forward(const Tensor& x, ForwardCtx& ctx) = 0;
    virtual void collect_params(const std::string& prefix, std::vector<NamedParam>& out) = 0;
};

// Plain two-layer feed-forward core: relu(x W1 + b1) W2 + b2.
struct FfnCore {
    Tensor w1, b1, w2, b2;

    FfnCore() = default;
    FfnCore(int64_t d_model, int64_t d_ff, std::mt19937_64& eng);
    static FfnCore copy_of(const FfnCore& other);  // bit-exact value copy

    Tensor forward(const Tensor& x) const;
    void collect(const std::string& prefix, const std::string& owner,
                 std::vector<NamedParam>& out);
};

class DenseFfn : public FfnModule {
  public:
    DenseFfn(int64_t d_model, int64_t d_ff, std::mt19937_64& eng) : core_(d_model, d_ff, eng) {}
    explicit DenseFfn(FfnCore core) : core_(std::move(core)) {}

    Tensor forward(const Tensor& x, ForwardCtx& ctx) override;
    void collect_params(const std::string& prefix, std::vector<NamedParam>& out) override;

    FfnCore& core() { return core_; }

  private:
    FfnCore core_;
};

// A padded batch of token rows, flattened row-major to [batch*time].
struct TokenBatch {
    std::vector<int> ids;
    int64_t batch = 0;
    int64_t time = 0;
    std::vector<uint8_t> non_pad;  // 1 where ids != pad

    static TokenBatch from_rows(const std::vector<std::vector<int>>& rows);
};

struct LayerNormParams {
    Tensor gain, bias;
    LayerNormParams() = default;
    explicit LayerNormParams(int64_t d);
    Tensor forward(const Tensor& x) const;
    void collect(const std::string& prefix, std::vector<NamedParam>& out);
};

struct AttentionParams {
    Tensor wq, bq, wk, bk, wv, bv, wo, bo;
    int64_t n_heads = 0;

    AttentionParams() = default;
    AttentionParams(int64_t d_model, int64_t n_heads, std::mt19937_64& eng);

    // q_in: [batch*t_q, d], kv_in: [batch*t_k, d]; keep: [batch*heads*t_q*t_k].
    Tensor forward(const Tensor& q_in, const Tensor& kv_in, int64_t batch, int64_t t_q,
                   int64_t t_k, const std::vector<uint8_t>& keep) const;
    void collect(const std::string& prefix, std::vector<NamedParam>& out);
};

struct EncoderLayer {
    LayerNormParams ln_attn, ln_ffn;
    AttentionParams attn;
    std::unique_ptr<FfnModule> ffn;
    std::string name;
};

struct DecoderLayer {
    LayerNormParams ln_self, ln_cross, ln_ffn;
    AttentionParams self_attn, cross_attn;
    std::unique_ptr<FfnModule> ffn;
    std::string name;
};

struct EncodedSource {
    Tensor h;  // [batch*time, d_model]
    int64_t batch = 0;
    int64_t time = 0;
    std::vector<uint8_t> non_pad;
};

class Seq2SeqModel {
  public:
    Seq2SeqModel(ModelConfig cfg, uint64_t seed);

    Seq2SeqModel(const Seq2SeqModel&) = delete;
    Seq2SeqModel& operator=(const Seq2SeqModel&) = delete;

    const ModelConfig& config() const { return cfg_; }

    EncodedSource encode(const TokenBatch& src, ForwardCtx& ctx);
    // Teacher-forced pass over the decoder; returns logits [batch*time, vocab].
    Tensor decode_logits(const EncodedSource& enc, const TokenBatch& dec_in, ForwardCtx& ctx);

    std::vector<NamedParam> collect_params();
    void set_all_requires_grad(bool rg);

    // Rebinds feed-forward slots (routing / adapter conversion).
    template <typename Fn>
    void for_each_ffn(Fn&& fn) {
        for (auto& l : enc_layers_) fn(l.name, l.ffn);
        for (auto& l : dec_layers_) fn(l.name, l.ffn);
    }

    ModelConfig& mutable_config() { return cfg_; }
    uint64_t init_seed() const { return seed_; }

  private:
    Tensor embed_with_positions(const TokenBatch& batch);

    ModelConfig cfg_;
    uint64_t seed_ = 0;
    Tensor embedding_;  // [vocab, d_model]
    Tensor pos_table_;  // [max_len, d_model], constant
    std::vector<EncoderLayer> enc_layers_;
    std::vector<DecoderLayer> dec_layers_;
    LayerNormParams enc_final_ln_, dec_final_ln_;
    Tensor w_out_, b_out_;  // output projection [d_model, vocab], [vocab]
};

// Batched greedy decoding from [BOS, tag]. Returns one emitted row per input
// row, truncated at (and excluding) EOS; max_new tokens at most.
std::vector<std::vector<int>> greedy_decode(Seq2SeqModel& model, const TokenBatch& src,
                                            const std::vector<int>& lang_tags, int64_t max_new,
                                            ForwardCtx& ctx);

// Mask builders (exposed for tests). keep flags are row-major over
// [batch*heads, t_q, t_k].
std::vector<uint8_t> self_attention_keep(int64_t batch, int64_t time,
                                         const std::vector<uint8_t>& non_pad, int64_t heads,
                                         bool causal);
std::vector<uint8_t> cross_attention_keep(int64_t batch, int64_t t_q, int64_t t_k,
                                          const std::vector<uint8_t>& src_non_pad, int64_t heads);

}  // namespace clsr
