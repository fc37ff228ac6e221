// Synthetic translation-style task: each "language" is a hidden substitution
// cipher over a shared symbol alphabet. A clean target row is drawn first and
// the source is its cipher image with per-position corruption, so the mapping
// is learnable per language while every language shares one surface
// vocabulary. In-domain rows are short and lightly corrupted; out-of-domain
// rows are longer with heavier corruption.
#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "clsr/model.hpp"
#include "json.hpp"

namespace clsr {

struct TaskConfig {
    uint64_t seed = 1234;
    int n_languages = 8;
    int n_symbols = 40;
    int high_resource = 4;  // languages l0..l{k-1} get the large pretrain share
    int pretrain_high = 2000;
    int pretrain_low = 200;
    double pretrain_out_fraction = 0.3;
    int len_in_min = 3, len_in_max = 9;
    int len_out_min = 10, len_out_max = 22;
    double noise_in = 0.05;
    double noise_out = 0.15;

    void validate() const;
};

// Snapshot of every task parameter, for config echoes and run records.
nlohmann::json task_to_json(const TaskConfig& cfg);

enum class Domain { kIn, kOut };

std::string domain_name(Domain domain);

// One language: its cipher plus the per-domain generation parameters.
struct LanguageSpec {
    std::string language;    // "l0", "l1", ...
    uint64_t seed = 0;       // keys every example stream of this language
    std::vector<int> table;  // target symbol t appears as table[t] in the source
    double noise_in = 0.05, noise_out = 0.15;
    std::pair<int, int> len_in{3, 9}, len_out{10, 22};

    double noise_rate(Domain d) const { return d == Domain::kOut ? noise_out : noise_in; }
    const std::pair<int, int>& length_range(Domain d) const {
        return d == Domain::kOut ? len_out : len_in;
    }
};

// Deterministic cipher from (language, seed); never the identity map and
// re-rolled past any table listed in `avoid`.
LanguageSpec make_language_spec(const std::string& language, uint64_t seed, const TaskConfig& cfg,
                                const std::vector<std::vector<int>>& avoid = {});

// All of the task's languages with pairwise-distinct ciphers.
std::vector<LanguageSpec> make_language_specs(const TaskConfig& cfg);

// Inverse cipher: inverse_table(t)[t[s]] == s for every symbol s.
std::vector<int> inverse_table(const std::vector<int>& table);

// One (source, target) symbol pair. All randomness is keyed by
// (spec.seed, domain, index): any example regenerates independently.
std::pair<std::vector<int>, std::vector<int>> generate_pair(const LanguageSpec& spec,
                                                            Domain domain, int64_t index);

// Vocabulary layout: PAD, BOS, EOS, one tag per language, then the symbols.
struct TaskVocab {
    int n_languages = 0;
    int n_symbols = 0;

    int64_t size() const { return 3 + n_languages + n_symbols; }
    int lang_tag(int lang_idx) const;
    int symbol_id(int sym) const;
    int symbol_of(int token_id) const;  // inverse of symbol_id
    bool is_symbol(int token_id) const;
};

TaskVocab make_vocab(const TaskConfig& cfg);

// Word-level codec. Content words are "s00".."s99"; reserved words are
// "<pad>", "<bos>", "<eos>" and the language tags "<l0>", "<l1>", ...
// Unknown words and unknown ids raise EncodingError; the two maps are exact
// inverses.
std::vector<int> tokenize(const TaskVocab& vocab, const std::vector<std::string>& words);
std::vector<std::string> detokenize(const TaskVocab& vocab, const std::vector<int>& ids);

enum class Role { kPretrain, kFinetune, kValidation, kTestIn, kTestOut };

std::string role_name(Role role);

struct Example {
    std::vector<int> src_syms;  // ciphered, noised symbol indexes
    std::vector<int> tgt_syms;  // clean symbol indexes
    bool out_domain = false;
};

struct Corpus {
    std::string language;
    int lang_idx = 0;
    Role role = Role::kPretrain;
    std::vector<Example> examples;
};

// Role-level wrapper over generate_pair: each role owns a disjoint block of
// indexes, and the pretrain role interleaves domains at the configured
// fraction while the others are purely in- or out-of-domain.
Example generate_example(const TaskConfig& cfg, const LanguageSpec& spec, Role role,
                         int64_t index);

Corpus build_corpus(const TaskConfig& cfg, const std::vector<LanguageSpec>& specs, int lang_idx,
                    Role role, int64_t count);

// Pretrain size for a language under the resource split.
int64_t pretrain_count(const TaskConfig& cfg, int lang_idx);

// Rendering for scoring and export: symbols as zero-padded words ("s07 s21").
std::string render_symbols(const std::vector<int>& syms);
std::string render_tokens(const TaskVocab& vocab, const std::vector<int>& token_ids);

// Model-facing batch: encoder tokens, decoder input [BOS, tag, y...], labels
// [PAD, y..., EOS] with a mask marking scored positions.
struct Batch {
    TokenBatch src;
    TokenBatch dec_in;
    std::vector<int> labels;          // flattened [batch * dec_time]
    std::vector<uint8_t> label_mask;  // 1 where the label is scored
};

Batch make_batch(const TaskVocab& vocab, int lang_idx, const std::vector<const Example*>& rows);

// One record per line, tab-separated: language, domain, source, target.
void export_corpus(const Corpus& corpus, const std::string& path);

}  // namespace clsr
