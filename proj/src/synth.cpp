#include "clsr/synth.hpp"

#include <fstream>
#include <numeric>

#include "clsr/error.hpp"
#include "clsr/rng.hpp"

namespace clsr {
namespace {

std::vector<int> draw_table(std::mt19937_64& eng, int n) {
    std::vector<int> table(static_cast<size_t>(n));
    std::iota(table.begin(), table.end(), 0);
    for (int i = n - 1; i > 0; --i) {
        const auto j = static_cast<size_t>(draw_below(eng, static_cast<uint64_t>(i) + 1));
        std::swap(table[static_cast<size_t>(i)], table[j]);
    }
    return table;
}

bool is_identity(const std::vector<int>& table) {
    for (size_t i = 0; i < table.size(); ++i) {
        if (table[i] != static_cast<int>(i)) return false;
    }
    return true;
}

// Roles own disjoint 10M-wide index blocks so their example streams never
// collide.
constexpr int64_t kRoleBlock = 10'000'000;

int64_t role_offset(Role role) {
    switch (role) {
        case Role::kPretrain: return 0 * kRoleBlock;
        case Role::kFinetune: return 1 * kRoleBlock;
        case Role::kValidation: return 2 * kRoleBlock;
        case Role::kTestIn: return 3 * kRoleBlock;
        case Role::kTestOut: return 4 * kRoleBlock;
    }
    throw ParameterError("role_offset: unknown role");
}

Domain example_domain(const TaskConfig& cfg, Role role, int64_t index) {
    switch (role) {
        case Role::kPretrain: {
            // Deterministic interleaving hits the requested fraction exactly
            // on every full block of 100 examples.
            const int64_t out_per_100 =
                static_cast<int64_t>(cfg.pretrain_out_fraction * 100.0 + 0.5);
            return index % 100 < out_per_100 ? Domain::kOut : Domain::kIn;
        }
        case Role::kFinetune:
        case Role::kValidation:
        case Role::kTestIn:
            return Domain::kIn;
        case Role::kTestOut:
            return Domain::kOut;
    }
    throw ParameterError("example_domain: unknown role");
}

}  // namespace

void TaskConfig::validate() const {
    if (n_languages < 1) throw ConfigError("TaskConfig: n_languages must be >= 1");
    if (n_symbols < 2) throw ConfigError("TaskConfig: n_symbols must be >= 2");
    if (n_symbols > 100) throw ConfigError("TaskConfig: n_symbols must be <= 100 (two-digit rendering)");
    if (high_resource < 0 || high_resource > n_languages) {
        throw ConfigError("TaskConfig: high_resource must lie in [0, n_languages]");
    }
    if (pretrain_high < 0 || pretrain_low < 0) {
        throw ConfigError("TaskConfig: pretrain sizes must be non-negative");
    }
    if (pretrain_out_fraction < 0.0 || pretrain_out_fraction > 1.0) {
        throw ConfigError("TaskConfig: pretrain_out_fraction must lie in [0, 1]");
    }
    if (len_in_min < 1 || len_in_max < len_in_min || len_out_min < 1 || len_out_max < len_out_min) {
        throw ConfigError("TaskConfig: length ranges must satisfy 1 <= min <= max");
    }
    if (len_in_min + len_in_max >= len_out_min + len_out_max) {
        throw ConfigError("TaskConfig: out-of-domain lengths must exceed in-domain on average");
    }
    if (noise_in < 0.0 || noise_in > 1.0 || noise_out < 0.0 || noise_out > 1.0) {
        throw ConfigError("TaskConfig: noise rates must lie in [0, 1]");
    }
}

nlohmann::json task_to_json(const TaskConfig& cfg) {
    nlohmann::json j;
    j["seed"] = cfg.seed;
    j["n_languages"] = cfg.n_languages;
    j["n_symbols"] = cfg.n_symbols;
    j["high_resource"] = cfg.high_resource;
    j["pretrain_high"] = cfg.pretrain_high;
    j["pretrain_low"] = cfg.pretrain_low;
    j["pretrain_out_fraction"] = cfg.pretrain_out_fraction;
    j["len_in_min"] = cfg.len_in_min;
    j["len_in_max"] = cfg.len_in_max;
    j["len_out_min"] = cfg.len_out_min;
    j["len_out_max"] = cfg.len_out_max;
    j["noise_in"] = cfg.noise_in;
    j["noise_out"] = cfg.noise_out;
    return j;
}

std::string domain_name(Domain domain) { return domain == Domain::kOut ? "out" : "in"; }

LanguageSpec make_language_spec(const std::string& language, uint64_t seed, const TaskConfig& cfg,
                                const std::vector<std::vector<int>>& avoid) {
    cfg.validate();
    auto eng = make_engine(derive_seed(seed, "cipher"));
    std::vector<int> table = draw_table(eng, cfg.n_symbols);
    // The cipher must be non-trivial and must not collide with any table the
    // caller already holds.
    auto clashes = [&]() {
        if (is_identity(table)) return true;
        for (const std::vector<int>& prev : avoid) {
            if (prev == table) return true;
        }
        return false;
    };
    int guard = 0;
    while (clashes()) {
        table = draw_table(eng, cfg.n_symbols);
        if (++guard > 1000) throw ContractError("make_language_spec: cannot find a distinct cipher");
    }
    LanguageSpec spec;
    spec.language = language;
    spec.seed = seed;
    spec.table = std::move(table);
    spec.noise_in = cfg.noise_in;
    spec.noise_out = cfg.noise_out;
    spec.len_in = {cfg.len_in_min, cfg.len_in_max};
    spec.len_out = {cfg.len_out_min, cfg.len_out_max};
    return spec;
}

std::vector<LanguageSpec> make_language_specs(const TaskConfig& cfg) {
    cfg.validate();
    std::vector<LanguageSpec> specs;
    std::vector<std::vector<int>> taken;
    specs.reserve(static_cast<size_t>(cfg.n_languages));
    for (int i = 0; i < cfg.n_languages; ++i) {
        const uint64_t lang_seed = derive_seed(cfg.seed, "language", static_cast<uint64_t>(i));
        specs.push_back(make_language_spec("l" + std::to_string(i), lang_seed, cfg, taken));
        taken.push_back(specs.back().table);
    }
    return specs;
}

std::vector<int> inverse_table(const std::vector<int>& table) {
    std::vector<int> inv(table.size(), -1);
    for (size_t s = 0; s < table.size(); ++s) {
        const int t = table[s];
        if (t < 0 || static_cast<size_t>(t) >= table.size() || inv[static_cast<size_t>(t)] != -1) {
            throw ParameterError("inverse_table: input is not a permutation");
        }
        inv[static_cast<size_t>(t)] = static_cast<int>(s);
    }
    return inv;
}

std::pair<std::vector<int>, std::vector<int>> generate_pair(const LanguageSpec& spec,
                                                            Domain domain, int64_t index) {
    if (index < 0) throw ParameterError("generate_pair: index must be non-negative");
    if (spec.table.empty()) throw ParameterError("generate_pair: spec has no cipher table");
    const auto n_symbols = static_cast<int64_t>(spec.table.size());
    const auto [len_min, len_max] = spec.length_range(domain);
    const double noise = spec.noise_rate(domain);

    auto eng = make_engine(
        derive_seed(spec.seed, "pair." + domain_name(domain), static_cast<uint64_t>(index)));

    const auto len = static_cast<int64_t>(len_min) +
                     static_cast<int64_t>(draw_below(eng, static_cast<uint64_t>(len_max - len_min) + 1));
    std::vector<int> tgt(static_cast<size_t>(len)), src(static_cast<size_t>(len));
    for (int64_t i = 0; i < len; ++i) {
        const int t = static_cast<int>(draw_below(eng, static_cast<uint64_t>(n_symbols)));
        tgt[static_cast<size_t>(i)] = t;
        int s = spec.table[static_cast<size_t>(t)];
        if (draw_unit(eng) < noise) {
            s = static_cast<int>(draw_below(eng, static_cast<uint64_t>(n_symbols)));
        }
        src[static_cast<size_t>(i)] = s;
    }
    return {std::move(src), std::move(tgt)};
}

int TaskVocab::lang_tag(int lang_idx) const {
    if (lang_idx < 0 || lang_idx >= n_languages) throw ParameterError("lang_tag: index out of range");
    return 3 + lang_idx;
}

int TaskVocab::symbol_id(int sym) const {
    if (sym < 0 || sym >= n_symbols) throw ParameterError("symbol_id: symbol out of range");
    return 3 + n_languages + sym;
}

int TaskVocab::symbol_of(int token_id) const {
    if (!is_symbol(token_id)) throw ParameterError("symbol_of: token is not a symbol");
    return token_id - 3 - n_languages;
}

bool TaskVocab::is_symbol(int token_id) const {
    return token_id >= 3 + n_languages && token_id < static_cast<int>(size());
}

TaskVocab make_vocab(const TaskConfig& cfg) {
    cfg.validate();
    return TaskVocab{cfg.n_languages, cfg.n_symbols};
}

std::vector<int> tokenize(const TaskVocab& vocab, const std::vector<std::string>& words) {
    std::vector<int> ids;
    ids.reserve(words.size());
    for (const std::string& w : words) {
        if (w == "<pad>") {
            ids.push_back(kPadId);
        } else if (w == "<bos>") {
            ids.push_back(kBosId);
        } else if (w == "<eos>") {
            ids.push_back(kEosId);
        } else if (w.size() >= 4 && w.front() == '<' && w[1] == 'l' && w.back() == '>') {
            const std::string digits = w.substr(2, w.size() - 3);
            size_t used = 0;
            int idx = -1;
            try {
                idx = std::stoi(digits, &used);
            } catch (const std::exception&) {
                throw EncodingError("unknown word '" + w + "'");
            }
            if (used != digits.size() || idx < 0 || idx >= vocab.n_languages) {
                throw EncodingError("unknown word '" + w + "'");
            }
            ids.push_back(vocab.lang_tag(idx));
        } else if (w.size() == 3 && w[0] == 's' && w[1] >= '0' && w[1] <= '9' && w[2] >= '0' &&
                   w[2] <= '9') {
            const int sym = (w[1] - '0') * 10 + (w[2] - '0');
            if (sym >= vocab.n_symbols) throw EncodingError("unknown word '" + w + "'");
            ids.push_back(vocab.symbol_id(sym));
        } else {
            throw EncodingError("unknown word '" + w + "'");
        }
    }
    return ids;
}

std::vector<std::string> detokenize(const TaskVocab& vocab, const std::vector<int>& ids) {
    std::vector<std::string> words;
    words.reserve(ids.size());
    for (int id : ids) {
        if (id == kPadId) {
            words.emplace_back("<pad>");
        } else if (id == kBosId) {
            words.emplace_back("<bos>");
        } else if (id == kEosId) {
            words.emplace_back("<eos>");
        } else if (id >= 3 && id < 3 + vocab.n_languages) {
            words.push_back("<l" + std::to_string(id - 3) + ">");
        } else if (vocab.is_symbol(id)) {
            const int sym = vocab.symbol_of(id);
            std::string w = "s";
            w += static_cast<char>('0' + sym / 10);
            w += static_cast<char>('0' + sym % 10);
            words.push_back(std::move(w));
        } else {
            throw EncodingError("unknown token id " + std::to_string(id));
        }
    }
    return words;
}

std::string role_name(Role role) {
    switch (role) {
        case Role::kPretrain: return "pretrain";
        case Role::kFinetune: return "finetune";
        case Role::kValidation: return "validation";
        case Role::kTestIn: return "test_in";
        case Role::kTestOut: return "test_out";
    }
    throw ParameterError("role_name: unknown role");
}

Example generate_example(const TaskConfig& cfg, const LanguageSpec& spec, Role role,
                         int64_t index) {
    cfg.validate();
    if (index < 0) throw ParameterError("generate_example: index must be non-negative");
    const Domain domain = example_domain(cfg, role, index);
    Example ex;
    ex.out_domain = domain == Domain::kOut;
    auto pair = generate_pair(spec, domain, role_offset(role) + index);
    ex.src_syms = std::move(pair.first);
    ex.tgt_syms = std::move(pair.second);
    return ex;
}

Corpus build_corpus(const TaskConfig& cfg, const std::vector<LanguageSpec>& specs, int lang_idx,
                    Role role, int64_t count) {
    cfg.validate();
    if (lang_idx < 0 || lang_idx >= static_cast<int>(specs.size())) {
        throw ParameterError("build_corpus: language index out of range");
    }
    if (count < 0) throw ParameterError("build_corpus: count must be non-negative");
    if (count > kRoleBlock) {
        throw ContractError("build_corpus: " + std::to_string(count) +
                            " examples would overlap the next role's index range");
    }
    Corpus corpus;
    corpus.language = specs[static_cast<size_t>(lang_idx)].language;
    corpus.lang_idx = lang_idx;
    corpus.role = role;
    corpus.examples.reserve(static_cast<size_t>(count));
    for (int64_t i = 0; i < count; ++i) {
        corpus.examples.push_back(
            generate_example(cfg, specs[static_cast<size_t>(lang_idx)], role, i));
    }
    return corpus;
}

int64_t pretrain_count(const TaskConfig& cfg, int lang_idx) {
    cfg.validate();
    if (lang_idx < 0 || lang_idx >= cfg.n_languages) {
        throw ParameterError("pretrain_count: language index out of range");
    }
    return lang_idx < cfg.high_resource ? cfg.pretrain_high : cfg.pretrain_low;
}

std::string render_symbols(const std::vector<int>& syms) {
    std::string out;
    for (size_t i = 0; i < syms.size(); ++i) {
        if (syms[i] < 0 || syms[i] > 99) throw ParameterError("render_symbols: symbol out of range");
        if (i > 0) out += ' ';
        out += 's';
        out += static_cast<char>('0' + syms[i] / 10);
        out += static_cast<char>('0' + syms[i] % 10);
    }
    return out;
}

std::string render_tokens(const TaskVocab& vocab, const std::vector<int>& token_ids) {
    std::vector<int> syms;
    syms.reserve(token_ids.size());
    for (int id : token_ids) {
        if (id == kPadId || id == kBosId || id == kEosId) continue;
        if (id >= 3 && id < 3 + vocab.n_languages) continue;  // drop language tags
        syms.push_back(vocab.symbol_of(id));
    }
    return render_symbols(syms);
}

Batch make_batch(const TaskVocab& vocab, int lang_idx, const std::vector<const Example*>& rows) {
    if (rows.empty()) throw ParameterError("make_batch: needs at least one example");
    const int tag = vocab.lang_tag(lang_idx);

    std::vector<std::vector<int>> src_rows, dec_rows, label_rows;
    src_rows.reserve(rows.size());
    dec_rows.reserve(rows.size());
    label_rows.reserve(rows.size());
    for (const Example* ex : rows) {
        if (ex == nullptr) throw ParameterError("make_batch: null example");
        std::vector<int> src, dec, lab;
        src.reserve(ex->src_syms.size());
        for (int s : ex->src_syms) src.push_back(vocab.symbol_id(s));

        // Input [BOS, tag, y1..yn] pairs position-wise with labels
        // [PAD, y1..yn, EOS]: the tag is a forced prefix rather than a
        // prediction target, so the BOS position is not scored.
        dec.reserve(ex->tgt_syms.size() + 2);
        dec.push_back(kBosId);
        dec.push_back(tag);
        lab.reserve(ex->tgt_syms.size() + 2);
        lab.push_back(kPadId);
        for (int t : ex->tgt_syms) {
            dec.push_back(vocab.symbol_id(t));
            lab.push_back(vocab.symbol_id(t));
        }
        lab.push_back(kEosId);
        src_rows.push_back(std::move(src));
        dec_rows.push_back(std::move(dec));
        label_rows.push_back(std::move(lab));
    }

    Batch batch{TokenBatch::from_rows(src_rows), TokenBatch::from_rows(dec_rows), {}, {}};
    const int64_t bt = batch.dec_in.batch * batch.dec_in.time;
    batch.labels.assign(static_cast<size_t>(bt), kPadId);
    batch.label_mask.assign(static_cast<size_t>(bt), 0);
    for (size_t r = 0; r < label_rows.size(); ++r) {
        for (size_t k = 0; k < label_rows[r].size(); ++k) {
            const size_t pos = r * static_cast<size_t>(batch.dec_in.time) + k;
            batch.labels[pos] = label_rows[r][k];
            batch.label_mask[pos] = label_rows[r][k] != kPadId ? 1 : 0;
        }
    }
    return batch;
}

void export_corpus(const Corpus& corpus, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw LoadError("export_corpus: cannot open " + path);
    for (const Example& ex : corpus.examples) {
        out << corpus.language << '\t' << (ex.out_domain ? "out" : "in") << '\t'
            << render_symbols(ex.src_syms) << '\t' << render_symbols(ex.tgt_syms) << '\n';
    }
    if (!out) throw LoadError("export_corpus: write failed for " + path);
}

}  // namespace clsr
