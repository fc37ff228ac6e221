#include "clsr/eval.hpp"

#include <algorithm>
#include <cctype>
#include <map>

#include "clsr/error.hpp"

namespace clsr {
namespace {

int lang_slot_index(const Seq2SeqModel& model, const std::string& language) {
    const auto& langs = model.config().languages;
    const auto it = std::find(langs.begin(), langs.end(), language);
    if (it == langs.end()) {
        throw RoutingError("model has no language branch for '" + language + "'");
    }
    return static_cast<int>(it - langs.begin());
}

// ctx.language for a forward pass on this split: routed models select the
// split's language branch, plain models take no language.
int ctx_language(const Seq2SeqModel& model, const Corpus& split) {
    if (model.config().ffn_kind == "clsr") return lang_slot_index(model, split.language);
    return -1;
}

std::vector<const Example*> slice(const Corpus& split, size_t begin, size_t end) {
    std::vector<const Example*> rows;
    rows.reserve(end - begin);
    for (size_t i = begin; i < end; ++i) rows.push_back(&split.examples[i]);
    return rows;
}

}  // namespace

std::string normalize_text(const std::string& text) {
    std::string out;
    out.reserve(text.size());
    bool pending_space = false;
    for (char c : text) {
        if (std::isspace(static_cast<unsigned char>(c))) {
            pending_space = !out.empty();
            continue;
        }
        if (pending_space) {
            out += ' ';
            pending_space = false;
        }
        out += static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
    }
    return out;
}

std::vector<std::string> split_words(const std::string& text) {
    std::vector<std::string> words;
    std::string current;
    for (char c : text) {
        if (std::isspace(static_cast<unsigned char>(c))) {
            if (!current.empty()) {
                words.push_back(current);
                current.clear();
            }
        } else {
            current += c;
        }
    }
    if (!current.empty()) words.push_back(std::move(current));
    return words;
}

int64_t edit_distance(const std::vector<std::string>& ref, const std::vector<std::string>& hyp) {
    const size_t n = ref.size(), m = hyp.size();
    std::vector<int64_t> prev(m + 1), curr(m + 1);
    for (size_t j = 0; j <= m; ++j) prev[j] = static_cast<int64_t>(j);
    for (size_t i = 1; i <= n; ++i) {
        curr[0] = static_cast<int64_t>(i);
        for (size_t j = 1; j <= m; ++j) {
            const int64_t sub = prev[j - 1] + (ref[i - 1] == hyp[j - 1] ? 0 : 1);
            curr[j] = std::min({sub, prev[j] + 1, curr[j - 1] + 1});
        }
        std::swap(prev, curr);
    }
    return prev[m];
}

WerResult wer_between(const std::vector<std::string>& refs, const std::vector<std::string>& hyps) {
    if (refs.size() != hyps.size()) {
        throw ParameterError("wer_between: reference and hypothesis counts differ");
    }
    WerResult result;
    for (size_t i = 0; i < refs.size(); ++i) {
        const std::vector<std::string> ref = split_words(normalize_text(refs[i]));
        if (ref.empty()) {
            ++result.empty_refs_excluded;
            continue;
        }
        const std::vector<std::string> hyp = split_words(normalize_text(hyps[i]));
        result.errors += edit_distance(ref, hyp);
        result.ref_words += static_cast<int64_t>(ref.size());
        ++result.pairs_scored;
    }
    if (result.pairs_scored == 0) {
        throw ContractError("wer_between: every reference is empty");
    }
    result.wer = static_cast<double>(result.errors) / static_cast<double>(result.ref_words);
    return result;
}

WerResult evaluate_wer(Seq2SeqModel& model, const Corpus& split, const TaskVocab& vocab,
                       int64_t batch_size) {
    if (split.examples.empty()) throw ContractError("evaluate_wer: empty split");
    if (batch_size < 1) throw ParameterError("evaluate_wer: batch_size must be >= 1");

    int64_t max_ref = 0;
    for (const Example& ex : split.examples) {
        max_ref = std::max(max_ref, static_cast<int64_t>(ex.tgt_syms.size()));
    }
    // Room for the reference plus slack for insertions, within the position
    // table (two slots go to BOS and the language tag).
    const int64_t max_new = std::min(max_ref + 8, model.config().max_len - 2);

    const int language = ctx_language(model, split);
    const int tag = vocab.lang_tag(split.lang_idx);

    std::vector<std::string> refs, hyps;
    refs.reserve(split.examples.size());
    hyps.reserve(split.examples.size());
    for (size_t begin = 0; begin < split.examples.size();
         begin += static_cast<size_t>(batch_size)) {
        const size_t end = std::min(begin + static_cast<size_t>(batch_size), split.examples.size());
        const std::vector<const Example*> rows = slice(split, begin, end);
        const Batch batch = make_batch(vocab, split.lang_idx, rows);

        ForwardCtx ctx;
        ctx.train = false;
        ctx.language = language;
        const std::vector<int> tags(rows.size(), tag);
        const auto emitted = greedy_decode(model, batch.src, tags, max_new, ctx);
        for (size_t r = 0; r < rows.size(); ++r) {
            refs.push_back(render_symbols(rows[r]->tgt_syms));
            hyps.push_back(render_tokens(vocab, emitted[r]));
        }
    }
    return wer_between(refs, hyps);
}

GateUsage gate_usage_stats(Seq2SeqModel& model, const Corpus& split, const TaskVocab& vocab,
                           int64_t batch_size) {
    if (model.config().ffn_kind != "clsr") {
        throw ContractError("gate usage needs a routed model, got " + model.config().ffn_kind);
    }
    if (split.examples.empty()) throw ContractError("gate_usage_stats: empty split");
    if (batch_size < 1) throw ParameterError("gate_usage_stats: batch_size must be >= 1");

    const int language = lang_slot_index(model, split.language);
    std::map<std::string, std::pair<int64_t, int64_t>> per_layer;  // layer -> (ls, total)
    int64_t ls_total = 0, total = 0;

    for (size_t begin = 0; begin < split.examples.size();
         begin += static_cast<size_t>(batch_size)) {
        const size_t end = std::min(begin + static_cast<size_t>(batch_size), split.examples.size());
        const Batch batch = make_batch(vocab, split.lang_idx, slice(split, begin, end));

        GateRecord record;
        ForwardCtx ctx;
        ctx.train = false;
        ctx.language = language;
        ctx.gates = &record;
        const EncodedSource enc = model.encode(batch.src, ctx);
        (void)model.decode_logits(enc, batch.dec_in, ctx);

        for (const GateEntry& entry : record.entries) {
            auto& [ls, n] = per_layer[entry.layer];
            const auto& g = entry.gate.values();
            for (size_t i = 0; i < g.size(); ++i) {
                if (!entry.counted[i]) continue;
                ++n;
                ++total;
                if (g[i] == 1.0) {
                    ++ls;
                    ++ls_total;
                }
            }
        }
    }
    if (total == 0) throw ContractError("gate_usage_stats: no gate decisions recorded");

    GateUsage usage;
    usage.ls_decisions = ls_total;
    usage.decisions = total;
    usage.overall = static_cast<double>(ls_total) / static_cast<double>(total);
    for (const auto& [layer, counts] : per_layer) {
        usage.per_layer.emplace_back(
            layer, static_cast<double>(counts.first) / static_cast<double>(counts.second));
    }
    return usage;
}

ParamOverhead param_overhead(Seq2SeqModel& model, const std::vector<std::string>& languages) {
    if (model.config().ffn_kind != "clsr") {
        throw ContractError("parameter overhead needs a routed model, got " +
                            model.config().ffn_kind);
    }
    for (const std::string& lang : languages) (void)lang_slot_index(model, lang);

    std::map<std::string, int64_t> by_owner;
    ParamOverhead out;
    for (NamedParam& p : model.collect_params()) {
        const auto n = static_cast<int64_t>(p.tensor.values().size());
        out.total += n;
        by_owner[p.owner] += n;
    }
    out.shared = by_owner["shared"];
    int64_t requested = 0;
    for (const std::string& lang : languages) {
        const int64_t n = by_owner[lang];
        out.per_language.emplace_back(lang, n);
        requested += n;
    }
    out.ratio = out.shared > 0 ? static_cast<double>(requested) / static_cast<double>(out.shared)
                               : 0.0;
    return out;
}

}  // namespace clsr
