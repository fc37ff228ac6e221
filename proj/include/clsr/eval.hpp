// Evaluation: word error rate over greedy transcriptions, hard-gate usage
// statistics, and parameter accounting for the routed variants.
#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "clsr/model.hpp"
#include "clsr/synth.hpp"

namespace clsr {

// Lowercase ASCII and collapse runs of whitespace to single spaces.
std::string normalize_text(const std::string& text);
std::vector<std::string> split_words(const std::string& text);

// Word-level minimum edit distance (substitutions + deletions + insertions).
int64_t edit_distance(const std::vector<std::string>& ref, const std::vector<std::string>& hyp);

struct WerResult {
    double wer = 0.0;
    int64_t errors = 0;         // summed edit distance
    int64_t ref_words = 0;      // summed reference length
    int64_t pairs_scored = 0;
    int64_t empty_refs_excluded = 0;
};

// Corpus-aggregated WER: total errors over total reference words. Pairs whose
// reference normalizes to nothing are excluded (and counted). Raises
// ContractError when no reference survives.
WerResult wer_between(const std::vector<std::string>& refs, const std::vector<std::string>& hyps);

// Greedy-decode the split and score against its targets.
WerResult evaluate_wer(Seq2SeqModel& model, const Corpus& split, const TaskVocab& vocab,
                       int64_t batch_size = 32);

struct GateUsage {
    double overall = 0.0;     // fraction of hard-gate decisions that chose the language branch
    int64_t ls_decisions = 0;
    int64_t decisions = 0;
    std::vector<std::pair<std::string, double>> per_layer;
};

// Hard-gate usage over teacher-forced inference passes on the split.
// Requires a routed model that knows the split's language.
GateUsage gate_usage_stats(Seq2SeqModel& model, const Corpus& split, const TaskVocab& vocab,
                           int64_t batch_size = 32);

struct ParamOverhead {
    int64_t total = 0;
    int64_t shared = 0;
    std::vector<std::pair<std::string, int64_t>> per_language;  // requested languages only
    double ratio = 0.0;  // sum of requested language params over shared params
};

// Exact integer parameter counts by owner for a routed model.
ParamOverhead param_overhead(Seq2SeqModel& model, const std::vector<std::string>& languages);

}  // namespace clsr
