// Structured results of a single training run and multi-seed aggregation.
// Records serialize to JSON losslessly so reruns can be diffed byte-for-byte.
#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "json.hpp"

namespace clsr {

struct EpochStats {
    double total = 0.0;
    double ce = 0.0;
    double gate = 0.0;
    double kd = 0.0;
    double val_wer = -1.0;  // -1 when the run has no validation pass
    int64_t steps = 0;
};

struct RunRecord {
    std::string regime;
    std::string language;
    uint64_t seed = 0;
    nlohmann::json config;  // effective configuration snapshot, seed excluded
    std::vector<EpochStats> epochs;
    int64_t best_epoch = -1;  // 0-based epoch whose weights were kept
    std::map<std::string, double> metrics;       // e.g. "wer.test_out"
    std::map<std::string, int64_t> param_counts;  // e.g. "total", "trainable"

    nlohmann::json to_json() const;
    static RunRecord from_json(const nlohmann::json& j);
    void save(const std::string& path) const;
    static RunRecord load(const std::string& path);
};

struct AggregateStat {
    double mean = 0.0;
    double stddev = 0.0;  // sample standard deviation (n - 1)
    double ci95 = 0.0;    // 1.96 * stddev / sqrt(n)
    int64_t n = 0;
};

// Per-metric mean / spread across seeds. Records must agree on everything but
// the seed; metrics present in every record are aggregated.
std::map<std::string, AggregateStat> multi_seed_aggregate(const std::vector<RunRecord>& records);

// Mean / spread of raw values (the aggregation core, exposed for checking).
AggregateStat aggregate_values(const std::vector<double>& values);

}  // namespace clsr
