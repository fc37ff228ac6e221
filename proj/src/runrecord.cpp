#include "clsr/runrecord.hpp"

#include <cmath>
#include <fstream>

#include "clsr/error.hpp"

namespace clsr {

nlohmann::json RunRecord::to_json() const {
    nlohmann::json j;
    j["regime"] = regime;
    j["language"] = language;
    j["seed"] = seed;
    j["config"] = config;
    j["best_epoch"] = best_epoch;
    nlohmann::json eps = nlohmann::json::array();
    for (const EpochStats& e : epochs) {
        eps.push_back({{"total", e.total},
                       {"ce", e.ce},
                       {"gate", e.gate},
                       {"kd", e.kd},
                       {"val_wer", e.val_wer},
                       {"steps", e.steps}});
    }
    j["epochs"] = eps;
    j["metrics"] = metrics;
    j["param_counts"] = param_counts;
    return j;
}

RunRecord RunRecord::from_json(const nlohmann::json& j) {
    RunRecord r;
    try {
        r.regime = j.at("regime").get<std::string>();
        r.language = j.at("language").get<std::string>();
        r.seed = j.at("seed").get<uint64_t>();
        r.config = j.at("config");
        r.best_epoch = j.at("best_epoch").get<int64_t>();
        for (const nlohmann::json& e : j.at("epochs")) {
            EpochStats s;
            s.total = e.at("total").get<double>();
            s.ce = e.at("ce").get<double>();
            s.gate = e.at("gate").get<double>();
            s.kd = e.at("kd").get<double>();
            s.val_wer = e.at("val_wer").get<double>();
            s.steps = e.at("steps").get<int64_t>();
            r.epochs.push_back(s);
        }
        r.metrics = j.at("metrics").get<std::map<std::string, double>>();
        r.param_counts = j.at("param_counts").get<std::map<std::string, int64_t>>();
    } catch (const nlohmann::json::exception& e) {
        throw LoadError(std::string("bad run record: ") + e.what());
    }
    return r;
}

void RunRecord::save(const std::string& path) const {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw LoadError("cannot open run record for writing: " + path);
    out << to_json().dump(2) << '\n';
    if (!out) throw LoadError("write failed for run record: " + path);
}

RunRecord RunRecord::load(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw LoadError("cannot open run record: " + path);
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw LoadError(std::string("bad run record file ") + path + ": " + e.what());
    }
    return from_json(j);
}

AggregateStat aggregate_values(const std::vector<double>& values) {
    if (values.size() < 2) {
        throw ParameterError("aggregation needs at least two values");
    }
    AggregateStat stat;
    stat.n = static_cast<int64_t>(values.size());
    double sum = 0.0;
    for (double v : values) sum += v;
    stat.mean = sum / static_cast<double>(stat.n);
    double ss = 0.0;
    for (double v : values) ss += (v - stat.mean) * (v - stat.mean);
    stat.stddev = std::sqrt(ss / static_cast<double>(stat.n - 1));
    stat.ci95 = 1.96 * stat.stddev / std::sqrt(static_cast<double>(stat.n));
    return stat;
}

std::map<std::string, AggregateStat> multi_seed_aggregate(const std::vector<RunRecord>& records) {
    if (records.size() < 2) {
        throw ParameterError("multi-seed aggregation needs at least two records");
    }
    const nlohmann::json& base = records.front().config;
    for (const RunRecord& r : records) {
        if (r.config != base || r.regime != records.front().regime ||
            r.language != records.front().language) {
            throw ContractError("records to aggregate differ in more than the seed");
        }
    }
    std::map<std::string, AggregateStat> out;
    for (const auto& [name, first_value] : records.front().metrics) {
        std::vector<double> values;
        values.reserve(records.size());
        values.push_back(first_value);
        bool everywhere = true;
        for (size_t i = 1; i < records.size(); ++i) {
            const auto it = records[i].metrics.find(name);
            if (it == records[i].metrics.end()) {
                everywhere = false;
                break;
            }
            values.push_back(it->second);
        }
        if (everywhere) out[name] = aggregate_values(values);
    }
    return out;
}

}  // namespace clsr
