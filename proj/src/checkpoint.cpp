#include "clsr/checkpoint.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>
#include <unordered_map>

#include "clsr/clsr_layer.hpp"
#include "clsr/error.hpp"
#include "json.hpp"

namespace clsr {
namespace {

static_assert(std::endian::native == std::endian::little,
              "checkpoint format stores scalars little-endian");

constexpr char kMagic[8] = {'C', 'L', 'S', 'R', 'C', 'K', 'P', 'T'};
constexpr uint32_t kVersion = 1;

void write_bytes(std::ofstream& out, const void* data, size_t n) {
    out.write(static_cast<const char*>(data), static_cast<std::streamsize>(n));
}

template <typename T>
void write_scalar(std::ofstream& out, T value) {
    write_bytes(out, &value, sizeof(T));
}

void write_string(std::ofstream& out, const std::string& s) {
    write_scalar<uint64_t>(out, s.size());
    write_bytes(out, s.data(), s.size());
}

void read_bytes(std::ifstream& in, void* data, size_t n, const char* what) {
    in.read(static_cast<char*>(data), static_cast<std::streamsize>(n));
    if (static_cast<size_t>(in.gcount()) != n) {
        throw LoadError(std::string("checkpoint truncated while reading ") + what);
    }
}

template <typename T>
T read_scalar(std::ifstream& in, const char* what) {
    T value{};
    read_bytes(in, &value, sizeof(T), what);
    return value;
}

std::string read_string(std::ifstream& in, const char* what) {
    const uint64_t len = read_scalar<uint64_t>(in, what);
    if (len > (1ULL << 32)) throw LoadError(std::string("implausible string length for ") + what);
    std::string s(static_cast<size_t>(len), '\0');
    read_bytes(in, s.data(), s.size(), what);
    return s;
}

nlohmann::json config_json(const ModelConfig& cfg) {
    nlohmann::json j;
    j["vocab_size"] = cfg.vocab_size;
    j["d_model"] = cfg.d_model;
    j["n_heads"] = cfg.n_heads;
    j["d_ff"] = cfg.d_ff;
    j["enc_layers"] = cfg.enc_layers;
    j["dec_layers"] = cfg.dec_layers;
    j["max_len"] = cfg.max_len;
    j["ffn_kind"] = cfg.ffn_kind;
    j["languages"] = cfg.languages;
    j["d_gate"] = cfg.d_gate;
    j["lora_rank"] = cfg.lora_rank;
    j["lora_alpha"] = cfg.lora_alpha;
    return j;
}

ModelConfig config_from_json_obj(const nlohmann::json& j) {
    ModelConfig cfg;
    try {
        cfg.vocab_size = j.at("vocab_size").get<int64_t>();
        cfg.d_model = j.at("d_model").get<int64_t>();
        cfg.n_heads = j.at("n_heads").get<int64_t>();
        cfg.d_ff = j.at("d_ff").get<int64_t>();
        cfg.enc_layers = j.at("enc_layers").get<int64_t>();
        cfg.dec_layers = j.at("dec_layers").get<int64_t>();
        cfg.max_len = j.at("max_len").get<int64_t>();
        cfg.ffn_kind = j.at("ffn_kind").get<std::string>();
        cfg.languages = j.at("languages").get<std::vector<std::string>>();
        cfg.d_gate = j.at("d_gate").get<int64_t>();
        cfg.lora_rank = j.at("lora_rank").get<int64_t>();
        cfg.lora_alpha = j.at("lora_alpha").get<double>();
    } catch (const nlohmann::json::exception& e) {
        throw LoadError(std::string("bad model configuration: ") + e.what());
    }
    cfg.validate();
    return cfg;
}

}  // namespace

std::string model_config_to_json(const ModelConfig& cfg) { return config_json(cfg).dump(); }

ModelConfig model_config_from_json(const std::string& text) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(text);
    } catch (const nlohmann::json::exception& e) {
        throw LoadError(std::string("bad configuration JSON: ") + e.what());
    }
    return config_from_json_obj(j);
}

void save_checkpoint(Seq2SeqModel& model, const std::string& path) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw LoadError("cannot open checkpoint for writing: " + path);

    write_bytes(out, kMagic, sizeof(kMagic));
    write_scalar<uint32_t>(out, kVersion);

    nlohmann::json header;
    header["config"] = config_json(model.config());
    header["init_seed"] = model.init_seed();
    write_string(out, header.dump());

    std::vector<NamedParam> params = model.collect_params();
    write_scalar<uint64_t>(out, params.size());
    for (const NamedParam& p : params) {
        write_string(out, p.name);
        write_string(out, p.owner);
        const Shape& shape = p.tensor.shape();
        write_scalar<uint32_t>(out, static_cast<uint32_t>(shape.size()));
        for (int64_t d : shape) write_scalar<int64_t>(out, d);
        const std::vector<double>& v = p.tensor.values();
        write_bytes(out, v.data(), v.size() * sizeof(double));
    }
    out.flush();
    if (!out) throw LoadError("write failed for checkpoint: " + path);
}

Checkpoint read_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw LoadError("cannot open checkpoint: " + path);

    char magic[8];
    read_bytes(in, magic, sizeof(magic), "magic");
    if (std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) {
        throw LoadError("not a checkpoint file: " + path);
    }
    const uint32_t version = read_scalar<uint32_t>(in, "version");
    if (version != kVersion) {
        throw LoadError("unsupported checkpoint version " + std::to_string(version));
    }

    Checkpoint ckpt;
    const std::string header_text = read_string(in, "header");
    try {
        const nlohmann::json header = nlohmann::json::parse(header_text);
        ckpt.config = config_from_json_obj(header.at("config"));
        ckpt.init_seed = header.at("init_seed").get<uint64_t>();
    } catch (const nlohmann::json::exception& e) {
        throw LoadError(std::string("bad checkpoint header: ") + e.what());
    }

    const uint64_t count = read_scalar<uint64_t>(in, "entry count");
    if (count > (1ULL << 24)) throw LoadError("implausible checkpoint entry count");
    ckpt.entries.reserve(static_cast<size_t>(count));
    for (uint64_t i = 0; i < count; ++i) {
        CheckpointEntry e;
        e.name = read_string(in, "entry name");
        e.owner = read_string(in, "entry owner");
        const uint32_t ndim = read_scalar<uint32_t>(in, "entry rank");
        if (ndim == 0 || ndim > 8) throw LoadError("bad rank for entry " + e.name);
        int64_t numel = 1;
        for (uint32_t d = 0; d < ndim; ++d) {
            const int64_t dim = read_scalar<int64_t>(in, "entry dims");
            if (dim <= 0 || numel > (1LL << 40) / dim) {
                throw LoadError("bad shape for entry " + e.name);
            }
            e.shape.push_back(dim);
            numel *= dim;
        }
        e.values.resize(static_cast<size_t>(numel));
        read_bytes(in, e.values.data(), e.values.size() * sizeof(double), "entry values");
        ckpt.entries.push_back(std::move(e));
    }
    return ckpt;
}

std::unique_ptr<Seq2SeqModel> build_model(const Checkpoint& ckpt) {
    ckpt.config.validate();

    // The network is always constructed with plain feed-forward slots and
    // then converted, mirroring how the checkpointed model was produced.
    ModelConfig base = ckpt.config;
    const std::string kind = base.ffn_kind;
    base.ffn_kind = "dense";
    base.languages.clear();
    auto model = std::make_unique<Seq2SeqModel>(base, ckpt.init_seed);
    if (kind == "clsr") {
        convert_ffn_to_clsr(*model, ckpt.config.languages);
    } else if (kind == "lora") {
        convert_ffn_to_lora(*model, ckpt.config.lora_rank, ckpt.config.lora_alpha);
    }

    std::vector<NamedParam> params = model->collect_params();
    std::unordered_map<std::string, NamedParam*> by_name;
    by_name.reserve(params.size());
    for (NamedParam& p : params) by_name[p.name] = &p;

    if (params.size() != ckpt.entries.size()) {
        throw LoadError("checkpoint carries " + std::to_string(ckpt.entries.size()) +
                        " parameters but the model has " + std::to_string(params.size()));
    }
    for (const CheckpointEntry& e : ckpt.entries) {
        auto it = by_name.find(e.name);
        if (it == by_name.end()) throw LoadError("checkpoint entry has no home: " + e.name);
        NamedParam& p = *it->second;
        if (p.owner != e.owner) {
            throw LoadError("owner mismatch for " + e.name + ": " + e.owner + " vs " + p.owner);
        }
        if (p.tensor.shape() != e.shape) throw LoadError("shape mismatch for " + e.name);
        std::copy(e.values.begin(), e.values.end(), p.tensor.values().begin());
    }
    return model;
}

std::unique_ptr<Seq2SeqModel> load_model(const std::string& path) {
    return build_model(read_checkpoint(path));
}

Checkpoint extract_language(const Checkpoint& ckpt, const std::string& language) {
    if (ckpt.config.ffn_kind != "clsr") {
        throw ContractError("language extraction needs a routed model, got " +
                            ckpt.config.ffn_kind);
    }
    const auto& langs = ckpt.config.languages;
    if (std::find(langs.begin(), langs.end(), language) == langs.end()) {
        throw RoutingError("language '" + language + "' is not in the checkpoint");
    }
    Checkpoint out;
    out.config = ckpt.config;
    out.config.languages = {language};
    out.init_seed = ckpt.init_seed;
    for (const CheckpointEntry& e : ckpt.entries) {
        if (e.owner == "shared" || e.owner == language) out.entries.push_back(e);
    }
    return out;
}

std::unique_ptr<Seq2SeqModel> assemble_inference_model(const Checkpoint& ckpt,
                                                       const std::string& language) {
    return build_model(extract_language(ckpt, language));
}

}  // namespace clsr
