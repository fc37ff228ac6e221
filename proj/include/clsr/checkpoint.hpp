// Binary model checkpoints: full-precision weights keyed by hierarchical
// parameter name and routing owner, with the model configuration embedded so
// a file is sufficient to rebuild the network it came from.
#pragma once

#include <memory>
#include <string>
#include <vector>

#include "clsr/model.hpp"

namespace clsr {

struct CheckpointEntry {
    std::string name;
    std::string owner;
    std::vector<int64_t> shape;
    std::vector<double> values;
};

struct Checkpoint {
    ModelConfig config;
    uint64_t init_seed = 0;
    std::vector<CheckpointEntry> entries;
};

void save_checkpoint(Seq2SeqModel& model, const std::string& path);

Checkpoint read_checkpoint(const std::string& path);

// Rebuild the exact network a checkpoint describes. The parameter set in the
// file must match the freshly built model name-for-name and shape-for-shape.
std::unique_ptr<Seq2SeqModel> build_model(const Checkpoint& ckpt);
std::unique_ptr<Seq2SeqModel> load_model(const std::string& path);

// Deployment bundle for one language: shared weights plus that language's
// branch only. The result predicts identically to the full model when that
// language is selected (its language list collapses to the one entry, slot 0).
Checkpoint extract_language(const Checkpoint& ckpt, const std::string& language);
std::unique_ptr<Seq2SeqModel> assemble_inference_model(const Checkpoint& ckpt,
                                                       const std::string& language);

// Configuration JSON round-trip shared by checkpoints and run configs.
std::string model_config_to_json(const ModelConfig& cfg);
ModelConfig model_config_from_json(const std::string& text);

}  // namespace clsr
