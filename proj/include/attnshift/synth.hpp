#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "attnshift/model.hpp"

namespace attnshift {

enum class WorldMode { CleanPaired, Noisy };
enum class PlantPolicy { SingleLayer, MultiLayer };

struct WorldConfig {
    ModelConfig model;
    std::vector<std::pair<int, int>> planted_heads;  // (layer, head)
    PlantPolicy plant_policy = PlantPolicy::SingleLayer;
    float offset_scale = 2.0f;
    WorldMode mode = WorldMode::CleanPaired;
    float noise_sigma = 0.0f;
    int object_signatures = 12;
    int bbox_size = 8;
    std::uint64_t seed = 0;
    std::uint64_t plant_seed = 0;  // 0 = derive from seed
    std::string target_language = "tgt";

    void validate() const;
    std::uint64_t effective_plant_seed() const;
};

// Fixed per-world directions in embedding space: object signatures give
// images per-object structure; the beacon carries the presence bit that
// the answer readout is calibrated against.
struct WorldDirections {
    std::vector<float> beacon;                    // d_model, unit norm
    std::vector<std::vector<float>> signatures;   // object_signatures x d_model, unit norm
};

struct Sample {
    std::int64_t id = 0;
    std::uint64_t patch_seed = 0;
    std::vector<int> query_en;
    std::vector<int> query_tgt;
    bool label_yes = false;
    std::vector<int> bbox;  // 1-based patch indices, ascending
    int object_id = 0;
};

struct Dataset {
    WorldConfig world;
    std::vector<Sample> samples;
    std::uint64_t patches_hash = 0;  // content hash over materialized patch matrices
};

WorldDirections derive_directions(const WorldConfig& world);

// Builds the toy model: Gaussian weights, paired (or noise-perturbed)
// target-language embeddings, a calibrated answer readout, and planted
// per-head offsets. Retries sub-seeds until English presence accuracy
// reaches 0.95; throws GenerationError after 20 attempts.
ModelBundle gen_model(const WorldConfig& world);

// B presence samples with balanced labels. Requires B >= 10 and even.
Dataset gen_dataset(const WorldConfig& world, int b, const std::string& domain = "data");

// Reconstructs the n x d_model patch matrix from the sample's seed.
Matrix materialize_patches(const WorldConfig& world, const WorldDirections& dirs,
                           const Sample& sample);

// Bijective token map between the two language ranges.
std::vector<int> translate(const VocabLayout& vocab, const std::vector<int>& en_tokens);
std::vector<int> translate_inverse(const VocabLayout& vocab, const std::vector<int>& tgt_tokens);

// Ground-truth offset of a planted head for the given language: zero for
// English, the stored vector for the target language. nullopt when the
// head is not planted.
std::optional<std::vector<float>> planted_offset(const ModelBundle& model, int layer, int head,
                                                 const std::string& language);

// Query construction shared by evaluation, recording, and calibration.
SequenceInput make_presence_input(const ModelBundle& model, const WorldConfig& world,
                                  const WorldDirections& dirs, const Sample& sample,
                                  const std::string& language);
SequenceInput make_caption_input(const ModelBundle& model, const WorldConfig& world,
                                 const WorldDirections& dirs, const Sample& sample,
                                 const std::string& language);

bool predict_yes(const std::vector<float>& logits, const VocabLayout& vocab);

// WorldConfig reconstructed from a loaded model bundle, for paths that
// start from a model directory instead of a world description.
WorldConfig world_from_model(const ModelBundle& model);

const char* to_string(WorldMode mode);
const char* to_string(PlantPolicy policy);
WorldMode world_mode_from_string(const std::string& s);
PlantPolicy plant_policy_from_string(const std::string& s);

}  // namespace attnshift
