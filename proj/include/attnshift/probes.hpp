#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "attnshift/intervene_fwd.hpp"
#include "attnshift/synth.hpp"

namespace attnshift {

// Last-row attention outputs for every head of one (sample, language)
// forward pass: the standard rows feed shift estimation, the text-masked
// rows feed the probes.
struct TapRecord {
    std::int64_t sample_id = 0;
    std::string language;
    Matrix o_last;     // (L*H) x d
    Matrix ohat_last;  // (L*H) x d
};

struct TapSet {
    int layers = 0;
    int heads = 0;
    int head_dim = 0;
    std::vector<std::string> languages;  // "en" first, then targets
    std::string prompt_kind = "caption";
    std::uint64_t model_hash = 0;
    std::uint64_t dataset_hash = 0;
    std::vector<TapRecord> records;  // ordered by (sample id, language index)

    const TapRecord* find(std::int64_t sample_id, const std::string& language) const;
};

struct RecordOptions {
    int threads = 1;
    const InterventionPlan* plan = nullptr;  // optional: record under intervention
};

// Runs the caption prompt for each sample in both languages and collects
// last-row taps for all L*H heads.
TapSet extract_features(const ModelBundle& model, const Dataset& dataset,
                        const RecordOptions& opts = {});

struct Probe {
    int layer = 0;
    int head = 0;
    std::vector<float> weights;  // length d, on standardized features
    float bias = 0.0f;
    std::vector<float> feat_mean;  // per-dim standardization from the train split
    std::vector<float> feat_std;   // clamped at 1e-6
    double train_acc = 0.0;
    double test_acc = 0.0;
};

enum class ProbeLoss { Logistic, Hinge };

struct ProbeTrainOptions {
    double learning_rate = 0.1;
    int iterations = 500;
    double l2 = 1e-3;
    ProbeLoss loss = ProbeLoss::Logistic;
    double split_fraction = 0.8;
    std::uint64_t split_seed = 0;
};

struct ProbeBank {
    int layers = 0;
    int heads = 0;
    int head_dim = 0;
    std::uint64_t split_seed = 0;
    double split_fraction = 0.8;
    std::uint64_t taps_hash = 0;
    std::uint64_t model_hash = 0;
    std::uint64_t dataset_hash = 0;
    std::vector<Probe> probes;  // (layer, head) ascending

    const Probe& at(int layer, int head) const;
};

// Trains one probe on explicit feature rows. labels are +1 (English) or
// -1; train_mask marks the train split rows.
Probe train_probe(const Matrix& features, const std::vector<int>& labels,
                  const std::vector<bool>& train_mask, const ProbeTrainOptions& opts = {});

// One probe per head over the tap set's masked rows. English rows are
// +1, every other language -1; the split is by sample id so paired rows
// stay on the same side.
ProbeBank train_all_probes(const TapSet& taps, const ProbeTrainOptions& opts = {},
                           int threads = 1);

// True when the sample lands in the train split for this seed/fraction.
bool sample_in_train_split(std::int64_t sample_id, std::uint64_t split_seed,
                           double split_fraction);

struct HeadSetEntry {
    int layer = 0;
    int head = 0;
    double test_acc = 0.0;
};

struct HeadSet {
    int k = 0;
    std::vector<HeadSetEntry> entries;  // accuracy descending, ties (layer, head) ascending
    std::uint64_t model_hash = 0;
    std::uint64_t dataset_hash = 0;
    std::uint64_t split_seed = 0;
};

HeadSet select_heads(const ProbeBank& bank, int k);

// Probe score on a raw (unstandardized) feature row.
double probe_score(const Probe& probe, std::span<const float> feature);

}  // namespace attnshift
