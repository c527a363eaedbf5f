#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "attnshift/shift.hpp"

namespace attnshift {

struct InterventionPlan {
    HeadSet head_set;
    ShiftSet shifts;
    double alpha = 1.0;
    ShiftRows shift_rows = ShiftRows::All;
    std::string estimated_for;  // language the shifts were estimated against
    std::string applies_to;     // language the plan is deployed on

    // "specific" / "multi" when deployed on the estimation language,
    // "mono" when re-targeted to another one.
    std::string mode_label() const;
};

InterventionPlan make_plan(const HeadSet& heads, const ShiftSet& shifts, double alpha,
                           ShiftRows rows = ShiftRows::All);

// Reuses the head set and shift vectors on a new target language; no
// recomputation. Retargeting to the original language is the identity.
InterventionPlan retarget_mono(const InterventionPlan& plan, const std::string& new_language);

// Hook construction fails with PlanError when a selected head has no
// shift vector.
InterventionHook make_hook(const InterventionPlan& plan, const ModelConfig& config);

ForwardTrace intervened_forward(const ModelBundle& model, const SequenceInput& input,
                                const InterventionPlan& plan);

struct EvalRow {
    std::int64_t sample_id = 0;
    std::string language;
    bool predicted_yes = false;
    bool label_yes = false;
};

struct EvalReport {
    std::string language;
    int correct = 0;
    int total = 0;
    double accuracy = 0.0;
    std::vector<EvalRow> rows;
    std::uint64_t model_hash = 0;
    std::uint64_t dataset_hash = 0;
    std::uint64_t plan_hash = 0;  // 0 when no plan
};

struct EvalOptions {
    int threads = 1;
    // When set, only samples passing the filter are evaluated.
    const std::vector<std::int64_t>* sample_ids = nullptr;
};

// Runs the presence question for every sample in the given language.
// The plan, when present, is applied to non-English queries only.
EvalReport evaluate(const ModelBundle& model, const Dataset& dataset, const std::string& language,
                    const InterventionPlan* plan = nullptr, const EvalOptions& opts = {});

struct SweepCell {
    double alpha = 0.0;
    int k = 0;
    double accuracy = 0.0;
};

struct SweepResult {
    double alpha_star = 0.0;
    int k_star = 0;
    int stage1_k = 0;
    std::vector<SweepCell> grid;  // full alpha x K grid on the tuning split
    std::vector<double> alpha_grid;
    std::vector<int> k_grid;
};

struct SweepOptions {
    int threads = 1;
    std::uint64_t split_seed = 0;
    double split_fraction = 0.8;  // tuning split is the held-out 20%
};

// Two-stage hyperparameter selection: alpha swept at the K nearest the
// scaled reference head count, then K swept at the chosen alpha. Ties
// resolve to the smaller value. The full grid is evaluated so joint
// behavior can be inspected.
SweepResult sweep(const ModelBundle& model, const Dataset& dataset, const TapSet& taps,
                  const ProbeBank& bank, const SweepOptions& opts = {});

std::vector<double> default_alpha_grid();
std::vector<int> scaled_k_grid(int layers, int heads);
int stage1_k(int layers, int heads);

const char* to_string(ShiftRows rows);
ShiftRows shift_rows_from_string(const std::string& s);

}  // namespace attnshift
