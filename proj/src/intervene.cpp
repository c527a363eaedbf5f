#include "attnshift/intervene.hpp"

#include <algorithm>
#include <cmath>

#include "attnshift/parallel.hpp"

namespace attnshift {

std::string InterventionPlan::mode_label() const {
    if (applies_to != estimated_for) return "mono";
    return to_string(shifts.mode);
}

InterventionPlan make_plan(const HeadSet& heads, const ShiftSet& shifts, double alpha,
                           ShiftRows rows) {
    InterventionPlan plan;
    plan.head_set = heads;
    plan.shifts = shifts;
    plan.alpha = alpha;
    plan.shift_rows = rows;
    // The deployment language defaults to the estimation language: the
    // last entry of the shift's language list for pair estimates, the
    // pooled group label otherwise.
    plan.estimated_for = shifts.languages.size() == 2 ? shifts.languages[1] : "non-en";
    plan.applies_to = plan.estimated_for;
    if (!std::isfinite(alpha)) throw PlanError("make_plan: alpha must be finite");
    for (const auto& e : plan.head_set.entries) {
        if (e.layer < 0 || e.layer >= shifts.layers || e.head < 0 || e.head >= shifts.heads)
            throw PlanError("make_plan: selected head outside the shift grid");
    }
    return plan;
}

InterventionPlan retarget_mono(const InterventionPlan& plan, const std::string& new_language) {
    InterventionPlan out = plan;
    out.applies_to = new_language;
    return out;
}

InterventionHook make_hook(const InterventionPlan& plan, const ModelConfig& config) {
    if (plan.shifts.layers != config.layers || plan.shifts.heads != config.heads ||
        plan.shifts.head_dim != config.head_dim)
        throw PlanError("make_hook: plan grid does not match the model");
    InterventionHook hook;
    hook.layers = config.layers;
    hook.heads = config.heads;
    hook.alpha = plan.alpha;
    hook.rows = plan.shift_rows;
    hook.shifts.assign(static_cast<std::size_t>(config.layers) * config.heads, {});
    for (const auto& e : plan.head_set.entries) {
        const std::span<const float> s = plan.shifts.at(e.layer, e.head);
        if (s.empty()) throw PlanError("make_hook: selected head has no shift vector");
        hook.shifts[static_cast<std::size_t>(e.layer) * config.heads + e.head].assign(s.begin(),
                                                                                      s.end());
    }
    return hook;
}

ForwardTrace intervened_forward(const ModelBundle& model, const SequenceInput& input,
                                const InterventionPlan& plan) {
    const InterventionHook hook = make_hook(plan, model.config);
    return forward(model, input, &hook);
}

EvalReport evaluate(const ModelBundle& model, const Dataset& dataset, const std::string& language,
                    const InterventionPlan* plan, const EvalOptions& opts) {
    if (dataset.world.model.layers != model.config.layers ||
        dataset.world.model.heads != model.config.heads ||
        dataset.world.model.head_dim != model.config.head_dim ||
        dataset.world.model.patches != model.config.patches)
        throw InputError("evaluate: dataset world does not match the model config");

    const WorldConfig& world = dataset.world;
    const WorldDirections dirs = derive_directions(world);

    std::vector<const Sample*> picked;
    if (opts.sample_ids) {
        for (std::int64_t id : *opts.sample_ids) {
            const auto it = std::find_if(dataset.samples.begin(), dataset.samples.end(),
                                         [id](const Sample& s) { return s.id == id; });
            if (it == dataset.samples.end())
                throw InputError("evaluate: sample id not in dataset: " + std::to_string(id));
            picked.push_back(&*it);
        }
    } else {
        picked.reserve(dataset.samples.size());
        for (const Sample& s : dataset.samples) picked.push_back(&s);
    }

    InterventionHook hook;
    const bool use_hook = plan != nullptr && language != "en";
    if (use_hook) hook = make_hook(*plan, model.config);

    EvalReport report;
    report.language = language;
    report.total = static_cast<int>(picked.size());
    report.rows.resize(picked.size());
    parallel_for(static_cast<int>(picked.size()), opts.threads, [&](int i) {
        const Sample& s = *picked[static_cast<std::size_t>(i)];
        const SequenceInput in = make_presence_input(model, world, dirs, s, language);
        const ForwardTrace trace = forward(model, in, use_hook ? &hook : nullptr);
        EvalRow& row = report.rows[static_cast<std::size_t>(i)];
        row.sample_id = s.id;
        row.language = language;
        row.label_yes = s.label_yes;
        row.predicted_yes = predict_yes(trace.logits, model.vocab);
    });
    for (const EvalRow& row : report.rows)
        if (row.predicted_yes == row.label_yes) ++report.correct;
    report.accuracy = report.total > 0
                          ? static_cast<double>(report.correct) / static_cast<double>(report.total)
                          : 0.0;
    return report;
}

std::vector<double> default_alpha_grid() {
    std::vector<double> grid;
    for (int i = 1; i <= 9; ++i) grid.push_back(0.5 * i);
    return grid;
}

std::vector<int> scaled_k_grid(int layers, int heads) {
    // The reference grid {50..300} targets a 1024-head grid; scale it to
    // this model so the fraction of heads is preserved.
    const double ratio = static_cast<double>(layers) * heads / 1024.0;
    std::vector<int> grid;
    for (int k = 50; k <= 300; k += 50) {
        const int scaled = std::max(1, static_cast<int>(std::llround(k * ratio)));
        const int capped = std::min(scaled, layers * heads);
        if (grid.empty() || grid.back() != capped) grid.push_back(capped);
    }
    return grid;
}

int stage1_k(int layers, int heads) {
    const double target = 100.0 * layers * heads / 1024.0;
    const std::vector<int> grid = scaled_k_grid(layers, heads);
    int best = grid.front();
    for (int g : grid)
        if (std::abs(g - target) < std::abs(best - target)) best = g;
    return best;
}

SweepResult sweep(const ModelBundle& model, const Dataset& dataset, const TapSet& taps,
                  const ProbeBank& bank, const SweepOptions& opts) {
    const std::string& target = dataset.world.target_language;
    const ShiftSet shifts = estimate_specific(taps, target);

    // Tuning runs on the held-out side of the probe split; the final
    // evaluation split stays untouched.
    std::vector<std::int64_t> tuning_ids;
    for (const Sample& s : dataset.samples)
        if (!sample_in_train_split(s.id, opts.split_seed, opts.split_fraction))
            tuning_ids.push_back(s.id);
    if (tuning_ids.empty()) throw InputError("sweep: tuning split is empty");

    SweepResult result;
    result.alpha_grid = default_alpha_grid();
    result.k_grid = scaled_k_grid(model.config.layers, model.config.heads);
    result.stage1_k = stage1_k(model.config.layers, model.config.heads);
    if (result.alpha_grid.empty() || result.k_grid.empty())
        throw InputError("sweep: empty hyperparameter grid");

    EvalOptions eval_opts;
    eval_opts.threads = opts.threads;
    eval_opts.sample_ids = &tuning_ids;

    for (int k : result.k_grid) {
        const HeadSet heads = select_heads(bank, k);
        for (double alpha : result.alpha_grid) {
            const InterventionPlan plan = make_plan(heads, shifts, alpha);
            const EvalReport rep = evaluate(model, dataset, target, &plan, eval_opts);
            result.grid.push_back({alpha, k, rep.accuracy});
        }
    }

    auto cell_accuracy = [&](double alpha, int k) {
        for (const SweepCell& c : result.grid)
            if (c.alpha == alpha && c.k == k) return c.accuracy;
        throw InputError("sweep: missing grid cell");
    };

    double best_alpha = result.alpha_grid.front();
    double best_acc = -1.0;
    for (double alpha : result.alpha_grid) {
        const double acc = cell_accuracy(alpha, result.stage1_k);
        if (acc > best_acc) {
            best_acc = acc;
            best_alpha = alpha;
        }
    }
    result.alpha_star = best_alpha;

    int best_k = result.k_grid.front();
    best_acc = -1.0;
    for (int k : result.k_grid) {
        const double acc = cell_accuracy(result.alpha_star, k);
        if (acc > best_acc) {
            best_acc = acc;
            best_k = k;
        }
    }
    result.k_star = best_k;
    return result;
}

const char* to_string(ShiftRows rows) { return rows == ShiftRows::All ? "all" : "last"; }

ShiftRows shift_rows_from_string(const std::string& s) {
    if (s == "all") return ShiftRows::All;
    if (s == "last") return ShiftRows::Last;
    throw InputError("unknown shift-rows mode: " + s);
}

}  // namespace attnshift
