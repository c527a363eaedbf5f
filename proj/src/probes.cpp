#include "attnshift/probes.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

#include "attnshift/intervene.hpp"
#include "attnshift/parallel.hpp"

namespace attnshift {

const TapRecord* TapSet::find(std::int64_t sample_id, const std::string& language) const {
    for (const auto& r : records)
        if (r.sample_id == sample_id && r.language == language) return &r;
    return nullptr;
}

TapSet extract_features(const ModelBundle& model, const Dataset& dataset,
                        const RecordOptions& opts) {
    const ModelConfig& cfg = model.config;
    if (dataset.world.model.layers != cfg.layers || dataset.world.model.heads != cfg.heads ||
        dataset.world.model.head_dim != cfg.head_dim || dataset.world.model.patches != cfg.patches ||
        dataset.world.model.vocab != cfg.vocab)
        throw InputError("extract_features: dataset world does not match the model config");

    const WorldConfig& world = dataset.world;
    const WorldDirections dirs = derive_directions(world);
    TapSet taps;
    taps.layers = cfg.layers;
    taps.heads = cfg.heads;
    taps.head_dim = cfg.head_dim;
    taps.languages = {"en", world.target_language};

    const int n_langs = static_cast<int>(taps.languages.size());
    const int n_jobs = static_cast<int>(dataset.samples.size()) * n_langs;
    taps.records.resize(static_cast<std::size_t>(n_jobs));

    InterventionHook hook;
    if (opts.plan) hook = make_hook(*opts.plan, cfg);

    parallel_for(n_jobs, opts.threads, [&](int job) {
        const Sample& sample = dataset.samples[static_cast<std::size_t>(job / n_langs)];
        const std::string& lang = taps.languages[static_cast<std::size_t>(job % n_langs)];
        const SequenceInput in = make_caption_input(model, world, dirs, sample, lang);
        // The plan never touches English queries.
        const InterventionHook* h = (opts.plan && lang != "en") ? &hook : nullptr;
        const ForwardTrace trace = forward(model, in, h);
        TapRecord& rec = taps.records[static_cast<std::size_t>(job)];
        rec.sample_id = sample.id;
        rec.language = lang;
        rec.o_last = trace.o_last;
        rec.ohat_last = trace.ohat_last;
    });
    return taps;
}

bool sample_in_train_split(std::int64_t sample_id, std::uint64_t split_seed,
                           double split_fraction) {
    const std::uint64_t h = mix64(split_seed ^ mix64(static_cast<std::uint64_t>(sample_id) +
                                                     0x9E3779B97F4A7C15ull));
    const double u = static_cast<double>(h >> 11) * 0x1.0p-53;
    return u < split_fraction;
}

Probe train_probe(const Matrix& features, const std::vector<int>& labels,
                  const std::vector<bool>& train_mask, const ProbeTrainOptions& opts) {
    const int n = features.rows();
    const int d = features.cols();
    if (static_cast<int>(labels.size()) != n || static_cast<int>(train_mask.size()) != n)
        throw InputError("train_probe: rows, labels and mask must agree");

    int n_train = 0, n_pos = 0, n_neg = 0;
    for (int i = 0; i < n; ++i) {
        if (!train_mask[i]) continue;
        ++n_train;
        (labels[i] > 0 ? n_pos : n_neg)++;
    }
    if (n_pos == 0 || n_neg == 0)
        throw DegenerateDataError("train_probe: training split has a single class");

    Probe probe;
    probe.feat_mean.assign(static_cast<std::size_t>(d), 0.0f);
    probe.feat_std.assign(static_cast<std::size_t>(d), 1.0f);
    {
        std::vector<double> mean(static_cast<std::size_t>(d), 0.0);
        std::vector<double> var(static_cast<std::size_t>(d), 0.0);
        for (int i = 0; i < n; ++i) {
            if (!train_mask[i]) continue;
            const float* row = features.row(i);
            for (int j = 0; j < d; ++j) mean[j] += row[j];
        }
        for (int j = 0; j < d; ++j) mean[j] /= n_train;
        for (int i = 0; i < n; ++i) {
            if (!train_mask[i]) continue;
            const float* row = features.row(i);
            for (int j = 0; j < d; ++j) {
                const double c = row[j] - mean[j];
                var[j] += c * c;
            }
        }
        for (int j = 0; j < d; ++j) {
            probe.feat_mean[j] = static_cast<float>(mean[j]);
            probe.feat_std[j] = static_cast<float>(std::max(std::sqrt(var[j] / n_train), 1e-6));
        }
    }

    // Standardized train rows, materialized once.
    Matrix xs(n, d);
    for (int i = 0; i < n; ++i) {
        const float* src = features.row(i);
        float* dst = xs.row(i);
        for (int j = 0; j < d; ++j)
            dst[j] = static_cast<float>((static_cast<double>(src[j]) - probe.feat_mean[j]) /
                                        probe.feat_std[j]);
    }

    std::vector<double> w(static_cast<std::size_t>(d), 0.0);
    double bias = 0.0;
    std::vector<double> grad(static_cast<std::size_t>(d));
    const double inv_n = 1.0 / n_train;
    for (int it = 0; it < opts.iterations; ++it) {
        std::fill(grad.begin(), grad.end(), 0.0);
        double grad_b = 0.0;
        for (int i = 0; i < n; ++i) {
            if (!train_mask[i]) continue;
            const float* row = xs.row(i);
            double z = bias;
            for (int j = 0; j < d; ++j) z += w[j] * row[j];
            const double y = labels[i];
            double coeff;  // d(loss)/d(margin), times -y
            if (opts.loss == ProbeLoss::Logistic) {
                coeff = -y / (1.0 + std::exp(y * z));
            } else {
                coeff = (y * z < 1.0) ? -y : 0.0;
            }
            if (coeff != 0.0) {
                for (int j = 0; j < d; ++j) grad[j] += coeff * row[j];
                grad_b += coeff;
            }
        }
        for (int j = 0; j < d; ++j) {
            grad[j] = grad[j] * inv_n + 2.0 * opts.l2 * w[j];
            w[j] -= opts.learning_rate * grad[j];
        }
        bias -= opts.learning_rate * grad_b * inv_n;
    }

    probe.weights.resize(static_cast<std::size_t>(d));
    for (int j = 0; j < d; ++j) probe.weights[j] = static_cast<float>(w[j]);
    probe.bias = static_cast<float>(bias);

    int train_ok = 0, test_ok = 0, n_test = 0;
    for (int i = 0; i < n; ++i) {
        double z = probe.bias;
        const float* row = xs.row(i);
        for (int j = 0; j < d; ++j) z += static_cast<double>(probe.weights[j]) * row[j];
        const int pred = z >= 0.0 ? 1 : -1;
        if (train_mask[i]) {
            train_ok += (pred == labels[i]);
        } else {
            ++n_test;
            test_ok += (pred == labels[i]);
        }
    }
    probe.train_acc = static_cast<double>(train_ok) / n_train;
    probe.test_acc = n_test > 0 ? static_cast<double>(test_ok) / n_test : 0.0;
    return probe;
}

ProbeBank train_all_probes(const TapSet& taps, const ProbeTrainOptions& opts, int threads) {
    if (taps.records.empty()) throw InputError("train_all_probes: empty tap set");
    const int n = static_cast<int>(taps.records.size());
    const int d = taps.head_dim;

    std::vector<int> labels(static_cast<std::size_t>(n));
    std::vector<bool> train_mask(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) {
        labels[i] = taps.records[i].language == "en" ? 1 : -1;
        train_mask[i] =
            sample_in_train_split(taps.records[i].sample_id, opts.split_seed, opts.split_fraction);
    }

    ProbeBank bank;
    bank.layers = taps.layers;
    bank.heads = taps.heads;
    bank.head_dim = d;
    bank.split_seed = opts.split_seed;
    bank.split_fraction = opts.split_fraction;
    bank.model_hash = taps.model_hash;
    bank.dataset_hash = taps.dataset_hash;
    bank.probes.resize(static_cast<std::size_t>(taps.layers) * taps.heads);

    parallel_for(taps.layers * taps.heads, threads, [&](int slot) {
        Matrix features(n, d);
        for (int i = 0; i < n; ++i)
            std::memcpy(features.row(i), taps.records[i].ohat_last.row(slot), sizeof(float) * d);
        Probe p = train_probe(features, labels, train_mask, opts);
        p.layer = slot / taps.heads;
        p.head = slot % taps.heads;
        bank.probes[static_cast<std::size_t>(slot)] = std::move(p);
    });
    return bank;
}

const Probe& ProbeBank::at(int layer, int head) const {
    if (layer < 0 || layer >= layers || head < 0 || head >= heads)
        throw InputError("probe bank: head outside the grid");
    return probes[static_cast<std::size_t>(layer) * heads + head];
}

HeadSet select_heads(const ProbeBank& bank, int k) {
    const int total = bank.layers * bank.heads;
    if (k < 1 || k > total) throw InputError("select_heads: K must be in [1, layers*heads]");
    if (static_cast<int>(bank.probes.size()) != total)
        throw InputError("select_heads: probe bank is incomplete");

    std::vector<HeadSetEntry> all;
    all.reserve(static_cast<std::size_t>(total));
    for (const Probe& p : bank.probes) all.push_back({p.layer, p.head, p.test_acc});
    std::sort(all.begin(), all.end(), [](const HeadSetEntry& a, const HeadSetEntry& b) {
        if (a.test_acc != b.test_acc) return a.test_acc > b.test_acc;
        if (a.layer != b.layer) return a.layer < b.layer;
        return a.head < b.head;
    });
    HeadSet out;
    out.k = k;
    out.entries.assign(all.begin(), all.begin() + k);
    out.split_seed = bank.split_seed;
    out.model_hash = bank.model_hash;
    out.dataset_hash = bank.dataset_hash;
    return out;
}

double probe_score(const Probe& probe, std::span<const float> feature) {
    if (feature.size() != probe.weights.size())
        throw ShapeError("probe_score: feature length does not match the probe");
    double z = probe.bias;
    for (std::size_t j = 0; j < feature.size(); ++j) {
        const double xs = (static_cast<double>(feature[j]) - probe.feat_mean[j]) / probe.feat_std[j];
        z += static_cast<double>(probe.weights[j]) * xs;
    }
    return z;
}

}  // namespace attnshift
