#include "attnshift/synth.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <numeric>

namespace attnshift {

namespace {

constexpr float kPatchNoise = 0.25f;
constexpr float kSignatureScale = 0.75f;
constexpr float kBeaconScale = 1.0f;
constexpr int kCalibrationSamples = 128;
constexpr int kCheckSamples = 256;
constexpr int kMaxAttempts = 20;
constexpr double kEnglishAccuracyFloor = 0.95;
// Calibrate noisy worlds a little past the required 15-point gap so the
// gap survives evaluation on fresh samples.
constexpr double kGapTarget = 0.20;

std::vector<float> gaussian_unit_vector(RngStream& rng, int dim) {
    std::vector<double> v(static_cast<std::size_t>(dim));
    double norm2 = 0.0;
    for (auto& x : v) {
        x = rng.next_gaussian();
        norm2 += x * x;
    }
    const double inv = 1.0 / std::sqrt(norm2);
    std::vector<float> out(static_cast<std::size_t>(dim));
    for (int i = 0; i < dim; ++i) out[i] = static_cast<float>(v[i] * inv);
    return out;
}

void fill_gaussian(Matrix& m, RngStream& rng, double scale) {
    float* p = m.data();
    for (std::size_t i = 0; i < m.size(); ++i) p[i] = static_cast<float>(rng.next_gaussian() * scale);
}

VocabLayout make_vocab_layout(const WorldConfig& world) {
    VocabLayout v;
    v.yes_token = 0;
    v.no_token = 1;
    v.lang_base_en = 2;
    v.range_size = (world.model.vocab - 2) / 2;
    v.lang_base_tgt = v.lang_base_en + v.range_size;
    const int tpl = v.lang_base_en + world.object_signatures;
    v.caption_prompt_en = {tpl, tpl + 1, tpl + 2, tpl + 3};
    v.presence_prefix_en = {tpl + 4, tpl + 5, tpl + 6, tpl + 7};
    return v;
}

ModelBundle build_weights(const WorldConfig& world, int attempt) {
    const ModelConfig& cfg = world.model;
    const int dm = cfg.d_model();
    const std::uint64_t wseed = derive_seed(world.seed, "weights", static_cast<std::uint64_t>(attempt));

    ModelBundle bundle;
    bundle.config = cfg;
    bundle.config.seed = world.seed;
    bundle.vocab = make_vocab_layout(world);

    RngStream erng(derive_seed(wseed, "embedding"));
    bundle.embedding = Matrix(cfg.vocab, dm);
    fill_gaussian(bundle.embedding, erng, 1.0 / std::sqrt(static_cast<double>(dm)));

    // Paired languages: the target range mirrors the English range, with
    // optional per-token Gaussian perturbation in noisy mode.
    RngStream lrng(derive_seed(wseed, "lang-noise"));
    for (int i = 0; i < bundle.vocab.range_size; ++i) {
        const float* src = bundle.embedding.row(bundle.vocab.lang_base_en + i);
        float* dst = bundle.embedding.row(bundle.vocab.lang_base_tgt + i);
        if (world.mode == WorldMode::CleanPaired || world.noise_sigma == 0.0f) {
            std::memcpy(dst, src, sizeof(float) * dm);
        } else {
            for (int j = 0; j < dm; ++j)
                dst[j] = static_cast<float>(src[j] + lrng.next_gaussian() * world.noise_sigma);
        }
    }

    const double attn_scale = 1.0 / std::sqrt(static_cast<double>(dm));
    const double resid_scale = attn_scale / std::sqrt(2.0 * cfg.layers);
    bundle.layers.resize(static_cast<std::size_t>(cfg.layers));
    for (int l = 0; l < cfg.layers; ++l) {
        LayerWeights& lw = bundle.layers[l];
        RngStream rq(derive_seed(wseed, "wq", l)), rk(derive_seed(wseed, "wk", l)),
            rv(derive_seed(wseed, "wv", l)), ro(derive_seed(wseed, "wo", l)),
            ri(derive_seed(wseed, "w_in", l)), ru(derive_seed(wseed, "w_out", l));
        lw.wq = Matrix(dm, dm);
        lw.wk = Matrix(dm, dm);
        lw.wv = Matrix(dm, dm);
        lw.wo = Matrix(dm, dm);
        lw.w_in = Matrix(dm, cfg.d_mlp);
        lw.w_out = Matrix(cfg.d_mlp, dm);
        fill_gaussian(lw.wq, rq, attn_scale);
        fill_gaussian(lw.wk, rk, attn_scale);
        fill_gaussian(lw.wv, rv, attn_scale);
        fill_gaussian(lw.wo, ro, resid_scale);
        fill_gaussian(lw.w_in, ri, attn_scale);
        fill_gaussian(lw.w_out, ru, 1.0 / std::sqrt(static_cast<double>(cfg.d_mlp)) /
                                        std::sqrt(2.0 * cfg.layers));
        lw.rms1.assign(static_cast<std::size_t>(dm), 1.0f);
        lw.rms2.assign(static_cast<std::size_t>(dm), 1.0f);
    }
    bundle.rms_final.assign(static_cast<std::size_t>(dm), 1.0f);

    bundle.world.mode = to_string(world.mode);
    bundle.world.noise_sigma = world.noise_sigma;
    bundle.world.offset_scale = world.offset_scale;
    bundle.world.target_language = world.target_language;
    bundle.world.object_signatures = world.object_signatures;
    bundle.world.bbox_size = world.bbox_size;
    bundle.world.plant_seed = world.effective_plant_seed();
    bundle.world.generation_attempt = attempt;
    bundle.rebuild_plant_index();
    return bundle;
}

std::vector<float> final_normed_hidden(const ModelBundle& model, const ForwardTrace& trace) {
    return rms_norm_row(trace.hidden.back().row_span(trace.e - 1), model.rms_final);
}

double presence_accuracy(const ModelBundle& model, const WorldConfig& world,
                         const WorldDirections& dirs, const std::vector<Sample>& samples,
                         const std::string& language) {
    int correct = 0;
    for (const Sample& s : samples) {
        const SequenceInput in = make_presence_input(model, world, dirs, s, language);
        const ForwardTrace trace = forward(model, in);
        if (predict_yes(trace.logits, model.vocab) == s.label_yes) ++correct;
    }
    return static_cast<double>(correct) / static_cast<double>(samples.size());
}

// Class-mean readout over the final normed hidden states of English
// presence queries; the answer token rows become +/- the unit mean
// difference so argmax{yes,no} thresholds the class separation at zero.
void calibrate_readout(ModelBundle& model, const WorldConfig& world, const WorldDirections& dirs,
                       const std::vector<Sample>& calibration) {
    const int dm = model.config.d_model();
    std::vector<double> mean_yes(static_cast<std::size_t>(dm), 0.0);
    std::vector<double> mean_no(static_cast<std::size_t>(dm), 0.0);
    int n_yes = 0, n_no = 0;
    for (const Sample& s : calibration) {
        const SequenceInput in = make_presence_input(model, world, dirs, s, "en");
        const ForwardTrace trace = forward(model, in);
        const std::vector<float> h = final_normed_hidden(model, trace);
        auto& mu = s.label_yes ? mean_yes : mean_no;
        (s.label_yes ? n_yes : n_no)++;
        for (int j = 0; j < dm; ++j) mu[j] += h[j];
    }
    if (n_yes == 0 || n_no == 0)
        throw GenerationError("gen_model: calibration set lost label balance");
    double norm2 = 0.0;
    std::vector<double> delta(static_cast<std::size_t>(dm));
    for (int j = 0; j < dm; ++j) {
        delta[j] = mean_yes[j] / n_yes - mean_no[j] / n_no;
        norm2 += delta[j] * delta[j];
    }
    if (norm2 <= 0.0) throw GenerationError("gen_model: degenerate class means");
    const double inv = 1.0 / std::sqrt(norm2);
    float* yes_row = model.embedding.row(model.vocab.yes_token);
    float* no_row = model.embedding.row(model.vocab.no_token);
    for (int j = 0; j < dm; ++j) {
        yes_row[j] = static_cast<float>(delta[j] * inv);
        no_row[j] = -yes_row[j];
    }
}

// Offset direction per planted head: a blend of the direction that
// pushes the residual stream against the answer readout (through that
// head's output projection) and a per-head random direction, so worlds
// with different plant seeds carry different ground-truth vectors.
std::vector<float> plant_direction(const ModelBundle& model, int layer, int head,
                                   std::uint64_t plant_seed, std::uint64_t plant_index) {
    const int d = model.config.head_dim;
    const int dm = model.config.d_model();
    const float* yes_row = model.embedding.row(model.vocab.yes_token);

    std::vector<double> anti(static_cast<std::size_t>(d), 0.0);
    const Matrix& wo = model.layers[layer].wo;
    double norm2 = 0.0;
    for (int c = 0; c < d; ++c) {
        const float* wrow = wo.row(head * d + c);
        double dot = 0.0;
        for (int j = 0; j < dm; ++j) dot += static_cast<double>(wrow[j]) * yes_row[j];
        anti[c] = -dot;
        norm2 += dot * dot;
    }
    RngStream rng(derive_seed(plant_seed, "plant-direction", plant_index));
    const std::vector<float> random_dir = gaussian_unit_vector(rng, d);

    std::vector<double> mix(static_cast<std::size_t>(d));
    double mix2 = 0.0;
    const double inv_anti = norm2 > 1e-18 ? 1.0 / std::sqrt(norm2) : 0.0;
    for (int c = 0; c < d; ++c) {
        mix[c] = anti[c] * inv_anti + random_dir[c];
        mix2 += mix[c] * mix[c];
    }
    if (mix2 < 1e-12) {
        mix.assign(random_dir.begin(), random_dir.end());
        mix2 = 1.0;
    }
    const double inv = 1.0 / std::sqrt(mix2);
    std::vector<float> out(static_cast<std::size_t>(d));
    for (int c = 0; c < d; ++c) out[c] = static_cast<float>(mix[c] * inv);
    return out;
}

void install_plants(ModelBundle& model, const WorldConfig& world, double scale) {
    model.plants.clear();
    const std::uint64_t pseed = world.effective_plant_seed();
    for (std::size_t i = 0; i < world.planted_heads.size(); ++i) {
        const auto [layer, head] = world.planted_heads[i];
        PlantAnnotation p;
        p.layer = layer;
        p.head = head;
        p.target_language = world.target_language;
        const std::vector<float> dir = plant_direction(model, layer, head, pseed, i);
        p.offset.resize(dir.size());
        for (std::size_t c = 0; c < dir.size(); ++c)
            p.offset[c] = static_cast<float>(static_cast<double>(dir[c]) * scale);
        model.plants.push_back(std::move(p));
    }
    model.rebuild_plant_index();
}

}  // namespace

void WorldConfig::validate() const {
    model.validate();
    if (offset_scale <= 0.0f) throw InputError("world config: offset_scale must be > 0");
    if (object_signatures < 2) throw InputError("world config: need at least 2 object signatures");
    if (bbox_size < 1 || bbox_size > model.patches)
        throw InputError("world config: bbox_size out of range");
    if (noise_sigma < 0.0f) throw InputError("world config: noise_sigma must be >= 0");
    if (target_language == "en") throw InputError("world config: target language cannot be 'en'");
    const int range = (model.vocab - 2) / 2;
    if (range < object_signatures + 8)
        throw InputError("world config: vocabulary too small for the object and prompt tokens");
    std::vector<std::pair<int, int>> heads = planted_heads;
    std::sort(heads.begin(), heads.end());
    if (std::adjacent_find(heads.begin(), heads.end()) != heads.end())
        throw InputError("world config: planted heads must be distinct");
    for (const auto& [l, h] : heads)
        if (l < 0 || l >= model.layers || h < 0 || h >= model.heads)
            throw InputError("world config: planted head outside the grid");
    if (plant_policy == PlantPolicy::SingleLayer && !heads.empty()) {
        for (const auto& [l, h] : heads)
            if (l != heads.front().first)
                throw InputError("world config: single-layer policy requires one planted layer");
    }
}

std::uint64_t WorldConfig::effective_plant_seed() const {
    return plant_seed != 0 ? plant_seed : derive_seed(seed, "plants");
}

WorldDirections derive_directions(const WorldConfig& world) {
    WorldDirections dirs;
    const int dm = world.model.d_model();
    RngStream brng(derive_seed(world.seed, "beacon"));
    dirs.beacon = gaussian_unit_vector(brng, dm);
    dirs.signatures.reserve(static_cast<std::size_t>(world.object_signatures));
    for (int o = 0; o < world.object_signatures; ++o) {
        RngStream srng(derive_seed(world.seed, "signature", o));
        dirs.signatures.push_back(gaussian_unit_vector(srng, dm));
    }
    return dirs;
}

ModelBundle gen_model(const WorldConfig& world) {
    world.validate();
    const WorldDirections dirs = derive_directions(world);
    const Dataset calibration = gen_dataset(world, kCalibrationSamples, "calibration");
    const Dataset check = gen_dataset(world, kCheckSamples, "modelcheck");

    double best_acc = -1.0;
    for (int attempt = 0; attempt < kMaxAttempts; ++attempt) {
        ModelBundle model = build_weights(world, attempt);
        calibrate_readout(model, world, dirs, calibration.samples);
        const double acc_en = presence_accuracy(model, world, dirs, check.samples, "en");
        best_acc = std::max(best_acc, acc_en);
        if (acc_en < kEnglishAccuracyFloor) continue;
        model.world.english_reference_accuracy = acc_en;

        if (world.mode == WorldMode::Noisy && !world.planted_heads.empty()) {
            double scale = world.offset_scale;
            bool calibrated = false;
            for (int k = 0; k < kMaxAttempts; ++k) {
                install_plants(model, world, scale);
                const double acc_tgt =
                    presence_accuracy(model, world, dirs, check.samples, world.target_language);
                if (acc_en - acc_tgt >= kGapTarget) {
                    model.world.offset_scale = static_cast<float>(scale);
                    model.world.target_reference_accuracy = acc_tgt;
                    calibrated = true;
                    break;
                }
                scale *= 1.5;
            }
            if (!calibrated)
                throw GenerationError(
                    "gen_model: could not calibrate a 15-point language gap; "
                    "english accuracy " +
                    std::to_string(acc_en));
        } else {
            install_plants(model, world, world.offset_scale);
            if (!world.planted_heads.empty())
                model.world.target_reference_accuracy =
                    presence_accuracy(model, world, dirs, check.samples, world.target_language);
            else
                model.world.target_reference_accuracy = acc_en;
        }
        model.world.generation_attempt = attempt;
        return model;
    }
    throw GenerationError("gen_model: english accuracy floor not reached after " +
                          std::to_string(kMaxAttempts) +
                          " attempts; best accuracy " + std::to_string(best_acc));
}

Dataset gen_dataset(const WorldConfig& world, int b, const std::string& domain) {
    world.validate();
    if (b < 10 || b % 2 != 0) throw InputError("gen_dataset: B must be even and >= 10");
    const WorldDirections dirs = derive_directions(world);
    const VocabLayout vocab = make_vocab_layout(world);

    Dataset ds;
    ds.world = world;
    ds.samples.reserve(static_cast<std::size_t>(b));
    std::uint64_t phash = fnv1a(nullptr, 0);
    for (int i = 0; i < b; ++i) {
        Sample s;
        s.id = i;
        s.label_yes = (i % 2 == 0);
        RngStream rng(derive_seed(world.seed, domain + ":sample", static_cast<std::uint64_t>(i)));
        s.object_id = static_cast<int>(rng.next_uniform() * world.object_signatures);
        s.object_id = std::min(s.object_id, world.object_signatures - 1);
        // Partial Fisher-Yates for the bbox patch set, stored sorted.
        std::vector<int> idx(static_cast<std::size_t>(world.model.patches));
        std::iota(idx.begin(), idx.end(), 1);
        for (int j = 0; j < world.bbox_size; ++j) {
            const int pick =
                j + static_cast<int>(rng.next_uniform() * (world.model.patches - j));
            std::swap(idx[j], idx[std::min<int>(pick, world.model.patches - 1)]);
        }
        s.bbox.assign(idx.begin(), idx.begin() + world.bbox_size);
        std::sort(s.bbox.begin(), s.bbox.end());
        s.patch_seed = derive_seed(world.seed, domain + ":patches", static_cast<std::uint64_t>(i));
        s.query_en = vocab.presence_prefix_en;
        s.query_en.push_back(vocab.lang_base_en + s.object_id);
        s.query_tgt = translate(vocab, s.query_en);
        const Matrix patches = materialize_patches(world, dirs, s);
        phash = fnv1a(patches.data(), patches.size() * sizeof(float), phash);
        ds.samples.push_back(std::move(s));
    }
    ds.patches_hash = phash;
    return ds;
}

Matrix materialize_patches(const WorldConfig& world, const WorldDirections& dirs,
                           const Sample& sample) {
    const int n = world.model.patches;
    const int dm = world.model.d_model();
    Matrix patches(n, dm);
    RngStream rng(sample.patch_seed);
    fill_gaussian(patches, rng, kPatchNoise);

    // The image carries the queried object when the label is yes and a
    // distractor object otherwise; the beacon sign encodes presence.
    RngStream drng(derive_seed(sample.patch_seed, "distractor"));
    int present = sample.object_id;
    if (!sample.label_yes) {
        do {
            present = static_cast<int>(drng.next_uniform() * world.object_signatures);
            present = std::min(present, world.object_signatures - 1);
        } while (present == sample.object_id);
    }
    const float beacon_sign = sample.label_yes ? 1.0f : -1.0f;
    const std::vector<float>& sig = dirs.signatures[present];
    for (int p : sample.bbox) {
        float* row = patches.row(p - 1);
        for (int j = 0; j < dm; ++j)
            row[j] += kSignatureScale * sig[j] + beacon_sign * kBeaconScale * dirs.beacon[j];
    }
    return patches;
}

std::vector<int> translate(const VocabLayout& vocab, const std::vector<int>& en_tokens) {
    std::vector<int> out;
    out.reserve(en_tokens.size());
    for (int t : en_tokens) {
        if (t < vocab.lang_base_en || t >= vocab.lang_base_en + vocab.range_size)
            throw InputError("translate: token outside the English range");
        out.push_back(t + vocab.range_size);
    }
    return out;
}

std::vector<int> translate_inverse(const VocabLayout& vocab, const std::vector<int>& tgt_tokens) {
    std::vector<int> out;
    out.reserve(tgt_tokens.size());
    for (int t : tgt_tokens) {
        if (t < vocab.lang_base_tgt || t >= vocab.lang_base_tgt + vocab.range_size)
            throw InputError("translate_inverse: token outside the target range");
        out.push_back(t - vocab.range_size);
    }
    return out;
}

std::optional<std::vector<float>> planted_offset(const ModelBundle& model, int layer, int head,
                                                 const std::string& language) {
    const PlantAnnotation* p = model.plant_at(layer, head);
    if (!p) return std::nullopt;
    if (language == p->target_language) return p->offset;
    return std::vector<float>(p->offset.size(), 0.0f);
}

SequenceInput make_presence_input(const ModelBundle& model, const WorldConfig& world,
                                  const WorldDirections& dirs, const Sample& sample,
                                  const std::string& language) {
    SequenceInput in;
    in.patches = materialize_patches(world, dirs, sample);
    in.language = language;
    if (language == "en")
        in.text_tokens = sample.query_en;
    else if (language == world.target_language)
        in.text_tokens = sample.query_tgt;
    else
        throw InputError("unknown language for this world: " + language);
    return in;
}

SequenceInput make_caption_input(const ModelBundle& model, const WorldConfig& world,
                                 const WorldDirections& dirs, const Sample& sample,
                                 const std::string& language) {
    SequenceInput in;
    in.patches = materialize_patches(world, dirs, sample);
    in.language = language;
    if (language == "en")
        in.text_tokens = model.vocab.caption_prompt_en;
    else if (language == world.target_language)
        in.text_tokens = translate(model.vocab, model.vocab.caption_prompt_en);
    else
        throw InputError("unknown language for this world: " + language);
    return in;
}

bool predict_yes(const std::vector<float>& logits, const VocabLayout& vocab) {
    return logits[vocab.yes_token] >= logits[vocab.no_token];
}

WorldConfig world_from_model(const ModelBundle& model) {
    WorldConfig w;
    w.model = model.config;
    for (const auto& p : model.plants) w.planted_heads.emplace_back(p.layer, p.head);
    bool single = true;
    for (const auto& p : model.plants)
        if (p.layer != model.plants.front().layer) single = false;
    w.plant_policy = single ? PlantPolicy::SingleLayer : PlantPolicy::MultiLayer;
    w.offset_scale = model.world.offset_scale;
    w.mode = world_mode_from_string(model.world.mode);
    w.noise_sigma = model.world.noise_sigma;
    w.object_signatures = model.world.object_signatures;
    w.bbox_size = model.world.bbox_size;
    w.seed = model.config.seed;
    w.plant_seed = model.world.plant_seed;
    w.target_language = model.world.target_language;
    return w;
}

const char* to_string(WorldMode mode) {
    return mode == WorldMode::CleanPaired ? "clean-paired" : "noisy";
}

const char* to_string(PlantPolicy policy) {
    return policy == PlantPolicy::SingleLayer ? "single-layer" : "multi-layer";
}

WorldMode world_mode_from_string(const std::string& s) {
    if (s == "clean-paired") return WorldMode::CleanPaired;
    if (s == "noisy") return WorldMode::Noisy;
    throw InputError("unknown world mode: " + s);
}

PlantPolicy plant_policy_from_string(const std::string& s) {
    if (s == "single-layer") return PlantPolicy::SingleLayer;
    if (s == "multi-layer") return PlantPolicy::MultiLayer;
    throw InputError("unknown plant policy: " + s);
}

}  // namespace attnshift
