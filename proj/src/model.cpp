#include "attnshift/model.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

namespace attnshift {

namespace {

constexpr double kRmsEps = 1e-5;

inline double gelu(double x) {
    return 0.5 * x * (1.0 + std::erf(x * 0.7071067811865476));
}

void rms_norm_into(const Matrix& x, std::span<const float> gains, Matrix& out) {
    const int cols = x.cols();
    for (int i = 0; i < x.rows(); ++i) {
        const float* src = x.row(i);
        float* dst = out.row(i);
        double ss = 0.0;
        for (int j = 0; j < cols; ++j) ss += static_cast<double>(src[j]) * src[j];
        const double inv = 1.0 / std::sqrt(ss / cols + kRmsEps);
        for (int j = 0; j < cols; ++j)
            dst[j] = static_cast<float>(static_cast<double>(src[j]) * inv * gains[j]);
    }
}

}  // namespace

void ModelConfig::validate() const {
    if (layers < 1 || heads < 1 || head_dim < 1 || patches < 1)
        throw InputError("model config: layers, heads, head_dim, patches must be >= 1");
    if (d_mlp < 1 || vocab < 4 || max_text < 1)
        throw InputError("model config: d_mlp, vocab, max_text out of range");
}

void ModelBundle::rebuild_plant_index() {
    plant_index.assign(static_cast<std::size_t>(config.layers) * config.heads, -1);
    for (std::size_t i = 0; i < plants.size(); ++i) {
        const auto& p = plants[i];
        if (p.layer < 0 || p.layer >= config.layers || p.head < 0 || p.head >= config.heads)
            throw InputError("plant annotation outside the head grid");
        plant_index[static_cast<std::size_t>(p.layer) * config.heads + p.head] = static_cast<int>(i);
    }
}

const PlantAnnotation* ModelBundle::plant_at(int layer, int head) const {
    const int idx = plant_index[static_cast<std::size_t>(layer) * config.heads + head];
    return idx < 0 ? nullptr : &plants[idx];
}

Matrix causal_mask(int e) {
    if (e < 1) throw ShapeError("causal_mask: e must be >= 1");
    Matrix m(e, e);
    for (int i = 0; i < e; ++i)
        for (int j = i + 1; j < e; ++j) m(i, j) = kMaskNegInf;
    return m;
}

std::vector<float> masked_last_row_mask(int e, int n) {
    if (n < 1 || n >= e) throw ShapeError("masked_last_row_mask: requires 1 <= n < e");
    std::vector<float> row(static_cast<std::size_t>(e), 0.0f);
    for (int j = n; j < e; ++j) row[j] = kMaskNegInf;
    return row;
}

std::pair<Matrix, Matrix> attention_head(const Matrix& q, const Matrix& k, const Matrix& v,
                                         const Matrix& mask) {
    const int e = q.rows();
    const int d = q.cols();
    if (k.rows() != e || k.cols() != d || v.rows() != e || v.cols() != d)
        throw ShapeError("attention_head: Q, K, V must share e x d");
    if (mask.rows() != e || mask.cols() != e)
        throw ShapeError("attention_head: mask must be e x e");

    const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(d));
    Matrix weights(e, e);
    Matrix output(e, d);
    std::vector<float> scores(static_cast<std::size_t>(e));
    std::vector<double> acc(static_cast<std::size_t>(d));
    for (int i = 0; i < e; ++i) {
        const float* qi = q.row(i);
        const float* mrow = mask.row(i);
        for (int j = 0; j < e; ++j) {
            if (mrow[j] <= kMaskNegInf) {
                scores[j] = kMaskNegInf;
                continue;
            }
            const float* kj = k.row(j);
            double dot = 0.0;
            for (int c = 0; c < d; ++c) dot += static_cast<double>(qi[c]) * kj[c];
            scores[j] = static_cast<float>(dot * inv_sqrt_d + mrow[j]);
        }
        softmax_row_into(scores, weights.row(i));
        std::memset(acc.data(), 0, acc.size() * sizeof(double));
        const float* wrow = weights.row(i);
        for (int j = 0; j < e; ++j) {
            const double w = wrow[j];
            if (w == 0.0) continue;
            const float* vj = v.row(j);
            for (int c = 0; c < d; ++c) acc[c] += w * static_cast<double>(vj[c]);
        }
        float* orow = output.row(i);
        for (int c = 0; c < d; ++c) orow[c] = static_cast<float>(acc[c]);
    }
    return {std::move(weights), std::move(output)};
}

ForwardTrace forward(const ModelBundle& model, const SequenceInput& input,
                     const InterventionHook* hook) {
    const ModelConfig& cfg = model.config;
    const int n = cfg.patches;
    const int m = static_cast<int>(input.text_tokens.size());
    const int dm = cfg.d_model();
    const int d = cfg.head_dim;
    const int H = cfg.heads;
    if (input.patches.rows() != n || input.patches.cols() != dm)
        throw InputError("forward: patch matrix does not match the model config");
    if (m < 1 || m > cfg.max_text) throw InputError("forward: text length out of range");
    for (int t : input.text_tokens)
        if (t < 0 || t >= cfg.vocab) throw InputError("forward: token id out of range");
    if (hook && (hook->layers != cfg.layers || hook->heads != H))
        throw PlanError("forward: hook grid does not match the model");

    const int e = n + m;
    ForwardTrace trace;
    trace.e = e;
    trace.n = n;
    trace.hidden.reserve(cfg.layers + 1);
    trace.hidden_post_attn.reserve(cfg.layers);
    trace.attn_last = Matrix(cfg.layers * H, e);
    trace.masked_attn_last = Matrix(cfg.layers * H, e);
    trace.o_last = Matrix(cfg.layers * H, d);
    trace.ohat_last = Matrix(cfg.layers * H, d);

    Matrix x(e, dm);
    for (int i = 0; i < n; ++i) std::memcpy(x.row(i), input.patches.row(i), sizeof(float) * dm);
    for (int i = 0; i < m; ++i)
        std::memcpy(x.row(n + i), model.embedding.row(input.text_tokens[i]), sizeof(float) * dm);
    trace.hidden.push_back(x);

    const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(d));
    Matrix xn(e, dm), q(e, dm), k(e, dm), v(e, dm), o(e, dm), mlp_h(e, cfg.d_mlp), mlp_o(e, dm);
    std::vector<float> scores(static_cast<std::size_t>(e));
    std::vector<float> probs(static_cast<std::size_t>(e));
    std::vector<double> acc(static_cast<std::size_t>(d));

    for (int l = 0; l < cfg.layers; ++l) {
        const LayerWeights& lw = model.layers[l];
        rms_norm_into(x, lw.rms1, xn);
        matmul_into(q, xn, lw.wq);
        matmul_into(k, xn, lw.wk);
        matmul_into(v, xn, lw.wv);

        for (int h = 0; h < H; ++h) {
            const int off = h * d;
            const int slot = l * H + h;
            // Causal rows, streamed: softmax over j <= i, then the value mix.
            for (int i = 0; i < e; ++i) {
                const float* qi = q.row(i) + off;
                for (int j = 0; j <= i; ++j) {
                    const float* kj = k.row(j) + off;
                    double dot = 0.0;
                    for (int c = 0; c < d; ++c) dot += static_cast<double>(qi[c]) * kj[c];
                    scores[j] = static_cast<float>(dot * inv_sqrt_d);
                }
                for (int j = i + 1; j < e; ++j) scores[j] = kMaskNegInf;
                softmax_row_into(scores, probs.data());
                std::memset(acc.data(), 0, acc.size() * sizeof(double));
                for (int j = 0; j <= i; ++j) {
                    const double w = probs[j];
                    if (w == 0.0) continue;
                    const float* vj = v.row(j) + off;
                    for (int c = 0; c < d; ++c) acc[c] += w * static_cast<double>(vj[c]);
                }
                float* orow = o.row(i) + off;
                for (int c = 0; c < d; ++c) orow[c] = static_cast<float>(acc[c]);
                if (i == e - 1) {
                    std::memcpy(trace.attn_last.row(slot), probs.data(), sizeof(float) * e);
                    // Masked recomputation of the same row: text columns out.
                    for (int j = n; j < e; ++j) scores[j] = kMaskNegInf;
                    softmax_row_into(scores, probs.data());
                    std::memcpy(trace.masked_attn_last.row(slot), probs.data(), sizeof(float) * e);
                    std::memset(acc.data(), 0, acc.size() * sizeof(double));
                    for (int j = 0; j < n; ++j) {
                        const double w = probs[j];
                        if (w == 0.0) continue;
                        const float* vj = v.row(j) + off;
                        for (int c = 0; c < d; ++c) acc[c] += w * static_cast<double>(vj[c]);
                    }
                    float* ohat = trace.ohat_last.row(slot);
                    for (int c = 0; c < d; ++c) ohat[c] = static_cast<float>(acc[c]);
                }
            }

            // Additive edits on this head's output rows. The planted offset
            // models the language-conditional divergence; the hook is the
            // inference-time correction. Both also land on the recorded
            // masked row, which is a re-derivation of the last output row.
            const PlantAnnotation* plant = model.plant_at(l, h);
            const bool plant_active = plant && plant->target_language == input.language;
            const std::vector<float>* hook_shift = nullptr;
            if (hook && hook->hooked(l, h)) hook_shift = &hook->shift(l, h);

            if (plant_active) {
                const float* b = plant->offset.data();
                for (int i = 0; i < e; ++i) {
                    float* orow = o.row(i) + off;
                    for (int c = 0; c < d; ++c) orow[c] += b[c];
                }
            }
            if (hook_shift) {
                const float* s = hook_shift->data();
                const double a = hook->alpha;
                const int first = (hook->rows == ShiftRows::All) ? 0 : e - 1;
                for (int i = first; i < e; ++i) {
                    float* orow = o.row(i) + off;
                    for (int c = 0; c < d; ++c)
                        orow[c] = static_cast<float>(orow[c] + a * s[c]);
                }
            }
            std::memcpy(trace.o_last.row(slot), o.row(e - 1) + off, sizeof(float) * d);
            if (plant_active || hook_shift) {
                float* ohat = trace.ohat_last.row(slot);
                if (plant_active) {
                    const float* b = plant->offset.data();
                    for (int c = 0; c < d; ++c) ohat[c] += b[c];
                }
                if (hook_shift) {
                    const float* s = hook_shift->data();
                    for (int c = 0; c < d; ++c)
                        ohat[c] = static_cast<float>(ohat[c] + hook->alpha * s[c]);
                }
            }
        }

        matmul_into(mlp_o, o, lw.wo);  // reuse mlp_o as the projection buffer
        for (int i = 0; i < e; ++i) {
            float* xrow = x.row(i);
            const float* prow = mlp_o.row(i);
            for (int j = 0; j < dm; ++j) xrow[j] += prow[j];
        }
        trace.hidden_post_attn.push_back(x);

        rms_norm_into(x, lw.rms2, xn);
        matmul_into(mlp_h, xn, lw.w_in);
        for (int i = 0; i < e; ++i) {
            float* hrow = mlp_h.row(i);
            for (int j = 0; j < cfg.d_mlp; ++j)
                hrow[j] = static_cast<float>(gelu(static_cast<double>(hrow[j])));
        }
        matmul_into(mlp_o, mlp_h, lw.w_out);
        for (int i = 0; i < e; ++i) {
            float* xrow = x.row(i);
            const float* prow = mlp_o.row(i);
            for (int j = 0; j < dm; ++j) xrow[j] += prow[j];
        }
        trace.hidden.push_back(x);
    }

    const std::vector<float> xf = rms_norm_row(x.row_span(e - 1), model.rms_final);
    trace.logits.resize(static_cast<std::size_t>(cfg.vocab));
    for (int t = 0; t < cfg.vocab; ++t) {
        const float* erow = model.embedding.row(t);
        double dot = 0.0;
        for (int j = 0; j < dm; ++j) dot += static_cast<double>(xf[j]) * erow[j];
        trace.logits[t] = static_cast<float>(dot);
    }
    return trace;
}

std::vector<float> rms_norm_row(std::span<const float> row, std::span<const float> gains) {
    std::vector<float> out(row.size());
    double ss = 0.0;
    for (float v : row) ss += static_cast<double>(v) * v;
    const double inv = 1.0 / std::sqrt(ss / static_cast<double>(row.size()) + kRmsEps);
    for (std::size_t j = 0; j < row.size(); ++j)
        out[j] = static_cast<float>(static_cast<double>(row[j]) * inv * gains[j]);
    return out;
}

std::vector<TokenScore> decode_logit_lens(const ModelBundle& model, const ForwardTrace& trace,
                                          int layer, int position, int top) {
    if (layer < 0 || layer >= static_cast<int>(trace.hidden.size()))
        throw InputError("decode_logit_lens: layer out of range");
    if (position < 1 || position > trace.e)
        throw InputError("decode_logit_lens: position out of range");
    if (top < 1) throw InputError("decode_logit_lens: top must be >= 1");
    const Matrix& hs = trace.hidden[layer];
    const std::vector<float> xf = rms_norm_row(hs.row_span(position - 1), model.rms_final);
    const int dm = model.config.d_model();
    std::vector<TokenScore> all(static_cast<std::size_t>(model.config.vocab));
    for (int t = 0; t < model.config.vocab; ++t) {
        const float* erow = model.embedding.row(t);
        double dot = 0.0;
        for (int j = 0; j < dm; ++j) dot += static_cast<double>(xf[j]) * erow[j];
        all[t] = {t, static_cast<float>(dot)};
    }
    const int kk = std::min<int>(top, model.config.vocab);
    std::partial_sort(all.begin(), all.begin() + kk, all.end(),
                      [](const TokenScore& a, const TokenScore& b) {
                          if (a.logit != b.logit) return a.logit > b.logit;
                          return a.token < b.token;
                      });
    all.resize(static_cast<std::size_t>(kk));
    return all;
}

}  // namespace attnshift
