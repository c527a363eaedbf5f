#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "attnshift/numerics.hpp"

namespace attnshift {

struct ModelConfig {
    int layers = 8;       // L
    int heads = 8;        // H per layer
    int head_dim = 32;    // d
    int d_mlp = 512;
    int vocab = 512;      // V
    int patches = 64;     // n, visual prefix length
    int max_text = 16;    // m_max
    std::uint64_t seed = 0;

    int d_model() const { return heads * head_dim; }
    void validate() const;
};

// A head endowed with a language-conditional additive offset on its
// attention-output rows. The offset is active when the input language
// matches `target_language`, and is the ground truth the pipeline is
// meant to recover.
struct PlantAnnotation {
    int layer = 0;
    int head = 0;
    std::string target_language;
    std::vector<float> offset;  // length d
};

// Vocabulary layout: two disjoint per-language token ranges plus shared
// answer tokens, with a fixed caption prompt per language and a presence
// question prefix.
struct VocabLayout {
    int yes_token = 0;
    int no_token = 1;
    int lang_base_en = 2;
    int lang_base_tgt = 0;   // en + range_size
    int range_size = 0;
    std::vector<int> caption_prompt_en;
    std::vector<int> presence_prefix_en;
};

// Echo of the world that generated this model; carried in config.json so
// a model directory is self-contained for evaluation and recording.
struct WorldMeta {
    std::string mode = "clean-paired";  // clean-paired | noisy
    float noise_sigma = 0.0f;
    float offset_scale = 2.0f;          // calibrated value when mode=noisy
    std::string target_language = "tgt";
    int object_signatures = 12;
    int bbox_size = 8;
    std::uint64_t plant_seed = 0;
    double english_reference_accuracy = 0.0;
    double target_reference_accuracy = 0.0;
    int generation_attempt = 0;
};

struct LayerWeights {
    Matrix wq, wk, wv;        // d_model x d_model, column blocks per head
    Matrix wo;                // d_model x d_model, row blocks per head (W_h stacked)
    Matrix w_in;              // d_model x d_mlp
    Matrix w_out;             // d_mlp x d_model
    std::vector<float> rms1;  // pre-attention norm gains
    std::vector<float> rms2;  // pre-MLP norm gains
};

struct ModelBundle {
    ModelConfig config;
    Matrix embedding;  // vocab x d_model; unembedding is its transpose
    std::vector<LayerWeights> layers;
    std::vector<float> rms_final;
    std::vector<PlantAnnotation> plants;
    VocabLayout vocab;
    WorldMeta world;

    // (layer, head) -> index into plants, or -1.
    std::vector<int> plant_index;
    void rebuild_plant_index();
    const PlantAnnotation* plant_at(int layer, int head) const;
};

struct SequenceInput {
    Matrix patches;               // n x d_model
    std::vector<int> text_tokens;  // length m, 1 <= m <= max_text
    std::string language;
};

enum class ShiftRows { All, Last };

// Inference-time additive edit: for each hooked head, alpha * shift is
// added to the attention-output rows before the output projection.
struct InterventionHook {
    int layers = 0;
    int heads = 0;
    std::vector<std::vector<float>> shifts;  // layers*heads slots; empty slot = not hooked
    double alpha = 0.0;
    ShiftRows rows = ShiftRows::All;

    bool hooked(int layer, int head) const {
        return !shifts[static_cast<std::size_t>(layer) * heads + head].empty();
    }
    const std::vector<float>& shift(int layer, int head) const {
        return shifts[static_cast<std::size_t>(layer) * heads + head];
    }
};

struct ForwardTrace {
    int e = 0;  // n + m
    int n = 0;
    // hidden[l] has e x d_model; hidden[0] is the input embedding matrix,
    // hidden[l+1] the output of block l.
    std::vector<Matrix> hidden;
    // Post-attention residual state per block, before the MLP.
    std::vector<Matrix> hidden_post_attn;
    // Last-row records per (layer, head), flattened layer*H + head.
    Matrix attn_last;          // (L*H) x e, causal attention weights at row e
    Matrix masked_attn_last;   // (L*H) x e, text-masked recomputation
    Matrix o_last;             // (L*H) x d, standard output row (plant/hook included)
    Matrix ohat_last;          // (L*H) x d, masked output row (plant/hook included)
    std::vector<float> logits;  // length V

    bool operator==(const ForwardTrace& other) const = default;
};

// e x e matrix: 0 on and below the diagonal, masked above.
Matrix causal_mask(int e);

// Length-e row for the last position: visual columns live, text columns
// (j > n, 1-based) masked. Requires 1 <= n < e.
std::vector<float> masked_last_row_mask(int e, int n);

// One attention head over explicit Q, K, V and a mask; returns the
// weight matrix and the output rows.
std::pair<Matrix, Matrix> attention_head(const Matrix& q, const Matrix& k, const Matrix& v,
                                         const Matrix& mask);

ForwardTrace forward(const ModelBundle& model, const SequenceInput& input,
                     const InterventionHook* hook = nullptr);

struct TokenScore {
    int token = 0;
    float logit = 0.0f;
};

// Decodes an intermediate hidden state through the final norm and the
// tied unembedding. layer in [0, L], position in [1, e] (1-based).
std::vector<TokenScore> decode_logit_lens(const ModelBundle& model, const ForwardTrace& trace,
                                          int layer, int position, int top);

// RMS norm of a single row against gains; exposed for readout
// construction and the logit lens.
std::vector<float> rms_norm_row(std::span<const float> row, std::span<const float> gains);

}  // namespace attnshift
