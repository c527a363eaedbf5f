#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "attnshift/probes.hpp"

namespace attnshift {

enum class ShiftMode { Specific, Multi };

// Per-head language shift vectors: the mean difference between English
// and target-language standard last-row attention outputs, estimated
// over paired samples. Masked rows are never consulted here.
struct ShiftSet {
    ShiftMode mode = ShiftMode::Specific;
    std::vector<std::string> languages;  // {en, tgt} or {en, tgt1, tgt2, ...}
    std::int64_t samples_used = 0;
    int layers = 0;
    int heads = 0;
    int head_dim = 0;
    std::vector<float> vectors;  // layers*heads*d, (layer, head) ascending
    std::uint64_t model_hash = 0;
    std::uint64_t taps_hash = 0;

    std::span<const float> at(int layer, int head) const;
};

ShiftSet estimate_specific(const TapSet& taps, const std::string& lang_tgt);

// Pooled mean over every (sample, target) pair across several tap sets
// that share the English side.
ShiftSet estimate_multi(std::span<const TapSet> tapsets);

const char* to_string(ShiftMode mode);
ShiftMode shift_mode_from_string(const std::string& s);

}  // namespace attnshift
