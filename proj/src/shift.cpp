#include "attnshift/shift.hpp"

#include <algorithm>
#include <map>

namespace attnshift {

namespace {

// Walks paired (en, tgt) records in ascending sample-id order and
// accumulates per-head differences of the standard last rows in double.
void accumulate_pairs(const TapSet& taps, const std::string& lang_tgt,
                      std::vector<double>& acc, std::int64_t& pairs) {
    std::map<std::int64_t, std::pair<const TapRecord*, const TapRecord*>> by_sample;
    for (const auto& rec : taps.records) {
        if (rec.language == "en")
            by_sample[rec.sample_id].first = &rec;
        else if (rec.language == lang_tgt)
            by_sample[rec.sample_id].second = &rec;
    }
    const std::size_t per_head = static_cast<std::size_t>(taps.layers) * taps.heads *
                                 static_cast<std::size_t>(taps.head_dim);
    if (acc.size() != per_head) acc.assign(per_head, 0.0);
    bool any = false;
    for (const auto& [id, pair] : by_sample) {
        if (!pair.first || !pair.second)
            throw InputError("shift estimation: unpaired sample " + std::to_string(id));
        any = true;
        const float* en = pair.first->o_last.data();
        const float* tg = pair.second->o_last.data();
        for (std::size_t j = 0; j < per_head; ++j)
            acc[j] += static_cast<double>(en[j]) - static_cast<double>(tg[j]);
        ++pairs;
    }
    if (!any) throw InputError("shift estimation: no paired samples for language " + lang_tgt);
}

ShiftSet finalize(const TapSet& grid, std::vector<double>& acc, std::int64_t pairs) {
    ShiftSet out;
    out.layers = grid.layers;
    out.heads = grid.heads;
    out.head_dim = grid.head_dim;
    out.samples_used = pairs;
    out.model_hash = grid.model_hash;
    out.vectors.resize(acc.size());
    const double inv = 1.0 / static_cast<double>(pairs);
    for (std::size_t j = 0; j < acc.size(); ++j)
        out.vectors[j] = static_cast<float>(acc[j] * inv);
    return out;
}

}  // namespace

std::span<const float> ShiftSet::at(int layer, int head) const {
    if (layer < 0 || layer >= layers || head < 0 || head >= heads)
        throw InputError("shift set: head outside the grid");
    const std::size_t off =
        (static_cast<std::size_t>(layer) * heads + head) * static_cast<std::size_t>(head_dim);
    return {vectors.data() + off, static_cast<std::size_t>(head_dim)};
}

ShiftSet estimate_specific(const TapSet& taps, const std::string& lang_tgt) {
    if (lang_tgt == "en") throw InputError("estimate_specific: target language cannot be 'en'");
    std::vector<double> acc;
    std::int64_t pairs = 0;
    accumulate_pairs(taps, lang_tgt, acc, pairs);
    ShiftSet out = finalize(taps, acc, pairs);
    out.mode = ShiftMode::Specific;
    out.languages = {"en", lang_tgt};
    return out;
}

ShiftSet estimate_multi(std::span<const TapSet> tapsets) {
    if (tapsets.empty()) throw InputError("estimate_multi: empty pool");
    const TapSet& first = tapsets.front();
    std::vector<double> acc;
    std::int64_t pairs = 0;
    std::vector<std::string> langs = {"en"};
    for (const TapSet& taps : tapsets) {
        if (taps.layers != first.layers || taps.heads != first.heads ||
            taps.head_dim != first.head_dim)
            throw InputError("estimate_multi: tap sets disagree on the head grid");
        for (const auto& lang : taps.languages) {
            if (lang == "en") continue;
            accumulate_pairs(taps, lang, acc, pairs);
            if (std::find(langs.begin(), langs.end(), lang) == langs.end()) langs.push_back(lang);
        }
    }
    if (pairs == 0) throw InputError("estimate_multi: empty pool");
    ShiftSet out = finalize(first, acc, pairs);
    // A single-target pool degenerates to the specific estimate.
    out.mode = langs.size() > 2 ? ShiftMode::Multi : ShiftMode::Specific;
    out.languages = std::move(langs);
    return out;
}

const char* to_string(ShiftMode mode) {
    return mode == ShiftMode::Specific ? "specific" : "multi";
}

ShiftMode shift_mode_from_string(const std::string& s) {
    if (s == "specific") return ShiftMode::Specific;
    if (s == "multi") return ShiftMode::Multi;
    throw InputError("unknown shift mode: " + s);
}

}  // namespace attnshift
