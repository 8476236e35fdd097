#include "medpo/perturb.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "medpo/core/error.hpp"
#include "medpo/core/rng.hpp"

namespace medpo::perturb {

namespace {

constexpr std::uint64_t kNoiseStream = 0x6e6f697365ULL;  // "noise"
constexpr std::uint64_t kCropStream = 0x63726f70ULL;     // "crop"
constexpr std::uint64_t kSubstStream = 0x7375627374ULL;  // "subst"

std::uint8_t noisy_value(std::uint8_t v, double sigma, std::uint64_t key, std::size_t index) {
    const double shifted = static_cast<double>(v) + sigma * counter_normal(key, index);
    const double rounded = std::nearbyint(shifted);
    return static_cast<std::uint8_t>(std::clamp(rounded, 0.0, 255.0));
}

void check_sigma(double sigma) {
    if (!(sigma >= 0.0) || !std::isfinite(sigma)) throw ContractError("sigma must be finite and >= 0");
}

void check_box(const ImageBuffer& img, const RoiBox& b) {
    if (b.w <= 0 || b.h <= 0 || b.x < 0 || b.y < 0 || b.x + b.w > img.width || b.y + b.h > img.height)
        throw ContractError("ROI box (" + std::to_string(b.x) + ", " + std::to_string(b.y) + ", " +
                            std::to_string(b.w) + ", " + std::to_string(b.h) + ") lies outside the " +
                            std::to_string(img.width) + "x" + std::to_string(img.height) + " image");
}

std::string lower(std::string_view s) {
    std::string out(s);
    for (char& c : out) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
    return out;
}

}  // namespace

void validate(const PerturbSpec& spec) {
    check_sigma(spec.sigma);
    if (!(spec.keep_lo > 0.0 && spec.keep_lo <= spec.keep_hi && spec.keep_hi <= 1.0))
        throw ContractError("crop keep range must satisfy 0 < lo <= hi <= 1");
}

ImageBuffer gaussian_noise(const ImageBuffer& img, double sigma, std::uint64_t seed) {
    validate_image(img);
    check_sigma(sigma);
    ImageBuffer out = img;
    if (sigma == 0.0) return out;
    const std::uint64_t key = mix_seed(seed, kNoiseStream);
    for (std::size_t i = 0; i < out.pixels.size(); ++i) out.pixels[i] = noisy_value(img.pixels[i], sigma, key, i);
    return out;
}

ImageBuffer roi_noise(const ImageBuffer& img, std::span<const RoiBox> boxes, double sigma, std::uint64_t seed) {
    validate_image(img);
    check_sigma(sigma);
    for (const RoiBox& b : boxes) check_box(img, b);
    ImageBuffer out = img;
    if (sigma == 0.0 || boxes.empty()) return out;

    std::vector<bool> inside(static_cast<std::size_t>(img.width) * img.height, false);
    for (const RoiBox& b : boxes)
        for (int y = b.y; y < b.y + b.h; ++y)
            for (int x = b.x; x < b.x + b.w; ++x) inside[static_cast<std::size_t>(y) * img.width + x] = true;

    const std::uint64_t key = mix_seed(seed, kNoiseStream);
    for (std::size_t p = 0; p < inside.size(); ++p) {
        if (!inside[p]) continue;
        for (int c = 0; c < img.channels; ++c) {
            const std::size_t i = p * img.channels + c;
            out.pixels[i] = noisy_value(img.pixels[i], sigma, key, i);
        }
    }
    return out;
}

RoiBox centered_half_area_box(int width, int height) {
    if (width <= 0 || height <= 0) throw ContractError("image dimensions must be positive");
    const double s = std::sqrt(0.5);
    const int w = std::clamp(static_cast<int>(std::lround(width * s)), 1, width);
    const int h = std::clamp(static_cast<int>(std::lround(height * s)), 1, height);
    return {(width - w) / 2, (height - h) / 2, w, h};
}

RoiBox crop_rect(int width, int height, double keep_lo, double keep_hi, std::uint64_t seed) {
    if (width <= 0 || height <= 0) throw ContractError("image dimensions must be positive");
    if (!(keep_lo > 0.0 && keep_lo <= keep_hi && keep_hi <= 1.0))
        throw ContractError("crop keep range must satisfy 0 < lo <= hi <= 1");
    Rng rng(mix_seed(seed, kCropStream));
    const double target = keep_lo == keep_hi ? keep_lo : rng.uniform(keep_lo, keep_hi);
    const double total = static_cast<double>(width) * height;

    // Integer sizes cannot hit the target exactly; take the aspect-preserving
    // size whose area fraction is closest to it while staying in range.
    int best_w = 0, best_h = 0;
    double best_gap = std::numeric_limits<double>::infinity();
    for (int w = 1; w <= width; ++w) {
        const int h = static_cast<int>(std::lround(static_cast<double>(w) * height / width));
        if (h < 1 || h > height) continue;
        const double frac = w * static_cast<double>(h) / total;
        if (frac < keep_lo || frac > keep_hi) continue;
        const double gap = std::abs(frac - target);
        if (gap < best_gap) {
            best_gap = gap;
            best_w = w;
            best_h = h;
        }
    }
    if (best_w == 0)
        throw ContractError("no crop of a " + std::to_string(width) + "x" + std::to_string(height) +
                            " image keeps an area fraction in the requested range (crop smaller than 1x1)");
    const int x = static_cast<int>(rng.below(static_cast<std::uint64_t>(width - best_w + 1)));
    const int y = static_cast<int>(rng.below(static_cast<std::uint64_t>(height - best_h + 1)));
    return {x, y, best_w, best_h};
}

ImageBuffer random_crop(const ImageBuffer& img, double keep_lo, double keep_hi, std::uint64_t seed) {
    validate_image(img);
    const RoiBox r = crop_rect(img.width, img.height, keep_lo, keep_hi, seed);
    ImageBuffer out(r.w, r.h, img.channels);
    const std::size_t row_bytes = static_cast<std::size_t>(r.w) * img.channels;
    for (int y = 0; y < r.h; ++y) {
        const auto* src = img.pixels.data() + img.index(r.x, r.y + y);
        std::copy(src, src + row_bytes, out.pixels.data() + static_cast<std::size_t>(y) * row_bytes);
    }
    return out;
}

ImageBuffer apply(const ImageBuffer& img, const PerturbSpec& spec, std::span<const RoiBox> boxes) {
    validate(spec);
    switch (spec.kind) {
        case PerturbKind::Gaussian: return gaussian_noise(img, spec.sigma, spec.seed);
        case PerturbKind::RoiGaussian: return roi_noise(img, boxes, spec.sigma, spec.seed);
        case PerturbKind::RandomCrop: return random_crop(img, spec.keep_lo, spec.keep_hi, spec.seed);
    }
    throw ContractError("unknown perturbation kind");
}

std::optional<std::string> slc_antonym(std::string_view term) {
    static const std::pair<const char*, const char*> pairs[] = {
        {"left", "right"},         {"left-sided", "right-sided"}, {"upper", "lower"},
        {"superior", "inferior"},  {"anterior", "posterior"},     {"medial", "lateral"},
        {"apical", "basal"},       {"upper lobe", "lower lobe"},  {"rul", "lul"},
        {"rll", "lll"},
    };
    const std::string t = lower(term);
    for (const auto& [a, b] : pairs) {
        if (t == a) return std::string(b);
        if (t == b) return std::string(a);
    }
    return std::nullopt;
}

Substitution substitute_keyword(std::string_view text, std::string_view keyword, ErrorType category,
                                const tagger::KeywordLexicon& lexicon, std::uint64_t seed) {
    const std::string key = lower(keyword);
    if (key.empty()) throw ContractError("keyword is empty");

    tagger::LexiconEntry probe;
    probe.canonical = key;
    probe.surface = key;
    const std::vector<tagger::LexiconEntry> probe_list{probe};
    const std::vector<tagger::Match> hits = tagger::find_matches(text, probe_list, true);
    if (hits.empty()) throw NotFoundError("keyword '" + std::string(keyword) + "' not found in text");

    const auto& entries = lexicon.entries(category);
    if (entries.size() < 2)
        throw ExhaustionError("lexicon category " + std::string(to_string(category)) + " has fewer than 2 entries");
    const tagger::LexiconEntry* source = lexicon.find(category, key);

    const tagger::LexiconEntry* chosen = nullptr;
    if (category == ErrorType::SLC) {
        if (auto ant = slc_antonym(key)) chosen = lexicon.find(category, *ant);
    }
    if (!chosen) {
        const bool to_parent = category == ErrorType::LAS && source && !source->parent_only &&
                               std::any_of(entries.begin(), entries.end(), [](const auto& e) { return e.parent_only; });
        std::vector<const tagger::LexiconEntry*> pool;
        for (const auto& e : entries) {
            if (e.canonical == key) continue;
            if (source && !source->group.empty() && e.group == source->group) continue;
            if (e.parent_only != to_parent) continue;
            pool.push_back(&e);
        }
        if (pool.empty())
            throw ExhaustionError("no alternative for '" + std::string(keyword) + "' in " +
                                  std::string(to_string(category)));
        std::sort(pool.begin(), pool.end(), [](auto* a, auto* b) { return a->canonical < b->canonical; });
        Rng rng(mix_seed(seed, kSubstStream ^ fnv1a(key)));
        chosen = pool[rng.below(pool.size())];
    }

    std::string out(text);
    for (auto it = hits.rbegin(); it != hits.rend(); ++it) {
        const std::string_view matched = text.substr(it->start, it->end - it->start);
        std::string replacement;
        if (chosen->case_sensitive) {
            replacement = chosen->surface;
        } else {
            tagger::CaseStyle style = tagger::detect_case(matched);
            // An abbreviation's capitals are part of its spelling, not sentence casing.
            if ((source && source->case_sensitive) || style == tagger::CaseStyle::Mixed) style = tagger::CaseStyle::Lower;
            replacement = tagger::apply_case(chosen->canonical, style);
        }
        out.replace(it->start, it->end - it->start, replacement);
    }
    return {std::move(out), chosen->canonical};
}

}  // namespace medpo::perturb
