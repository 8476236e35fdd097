#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <utility>

#include "medpo/core/image.hpp"
#include "medpo/core/types.hpp"
#include "medpo/tagger.hpp"

namespace medpo::perturb {

enum class PerturbKind { Gaussian, RoiGaussian, RandomCrop };

struct PerturbSpec {
    PerturbKind kind = PerturbKind::Gaussian;
    double sigma = 50.0;  // 0-255 intensity units
    double keep_lo = 0.2;  // retained-area fraction range for crops
    double keep_hi = 0.5;
    std::uint64_t seed = 0;
};

void validate(const PerturbSpec& spec);

/// Adds N(0, sigma^2) to every channel value, rounds and clamps to [0, 255].
/// Noise for element i depends only on (seed, i).
ImageBuffer gaussian_noise(const ImageBuffer& img, double sigma, std::uint64_t seed);

/// gaussian_noise restricted to the union of `boxes`; pixels outside are
/// bit-identical. Throws ContractError for boxes outside the image.
ImageBuffer roi_noise(const ImageBuffer& img, std::span<const RoiBox> boxes, double sigma, std::uint64_t seed);

/// Centered box covering half the image area, aspect ratio preserved.
RoiBox centered_half_area_box(int width, int height);

/// Rectangle picked by random_crop, exposed for reproducibility checks.
RoiBox crop_rect(int width, int height, double keep_lo, double keep_hi, std::uint64_t seed);

/// Aspect-preserving crop with retained area fraction in [keep_lo, keep_hi];
/// origin uniform over valid positions. No resizing.
ImageBuffer random_crop(const ImageBuffer& img, double keep_lo, double keep_hi, std::uint64_t seed);

ImageBuffer apply(const ImageBuffer& img, const PerturbSpec& spec, std::span<const RoiBox> boxes = {});

struct Substitution {
    std::string text;
    std::string replacement;  // canonical form of the inserted keyword
};

/// Replaces every word-boundary, case-insensitive occurrence of `keyword` with
/// one plausible but wrong alternative from the same category. Laterality and
/// zone terms use a fixed antonym; LAS terms fall back to a broad parent when
/// the lexicon has one. Casing of each occurrence is carried over.
/// Throws NotFoundError / ExhaustionError.
Substitution substitute_keyword(std::string_view text, std::string_view keyword, ErrorType category,
                                const tagger::KeywordLexicon& lexicon, std::uint64_t seed);

/// Fixed antonym for SLC terms that have one (left/right, upper/lower, ...).
std::optional<std::string> slc_antonym(std::string_view term);

}  // namespace medpo::perturb
