#pragma once

#include <array>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

namespace medpo {

/// The four visual-error categories, in canonical order.
enum class ErrorType { MM, SLC, AM, LAS };

inline constexpr std::array<ErrorType, 4> kAllErrorTypes{ErrorType::MM, ErrorType::SLC, ErrorType::AM,
                                                         ErrorType::LAS};

std::string_view to_string(ErrorType t) noexcept;
/// Accepts "MM", "SLC", "AM", "LAS" (case-insensitive). Throws ParseError otherwise.
ErrorType parse_error_type(std::string_view s);

using TagMap = std::map<ErrorType, std::set<std::string>>;

/// Pixel rectangle; (x, y) is the top-left corner.
struct RoiBox {
    int x = 0;
    int y = 0;
    int w = 0;
    int h = 0;

    bool operator==(const RoiBox&) const = default;
};

struct Sample {
    std::string id;
    std::string image;  // path as written in the dataset file
    std::string prompt;
    std::string response;
    std::optional<std::vector<RoiBox>> roi;
    std::optional<TagMap> tags;
    double weight = 1.0;

    bool operator==(const Sample&) const = default;
};

/// Curation strategy that produced a preference pair.
enum class Method {
    TextHallu,
    TextHalluNll,
    TextNoise,
    TextNoiseNll,
    Irpo,
    ImageNoise,
    ImageRoi,
    Mdpo,
    Mmedpo,
    TargetedDpo,
    TargetedCopo,
    TargetedMdpo,
};

inline constexpr std::array<Method, 12> kAllMethods{
    Method::TextHallu,  Method::TextHalluNll, Method::TextNoise, Method::TextNoiseNll,
    Method::Irpo,       Method::ImageNoise,   Method::ImageRoi,  Method::Mdpo,
    Method::Mmedpo,     Method::TargetedDpo,  Method::TargetedCopo, Method::TargetedMdpo,
};

enum class Modality { Text, Image, Joint };

std::string_view to_string(Method m) noexcept;
Method parse_method(std::string_view s);
/// Which rejected fields a method contrasts.
Modality modality_of(Method m) noexcept;

struct PreferencePair {
    std::string id;
    Method method = Method::TextHallu;
    std::string prompt;
    std::string chosen_text;
    std::optional<std::string> rejected_text;
    std::string chosen_image;
    std::optional<std::string> rejected_image;
    double weight = 1.0;
    nlohmann::json meta = nlohmann::json::object();

    bool operator==(const PreferencePair&) const = default;
};

/// Throws ValidationError if the pair violates its method's invariants.
void validate_pair(const PreferencePair& p);
/// Throws ValidationError on any Sample invariant other than image bounds.
void validate_sample(const Sample& s);

/// NLI outcome of a model output against one reference statement.
enum class Verdict { Entailment, Partial, Neutral, Contradiction };

std::string_view to_string(Verdict v) noexcept;
/// Strict: only the four lowercase names. Throws ProtocolError otherwise.
Verdict parse_verdict(std::string_view s);
/// 1, 0.5, 0, -1.
double verdict_score(Verdict v) noexcept;

}  // namespace medpo
