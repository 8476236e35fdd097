#include "medpo/core/types.hpp"

#include <cctype>
#include <cmath>

#include "medpo/core/error.hpp"

namespace medpo {

namespace {

std::string upper(std::string_view s) {
    std::string out(s);
    for (char& c : out) c = static_cast<char>(std::toupper(static_cast<unsigned char>(c)));
    return out;
}

}  // namespace

std::string_view to_string(ErrorType t) noexcept {
    switch (t) {
        case ErrorType::MM: return "MM";
        case ErrorType::SLC: return "SLC";
        case ErrorType::AM: return "AM";
        case ErrorType::LAS: return "LAS";
    }
    return "?";
}

ErrorType parse_error_type(std::string_view s) {
    const std::string u = upper(s);
    for (ErrorType t : kAllErrorTypes)
        if (u == to_string(t)) return t;
    throw ParseError("unknown error type '" + std::string(s) + "'");
}

std::string_view to_string(Method m) noexcept {
    switch (m) {
        case Method::TextHallu: return "text-hallu";
        case Method::TextHalluNll: return "text-hallu-nll";
        case Method::TextNoise: return "text-noise";
        case Method::TextNoiseNll: return "text-noise-nll";
        case Method::Irpo: return "irpo";
        case Method::ImageNoise: return "image-noise";
        case Method::ImageRoi: return "image-roi";
        case Method::Mdpo: return "mdpo";
        case Method::Mmedpo: return "mmedpo";
        case Method::TargetedDpo: return "targeted-dpo";
        case Method::TargetedCopo: return "targeted-copo";
        case Method::TargetedMdpo: return "targeted-mdpo";
    }
    return "?";
}

Method parse_method(std::string_view s) {
    for (Method m : kAllMethods)
        if (s == to_string(m)) return m;
    throw ParseError("unknown method '" + std::string(s) + "'");
}

Modality modality_of(Method m) noexcept {
    switch (m) {
        case Method::TextHallu:
        case Method::TextHalluNll:
        case Method::TextNoise:
        case Method::TextNoiseNll:
        case Method::Irpo:
        case Method::TargetedDpo: return Modality::Text;
        case Method::ImageNoise:
        case Method::ImageRoi:
        case Method::TargetedCopo: return Modality::Image;
        case Method::Mdpo:
        case Method::Mmedpo:
        case Method::TargetedMdpo: return Modality::Joint;
    }
    return Modality::Joint;
}

void validate_pair(const PreferencePair& p) {
    const std::string who = "pair '" + p.id + "': ";
    if (p.id.empty()) throw ValidationError("pair id is empty");
    if (p.chosen_text.empty()) throw ValidationError(who + "chosen_text is empty");
    if (p.chosen_image.empty()) throw ValidationError(who + "chosen_image is empty");
    if (!std::isfinite(p.weight) || p.weight < 0.0) throw ValidationError(who + "weight must be finite and >= 0");
    if (!p.meta.is_object()) throw ValidationError(who + "meta must be an object");
    if (!p.rejected_text && !p.rejected_image)
        throw ValidationError(who + "needs rejected_text or rejected_image");

    const Modality mod = modality_of(p.method);
    const std::string method(to_string(p.method));
    if (mod == Modality::Text && p.rejected_image)
        throw ValidationError(who + "text-only method " + method + " must not carry rejected_image");
    if (mod == Modality::Image && p.rejected_text)
        throw ValidationError(who + "image-only method " + method + " must not carry rejected_text");
    if (mod != Modality::Image && !p.rejected_text)
        throw ValidationError(who + method + " requires rejected_text");
    if (mod != Modality::Text && !p.rejected_image)
        throw ValidationError(who + method + " requires rejected_image");

    if (p.rejected_text && (p.rejected_text->empty() || *p.rejected_text == p.chosen_text))
        throw ValidationError(who + "rejected_text is empty or equals chosen_text");
    if (p.rejected_image && (p.rejected_image->empty() || *p.rejected_image == p.chosen_image))
        throw ValidationError(who + "rejected_image is empty or equals chosen_image");
}

void validate_sample(const Sample& s) {
    if (s.id.empty()) throw ValidationError("sample id is empty");
    const std::string who = "sample '" + s.id + "': ";
    if (s.image.empty()) throw ValidationError(who + "image path is empty");
    if (!std::isfinite(s.weight) || s.weight < 0.0) throw ValidationError(who + "weight must be finite and >= 0");
    if (s.roi) {
        for (const RoiBox& b : *s.roi)
            if (b.x < 0 || b.y < 0 || b.w <= 0 || b.h <= 0)
                throw ValidationError(who + "roi box must have x, y >= 0 and w, h > 0");
    }
    if (s.tags) {
        for (const auto& [type, words] : *s.tags)
            for (const std::string& w : words)
                if (w.empty()) throw ValidationError(who + "empty tag keyword");
    }
}

std::string_view to_string(Verdict v) noexcept {
    switch (v) {
        case Verdict::Entailment: return "entailment";
        case Verdict::Partial: return "partial";
        case Verdict::Neutral: return "neutral";
        case Verdict::Contradiction: return "contradiction";
    }
    return "?";
}

Verdict parse_verdict(std::string_view s) {
    for (Verdict v : {Verdict::Entailment, Verdict::Partial, Verdict::Neutral, Verdict::Contradiction})
        if (s == to_string(v)) return v;
    throw ProtocolError("invalid verdict '" + std::string(s) + "'");
}

double verdict_score(Verdict v) noexcept {
    switch (v) {
        case Verdict::Entailment: return 1.0;
        case Verdict::Partial: return 0.5;
        case Verdict::Neutral: return 0.0;
        case Verdict::Contradiction: return -1.0;
    }
    return 0.0;
}

}  // namespace medpo
