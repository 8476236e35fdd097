#include "medpo/losses.hpp"

#include <cmath>
#include <string>

#include "medpo/core/error.hpp"

namespace medpo::losses {

namespace {

constexpr Field kAllFields[] = {Field::PolWMw, Field::RefWMw, Field::PolLMl, Field::RefLMl,
                                Field::PolLMw, Field::RefLMw, Field::PolWMl, Field::RefWMl};

double need(const LogProbSet& lp, Field f) {
    const auto& v = lp.get(f);
    if (!v) throw ContractError("missing log-prob field " + std::string(field_name(f)));
    return *v;
}

struct Contrast {
    Field pol_hi, ref_hi, pol_lo, ref_lo;
};

Contrast text_contrast(RejectedOn on) {
    if (on == RejectedOn::RejectedImage) return {Field::PolWMw, Field::RefWMw, Field::PolLMl, Field::RefLMl};
    return {Field::PolWMw, Field::RefWMw, Field::PolLMw, Field::RefLMw};
}

constexpr Contrast kImageContrast{Field::PolWMw, Field::RefWMw, Field::PolWMl, Field::RefWMl};

double contrast_margin(const LogProbSet& lp, const Contrast& c, double scale) {
    const double hi = need(lp, c.pol_hi) - need(lp, c.ref_hi);
    const double lo = need(lp, c.pol_lo) - need(lp, c.ref_lo);
    return scale * (hi - lo);
}

// softplus(-m), with d/d pol_hi = -scale * sigmoid(-m) and the opposite sign on pol_lo.
LossValue contrast_loss(const LogProbSet& lp, const Contrast& c, double scale) {
    validate(lp);
    const double m = contrast_margin(lp, c, scale);
    const double g = scale * sigmoid(-m);
    LossValue out;
    out.value = softplus(-m);
    out.grads[c.pol_hi] = -g;
    out.grads[c.pol_lo] = g;
    return out;
}

RejectedOn mdpo_rejected(const LossConfig& cfg) {
    return cfg.mdpo_rejected_on_perturbed ? RejectedOn::RejectedImage : RejectedOn::ChosenImage;
}

}  // namespace

std::string_view field_name(Field f) noexcept {
    switch (f) {
        case Field::PolWMw: return "pol_w_mw";
        case Field::RefWMw: return "ref_w_mw";
        case Field::PolLMl: return "pol_l_ml";
        case Field::RefLMl: return "ref_l_ml";
        case Field::PolLMw: return "pol_l_mw";
        case Field::RefLMw: return "ref_l_mw";
        case Field::PolWMl: return "pol_w_ml";
        case Field::RefWMl: return "ref_w_ml";
    }
    return "?";
}

std::optional<double>& LogProbSet::get(Field f) noexcept {
    return const_cast<std::optional<double>&>(std::as_const(*this).get(f));
}

const std::optional<double>& LogProbSet::get(Field f) const noexcept {
    switch (f) {
        case Field::PolWMw: return pol_w_mw;
        case Field::RefWMw: return ref_w_mw;
        case Field::PolLMl: return pol_l_ml;
        case Field::RefLMl: return ref_l_ml;
        case Field::PolLMw: return pol_l_mw;
        case Field::RefLMw: return ref_l_mw;
        case Field::PolWMl: return pol_w_ml;
        case Field::RefWMl: return ref_w_ml;
    }
    return pol_w_mw;
}

void validate(const LogProbSet& lp) {
    for (Field f : kAllFields) {
        const auto& v = lp.get(f);
        if (v && (!std::isfinite(*v) || *v > 0.0))
            throw ContractError("log-prob " + std::string(field_name(f)) + " must be finite and <= 0");
    }
    if (lp.len_w < 1) throw ContractError("len_w must be >= 1");
}

void validate(const LossConfig& cfg) {
    if (!(cfg.beta > 0.0) || !std::isfinite(cfg.beta)) throw ContractError("beta must be > 0");
    if (!(cfg.alpha >= 0.0) || !std::isfinite(cfg.alpha)) throw ContractError("alpha must be >= 0");
    if (!std::isfinite(cfg.delta)) throw ContractError("delta must be finite");
}

LossValue& LossValue::operator+=(const LossValue& other) {
    value += other.value;
    for (const auto& [f, g] : other.grads) grads[f] += g;
    return *this;
}

double softplus(double x) noexcept {
    if (x > 0.0) return x + std::log1p(std::exp(-x));
    return std::log1p(std::exp(x));
}

double sigmoid(double x) noexcept {
    if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
    const double e = std::exp(x);
    return e / (1.0 + e);
}

double dpo_margin(const LogProbSet& lp, const LossConfig& cfg, RejectedOn on) {
    return contrast_margin(lp, text_contrast(on), cfg.beta);
}

double copo_margin(const LogProbSet& lp, const LossConfig& cfg) {
    return contrast_margin(lp, kImageContrast, cfg.beta);
}

double anchor_margin(const LogProbSet& lp, const LossConfig& cfg) {
    return cfg.beta * (need(lp, Field::PolWMw) - need(lp, Field::RefWMw)) - cfg.delta;
}

double mmedpo_margin(const LogProbSet& lp, const LossConfig& cfg) {
    return contrast_margin(lp, text_contrast(RejectedOn::RejectedImage), cfg.alpha);
}

LossValue dpo_loss(const LogProbSet& lp, const LossConfig& cfg, RejectedOn on) {
    validate(cfg);
    return contrast_loss(lp, text_contrast(on), cfg.beta);
}

LossValue nll_term(const LogProbSet& lp, const LossConfig& cfg) {
    validate(cfg);
    validate(lp);
    const double pol = need(lp, Field::PolWMw);
    LossValue out;
    out.value = -cfg.alpha * pol / lp.len_w;
    // keep +0.0 rather than -0.0 for a probability-one response
    if (out.value == 0.0) out.value = 0.0;
    out.grads[Field::PolWMw] = -cfg.alpha / lp.len_w;
    return out;
}

LossValue copo_loss(const LogProbSet& lp, const LossConfig& cfg) {
    validate(cfg);
    return contrast_loss(lp, kImageContrast, cfg.beta);
}

LossValue anchor_loss(const LogProbSet& lp, const LossConfig& cfg) {
    validate(cfg);
    validate(lp);
    const double m = anchor_margin(lp, cfg);
    LossValue out;
    out.value = softplus(-m);
    out.grads[Field::PolWMw] = -cfg.beta * sigmoid(-m);
    return out;
}

LossValue irpo_loss(const LogProbSet& lp, const LossConfig& cfg) {
    LossValue out = dpo_loss(lp, cfg);
    out += nll_term(lp, cfg);
    return out;
}

LossValue mdpo_loss(const LogProbSet& lp, const LossConfig& cfg) {
    LossValue out = dpo_loss(lp, cfg, mdpo_rejected(cfg));
    out += copo_loss(lp, cfg);
    out += anchor_loss(lp, cfg);
    return out;
}

LossValue mmedpo_loss(const LogProbSet& lp, const LossConfig& cfg, double weight) {
    validate(cfg);
    if (!(weight >= 0.0) || !std::isfinite(weight)) throw ContractError("mmedpo weight must be finite and >= 0");
    LossValue out = contrast_loss(lp, text_contrast(RejectedOn::RejectedImage), cfg.alpha);
    out.value *= weight;
    for (auto& [f, g] : out.grads) g *= weight;
    return out;
}

std::string_view to_string(LossKind k) noexcept {
    switch (k) {
        case LossKind::Dpo: return "dpo";
        case LossKind::DpoNll: return "dpo-nll";
        case LossKind::Irpo: return "irpo";
        case LossKind::Copo: return "copo";
        case LossKind::Anchor: return "anchor";
        case LossKind::Mdpo: return "mdpo";
        case LossKind::Mmedpo: return "mmedpo";
    }
    return "?";
}

LossKind parse_loss_kind(std::string_view s) {
    for (LossKind k : kAllLossKinds)
        if (s == to_string(k)) return k;
    if (s == "nll" || s == "+nll") return LossKind::DpoNll;
    try {
        return loss_for_method(parse_method(s));
    } catch (const ParseError&) {
        throw ParseError("unknown loss '" + std::string(s) + "'");
    }
}

LossKind loss_for_method(Method m) noexcept {
    switch (m) {
        case Method::TextHallu:
        case Method::TextNoise:
        case Method::TargetedDpo: return LossKind::Dpo;
        case Method::TextHalluNll:
        case Method::TextNoiseNll: return LossKind::DpoNll;
        case Method::Irpo: return LossKind::Irpo;
        case Method::ImageNoise:
        case Method::ImageRoi:
        case Method::TargetedCopo: return LossKind::Copo;
        case Method::Mdpo:
        case Method::TargetedMdpo: return LossKind::Mdpo;
        case Method::Mmedpo: return LossKind::Mmedpo;
    }
    return LossKind::Dpo;
}

std::vector<Field> consumed_fields(LossKind k, const LossConfig& cfg) {
    switch (k) {
        case LossKind::Dpo:
        case LossKind::DpoNll:
        case LossKind::Irpo: return {Field::PolWMw, Field::PolLMw};
        case LossKind::Copo: return {Field::PolWMw, Field::PolWMl};
        case LossKind::Anchor: return {Field::PolWMw};
        case LossKind::Mdpo:
            return {Field::PolWMw, cfg.mdpo_rejected_on_perturbed ? Field::PolLMl : Field::PolLMw, Field::PolWMl};
        case LossKind::Mmedpo: return {Field::PolWMw, Field::PolLMl};
    }
    return {};
}

LossValue evaluate(LossKind k, const LogProbSet& lp, const LossConfig& cfg, double weight) {
    switch (k) {
        case LossKind::Dpo: return dpo_loss(lp, cfg);
        case LossKind::DpoNll:
        case LossKind::Irpo: return irpo_loss(lp, cfg);
        case LossKind::Copo: return copo_loss(lp, cfg);
        case LossKind::Anchor: return anchor_loss(lp, cfg);
        case LossKind::Mdpo: return mdpo_loss(lp, cfg);
        case LossKind::Mmedpo: return mmedpo_loss(lp, cfg, weight);
    }
    throw ContractError("unknown loss kind");
}

double preference_margin(LossKind k, const LogProbSet& lp, const LossConfig& cfg) {
    switch (k) {
        case LossKind::Dpo:
        case LossKind::DpoNll:
        case LossKind::Irpo: return dpo_margin(lp, cfg);
        case LossKind::Copo: return copo_margin(lp, cfg);
        case LossKind::Anchor: return anchor_margin(lp, cfg);
        case LossKind::Mdpo: return dpo_margin(lp, cfg, mdpo_rejected(cfg));
        case LossKind::Mmedpo: return mmedpo_margin(lp, cfg);
    }
    return 0.0;
}

}  // namespace medpo::losses
