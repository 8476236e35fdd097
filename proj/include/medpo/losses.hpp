#pragma once

#include <map>
#include <optional>
#include <string_view>

#include "medpo/core/types.hpp"

namespace medpo::losses {

// Preference objectives over precomputed sequence log-probabilities.
//
// Naming: pol_/ref_ is the policy/reference model, w/l the chosen/rejected
// response, mw/ml the chosen/rejected image the response is conditioned on.
// So pol_l_mw is log pi_theta(y_l | m_w, q). Reference terms are constants
// under differentiation; gradients are reported for policy fields only.

enum class Field {
    PolWMw,
    RefWMw,
    PolLMl,
    RefLMl,
    PolLMw,
    RefLMw,
    PolWMl,
    RefWMl,
};

std::string_view field_name(Field f) noexcept;

struct LogProbSet {
    std::optional<double> pol_w_mw, ref_w_mw;
    std::optional<double> pol_l_ml, ref_l_ml;
    std::optional<double> pol_l_mw, ref_l_mw;
    std::optional<double> pol_w_ml, ref_w_ml;
    int len_w = 1;

    std::optional<double>& get(Field f) noexcept;
    const std::optional<double>& get(Field f) const noexcept;
};

/// Throws ContractError if any present log-prob is positive or non-finite, or len_w < 1.
void validate(const LogProbSet& lp);

struct LossConfig {
    double beta = 0.1;   // DPO temperature
    double alpha = 1.0;  // NLL weight, and the MMedPO scale
    double delta = 0.0;  // anchor threshold
    /// Image the rejected response is scored on inside the composite mDPO objective.
    bool mdpo_rejected_on_perturbed = false;
};

void validate(const LossConfig& cfg);

struct LossValue {
    double value = 0.0;
    std::map<Field, double> grads;  // d value / d policy field

    LossValue& operator+=(const LossValue& other);
};

/// Where the rejected response of a text contrast was scored.
enum class RejectedOn { ChosenImage, RejectedImage };

/// ln(1 + e^x) without overflow.
double softplus(double x) noexcept;
/// 1 / (1 + e^-x) without overflow.
double sigmoid(double x) noexcept;

// Margins: the argument m in softplus(-m). Exposed so margin linearity can be
// checked directly.
double dpo_margin(const LogProbSet& lp, const LossConfig& cfg, RejectedOn on = RejectedOn::ChosenImage);
double copo_margin(const LogProbSet& lp, const LossConfig& cfg);
double anchor_margin(const LogProbSet& lp, const LossConfig& cfg);
double mmedpo_margin(const LogProbSet& lp, const LossConfig& cfg);

/// softplus(-beta * ((pol_w - ref_w) - (pol_l - ref_l))).
LossValue dpo_loss(const LogProbSet& lp, const LossConfig& cfg, RejectedOn on = RejectedOn::ChosenImage);
/// Length-normalised NLL of the chosen response: -alpha * pol_w_mw / len_w.
LossValue nll_term(const LogProbSet& lp, const LossConfig& cfg);
/// Image-side contrast: same chosen response on the chosen vs rejected image.
LossValue copo_loss(const LogProbSet& lp, const LossConfig& cfg);
/// softplus(-(beta * chosen log-ratio - delta)).
LossValue anchor_loss(const LogProbSet& lp, const LossConfig& cfg);
/// dpo_loss + nll_term.
LossValue irpo_loss(const LogProbSet& lp, const LossConfig& cfg);
/// dpo + copo + anchor.
LossValue mdpo_loss(const LogProbSet& lp, const LossConfig& cfg);
/// weight * softplus(-alpha * ((pol_w_mw - ref_w_mw) - (pol_l_ml - ref_l_ml))).
LossValue mmedpo_loss(const LogProbSet& lp, const LossConfig& cfg, double weight);

/// Every objective the trainer and the gradient checker can run.
enum class LossKind { Dpo, DpoNll, Irpo, Copo, Anchor, Mdpo, Mmedpo };

inline constexpr LossKind kAllLossKinds[] = {LossKind::Dpo,    LossKind::DpoNll, LossKind::Irpo, LossKind::Copo,
                                             LossKind::Anchor, LossKind::Mdpo,   LossKind::Mmedpo};

std::string_view to_string(LossKind k) noexcept;
/// Accepts the LossKind names ("dpo", "dpo-nll", "irpo", "copo", "anchor",
/// "mdpo", "mmedpo") and any PreferencePair method name.
LossKind parse_loss_kind(std::string_view s);
/// The objective a pair built with `m` trains under.
LossKind loss_for_method(Method m) noexcept;

/// Policy fields (and the matching reference fields) a loss consumes.
std::vector<Field> consumed_fields(LossKind k, const LossConfig& cfg);

/// Dispatch. `weight` only affects Mmedpo.
LossValue evaluate(LossKind k, const LogProbSet& lp, const LossConfig& cfg, double weight = 1.0);
/// The margin used for preference accuracy: the text contrast where there is
/// one, otherwise the image contrast (or the anchor argument).
double preference_margin(LossKind k, const LogProbSet& lp, const LossConfig& cfg);

}  // namespace medpo::losses
