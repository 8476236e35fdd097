#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "medpo/core/image.hpp"
#include "medpo/core/types.hpp"
#include "medpo/losses.hpp"
#include "medpo/policy.hpp"

namespace medpo::toy {

inline constexpr int kBos = 0;
inline constexpr int kEos = 1;
inline constexpr int kUnk = 2;
inline constexpr int kFeatureDim = 64;

using Features = std::vector<double>;

/// Lowercased whitespace tokenizer over a fixed vocabulary.
/// Ids 0..2 are BOS, EOS and UNK; corpus words follow in sorted order.
class Tokenizer {
public:
    Tokenizer();
    static Tokenizer build(std::span<const std::string> corpus);
    static Tokenizer from_vocab(std::vector<std::string> words);

    std::vector<int> encode(std::string_view text) const;
    std::string decode(std::span<const int> ids) const;
    int size() const noexcept { return static_cast<int>(vocab_.size()); }
    const std::vector<std::string>& vocab() const noexcept { return vocab_; }

private:
    std::vector<std::string> vocab_;
    std::map<std::string, int, std::less<>> ids_;
};

/// logits(prev, f) = W_tok[prev, :] + f^T W_img + b
struct ToyParams {
    int vocab_size = 0;
    int feature_dim = kFeatureDim;
    std::vector<double> w_tok;  // vocab_size x vocab_size, row = previous token
    std::vector<double> w_img;  // feature_dim x vocab_size
    std::vector<double> b;      // vocab_size

    ToyParams() = default;
    ToyParams(int V, int d = kFeatureDim);

    std::size_t num_params() const noexcept { return w_tok.size() + w_img.size() + b.size(); }
    /// Flat view over all entries, in the order w_tok, w_img, b.
    double& flat(std::size_t i);
    double flat(std::size_t i) const;
    void axpy(double a, const ToyParams& x);  // this += a * x
    void set_zero();

    bool operator==(const ToyParams&) const = default;
};

/// Throws ContractError on bad dimensions or non-finite entries.
void validate(const ToyParams& p);
/// Entries drawn from N(0, scale^2).
ToyParams random_params(int V, std::uint64_t seed, double scale = 0.01, int d = kFeatureDim);

/// Grayscale, 8x8 area average, scaled to [0, 1], row-major.
Features extract_features(const ImageBuffer& img);

/// log p(response | prompt, features). When `grad` is given, `scale` times the
/// gradient is added to it.
double seq_logprob(const ToyParams& p, std::span<const int> prompt, std::span<const int> response,
                   std::span<const double> features, ToyParams* grad = nullptr, double scale = 1.0);

/// Log-softmax of the next-token logits after `prev`.
std::vector<double> next_logprobs(const ToyParams& p, int prev, std::span<const double> features);

std::vector<int> generate(const ToyParams& p, std::span<const int> prompt, std::span<const double> features,
                          const GenerateOptions& opts);

/// A pair with text tokenized and images reduced to features.
struct EncodedPair {
    Method method = Method::TextHallu;
    std::vector<int> prompt;
    std::vector<int> chosen;  // EOS-terminated
    std::optional<std::vector<int>> rejected;
    Features chosen_features;
    std::optional<Features> rejected_features;
    double weight = 1.0;
};

using FeatureLoader = std::function<Features(const std::string& image_path)>;

/// Loads images relative to `base_dir`, caching features by path.
FeatureLoader image_feature_loader(std::filesystem::path base_dir);

EncodedPair encode_pair(const PreferencePair& pair, const Tokenizer& tok, const FeatureLoader& features);

/// The fields the pair's loss consumes, policy and reference. Throws
/// ContractError when the pair lacks a modality the loss needs.
losses::LogProbSet pair_logprobs(const ToyParams& policy, const ToyParams& ref, const EncodedPair& pair,
                                 const losses::LossConfig& cfg = {});
losses::LogProbSet pair_logprobs(const ToyParams& policy, const ToyParams& ref, const EncodedPair& pair,
                                 losses::LossKind kind, const losses::LossConfig& cfg = {});

struct PairEval {
    losses::LossValue loss;
    double margin = 0.0;
};

/// Loss of one pair; when `grad` is given, weight * dLoss/dParams is added to it.
PairEval pair_loss(const ToyParams& policy, const ToyParams& ref, const EncodedPair& pair, losses::LossKind kind,
                   const losses::LossConfig& cfg, ToyParams* grad = nullptr, double grad_scale = 1.0);

struct TrainConfig {
    losses::LossKind loss = losses::LossKind::Dpo;
    losses::LossConfig loss_cfg;
    double learning_rate = 0.05;
    int steps = 500;
    std::uint64_t seed = 0;
};

void validate(const TrainConfig& cfg);

struct HistoryRow {
    int step = 0;  // 0 is the state before the first update
    double loss = 0.0;
    double pref_accuracy = 0.0;
};

struct TrainResult {
    ToyParams params;
    std::vector<HistoryRow> history;  // steps + 1 rows
};

/// Mean loss and preference accuracy over `pairs`.
HistoryRow evaluate(const ToyParams& policy, const ToyParams& ref, std::span<const EncodedPair> pairs,
                    losses::LossKind kind, const losses::LossConfig& cfg);

/// Full-batch gradient descent on the mean loss. Throws RunError on a non-finite loss.
TrainResult train(std::span<const EncodedPair> pairs, const ToyParams& init, const ToyParams& ref,
                  const TrainConfig& cfg);

struct GradCheckReport {
    losses::LossKind loss = losses::LossKind::Dpo;
    int trials = 0;
    std::size_t entries_checked = 0;
    double max_rel_error = 0.0;
    double max_abs_error = 0.0;
    double tolerance = 1e-4;
    bool passed = false;
};

/// Central differences over every parameter entry of random small models and
/// pairs. Relative errors use max(|numeric|, |analytic|, 1e-4) as the denominator.
GradCheckReport grad_check(losses::LossKind kind, int trials, double h = 1e-5, double tol = 1e-4,
                           std::uint64_t seed = 0);

struct Checkpoint {
    ToyParams params;
    Tokenizer tokenizer;
};

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);
std::string history_csv(std::span<const HistoryRow> history);

/// PolicyClient over a toy model.
class ToyPolicyClient : public PolicyClient {
public:
    ToyPolicyClient(ToyParams params, Tokenizer tok) : params_(std::move(params)), tok_(std::move(tok)) {}
    std::string generate(std::string_view prompt, const ImageBuffer& image, const GenerateOptions& opts) override;

    const ToyParams& params() const noexcept { return params_; }
    const Tokenizer& tokenizer() const noexcept { return tok_; }

private:
    ToyParams params_;
    Tokenizer tok_;
};

}  // namespace medpo::toy
