#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <json.hpp>

#include "medpo/core/error.hpp"
#include "medpo/core/types.hpp"
#include "medpo/llmclient.hpp"

namespace medpo::eval {

// VQA accuracy --------------------------------------------------------------

enum class MatcherKind { Exact, TokenF1 };

struct Matcher {
    MatcherKind kind = MatcherKind::Exact;
    double threshold = 0.5;  // token_f1 only
};

std::string_view to_string(MatcherKind k) noexcept;
/// "exact", "token_f1" or "token_f1:<threshold>".
Matcher parse_matcher(std::string_view s);

/// Lowercase, punctuation stripped, whitespace collapsed and trimmed.
std::string normalize_answer(std::string_view s);
/// Token-level F1 of the normalised answers. Two empty answers score 1.
double token_f1(std::string_view prediction, std::string_view gold);
bool answers_match(std::string_view prediction, std::string_view gold, const Matcher& m);

/// Fraction of aligned pairs that match. Throws ContractError on a length mismatch or empty input.
double vqa_accuracy(std::span<const std::string> predictions, std::span<const std::string> golds,
                    const Matcher& m = {});

// Bootstrap -------------------------------------------------------------------

struct BootstrapResult {
    double mean = 0.0;  // mean of the resample means
    double std = 0.0;   // sample standard deviation of the resample means
    double ci_lo = 0.0;
    double ci_hi = 0.0;
    int iters = 0;
};

/// Quantile q in [0, 1] of sorted data, interpolating linearly between order statistics.
double percentile(std::span<const double> sorted, double q);

/// `iters` resamples with replacement of size |scores|; 2.5 / 97.5 percentile CI.
BootstrapResult bootstrap(std::span<const double> scores, int iters = 100, std::uint64_t seed = 0);

// Statement-level generation metrics ---------------------------------------------

/// Atomic statements from the LLM decomposer. Throws ContractError on empty text.
std::vector<std::string> decompose_reference(std::string_view text, llm::Client& llm);

/// One verdict per statement, in order.
std::vector<Verdict> judge(std::string_view output, std::span<const std::string> statements, llm::Client& llm);

struct GenEvalResult {
    double completeness = 0.0;
    double contradiction = 0.0;
    int n_statements = 0;
    std::vector<Verdict> verdicts;
};

/// completeness = sum of E/P/N scores / N, contradiction = |sum of C scores| / N.
GenEvalResult aggregate(std::span<const Verdict> verdicts);

// Agreement -------------------------------------------------------------------------

/// Cohen's kappa over aligned categorical labels. Defined as 1 when expected agreement is 1.
double cohens_kappa(std::span<const std::string> a, std::span<const std::string> b);

enum class Severity { None, Minor, Severe };
std::string_view to_string(Severity s) noexcept;
/// Throws ValidationError for anything but "none", "minor", "severe".
Severity parse_severity(std::string_view s);

struct AnnotationRecord {
    std::string annotator;
    std::string sample_id;
    Severity severity = Severity::None;
    std::set<ErrorType> error_types;
    std::string timestamp;  // ISO-8601, set by the store
    bool calibration = false;

    bool operator==(const AnnotationRecord&) const = default;
};

/// Throws ValidationError on empty ids or error types listed with severity none.
void validate(const AnnotationRecord& r);
nlohmann::ordered_json to_json(const AnnotationRecord& r);
/// Strict: unknown keys, bad severities and bad error types are ValidationErrors.
AnnotationRecord record_from_json(const nlohmann::json& j, std::size_t line = 0);
std::vector<AnnotationRecord> load_annotations(const std::filesystem::path& path);

/// Thrown when no sample was annotated by both annotators.
class NoOverlapError : public Error {
public:
    using Error::Error;
};

struct AnnotatorCounts {
    int n = 0;
    std::map<Severity, double> severity_pct;  // percent of this annotator's items
    std::map<ErrorType, int> error_types;
};

struct AgreementReport {
    std::string annotator_a;
    std::string annotator_b;
    int n_overlap = 0;
    double kappa_severity = 0.0;
    std::map<ErrorType, double> kappa_per_error_type;
    std::map<std::string, AnnotatorCounts> counts;
};

/// Keeps the last record per (annotator, sample) in log order and drops
/// calibration records.
std::vector<AnnotationRecord> effective_records(std::span<const AnnotationRecord> log);

/// Agreement between two annotators (default: the two lexicographically first
/// names) over their jointly annotated samples. Throws NoOverlapError.
AgreementReport agreement(std::span<const AnnotationRecord> log,
                          std::optional<std::pair<std::string, std::string>> annotators = std::nullopt);
nlohmann::ordered_json to_json(const AgreementReport& r);

// MIMIC-CXR curation ----------------------------------------------------------------

struct StudyImage {
    std::string path;
    std::string view;  // e.g. PA, AP, LATERAL
};

struct StudyRecord {
    std::string study_id;
    std::vector<StudyImage> images;
    std::string findings;
};

StudyRecord study_from_json(const nlohmann::json& j, std::size_t line = 0);
nlohmann::ordered_json to_json(const StudyRecord& s);
std::vector<StudyRecord> load_studies(const std::filesystem::path& path);

struct MimicConfig {
    int min_findings_words = 10;
    int max_parallel = 4;
};

struct Exclusion {
    std::string study_id;
    int rule = 0;  // 1, 2 or 3
    std::string reason;
    std::string detail;
};

struct MimicResult {
    std::vector<StudyRecord> kept;  // findings rewritten
    std::vector<Exclusion> excluded;
    std::map<std::string, int> counts() const;
};

/// Reason codes: not_single_frontal, short_findings, rewrite_failed, rewrite_empty.
MimicResult mimic_filter(std::span<const StudyRecord> studies, llm::Client& llm, const MimicConfig& cfg = {});

/// True for PA and AP views (any case).
bool is_frontal(std::string_view view);
int word_count(std::string_view text);

// Results ------------------------------------------------------------------------------

/// {task, metric, value, ci95, n, config_hash}
nlohmann::ordered_json result_json(std::string_view task, std::string_view metric, double value,
                                   std::optional<std::pair<double, double>> ci95, std::size_t n,
                                   const nlohmann::json& config);

}  // namespace medpo::eval
