#include "medpo/evalkit.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <numeric>

#include "medpo/core/dataset.hpp"
#include "medpo/core/digest.hpp"
#include "medpo/core/rng.hpp"

namespace medpo::eval {

using nlohmann::json;
using nlohmann::ordered_json;

// VQA -------------------------------------------------------------------------

std::string_view to_string(MatcherKind k) noexcept { return k == MatcherKind::Exact ? "exact" : "token_f1"; }

Matcher parse_matcher(std::string_view s) {
    if (s == "exact") return {MatcherKind::Exact, 0.5};
    if (s == "token_f1") return {MatcherKind::TokenF1, 0.5};
    constexpr std::string_view prefix = "token_f1:";
    if (s.starts_with(prefix)) {
        const std::string num(s.substr(prefix.size()));
        try {
            std::size_t used = 0;
            const double t = std::stod(num, &used);
            if (used == num.size() && t >= 0.0 && t <= 1.0) return {MatcherKind::TokenF1, t};
        } catch (const std::exception&) {
        }
    }
    throw ContractError("unknown matcher '" + std::string(s) + "' (exact, token_f1, token_f1:<t>)");
}

std::string normalize_answer(std::string_view s) {
    std::string out;
    bool space = false;
    for (char ch : s) {
        const auto c = static_cast<unsigned char>(ch);
        if (c < 0x80 && std::ispunct(c)) continue;
        if (std::isspace(c)) {
            space = !out.empty();
            continue;
        }
        if (space) out += ' ';
        space = false;
        out += static_cast<char>(std::tolower(c));
    }
    return out;
}

namespace {

std::vector<std::string> answer_tokens(std::string_view s) {
    std::vector<std::string> out;
    const std::string norm = normalize_answer(s);
    std::size_t i = 0;
    while (i < norm.size()) {
        const std::size_t j = std::min(norm.find(' ', i), norm.size());
        out.emplace_back(norm.substr(i, j - i));
        i = j + 1;
    }
    return out;
}

}  // namespace

double token_f1(std::string_view prediction, std::string_view gold) {
    const auto p = answer_tokens(prediction);
    const auto g = answer_tokens(gold);
    if (p.empty() && g.empty()) return 1.0;
    if (p.empty() || g.empty()) return 0.0;
    std::map<std::string, int> counts;
    for (const auto& t : g) ++counts[t];
    int common = 0;
    for (const auto& t : p)
        if (auto it = counts.find(t); it != counts.end() && it->second > 0) {
            --it->second;
            ++common;
        }
    if (common == 0) return 0.0;
    const double precision = static_cast<double>(common) / static_cast<double>(p.size());
    const double recall = static_cast<double>(common) / static_cast<double>(g.size());
    return 2.0 * precision * recall / (precision + recall);
}

bool answers_match(std::string_view prediction, std::string_view gold, const Matcher& m) {
    if (m.kind == MatcherKind::Exact) return normalize_answer(prediction) == normalize_answer(gold);
    return token_f1(prediction, gold) >= m.threshold;
}

double vqa_accuracy(std::span<const std::string> predictions, std::span<const std::string> golds, const Matcher& m) {
    if (predictions.size() != golds.size())
        throw ContractError("predictions (" + std::to_string(predictions.size()) + ") and golds (" +
                            std::to_string(golds.size()) + ") differ in length");
    if (predictions.empty()) throw ContractError("vqa_accuracy needs at least one item");
    std::size_t hits = 0;
    for (std::size_t i = 0; i < predictions.size(); ++i) hits += answers_match(predictions[i], golds[i], m) ? 1 : 0;
    return static_cast<double>(hits) / static_cast<double>(predictions.size());
}

// Bootstrap -------------------------------------------------------------------

double percentile(std::span<const double> sorted, double q) {
    if (sorted.empty()) throw ContractError("percentile of empty data");
    if (!(q >= 0.0 && q <= 1.0)) throw ContractError("percentile fraction must lie in [0, 1]");
    const double pos = q * static_cast<double>(sorted.size() - 1);
    const auto lo = static_cast<std::size_t>(std::floor(pos));
    const auto hi = std::min(lo + 1, sorted.size() - 1);
    const double frac = pos - static_cast<double>(lo);
    return sorted[lo] + frac * (sorted[hi] - sorted[lo]);
}

BootstrapResult bootstrap(std::span<const double> scores, int iters, std::uint64_t seed) {
    if (scores.empty()) throw ContractError("bootstrap needs at least one score");
    if (iters < 1) throw ContractError("bootstrap needs iters >= 1");
    Rng rng(mix_seed(seed, 0x626f6f74ULL));
    const std::size_t n = scores.size();
    std::vector<double> means(static_cast<std::size_t>(iters));
    for (auto& m : means) {
        double sum = 0.0;
        for (std::size_t i = 0; i < n; ++i) sum += scores[rng.below(n)];
        m = sum / static_cast<double>(n);
    }
    BootstrapResult r;
    r.iters = iters;
    // Shifted by the first draw so that identical resample means give an exact mean and zero spread.
    const double shift = means.front();
    double dev_sum = 0.0;
    for (double m : means) dev_sum += m - shift;
    const double mean_dev = dev_sum / static_cast<double>(iters);
    r.mean = shift + mean_dev;
    if (iters > 1) {
        double ss = 0.0;
        for (double m : means) ss += (m - shift - mean_dev) * (m - shift - mean_dev);
        r.std = std::sqrt(ss / static_cast<double>(iters - 1));
    }
    std::sort(means.begin(), means.end());
    r.ci_lo = percentile(means, 0.025);
    r.ci_hi = percentile(means, 0.975);
    return r;
}

// Statement-level metrics -----------------------------------------------------

std::vector<std::string> decompose_reference(std::string_view text, llm::Client& llm) {
    if (normalize_answer(text).empty()) throw ContractError("cannot decompose an empty reference");
    auto statements = llm.decompose(text);
    if (statements.empty()) throw ProtocolError("decomposer returned no statements");
    return statements;
}

std::vector<Verdict> judge(std::string_view output, std::span<const std::string> statements, llm::Client& llm) {
    if (statements.empty()) throw ContractError("judge needs at least one statement");
    std::vector<Verdict> out;
    out.reserve(statements.size());
    for (const auto& s : statements) out.push_back(llm.nli(s, output));
    return out;
}

GenEvalResult aggregate(std::span<const Verdict> verdicts) {
    if (verdicts.empty()) throw ContractError("aggregate needs at least one verdict");
    GenEvalResult r;
    r.n_statements = static_cast<int>(verdicts.size());
    r.verdicts.assign(verdicts.begin(), verdicts.end());
    double pos = 0.0, neg = 0.0;
    for (Verdict v : verdicts) (v == Verdict::Contradiction ? neg : pos) += verdict_score(v);
    r.completeness = pos / r.n_statements;
    r.contradiction = std::abs(neg) / r.n_statements;
    return r;
}

// Agreement ---------------------------------------------------------------------

double cohens_kappa(std::span<const std::string> a, std::span<const std::string> b) {
    if (a.size() != b.size()) throw ContractError("label lists differ in length");
    if (a.empty()) throw ContractError("cohens_kappa needs at least one item");
    const double n = static_cast<double>(a.size());
    std::map<std::string, double> ma, mb;
    double agree = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        ma[a[i]] += 1.0;
        mb[b[i]] += 1.0;
        if (a[i] == b[i]) agree += 1.0;
    }
    const double po = agree / n;
    double pe = 0.0;
    for (const auto& [label, ca] : ma)
        if (auto it = mb.find(label); it != mb.end()) pe += (ca / n) * (it->second / n);
    if (pe >= 1.0) return 1.0;
    return (po - pe) / (1.0 - pe);
}

std::string_view to_string(Severity s) noexcept {
    switch (s) {
        case Severity::None: return "none";
        case Severity::Minor: return "minor";
        case Severity::Severe: return "severe";
    }
    return "?";
}

Severity parse_severity(std::string_view s) {
    if (s == "none") return Severity::None;
    if (s == "minor") return Severity::Minor;
    if (s == "severe") return Severity::Severe;
    throw ValidationError("invalid severity '" + std::string(s) + "' (none, minor, severe)");
}

void validate(const AnnotationRecord& r) {
    if (r.annotator.empty()) throw ValidationError("annotator is empty");
    if (r.sample_id.empty()) throw ValidationError("sample_id is empty");
    if (r.severity == Severity::None && !r.error_types.empty())
        throw ValidationError("error_types must be empty when severity is none");
}

ordered_json to_json(const AnnotationRecord& r) {
    ordered_json j;
    j["annotator"] = r.annotator;
    j["sample_id"] = r.sample_id;
    j["severity"] = to_string(r.severity);
    j["error_types"] = json::array();
    for (ErrorType t : r.error_types) j["error_types"].push_back(to_string(t));
    j["timestamp"] = r.timestamp;
    if (r.calibration) j["calibration"] = true;
    return j;
}

AnnotationRecord record_from_json(const json& j, std::size_t line) {
    if (!j.is_object()) throw ValidationError("annotation must be a JSON object", line);
    static const std::set<std::string> kKeys = {"annotator", "sample_id", "severity", "error_types", "timestamp",
                                                "calibration"};
    for (const auto& [k, _] : j.items())
        if (!kKeys.count(k)) throw ValidationError("unknown key '" + k + "'", line);
    auto str = [&](const char* key, bool required) -> std::string {
        if (!j.contains(key)) {
            if (required) throw ValidationError(std::string("missing '") + key + "'", line);
            return {};
        }
        if (!j[key].is_string()) throw ValidationError(std::string("'") + key + "' must be a string", line);
        return j[key].get<std::string>();
    };
    AnnotationRecord r;
    r.annotator = str("annotator", true);
    r.sample_id = str("sample_id", true);
    try {
        r.severity = parse_severity(str("severity", true));
    } catch (const ValidationError& e) {
        throw ValidationError(e.what(), line);
    }
    r.timestamp = str("timestamp", false);
    if (j.contains("error_types")) {
        if (!j["error_types"].is_array()) throw ValidationError("'error_types' must be an array", line);
        for (const auto& t : j["error_types"]) {
            if (!t.is_string()) throw ValidationError("error types must be strings", line);
            const auto s = t.get<std::string>();
            if (s != "MM" && s != "SLC" && s != "AM" && s != "LAS")
                throw ValidationError("invalid error type '" + s + "' (MM, SLC, AM, LAS)", line);
            r.error_types.insert(parse_error_type(s));
        }
    }
    if (j.contains("calibration")) {
        if (!j["calibration"].is_boolean()) throw ValidationError("'calibration' must be a boolean", line);
        r.calibration = j["calibration"].get<bool>();
    }
    try {
        validate(r);
    } catch (const ValidationError& e) {
        throw ValidationError(e.what(), line);
    }
    return r;
}

std::vector<AnnotationRecord> load_annotations(const std::filesystem::path& path) {
    std::vector<AnnotationRecord> out;
    for (const auto& [line, j] : read_jsonl(path)) out.push_back(record_from_json(j, line));
    return out;
}

std::vector<AnnotationRecord> effective_records(std::span<const AnnotationRecord> log) {
    std::map<std::pair<std::string, std::string>, std::size_t> last;
    for (std::size_t i = 0; i < log.size(); ++i) last[{log[i].annotator, log[i].sample_id}] = i;
    std::vector<AnnotationRecord> out;
    for (const auto& [key, idx] : last)
        if (!log[idx].calibration) out.push_back(log[idx]);
    return out;
}

AgreementReport agreement(std::span<const AnnotationRecord> log,
                          std::optional<std::pair<std::string, std::string>> annotators) {
    const auto records = effective_records(log);
    std::map<std::string, std::map<std::string, const AnnotationRecord*>> by_annotator;
    for (const auto& r : records) by_annotator[r.annotator][r.sample_id] = &r;

    if (!annotators) {
        if (by_annotator.size() < 2)
            throw NoOverlapError("agreement needs two annotators, found " + std::to_string(by_annotator.size()));
        auto it = by_annotator.begin();
        const std::string a = it->first;
        const std::string b = (++it)->first;
        annotators = {a, b};
    }
    const auto& [name_a, name_b] = *annotators;
    AgreementReport rep;
    rep.annotator_a = name_a;
    rep.annotator_b = name_b;

    const auto& recs_a = by_annotator[name_a];
    const auto& recs_b = by_annotator[name_b];
    std::vector<std::string> sev_a, sev_b;
    std::map<ErrorType, std::pair<std::vector<std::string>, std::vector<std::string>>> types;
    for (const auto& [sid, ra] : recs_a) {
        auto it = recs_b.find(sid);
        if (it == recs_b.end()) continue;
        const AnnotationRecord* rb = it->second;
        sev_a.emplace_back(to_string(ra->severity));
        sev_b.emplace_back(to_string(rb->severity));
        for (ErrorType t : kAllErrorTypes) {
            types[t].first.push_back(ra->error_types.count(t) ? "1" : "0");
            types[t].second.push_back(rb->error_types.count(t) ? "1" : "0");
        }
    }
    if (sev_a.empty())
        throw NoOverlapError("no sample was annotated by both '" + name_a + "' and '" + name_b + "'");
    rep.n_overlap = static_cast<int>(sev_a.size());
    rep.kappa_severity = cohens_kappa(sev_a, sev_b);
    for (const auto& [t, lists] : types) rep.kappa_per_error_type[t] = cohens_kappa(lists.first, lists.second);

    for (const std::string& name : {name_a, name_b}) {
        AnnotatorCounts c;
        for (Severity s : {Severity::None, Severity::Minor, Severity::Severe}) c.severity_pct[s] = 0.0;
        for (ErrorType t : kAllErrorTypes) c.error_types[t] = 0;
        for (const auto& [sid, r] : by_annotator[name]) {
            ++c.n;
            c.severity_pct[r->severity] += 1.0;
            for (ErrorType t : r->error_types) ++c.error_types[t];
        }
        for (auto& [s, v] : c.severity_pct) v = c.n ? 100.0 * v / c.n : 0.0;
        rep.counts[name] = c;
    }
    return rep;
}

ordered_json to_json(const AgreementReport& r) {
    ordered_json j;
    j["annotators"] = {r.annotator_a, r.annotator_b};
    j["n_overlap"] = r.n_overlap;
    j["kappa_severity"] = r.kappa_severity;
    ordered_json per_type;
    for (ErrorType t : kAllErrorTypes) per_type[std::string(to_string(t))] = r.kappa_per_error_type.at(t);
    j["kappa_per_error_type"] = per_type;
    ordered_json counts;
    for (const std::string& name : {r.annotator_a, r.annotator_b}) {
        const auto& c = r.counts.at(name);
        ordered_json cj;
        cj["n"] = c.n;
        ordered_json sev;
        for (const auto& [s, v] : c.severity_pct) sev[std::string(to_string(s))] = v;
        cj["severity_pct"] = sev;
        ordered_json et;
        for (ErrorType t : kAllErrorTypes) et[std::string(to_string(t))] = c.error_types.at(t);
        cj["error_types"] = et;
        counts[name] = cj;
    }
    j["counts"] = counts;
    return j;
}

// MIMIC-CXR -------------------------------------------------------------------------

bool is_frontal(std::string_view view) {
    std::string v;
    for (char c : view) v += static_cast<char>(std::toupper(static_cast<unsigned char>(c)));
    return v == "PA" || v == "AP";
}

int word_count(std::string_view text) {
    int n = 0;
    bool in_word = false;
    for (char c : text) {
        const bool space = std::isspace(static_cast<unsigned char>(c)) != 0;
        if (!space && !in_word) ++n;
        in_word = !space;
    }
    return n;
}

StudyRecord study_from_json(const json& j, std::size_t line) {
    if (!j.is_object()) throw ValidationError("study must be a JSON object", line);
    StudyRecord s;
    try {
        s.study_id = j.at("study_id").get<std::string>();
        s.findings = j.value("findings", std::string{});
        for (const auto& im : j.at("images")) s.images.push_back({im.at("path").get<std::string>(),
                                                                  im.value("view", std::string{})});
    } catch (const json::exception& e) {
        throw ValidationError(std::string("bad study record: ") + e.what(), line);
    }
    if (s.study_id.empty()) throw ValidationError("study_id is empty", line);
    return s;
}

ordered_json to_json(const StudyRecord& s) {
    ordered_json j;
    j["study_id"] = s.study_id;
    j["images"] = ordered_json::array();
    for (const auto& im : s.images) j["images"].push_back({{"path", im.path}, {"view", im.view}});
    j["findings"] = s.findings;
    return j;
}

std::vector<StudyRecord> load_studies(const std::filesystem::path& path) {
    std::vector<StudyRecord> out;
    for (const auto& [line, j] : read_jsonl(path)) out.push_back(study_from_json(j, line));
    return out;
}

std::map<std::string, int> MimicResult::counts() const {
    std::map<std::string, int> out;
    for (const auto& e : excluded) ++out[e.reason];
    return out;
}

MimicResult mimic_filter(std::span<const StudyRecord> studies, llm::Client& llm, const MimicConfig& cfg) {
    MimicResult r;
    std::vector<const StudyRecord*> survivors;
    for (const auto& s : studies) {
        if (s.images.size() != 1 || !is_frontal(s.images.front().view)) {
            r.excluded.push_back({s.study_id, 1, "not_single_frontal",
                                  std::to_string(s.images.size()) + " image(s)"});
            continue;
        }
        const int words = word_count(s.findings);
        if (words < cfg.min_findings_words) {
            r.excluded.push_back({s.study_id, 2, "short_findings", std::to_string(words) + " words"});
            continue;
        }
        survivors.push_back(&s);
    }

    std::vector<llm::JudgeRequest> reqs;
    for (const auto* s : survivors) reqs.push_back({llm::Task::Rewrite, {{"text", s->findings}}});
    const auto replies = llm.batch(reqs, std::max(1, cfg.max_parallel));
    for (std::size_t i = 0; i < survivors.size(); ++i) {
        const StudyRecord& s = *survivors[i];
        if (!replies[i].ok()) {
            r.excluded.push_back({s.study_id, 3, "rewrite_failed", replies[i].error});
            continue;
        }
        const std::string& text = replies[i].response->text;
        if (normalize_answer(text).empty()) {
            r.excluded.push_back({s.study_id, 3, "rewrite_empty", ""});
            continue;
        }
        StudyRecord kept = s;
        kept.findings = text;
        r.kept.push_back(std::move(kept));
    }
    return r;
}

// Results ------------------------------------------------------------------------------

ordered_json result_json(std::string_view task, std::string_view metric, double value,
                         std::optional<std::pair<double, double>> ci95, std::size_t n, const json& config) {
    ordered_json j;
    j["task"] = task;
    j["metric"] = metric;
    j["value"] = value;
    j["ci95"] = ci95 ? ordered_json::array({ci95->first, ci95->second}) : ordered_json(nullptr);
    j["n"] = n;
    j["config_hash"] = sha256_hex(config.dump());
    return j;
}

}  // namespace medpo::eval
