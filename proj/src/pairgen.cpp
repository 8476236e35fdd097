#include "medpo/pairgen.hpp"

#include <algorithm>
#include <cmath>
#include <deque>
#include <iostream>

#include "medpo/core/error.hpp"
#include "medpo/core/rng.hpp"
#include "medpo/rouge.hpp"

namespace medpo::pairgen {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr std::uint64_t kPerturbStream = 0x70657274ULL;
constexpr std::uint64_t kGenerateStream = 0x67656eULL;
constexpr std::uint64_t kRetrieveStream = 0x72657472ULL;
constexpr std::uint64_t kTargetStream = 0x74617267ULL;
constexpr int kLlmParallel = 4;

const char* kReasonLlm = "llm_failure";

std::uint64_t sample_seed(const PairBuildConfig& cfg, const std::string& id, std::uint64_t stream) {
    return mix_seed(derive_seed(cfg.seed, id), stream);
}

fs::path absolute_normal(const fs::path& p) { return fs::absolute(p).lexically_normal(); }

fs::path source_image(const PairBuildConfig& cfg, const Sample& s) {
    fs::path p(s.image);
    return p.is_absolute() ? p : cfg.image_root / p;
}

std::string relative_to_out(const PairBuildConfig& cfg, const fs::path& p) {
    return absolute_normal(p).lexically_relative(absolute_normal(cfg.out_dir)).generic_string();
}

std::string decode_mode_name(DecodeMode m) { return m == DecodeMode::Greedy ? "greedy" : "sample"; }

void warn(const std::string& id, const std::string& reason, const std::string& detail = {}) {
    std::cerr << "warning: skipped " << id << " (" << reason << (detail.empty() ? "" : ": " + detail) << ")\n";
}

void skip(BuildResult& r, const std::string& id, const std::string& reason, const std::string& detail = {}) {
    warn(id, reason, detail);
    r.skipped.push_back({id, reason});
}

/// Throws RunError when LLM failures exceed the configured fraction of attempts.
void check_skip_budget(const BuildResult& r, std::size_t attempted, const PairBuildConfig& cfg) {
    if (attempted == 0) return;
    const auto failures = std::count_if(r.skipped.begin(), r.skipped.end(),
                                        [](const SkipRecord& s) { return s.reason == kReasonLlm; });
    const double frac = static_cast<double>(failures) / static_cast<double>(attempted);
    if (frac > cfg.max_skip_fraction)
        throw RunError(std::to_string(failures) + " of " + std::to_string(attempted) +
                       " samples failed at the LLM, above the allowed fraction " +
                       std::to_string(cfg.max_skip_fraction));
}

void sort_output(BuildResult& r) {
    std::stable_sort(r.pairs.begin(), r.pairs.end(),
                     [](const PreferencePair& a, const PreferencePair& b) { return a.id < b.id; });
}

PreferencePair base_pair(const Sample& s, Method m, const PairBuildConfig& cfg) {
    PreferencePair p;
    p.id = s.id;
    p.method = m;
    p.prompt = s.prompt;
    p.chosen_text = s.response;
    p.chosen_image = relative_to_out(cfg, source_image(cfg, s));
    return p;
}

std::optional<ImageBuffer> decode(BuildResult& r, const PairBuildConfig& cfg, const Sample& s) {
    try {
        return load_image(source_image(cfg, s));
    } catch (const Error& e) {
        skip(r, s.id, "image_decode", e.what());
        return std::nullopt;
    }
}

/// Writes out_dir/images/{id}.{method}.png and returns its pair-relative path.
std::string write_rejected(BuildResult& r, const PairBuildConfig& cfg, const std::string& id, Method m,
                           const ImageBuffer& img) {
    const fs::path rel = fs::path("images") / (id + "." + std::string(to_string(m)) + ".png");
    const fs::path full = cfg.out_dir / rel;
    fs::create_directories(full.parent_path());
    save_png(img, full);
    r.written_images.push_back(absolute_normal(full));
    return rel.generic_string();
}

/// Resolved ROI boxes, or nullopt (with a skip recorded) when unusable.
std::optional<std::vector<RoiBox>> roi_for(BuildResult& r, const PairBuildConfig& cfg, const Sample& s,
                                           const ImageBuffer& img, bool& fallback) {
    fallback = false;
    if (s.roi && !s.roi->empty()) {
        for (const auto& b : *s.roi) {
            if (b.x < 0 || b.y < 0 || b.w <= 0 || b.h <= 0 || b.x + b.w > img.width || b.y + b.h > img.height) {
                skip(r, s.id, "roi_out_of_bounds");
                return std::nullopt;
            }
        }
        return *s.roi;
    }
    if (!cfg.roi_fallback) {
        skip(r, s.id, "no_roi");
        return std::nullopt;
    }
    fallback = true;
    return std::vector<RoiBox>{perturb::centered_half_area_box(img.width, img.height)};
}

std::optional<std::string> generate(BuildResult& r, PolicyClient& policy, const Sample& s, const ImageBuffer& img,
                                    const GenerateOptions& opts) {
    try {
        return policy.generate(s.prompt, img, opts);
    } catch (const Error& e) {
        skip(r, s.id, "generation_failure", e.what());
        return std::nullopt;
    }
}

/// Hallucinated responses for every sample, index-aligned; failures stay empty.
std::vector<std::optional<std::string>> hallucinate_all(const std::vector<Sample>& samples, llm::Client& client) {
    std::vector<llm::JudgeRequest> reqs;
    reqs.reserve(samples.size());
    for (const auto& s : samples) reqs.push_back({llm::Task::Hallucinate, {{"text", s.response}}});
    const auto items = client.batch(reqs, kLlmParallel);
    std::vector<std::optional<std::string>> out(samples.size());
    for (std::size_t i = 0; i < items.size(); ++i)
        if (items[i].ok()) out[i] = items[i].response->text;
        else warn(samples[i].id, kReasonLlm, items[i].error);
    return out;
}

std::vector<std::string> sorted_keywords(const TagMap& tags, ErrorType t) {
    auto it = tags.find(t);
    if (it == tags.end()) return {};
    return {it->second.begin(), it->second.end()};
}

}  // namespace

void validate(const PairBuildConfig& cfg) {
    perturb::validate(cfg.perturb);
    if (cfg.irpo_n < 2) throw ContractError("irpo_n must be >= 2");
    if (!(cfg.irpo_temperature > 0.0) || !std::isfinite(cfg.irpo_temperature))
        throw ContractError("irpo_temperature must be > 0");
    if (cfg.target_size < 1) throw ContractError("target_size must be >= 1");
    if (cfg.max_len < 1) throw ContractError("max_len must be >= 1");
    if (!(cfg.max_skip_fraction >= 0.0 && cfg.max_skip_fraction <= 1.0))
        throw ContractError("max_skip_fraction must be in [0, 1]");
}

json to_json(const PairBuildConfig& cfg) {
    return json{
        {"method", to_string(cfg.method)},
        {"sigma", cfg.perturb.sigma},
        {"keep_range", {cfg.perturb.keep_lo, cfg.perturb.keep_hi}},
        {"irpo_n", cfg.irpo_n},
        {"irpo_temperature", cfg.irpo_temperature},
        {"seed", cfg.seed},
        {"target_size", cfg.target_size},
        {"decoding", decode_mode_name(cfg.decoding)},
        {"max_len", cfg.max_len},
        {"roi_fallback", cfg.roi_fallback},
        {"targeted_substitution", cfg.targeted_use_llm ? "llm" : "rule"},
        {"max_skip_fraction", cfg.max_skip_fraction},
    };
}

std::map<std::string, int> BuildResult::skip_counts() const {
    std::map<std::string, int> out;
    for (const auto& s : skipped) ++out[s.reason];
    return out;
}

// ---------------------------------------------------------------------------

BuildResult build_text_hallu(const std::vector<Sample>& samples, llm::Client& llm, bool add_nll,
                             const PairBuildConfig& cfg) {
    validate(cfg);
    BuildResult r;
    const auto rejected = hallucinate_all(samples, llm);
    for (std::size_t i = 0; i < samples.size(); ++i) {
        const Sample& s = samples[i];
        if (!rejected[i]) {
            r.skipped.push_back({s.id, kReasonLlm});
            continue;
        }
        if (*rejected[i] == s.response) {
            skip(r, s.id, "echo");
            continue;
        }
        PreferencePair p = base_pair(s, add_nll ? Method::TextHalluNll : Method::TextHallu, cfg);
        p.rejected_text = *rejected[i];
        r.pairs.push_back(std::move(p));
    }
    check_skip_budget(r, samples.size(), cfg);
    sort_output(r);
    return r;
}

BuildResult build_text_noise(const std::vector<Sample>& samples, PolicyClient& policy, bool add_nll,
                             const PairBuildConfig& cfg) {
    validate(cfg);
    BuildResult r;
    for (const auto& s : samples) {
        auto img = decode(r, cfg, s);
        if (!img) continue;
        const ImageBuffer noisy =
            perturb::gaussian_noise(*img, cfg.perturb.sigma, sample_seed(cfg, s.id, kPerturbStream));
        GenerateOptions opts{cfg.decoding, 1.0, cfg.max_len, sample_seed(cfg, s.id, kGenerateStream)};
        auto y_l = generate(r, policy, s, noisy, opts);
        if (!y_l) continue;
        if (y_l->empty()) {
            skip(r, s.id, "empty_rejected");
            continue;
        }
        if (*y_l == s.response) {
            skip(r, s.id, "degenerate_text");
            continue;
        }
        PreferencePair p = base_pair(s, add_nll ? Method::TextNoiseNll : Method::TextNoise, cfg);
        p.rejected_text = *y_l;
        p.meta = {{"decoding", decode_mode_name(cfg.decoding)}, {"sigma", cfg.perturb.sigma}};
        r.pairs.push_back(std::move(p));
    }
    sort_output(r);
    return r;
}

BuildResult build_irpo(const std::vector<Sample>& samples, PolicyClient& policy, const PairBuildConfig& cfg) {
    validate(cfg);
    BuildResult r;
    for (const auto& s : samples) {
        auto img = decode(r, cfg, s);
        if (!img) continue;
        const std::uint64_t base = sample_seed(cfg, s.id, kGenerateStream);
        std::vector<std::string> draws;
        std::vector<double> scores;
        bool failed = false;
        for (int k = 0; k < cfg.irpo_n; ++k) {
            GenerateOptions opts{DecodeMode::Sample, cfg.irpo_temperature, cfg.max_len,
                                 mix_seed(base, static_cast<std::uint64_t>(k))};
            auto y = generate(r, policy, s, *img, opts);
            if (!y) {
                failed = true;
                break;
            }
            scores.push_back(rouge_l(*y, s.response));
            draws.push_back(std::move(*y));
        }
        if (failed) continue;
        // max_element / min_element return the first extreme, i.e. the earliest draw.
        const auto best = std::max_element(scores.begin(), scores.end()) - scores.begin();
        const auto worst = std::min_element(scores.begin(), scores.end()) - scores.begin();
        if (scores[best] == scores[worst] || draws[best] == draws[worst]) {
            skip(r, s.id, "tied_scores");
            continue;
        }
        PreferencePair p = base_pair(s, Method::Irpo, cfg);
        p.chosen_text = draws[best];
        p.rejected_text = draws[worst];
        p.meta = {{"chosen_rouge", scores[best]},
                  {"chosen_index", best},
                  {"rejected_rouge", scores[worst]},
                  {"rejected_index", worst},
                  {"rouge_variant", "rouge-l-f1"},
                  {"n", cfg.irpo_n},
                  {"temperature", cfg.irpo_temperature}};
        if (p.chosen_text.empty()) {
            skip(r, s.id, "empty_chosen");
            continue;
        }
        if (p.rejected_text->empty()) {
            skip(r, s.id, "empty_rejected");
            continue;
        }
        r.pairs.push_back(std::move(p));
    }
    sort_output(r);
    return r;
}

BuildResult build_image_only(const std::vector<Sample>& samples, const PairBuildConfig& cfg) {
    validate(cfg);
    if (cfg.method != Method::ImageNoise && cfg.method != Method::ImageRoi)
        throw ContractError("build_image_only needs method image-noise or image-roi");
    BuildResult r;
    for (const auto& s : samples) {
        auto img = decode(r, cfg, s);
        if (!img) continue;
        const std::uint64_t seed = sample_seed(cfg, s.id, kPerturbStream);
        PreferencePair p = base_pair(s, cfg.method, cfg);
        p.meta = {{"sigma", cfg.perturb.sigma}};
        ImageBuffer rejected;
        if (cfg.method == Method::ImageNoise) {
            rejected = perturb::gaussian_noise(*img, cfg.perturb.sigma, seed);
        } else {
            bool fallback = false;
            auto boxes = roi_for(r, cfg, s, *img, fallback);
            if (!boxes) continue;
            rejected = perturb::roi_noise(*img, *boxes, cfg.perturb.sigma, seed);
            if (fallback) p.meta["roi_fallback"] = true;
        }
        if (rejected == *img) {
            skip(r, s.id, "degenerate_image");
            continue;
        }
        p.rejected_image = write_rejected(r, cfg, s.id, cfg.method, rejected);
        r.pairs.push_back(std::move(p));
    }
    sort_output(r);
    return r;
}

BuildResult build_mdpo(const std::vector<Sample>& samples, PolicyClient& policy, const PairBuildConfig& cfg) {
    validate(cfg);
    BuildResult r;
    for (const auto& s : samples) {
        auto img = decode(r, cfg, s);
        if (!img) continue;
        const std::uint64_t seed = sample_seed(cfg, s.id, kPerturbStream);
        RoiBox rect;
        ImageBuffer cropped;
        try {
            rect = perturb::crop_rect(img->width, img->height, cfg.perturb.keep_lo, cfg.perturb.keep_hi, seed);
            cropped = perturb::random_crop(*img, cfg.perturb.keep_lo, cfg.perturb.keep_hi, seed);
        } catch (const ContractError& e) {
            skip(r, s.id, "crop_failure", e.what());
            continue;
        }
        GenerateOptions opts{cfg.decoding, 1.0, cfg.max_len, sample_seed(cfg, s.id, kGenerateStream)};
        auto y_l = generate(r, policy, s, cropped, opts);
        if (!y_l) continue;
        if (y_l->empty()) {
            skip(r, s.id, "empty_rejected");
            continue;
        }
        if (*y_l == s.response) {
            skip(r, s.id, "degenerate_text");
            continue;
        }
        if (cropped == *img) {
            skip(r, s.id, "degenerate_image");
            continue;
        }
        PreferencePair p = base_pair(s, Method::Mdpo, cfg);
        p.rejected_text = *y_l;
        p.rejected_image = write_rejected(r, cfg, s.id, Method::Mdpo, cropped);
        p.meta = {{"crop", {rect.x, rect.y, rect.w, rect.h}}, {"decoding", decode_mode_name(cfg.decoding)}};
        r.pairs.push_back(std::move(p));
    }
    sort_output(r);
    return r;
}

BuildResult build_mmedpo(const std::vector<Sample>& samples, llm::Client& llm, const PairBuildConfig& cfg) {
    validate(cfg);
    BuildResult r;
    const auto rejected = hallucinate_all(samples, llm);
    for (std::size_t i = 0; i < samples.size(); ++i) {
        const Sample& s = samples[i];
        if (!rejected[i]) {
            r.skipped.push_back({s.id, kReasonLlm});
            continue;
        }
        if (*rejected[i] == s.response) {
            skip(r, s.id, "echo");
            continue;
        }
        auto img = decode(r, cfg, s);
        if (!img) continue;
        bool fallback = false;
        auto boxes = roi_for(r, cfg, s, *img, fallback);
        if (!boxes) continue;
        const ImageBuffer noisy =
            perturb::roi_noise(*img, *boxes, cfg.perturb.sigma, sample_seed(cfg, s.id, kPerturbStream));
        if (noisy == *img) {
            skip(r, s.id, "degenerate_image");
            continue;
        }
        PreferencePair p = base_pair(s, Method::Mmedpo, cfg);
        p.rejected_text = *rejected[i];
        p.rejected_image = write_rejected(r, cfg, s.id, Method::Mmedpo, noisy);
        p.weight = s.weight;
        p.meta = {{"sigma", cfg.perturb.sigma}};
        if (fallback) p.meta["roi_fallback"] = true;
        r.pairs.push_back(std::move(p));
    }
    check_skip_budget(r, samples.size(), cfg);
    sort_output(r);
    return r;
}

// ---------------------------------------------------------------------------

std::string signature(const TagMap& tags) {
    std::string out;
    for (ErrorType t : kAllErrorTypes) {
        auto it = tags.find(t);
        if (it == tags.end() || it->second.empty()) continue;
        if (!out.empty()) out += ';';
        out += to_string(t);
        out += '=';
        bool first = true;
        for (const auto& k : it->second) {
            if (!first) out += ',';
            out += k;
            first = false;
        }
    }
    return out;
}

ImageIndex ImageIndex::build(const std::vector<Sample>& samples, const tagger::KeywordLexicon& lexicon) {
    ImageIndex idx;
    for (const auto& s : samples) {
        TagMap tags = s.tags ? *s.tags : tagger::tag_sample(s.prompt, s.response, lexicon).tags;
        std::erase_if(tags, [](const auto& kv) { return kv.second.empty(); });
        if (tags.empty()) continue;
        for (const auto& [t, kws] : tags) idx.observed_[t].insert(kws.begin(), kws.end());
        idx.by_signature_[signature(tags)].push_back(s.id);
        idx.tags_.emplace(s.id, std::move(tags));
        idx.samples_.emplace(s.id, s);
    }
    for (auto& [sig, ids] : idx.by_signature_) std::sort(ids.begin(), ids.end());
    return idx;
}

const TagMap* ImageIndex::tags_of(const std::string& id) const {
    auto it = tags_.find(id);
    return it == tags_.end() ? nullptr : &it->second;
}

const Sample* ImageIndex::sample(const std::string& id) const {
    auto it = samples_.find(id);
    return it == samples_.end() ? nullptr : &it->second;
}

const std::vector<std::string>& ImageIndex::with_signature(const std::string& sig) const {
    static const std::vector<std::string> kEmpty;
    auto it = by_signature_.find(sig);
    return it == by_signature_.end() ? kEmpty : it->second;
}

std::vector<std::string> ImageIndex::ids() const {
    std::vector<std::string> out;
    out.reserve(tags_.size());
    for (const auto& [id, _] : tags_) out.push_back(id);
    return out;
}

const std::set<std::string>& ImageIndex::observed(ErrorType t) const {
    static const std::set<std::string> kEmpty;
    auto it = observed_.find(t);
    return it == observed_.end() ? kEmpty : it->second;
}

HardNegative retrieve_hard_negative(const Sample& anchor, ErrorType category, const std::string& keyword,
                                    const ImageIndex& index, std::uint64_t seed, RetrievalMode mode,
                                    const std::optional<std::string>& preferred) {
    const TagMap* anchor_tags = index.tags_of(anchor.id);
    if (!anchor_tags && anchor.tags) anchor_tags = &*anchor.tags;
    if (!anchor_tags) throw ContractError("anchor '" + anchor.id + "' carries no tags");
    auto cat_it = anchor_tags->find(category);
    if (cat_it == anchor_tags->end() || !cat_it->second.count(keyword))
        throw ContractError("anchor '" + anchor.id + "' is not tagged " + std::string(to_string(category)) + ":" +
                            keyword);
    std::set<std::string> rest = cat_it->second;
    rest.erase(keyword);

    std::vector<std::pair<std::string, std::string>> candidates;  // (id, replacement)
    auto accept = [&](const std::string& id, const std::string& repl) {
        if (id == anchor.id) return;
        const Sample* s = index.sample(id);
        if (!s || s->image == anchor.image) return;
        candidates.emplace_back(id, repl);
    };

    if (mode == RetrievalMode::Strict) {
        for (const auto& repl : index.observed(category)) {
            if (cat_it->second.count(repl)) continue;
            TagMap want = *anchor_tags;
            want[category] = rest;
            want[category].insert(repl);
            for (const auto& id : index.with_signature(signature(want))) accept(id, repl);
        }
    } else {
        for (const auto& id : index.ids()) {
            const TagMap& t = *index.tags_of(id);
            auto it = t.find(category);
            if (it == t.end() || it->second.size() != rest.size() + 1) continue;
            if (!std::includes(it->second.begin(), it->second.end(), rest.begin(), rest.end())) continue;
            std::string repl;
            for (const auto& k : it->second)
                if (!rest.count(k)) repl = k;
            if (repl == keyword) continue;
            accept(id, repl);
        }
    }
    if (preferred) {
        std::vector<std::pair<std::string, std::string>> narrowed;
        for (const auto& c : candidates)
            if (c.second == *preferred) narrowed.push_back(c);
        if (!narrowed.empty()) candidates = std::move(narrowed);
    }
    if (candidates.empty())
        throw RetrievalMiss("no hard negative for " + anchor.id + " on " + std::string(to_string(category)) + ":" +
                            keyword);
    std::sort(candidates.begin(), candidates.end());
    Rng rng(mix_seed(seed, kRetrieveStream));
    const auto& pick = candidates[rng.below(candidates.size())];
    return {*index.sample(pick.first), pick.second, mode};
}

namespace {

struct Unit {
    const Sample* sample;
    ErrorType category;
};

/// Tries the unit's keywords in a seeded rotation; first successful substitution wins.
std::optional<std::pair<std::string, perturb::Substitution>> realize(const Unit& u, const TagMap& tags,
                                                                     llm::Client* llm,
                                                                     const tagger::KeywordLexicon& lexicon,
                                                                     const PairBuildConfig& cfg, std::string& reason,
                                                                     std::string& detail) {
    const auto kws = sorted_keywords(tags, u.category);
    const std::uint64_t seed = sample_seed(cfg, u.sample->id + "." + std::string(to_string(u.category)), kTargetStream);
    const std::size_t offset = kws.empty() ? 0 : Rng(seed).below(kws.size());
    reason = "keyword_not_in_response";
    for (std::size_t i = 0; i < kws.size(); ++i) {
        const std::string& kw = kws[(offset + i) % kws.size()];
        try {
            if (cfg.targeted_use_llm) {
                // The LLM only rewrites the response when the keyword is actually there.
                perturb::substitute_keyword(u.sample->response, kw, u.category, lexicon, seed);
                std::string text = llm->perturb(u.sample->response, u.category, kw);
                return std::make_pair(kw, perturb::Substitution{std::move(text), ""});
            }
            return std::make_pair(kw, perturb::substitute_keyword(u.sample->response, kw, u.category, lexicon, seed));
        } catch (const NotFoundError&) {
            continue;
        } catch (const ExhaustionError& e) {
            reason = "no_substitute";
            detail = e.what();
        } catch (const TransportError& e) {
            reason = kReasonLlm;
            detail = e.what();
            return std::nullopt;
        } catch (const ProtocolError& e) {
            reason = kReasonLlm;
            detail = e.what();
            return std::nullopt;
        }
    }
    return std::nullopt;
}

}  // namespace

BuildResult build_targeted(const std::vector<Sample>& samples, llm::Client* llm, const ImageIndex& index,
                           const tagger::KeywordLexicon& lexicon, const PairBuildConfig& cfg) {
    validate(cfg);
    if (cfg.targeted_use_llm && !llm) throw ContractError("LLM substitution requested without an LLM client");

    std::vector<const Sample*> ordered;
    for (const auto& s : samples) ordered.push_back(&s);
    std::sort(ordered.begin(), ordered.end(), [](auto* a, auto* b) { return a->id < b->id; });

    // Per-category queues of candidate units, shuffled once so truncation at
    // target_size does not favour low ids.
    std::map<ErrorType, std::deque<Unit>> queues;
    for (const Sample* s : ordered) {
        const TagMap* tags = index.tags_of(s->id);
        if (!tags) continue;
        for (const auto& [t, kws] : *tags)
            if (!kws.empty()) queues[t].push_back({s, t});
    }
    for (auto& [t, q] : queues) {
        Rng rng(mix_seed(cfg.seed, kTargetStream ^ static_cast<std::uint64_t>(t)));
        for (std::size_t i = q.size(); i > 1; --i) std::swap(q[i - 1], q[rng.below(i)]);
    }

    BuildResult r;
    std::size_t attempted = 0;
    int produced = 0;
    bool progress = true;
    while (produced < cfg.target_size && progress) {
        progress = false;
        for (ErrorType t : kAllErrorTypes) {
            if (produced >= cfg.target_size) break;
            auto& q = queues[t];
            while (!q.empty()) {
                const Unit u = q.front();
                q.pop_front();
                const std::string unit_id = u.sample->id + "." + std::string(to_string(t));
                ++attempted;
                std::string reason, detail;
                auto sub = realize(u, *index.tags_of(u.sample->id), llm, lexicon, cfg, reason, detail);
                if (!sub || sub->second.text == u.sample->response) {
                    skip(r, unit_id, sub ? "degenerate_text" : reason, detail);
                    continue;
                }
                const auto& [keyword, substitution] = *sub;

                json meta = {{"error_type", to_string(t)},
                             {"perturbed_keyword", keyword},
                             {"substitution", cfg.targeted_use_llm ? "llm" : "rule"}};
                if (!substitution.replacement.empty()) meta["replacement"] = substitution.replacement;

                std::optional<HardNegative> hn;
                const std::uint64_t seed = sample_seed(cfg, unit_id, kRetrieveStream);
                std::optional<std::string> preferred;
                if (!substitution.replacement.empty()) preferred = substitution.replacement;
                for (RetrievalMode mode : {RetrievalMode::Strict, RetrievalMode::Relaxed}) {
                    try {
                        hn = retrieve_hard_negative(*u.sample, t, keyword, index, seed, mode, preferred);
                        break;
                    } catch (const RetrievalMiss&) {
                    }
                }

                PreferencePair dpo = base_pair(*u.sample, Method::TargetedDpo, cfg);
                dpo.id = unit_id;
                dpo.rejected_text = substitution.text;
                if (hn) {
                    meta["hard_negative_id"] = hn->sample.id;
                    meta["hard_negative_keyword"] = hn->replacement;
                    meta["retrieval"] = hn->mode == RetrievalMode::Strict ? "strict" : "relaxed";
                } else {
                    meta["no_hard_negative"] = true;
                }
                dpo.meta = meta;
                if (hn) {
                    const std::string neg_image = relative_to_out(cfg, source_image(cfg, hn->sample));
                    PreferencePair copo = dpo;
                    copo.method = Method::TargetedCopo;
                    copo.rejected_text.reset();
                    copo.rejected_image = neg_image;
                    PreferencePair mdpo = dpo;
                    mdpo.method = Method::TargetedMdpo;
                    mdpo.rejected_image = neg_image;
                    r.pairs.push_back(std::move(copo));
                    r.pairs.push_back(std::move(mdpo));
                }
                r.pairs.push_back(std::move(dpo));
                ++produced;
                progress = true;
                break;
            }
        }
    }
    if (cfg.targeted_use_llm) check_skip_budget(r, attempted, cfg);
    std::stable_sort(r.pairs.begin(), r.pairs.end(), [](const PreferencePair& a, const PreferencePair& b) {
        return a.id != b.id ? a.id < b.id : a.method < b.method;
    });
    return r;
}

BuildResult build_pairs(const std::vector<Sample>& samples, const Clients& clients, const PairBuildConfig& cfg) {
    auto need_llm = [&]() -> llm::Client& {
        if (!clients.llm) throw ContractError(std::string(to_string(cfg.method)) + " needs an LLM client");
        return *clients.llm;
    };
    auto need_policy = [&]() -> PolicyClient& {
        if (!clients.policy) throw ContractError(std::string(to_string(cfg.method)) + " needs a policy");
        return *clients.policy;
    };
    switch (cfg.method) {
        case Method::TextHallu:
        case Method::TextHalluNll:
            return build_text_hallu(samples, need_llm(), cfg.method == Method::TextHalluNll, cfg);
        case Method::TextNoise:
        case Method::TextNoiseNll:
            return build_text_noise(samples, need_policy(), cfg.method == Method::TextNoiseNll, cfg);
        case Method::Irpo:
            return build_irpo(samples, need_policy(), cfg);
        case Method::ImageNoise:
        case Method::ImageRoi:
            return build_image_only(samples, cfg);
        case Method::Mdpo:
            return build_mdpo(samples, need_policy(), cfg);
        case Method::Mmedpo:
            return build_mmedpo(samples, need_llm(), cfg);
        case Method::TargetedDpo:
        case Method::TargetedCopo:
        case Method::TargetedMdpo: {
            const auto& lex = clients.lexicon ? *clients.lexicon : tagger::default_lexicon();
            const ImageIndex index = ImageIndex::build(samples, lex);
            BuildResult r = build_targeted(samples, clients.llm, index, lex, cfg);
            std::erase_if(r.pairs, [&](const PreferencePair& p) { return p.method != cfg.method; });
            return r;
        }
    }
    throw ContractError("unknown method");
}

}  // namespace medpo::pairgen
