#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "medpo/core/types.hpp"
#include "medpo/llmclient.hpp"
#include "medpo/perturb.hpp"
#include "medpo/policy.hpp"
#include "medpo/tagger.hpp"

namespace medpo::pairgen {

struct PairBuildConfig {
    Method method = Method::TextHallu;
    perturb::PerturbSpec perturb;  // sigma and crop range; its seed is ignored
    int irpo_n = 20;
    double irpo_temperature = 1.2;
    std::uint64_t seed = 0;
    int target_size = 10000;

    DecodeMode decoding = DecodeMode::Greedy;  // Text-Noise and mDPO self-generation
    int max_len = 48;
    bool roi_fallback = true;
    bool targeted_use_llm = false;  // rule-based substitution unless set
    double max_skip_fraction = 0.2;

    /// Sample image paths are relative to this directory.
    std::filesystem::path image_root = ".";
    /// Pair image paths are written relative to this directory; perturbed
    /// images go to out_dir/images/{id}.{method}.png.
    std::filesystem::path out_dir = ".";
};

/// Throws ContractError on out-of-range fields.
void validate(const PairBuildConfig& cfg);
nlohmann::json to_json(const PairBuildConfig& cfg);

struct SkipRecord {
    std::string id;
    std::string reason;
};

struct BuildResult {
    std::vector<PreferencePair> pairs;
    std::vector<SkipRecord> skipped;
    std::vector<std::filesystem::path> written_images;  // absolute paths

    /// reason -> count.
    std::map<std::string, int> skip_counts() const;
};

// Text-only strategies -----------------------------------------------------

/// y_w = y, y_l = LLM hallucination of y. Echoed replies are dropped.
BuildResult build_text_hallu(const std::vector<Sample>& samples, llm::Client& llm, bool add_nll,
                             const PairBuildConfig& cfg);

/// y_l = policy answer on a Gaussian-noised copy of the image.
BuildResult build_text_noise(const std::vector<Sample>& samples, PolicyClient& policy, bool add_nll,
                             const PairBuildConfig& cfg);

/// n sampled answers ranked by ROUGE-L F1 against y; top-1 chosen, bottom-1 rejected.
BuildResult build_irpo(const std::vector<Sample>& samples, PolicyClient& policy, const PairBuildConfig& cfg);

// Image-only and joint strategies -------------------------------------------

/// Image-Noise or Image-ROI depending on cfg.method.
BuildResult build_image_only(const std::vector<Sample>& samples, const PairBuildConfig& cfg);

/// m_l = random crop of m; y_l = policy answer on m_l.
BuildResult build_mdpo(const std::vector<Sample>& samples, PolicyClient& policy, const PairBuildConfig& cfg);

/// y_l from the LLM, m_l = ROI-noised m, weight = sample weight.
BuildResult build_mmedpo(const std::vector<Sample>& samples, llm::Client& llm, const PairBuildConfig& cfg);

// Targeted error-type strategy ----------------------------------------------

/// Tag sets per sample plus a signature index for exact-match retrieval.
class ImageIndex {
public:
    /// Uses Sample::tags when present, otherwise tags with `lexicon`.
    /// Samples without any tag are not indexed.
    static ImageIndex build(const std::vector<Sample>& samples, const tagger::KeywordLexicon& lexicon);

    const TagMap* tags_of(const std::string& id) const;
    const Sample* sample(const std::string& id) const;
    /// Ids whose tag map has exactly this signature.
    const std::vector<std::string>& with_signature(const std::string& signature) const;
    /// Indexed ids in id order.
    std::vector<std::string> ids() const;
    /// Keywords seen per category across the index.
    const std::set<std::string>& observed(ErrorType t) const;

    std::size_t size() const noexcept { return tags_.size(); }

private:
    std::map<std::string, TagMap> tags_;
    std::map<std::string, Sample> samples_;
    std::map<std::string, std::vector<std::string>> by_signature_;
    std::map<ErrorType, std::set<std::string>> observed_;
};

/// Canonical text form of a tag map in category order, e.g. "MM=ct;SLC=right;AM=lung".
std::string signature(const TagMap& tags);

enum class RetrievalMode { Strict, Relaxed };

struct HardNegative {
    Sample sample;
    std::string replacement;  // keyword the candidate carries instead of the target
    RetrievalMode mode;
};

/// Strict: the candidate's tags equal the anchor's except that the target
/// keyword is swapped for one other keyword of the same category.
/// Relaxed: only the target category is compared (other keywords in it must
/// match); other categories are ignored.
/// When `preferred` is given and some candidate carries it, only those are
/// considered. Choice among candidates is a seeded uniform draw; the anchor is
/// never returned. Throws RetrievalMiss.
HardNegative retrieve_hard_negative(const Sample& anchor, ErrorType category, const std::string& keyword,
                                    const ImageIndex& index, std::uint64_t seed,
                                    RetrievalMode mode = RetrievalMode::Strict,
                                    const std::optional<std::string>& preferred = std::nullopt);

/// One unit per (sample, category), balanced round-robin across categories
/// until cfg.target_size units; each unit yields a targeted-dpo pair plus
/// targeted-copo and targeted-mdpo pairs when a hard negative image exists.
/// `llm` is only used when cfg.targeted_use_llm is set.
BuildResult build_targeted(const std::vector<Sample>& samples, llm::Client* llm, const ImageIndex& index,
                           const tagger::KeywordLexicon& lexicon, const PairBuildConfig& cfg);

struct Clients {
    llm::Client* llm = nullptr;
    PolicyClient* policy = nullptr;
    const tagger::KeywordLexicon* lexicon = nullptr;
};

/// Dispatches on cfg.method. For targeted methods only pairs of that variant are kept.
BuildResult build_pairs(const std::vector<Sample>& samples, const Clients& clients, const PairBuildConfig& cfg);

}  // namespace medpo::pairgen
