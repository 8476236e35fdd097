#include <doctest.h>

#include <algorithm>

#include "../fixtures.hpp"
#include "medpo/core/error.hpp"
#include "medpo/llmclient.hpp"
#include "medpo/pairgen.hpp"
#include "medpo/rouge.hpp"
#include "medpo/toypolicy.hpp"

using namespace medpo;
using namespace medpo::pairgen;
using namespace medpo::testing;

namespace {

void put_png(const ImageBuffer& img, const fs::path& p) {
    fs::create_directories(p.parent_path());
    save_png(img, p);
}

/// Returns scripted answers in call order, cycling.
class ScriptedPolicy : public PolicyClient {
public:
    explicit ScriptedPolicy(std::vector<std::string> answers) : answers_(std::move(answers)) {}
    std::string generate(std::string_view, const ImageBuffer& img, const GenerateOptions& opts) override {
        seen_sizes.emplace_back(img.width, img.height);
        seen_opts.push_back(opts);
        return answers_[calls_++ % answers_.size()];
    }
    std::vector<std::pair<int, int>> seen_sizes;
    std::vector<GenerateOptions> seen_opts;

private:
    std::vector<std::string> answers_;
    std::size_t calls_ = 0;
};

class ThrowingPolicy : public PolicyClient {
public:
    std::string generate(std::string_view, const ImageBuffer&, const GenerateOptions&) override {
        throw RunError("policy offline");
    }
};

class EchoBackend : public llm::Backend {
public:
    nlohmann::json send(const llm::JudgeRequest& req) override { return {{"text", req.payload.at("text")}}; }
    std::string name() const override { return "echo"; }
};

class DownBackend : public llm::Backend {
public:
    nlohmann::json send(const llm::JudgeRequest&) override { throw TransportError("connection refused"); }
    std::string name() const override { return "down"; }
};

llm::Client client_for(std::shared_ptr<llm::Backend> b) {
    return llm::Client(std::move(b), llm::RetryPolicy{.max_retries = 0, .base_delay_ms = 0, .max_delay_ms = 0});
}

struct Env {
    TempDir tmp;
    std::vector<Sample> samples;
    PairBuildConfig cfg;

    explicit Env(int n = 4) {
        for (int i = 0; i < n; ++i) {
            Sample s;
            s.id = "s" + std::to_string(i);
            s.image = "images/" + s.id + ".png";
            s.prompt = "Describe the image.";
            s.response = "CT shows a mass in the right lung.";
            s.weight = 0.7;
            put_png(random_image(20, 16, 100 + i), tmp / s.image);
            samples.push_back(s);
        }
        cfg.image_root = tmp.path();
        cfg.out_dir = tmp.path();
        cfg.seed = 5;
    }
};

Sample tagged(const std::string& id, TagMap tags) {
    Sample s;
    s.id = id;
    s.image = "images/" + id + ".png";
    s.prompt = "q";
    s.response = "r";
    s.tags = std::move(tags);
    return s;
}

}  // namespace

TEST_SUITE("pairgen") {
    TEST_CASE("config validation") {
        PairBuildConfig c;
        CHECK_NOTHROW(validate(c));
        c.irpo_n = 1;
        CHECK_THROWS_AS(validate(c), ContractError);
        c = {};
        c.target_size = 0;
        CHECK_THROWS_AS(validate(c), ContractError);
        c = {};
        c.irpo_temperature = 0;
        CHECK_THROWS_AS(validate(c), ContractError);
    }

    TEST_CASE("text-hallu with the mock LLM") {
        Env env;
        auto client = client_for(std::make_shared<llm::MockBackend>());
        const auto r = build_text_hallu(env.samples, client, false, env.cfg);
        REQUIRE(r.pairs.size() == env.samples.size());
        for (const auto& p : r.pairs) {
            CHECK(p.method == Method::TextHallu);
            CHECK(p.rejected_text.has_value());
            CHECK(*p.rejected_text != p.chosen_text);
            CHECK_FALSE(p.rejected_image.has_value());
            CHECK(p.chosen_image == "images/" + p.id + ".png");
            CHECK_NOTHROW(validate_pair(p));
        }
        const auto nll = build_text_hallu(env.samples, client, true, env.cfg);
        CHECK(nll.pairs.front().method == Method::TextHalluNll);
        CHECK(build_text_hallu({}, client, false, env.cfg).pairs.empty());
    }

    TEST_CASE("text-hallu drops echoed replies") {
        Env env;
        auto client = client_for(std::make_shared<EchoBackend>());
        const auto r = build_text_hallu(env.samples, client, false, env.cfg);
        CHECK(r.pairs.empty());
        CHECK(r.skip_counts().at("echo") == 4);
    }

    TEST_CASE("LLM failures above the skip budget abort the run") {
        Env env;
        auto client = client_for(std::make_shared<DownBackend>());
        CHECK_THROWS_AS(build_text_hallu(env.samples, client, false, env.cfg), RunError);
        env.cfg.max_skip_fraction = 1.0;
        const auto r = build_text_hallu(env.samples, client, false, env.cfg);
        CHECK(r.skip_counts().at("llm_failure") == 4);
    }

    TEST_CASE("text-noise") {
        Env env(10);
        ScriptedPolicy policy({"a nodule in the left lung"});
        const auto r = build_text_noise(env.samples, policy, false, env.cfg);
        CHECK(r.pairs.size() == 10);
        for (const auto& p : r.pairs) {
            CHECK(*p.rejected_text == "a nodule in the left lung");
            CHECK_FALSE(p.rejected_image.has_value());
        }
        CHECK(policy.seen_opts.front().mode == DecodeMode::Greedy);

        ScriptedPolicy parrot({"CT shows a mass in the right lung."});
        const auto d = build_text_noise(env.samples, parrot, true, env.cfg);
        CHECK(d.pairs.empty());
        CHECK(d.skip_counts().at("degenerate_text") == 10);

        ThrowingPolicy broken;
        CHECK(build_text_noise(env.samples, broken, false, env.cfg).skip_counts().at("generation_failure") == 10);
    }

    TEST_CASE("text-noise with the toy policy is deterministic") {
        Env env;
        std::vector<std::string> corpus{env.samples[0].prompt, env.samples[0].response};
        const auto tok = toy::Tokenizer::build(corpus);
        toy::ToyPolicyClient policy(toy::random_params(tok.size(), 1, 0.5), tok);
        const auto a = build_text_noise(env.samples, policy, false, env.cfg);
        const auto b = build_text_noise(env.samples, policy, false, env.cfg);
        CHECK(a.pairs == b.pairs);
    }

    TEST_CASE("irpo picks the extremes of ROUGE-L") {
        Env env(1);
        env.cfg.irpo_n = 3;
        const std::string y = env.samples[0].response;
        ScriptedPolicy policy({"a mass in the lung", y, "banana"});
        const auto r = build_irpo(env.samples, policy, env.cfg);
        REQUIRE(r.pairs.size() == 1);
        const auto& p = r.pairs[0];
        CHECK(p.chosen_text == y);
        CHECK(*p.rejected_text == "banana");
        CHECK(p.meta["chosen_rouge"].get<double>() == doctest::Approx(1.0));
        CHECK(p.meta["rejected_rouge"].get<double>() == doctest::Approx(0.0));
        CHECK(p.meta["chosen_index"] == 1);
        CHECK(p.meta["rouge_variant"] == "rouge-l-f1");
        for (const auto& o : policy.seen_opts) {
            CHECK(o.mode == DecodeMode::Sample);
            CHECK(o.temperature == doctest::Approx(1.2));
        }
        ScriptedPolicy same({"identical answer"});
        const auto d = build_irpo(env.samples, same, env.cfg);
        CHECK(d.pairs.empty());
        CHECK(d.skip_counts().at("tied_scores") == 1);
    }

    TEST_CASE("irpo ties go to the earliest draw") {
        Env env(1);
        env.cfg.irpo_n = 4;
        ScriptedPolicy policy({"zzz", "CT shows a mass", "qqq", "CT shows a mass in"});
        const auto r = build_irpo(env.samples, policy, env.cfg);
        REQUIRE(r.pairs.size() == 1);
        CHECK(r.pairs[0].chosen_text == "CT shows a mass in");
        CHECK(*r.pairs[0].rejected_text == "zzz");
        CHECK(r.pairs[0].meta["rejected_index"] == 0);
    }

    TEST_CASE("image-noise writes a differing image, deterministically") {
        Env env(1);
        env.cfg.method = Method::ImageNoise;
        const auto r = build_image_only(env.samples, env.cfg);
        REQUIRE(r.pairs.size() == 1);
        const auto& p = r.pairs[0];
        CHECK(*p.rejected_image == "images/s0.image-noise.png");
        CHECK_FALSE(p.rejected_text.has_value());
        const auto a = load_image(env.tmp / *p.rejected_image);
        CHECK(a != load_image(env.tmp / p.chosen_image));
        const std::string bytes = slurp(env.tmp / *p.rejected_image);
        build_image_only(env.samples, env.cfg);
        CHECK(slurp(env.tmp / *p.rejected_image) == bytes);
        CHECK(r.written_images.size() == 1);
    }

    TEST_CASE("image-roi: boxes, fallback and skips") {
        Env env(3);
        env.cfg.method = Method::ImageRoi;
        env.samples[0].roi = std::vector<RoiBox>{{0, 0, 5, 5}};
        env.samples[1].roi = std::vector<RoiBox>{{18, 0, 5, 5}};  // out of bounds for a 20-wide image
        auto r = build_image_only(env.samples, env.cfg);
        CHECK(r.pairs.size() == 2);
        CHECK(r.skip_counts().at("roi_out_of_bounds") == 1);
        const auto out = load_image(env.tmp / *r.pairs[0].rejected_image);
        const auto in = load_image(env.tmp / r.pairs[0].chosen_image);
        for (int y = 0; y < in.height; ++y)
            for (int x = 0; x < in.width; ++x)
                if (x >= 5 || y >= 5) CHECK(out.at(x, y) == in.at(x, y));
        CHECK(r.pairs[1].meta.value("roi_fallback", false));

        env.cfg.roi_fallback = false;
        r = build_image_only(env.samples, env.cfg);
        CHECK(r.skip_counts().at("no_roi") == 1);
    }

    TEST_CASE("missing images are skipped") {
        Env env(2);
        env.samples[1].image = "images/missing.png";
        env.cfg.method = Method::ImageNoise;
        const auto r = build_image_only(env.samples, env.cfg);
        CHECK(r.pairs.size() == 1);
        CHECK(r.skip_counts().at("image_decode") == 1);
    }

    TEST_CASE("mdpo: crop, both rejected fields, identity crop dropped") {
        Env env(2);
        ScriptedPolicy policy({"unrelated answer"});
        const auto r = build_mdpo(env.samples, policy, env.cfg);
        REQUIRE(r.pairs.size() == 2);
        for (const auto& p : r.pairs) {
            CHECK(p.rejected_text.has_value());
            CHECK(p.rejected_image.has_value());
            const auto crop = load_image(env.tmp / *p.rejected_image);
            CHECK(crop.width * crop.height < 20 * 16);
            CHECK(p.meta["crop"].size() == 4);
        }
        CHECK(policy.seen_sizes.front().first < 20);

        env.cfg.perturb.keep_lo = 1.0;
        env.cfg.perturb.keep_hi = 1.0;
        ScriptedPolicy again({"unrelated answer"});
        const auto d = build_mdpo(env.samples, again, env.cfg);
        CHECK(d.pairs.empty());
        CHECK(d.skip_counts().at("degenerate_image") == 2);
    }

    TEST_CASE("mmedpo carries the sample weight and the ROI fallback") {
        Env env(1);
        auto client = client_for(std::make_shared<llm::MockBackend>());
        const auto r = build_mmedpo(env.samples, client, env.cfg);
        REQUIRE(r.pairs.size() == 1);
        const auto& p = r.pairs[0];
        CHECK(p.weight == doctest::Approx(0.7));
        CHECK(p.meta.value("roi_fallback", false));
        CHECK(p.rejected_text.has_value());
        CHECK(p.rejected_image.has_value());
        CHECK(build_mmedpo(env.samples, client, env.cfg).pairs == r.pairs);
    }

    TEST_CASE("hard-negative retrieval") {
        const tagger::KeywordLexicon& lex = tagger::default_lexicon();
        const TagMap anchor_tags{{ErrorType::MM, {"ct"}}, {ErrorType::AM, {"lung"}}, {ErrorType::SLC, {"right"}}};
        std::vector<Sample> samples{
            tagged("a", anchor_tags),
            tagged("b", {{ErrorType::MM, {"ct"}}, {ErrorType::AM, {"lung"}}, {ErrorType::SLC, {"left"}}}),
            tagged("c", {{ErrorType::MM, {"mri"}}, {ErrorType::AM, {"lung"}}, {ErrorType::SLC, {"left"}}}),
            tagged("d", {{ErrorType::MM, {"ct"}}, {ErrorType::AM, {"liver"}}, {ErrorType::SLC, {"right"}}}),
        };
        const auto index = ImageIndex::build(samples, lex);
        CHECK(signature(anchor_tags) == "MM=ct;SLC=right;AM=lung");
        const auto hn = retrieve_hard_negative(samples[0], ErrorType::SLC, "right", index, 1);
        CHECK(hn.sample.id == "b");
        CHECK(hn.replacement == "left");
        CHECK(hn.mode == RetrievalMode::Strict);

        const auto relaxed =
            retrieve_hard_negative(samples[3], ErrorType::SLC, "right", index, 1, RetrievalMode::Relaxed);
        CHECK(relaxed.sample.tags->at(ErrorType::SLC) == std::set<std::string>{"left"});
        CHECK_THROWS_AS(retrieve_hard_negative(samples[3], ErrorType::SLC, "right", index, 1), RetrievalMiss);

        const auto alone = ImageIndex::build({samples[0]}, lex);
        CHECK_THROWS_AS(retrieve_hard_negative(samples[0], ErrorType::SLC, "right", alone, 1), RetrievalMiss);
    }

    TEST_CASE("hard-negative choice is a stable seeded draw") {
        const auto& lex = tagger::default_lexicon();
        std::vector<Sample> samples{tagged("a", {{ErrorType::SLC, {"right"}}})};
        for (int i = 0; i < 6; ++i) samples.push_back(tagged("n" + std::to_string(i), {{ErrorType::SLC, {"left"}}}));
        const auto index = ImageIndex::build(samples, lex);
        std::set<std::string> picked;
        for (std::uint64_t seed = 0; seed < 30; ++seed) {
            const auto a = retrieve_hard_negative(samples[0], ErrorType::SLC, "right", index, seed);
            const auto b = retrieve_hard_negative(samples[0], ErrorType::SLC, "right", index, seed);
            CHECK(a.sample.id == b.sample.id);
            CHECK(a.sample.id != "a");
            picked.insert(a.sample.id);
        }
        CHECK(picked.size() > 1);
    }

    TEST_CASE("targeted: right-lung walkthrough") {
        TempDir tmp;
        std::vector<Sample> samples;
        const char* texts[] = {"CT shows a mass in the right lung.", "CT shows a mass in the left lung.",
                               "The view is unremarkable."};
        for (int i = 0; i < 3; ++i) {
            Sample s;
            s.id = "t" + std::to_string(i);
            s.image = "images/" + s.id + ".png";
            s.prompt = "Describe the image.";
            s.response = texts[i];
            put_png(random_image(12, 12, 40 + i), tmp / s.image);
            samples.push_back(s);
        }
        PairBuildConfig cfg;
        cfg.image_root = tmp.path();
        cfg.out_dir = tmp.path();
        cfg.method = Method::TargetedMdpo;
        const auto& lex = tagger::default_lexicon();
        const auto index = ImageIndex::build(samples, lex);
        CHECK(index.size() == 2);  // the untagged sample is not indexed
        const auto r = build_targeted(samples, nullptr, index, lex, cfg);
        const auto it = std::find_if(r.pairs.begin(), r.pairs.end(), [](const PreferencePair& p) {
            return p.id == "t0.SLC" && p.method == Method::TargetedMdpo;
        });
        REQUIRE(it != r.pairs.end());
        CHECK(*it->rejected_text == "CT shows a mass in the left lung.");
        CHECK(*it->rejected_image == "images/t1.png");
        CHECK(it->meta["error_type"] == "SLC");
        CHECK(it->meta["perturbed_keyword"] == "right");
        CHECK(it->meta["hard_negative_id"] == "t1");
        for (const auto& p : r.pairs) CHECK(p.id.rfind("t2", 0) != 0);
    }

    TEST_CASE("targeted: no hard negative gives a text-only pair") {
        TempDir tmp;
        Sample s;
        s.id = "only";
        s.image = "images/only.png";
        s.prompt = "q";
        s.response = "Opacity in the right lung.";
        put_png(random_image(8, 8, 1), tmp / s.image);
        PairBuildConfig cfg;
        cfg.image_root = tmp.path();
        cfg.out_dir = tmp.path();
        const auto& lex = tagger::default_lexicon();
        const auto r = build_targeted({s}, nullptr, ImageIndex::build({s}, lex), lex, cfg);
        REQUIRE_FALSE(r.pairs.empty());
        for (const auto& p : r.pairs) {
            CHECK(p.method == Method::TargetedDpo);
            CHECK(p.meta.value("no_hard_negative", false));
        }
    }

    TEST_CASE("targeted: round-robin balance and strict hard negatives") {
        TempDir tmp;
        const char* mods[] = {"CT", "MRI"};
        const char* sides[] = {"right", "left"};
        const char* organs[] = {"lung", "liver"};
        std::vector<Sample> samples;
        for (int i = 0; i < 40; ++i) {
            Sample s;
            s.id = "b" + std::to_string(100 + i);
            s.image = "images/" + s.id + ".png";
            s.prompt = "Describe the image.";
            s.response = std::string(mods[i % 2]) + " shows a nodule in the " + sides[(i / 2) % 2] + " " +
                         organs[(i / 4) % 2] + " at segment S" + std::to_string(1 + (i / 8) % 3) + ".";
            put_png(random_image(10, 10, 300 + i), tmp / s.image);
            samples.push_back(s);
        }
        PairBuildConfig cfg;
        cfg.image_root = tmp.path();
        cfg.out_dir = tmp.path();
        cfg.target_size = 100;
        cfg.seed = 3;
        const auto& lex = tagger::default_lexicon();
        const auto index = ImageIndex::build(samples, lex);
        const auto r = build_targeted(samples, nullptr, index, lex, cfg);
        std::map<std::string, int> per_cat;
        for (const auto& p : r.pairs)
            if (p.method == Method::TargetedDpo) ++per_cat[p.meta["error_type"].get<std::string>()];
        REQUIRE(per_cat.size() == 4);
        int lo = 1 << 30, hi = 0, total = 0;
        for (const auto& [c, n] : per_cat) {
            lo = std::min(lo, n);
            hi = std::max(hi, n);
            total += n;
        }
        CHECK(total == 100);
        CHECK(hi - lo <= 1);

        for (const auto& p : r.pairs) {
            CHECK_NOTHROW(validate_pair(p));
            if (p.rejected_text) CHECK(*p.rejected_text != p.chosen_text);
            if (!p.rejected_image || p.meta["retrieval"] != "strict") continue;
            const auto cat = parse_error_type(p.meta["error_type"].get<std::string>());
            const std::string anchor_id = p.id.substr(0, p.id.find('.'));
            const TagMap& a = *index.tags_of(anchor_id);
            const TagMap& b = *index.tags_of(p.meta["hard_negative_id"].get<std::string>());
            for (ErrorType t : kAllErrorTypes) {
                const bool same = (a.count(t) ? a.at(t) : std::set<std::string>{}) ==
                                  (b.count(t) ? b.at(t) : std::set<std::string>{});
                CHECK(same == (t != cat));
            }
        }
    }

    TEST_CASE("targeted via the LLM path uses perturb") {
        TempDir tmp;
        std::vector<Sample> samples;
        for (int i = 0; i < 2; ++i) {
            Sample s;
            s.id = "l" + std::to_string(i);
            s.image = "images/" + s.id + ".png";
            s.prompt = "q";
            s.response = i == 0 ? "Mass in the right lung." : "Mass in the left lung.";
            put_png(random_image(8, 8, 60 + i), tmp / s.image);
            samples.push_back(s);
        }
        PairBuildConfig cfg;
        cfg.image_root = tmp.path();
        cfg.out_dir = tmp.path();
        cfg.targeted_use_llm = true;
        auto client = client_for(std::make_shared<llm::MockBackend>());
        const auto& lex = tagger::default_lexicon();
        const auto r = build_targeted(samples, &client, ImageIndex::build(samples, lex), lex, cfg);
        REQUIRE_FALSE(r.pairs.empty());
        for (const auto& p : r.pairs) CHECK(p.meta["substitution"] == "llm");
        CHECK_FALSE(client.log().empty());
    }

    TEST_CASE("build_pairs dispatch and output determinism") {
        Env env(3);
        auto client = client_for(std::make_shared<llm::MockBackend>());
        ScriptedPolicy policy({"some answer", "other answer", "third"});
        Clients clients{&client, &policy, &tagger::default_lexicon()};
        for (Method m : kAllMethods) {
            env.cfg.method = m;
            env.cfg.irpo_n = 3;
            const auto r = build_pairs(env.samples, clients, env.cfg);
            for (const auto& p : r.pairs) {
                CHECK(p.method == m);
                CHECK_NOTHROW(validate_pair(p));
            }
            CHECK(std::is_sorted(r.pairs.begin(), r.pairs.end(),
                                 [](const auto& a, const auto& b) { return a.id < b.id; }));
        }
        Clients none{nullptr, nullptr, nullptr};
        env.cfg.method = Method::TextHallu;
        CHECK_THROWS_AS(build_pairs(env.samples, none, env.cfg), ContractError);
    }
}
