#include <doctest.h>

#include <cmath>

#include "../fixtures.hpp"
#include "medpo/evalkit.hpp"

using namespace medpo;
using namespace medpo::eval;
using namespace medpo::testing;

namespace {

double kappa_oracle(const std::vector<std::string>& a, const std::vector<std::string>& b) {
    std::map<std::string, double> ma, mb;
    double agree = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        ma[a[i]] += 1;
        mb[b[i]] += 1;
        agree += a[i] == b[i];
    }
    const double n = static_cast<double>(a.size());
    double pe = 0;
    for (const auto& [k, v] : ma) pe += (v / n) * (mb.count(k) ? mb[k] / n : 0.0);
    return (agree / n - pe) / (1 - pe);
}

llm::Client mock_client() { return llm::Client(std::make_shared<llm::MockBackend>()); }

AnnotationRecord rec(std::string who, std::string id, Severity s, std::set<ErrorType> t = {}, bool calib = false) {
    return {std::move(who), std::move(id), s, std::move(t), "", calib};
}

}  // namespace

TEST_SUITE("evalkit") {
    TEST_CASE("answer normalisation and matchers") {
        CHECK(normalize_answer("  Yes. ") == "yes");
        CHECK(normalize_answer("Left   Lung!!") == "left lung");
        CHECK(answers_match("Yes.", "yes", {}));
        CHECK_FALSE(answers_match("yes", "no", {}));
        CHECK(token_f1("left lung", "the left lung") == doctest::Approx(0.8));
        CHECK(token_f1("", "") == 1.0);
        const Matcher f1{MatcherKind::TokenF1, 0.5};
        CHECK(answers_match("left lung", "the left lung", f1));
        CHECK_FALSE(answers_match("kidney", "the left lung", f1));
        CHECK(parse_matcher("token_f1:0.8").threshold == doctest::Approx(0.8));
        CHECK(parse_matcher("exact").kind == MatcherKind::Exact);
        CHECK_THROWS(parse_matcher("fuzzy"));
    }

    TEST_CASE("vqa_accuracy") {
        const std::vector<std::string> gold{"yes", "no", "CT", "left"};
        CHECK(vqa_accuracy(gold, gold) == 1.0);
        const std::vector<std::string> pred{" YES ", "yes", "mri", "right"};
        CHECK(vqa_accuracy(pred, gold) == doctest::Approx(0.25));
        const std::vector<std::string> shorter{"yes"};
        CHECK_THROWS_AS(vqa_accuracy(shorter, gold), ContractError);
        CHECK_THROWS_AS(vqa_accuracy({}, {}), ContractError);
    }

    TEST_CASE("percentile") {
        const std::vector<double> v{1, 2, 3, 4, 5};
        CHECK(percentile(v, 0) == 1);
        CHECK(percentile(v, 1) == 5);
        CHECK(percentile(v, 0.5) == 3);
        CHECK(percentile(v, 0.125) == doctest::Approx(1.5));
        CHECK_THROWS_AS(percentile(v, 50), ContractError);
    }

    TEST_CASE("bootstrap") {
        const std::vector<double> same(37, 0.42);
        const auto c = bootstrap(same, 100, 3);
        CHECK(c.mean == 0.42);
        CHECK(c.std == 0.0);
        CHECK(c.ci_lo == 0.42);
        CHECK(c.ci_hi == 0.42);

        std::vector<double> coin;
        for (int i = 0; i < 500; ++i) {
            coin.push_back(0);
            coin.push_back(1);
        }
        const auto r = bootstrap(coin, 100, 11);
        CHECK(r.iters == 100);
        const double expected = std::sqrt(0.25 / 1000);
        CHECK(r.std == doctest::Approx(expected).epsilon(0.2));
        CHECK(r.mean == doctest::Approx(0.5).epsilon(0.02));
        CHECK(r.ci_lo < r.mean);
        CHECK(r.ci_hi > r.mean);
        const auto again = bootstrap(coin, 100, 11);
        CHECK(again.std == r.std);
        CHECK(again.ci_lo == r.ci_lo);
        CHECK_THROWS_AS(bootstrap({}, 100, 0), ContractError);

        double prev = 1.0;
        for (int n : {100, 1000, 10000}) {
            std::vector<double> s;
            for (int i = 0; i < n; ++i) s.push_back(i % 2);
            const double sd = bootstrap(s, 200, 5).std;
            CHECK(sd < prev);
            prev = sd;
        }
    }

    TEST_CASE("decompose and judge with the mock") {
        auto llm = mock_client();
        CHECK(decompose_reference("Heart size is normal. There is a small effusion.", llm).size() == 2);
        CHECK(decompose_reference("Lungs are clear", llm).size() == 1);
        CHECK_THROWS_AS(decompose_reference("", llm), ContractError);

        const std::vector<std::string> st{"pleural effusion is present", "heart size is normal"};
        const auto v = judge("no pleural effusion. heart size is normal.", st, llm);
        REQUIRE(v.size() == 2);
        CHECK(v[0] == Verdict::Contradiction);
        CHECK(v[1] == Verdict::Entailment);
        const std::vector<std::string> one{"the liver is enlarged"};
        CHECK(judge("a fracture of the femur", one, llm)[0] == Verdict::Neutral);
    }

    TEST_CASE("aggregate") {
        using V = Verdict;
        const std::vector<V> mix{V::Entailment, V::Entailment, V::Partial, V::Neutral, V::Contradiction};
        const auto r = aggregate(mix);
        CHECK(r.completeness == doctest::Approx(0.5));
        CHECK(r.contradiction == doctest::Approx(0.2));
        CHECK(r.n_statements == 5);
        CHECK(aggregate(std::vector<V>(3, V::Entailment)).completeness == 1.0);
        const auto c = aggregate(std::vector<V>(4, V::Contradiction));
        CHECK(c.completeness == 0.0);
        CHECK(c.contradiction == 1.0);
        CHECK_THROWS_AS(aggregate({}), ContractError);

        Rng rng(4);
        for (int t = 0; t < 200; ++t) {
            std::vector<V> vs(1 + rng.below(12));
            for (auto& x : vs) x = static_cast<V>(rng.below(4));
            const auto g = aggregate(vs);
            CHECK(g.completeness >= 0);
            CHECK(g.contradiction <= 1);
            CHECK(g.completeness + g.contradiction <= 1 + 1e-12);
        }
    }

    TEST_CASE("cohens_kappa") {
        const std::vector<std::string> a{"y", "n", "y", "n"};
        CHECK(cohens_kappa(a, a) == 1.0);
        const std::vector<std::string> one{"y", "y"};
        CHECK(cohens_kappa(one, one) == 1.0);

        std::vector<std::string> x, y;
        for (int i = 0; i < 10; ++i) x.push_back("yes"), y.push_back("yes");
        for (int i = 0; i < 10; ++i) x.push_back("no"), y.push_back("no");
        for (int i = 0; i < 5; ++i) x.push_back("yes"), y.push_back("no");
        for (int i = 0; i < 5; ++i) x.push_back("no"), y.push_back("yes");
        CHECK(cohens_kappa(x, y) == doctest::Approx(1.0 / 3));

        const std::vector<std::string> p{"a", "a", "b", "b"}, q{"a", "b", "a", "b"};
        CHECK(cohens_kappa(p, q) == doctest::Approx(0.0));
        CHECK_THROWS_AS(cohens_kappa(p, one), ContractError);

        Rng rng(9);
        for (int t = 0; t < 100; ++t) {
            std::vector<std::string> u, w, ur, wr;
            for (int i = 0; i < 25; ++i) {
                u.push_back(std::string(1, static_cast<char>('a' + rng.below(3))));
                w.push_back(rng.below(2) ? u.back() : std::string(1, static_cast<char>('a' + rng.below(3))));
                ur.push_back(u.back() + "!");
                wr.push_back(w.back() + "!");
            }
            const double k = cohens_kappa(u, w);
            if (std::isnan(kappa_oracle(u, w))) continue;
            CHECK(k == doctest::Approx(kappa_oracle(u, w)));
            CHECK(k == doctest::Approx(cohens_kappa(w, u)));
            CHECK(k == doctest::Approx(cohens_kappa(ur, wr)));
        }
    }

    TEST_CASE("annotation records") {
        CHECK(parse_severity("minor") == Severity::Minor);
        CHECK_THROWS_AS(parse_severity("Mild"), ValidationError);
        const auto r = record_from_json(nlohmann::json::parse(
            R"({"annotator":"ann1","sample_id":"x","severity":"severe","error_types":["SLC","AM"]})"));
        CHECK(r.error_types == std::set<ErrorType>{ErrorType::SLC, ErrorType::AM});
        CHECK(record_from_json(to_json(r)) == r);
        CHECK_THROWS_AS(record_from_json(nlohmann::json::parse(
                            R"({"annotator":"a","sample_id":"x","severity":"none","bogus":1})")),
                        ValidationError);
        CHECK_THROWS_AS(record_from_json(nlohmann::json::parse(
                            R"({"annotator":"a","sample_id":"x","severity":"minor","error_types":["XX"]})")),
                        ValidationError);
        CHECK_THROWS_AS(validate(rec("a", "x", Severity::None, {ErrorType::MM})), ValidationError);
        CHECK_THROWS_AS(validate(rec("", "x", Severity::None)), ValidationError);
    }

    TEST_CASE("agreement") {
        std::vector<AnnotationRecord> log{
            rec("alice", "s1", Severity::Severe, {ErrorType::SLC}),
            rec("bob", "s1", Severity::Severe, {ErrorType::SLC}),
            rec("alice", "s2", Severity::None),
            rec("bob", "s2", Severity::Minor, {ErrorType::MM}),
            rec("bob", "s2", Severity::None),  // supersedes the previous bob/s2
            rec("alice", "s3", Severity::Minor, {ErrorType::AM}),
            rec("bob", "s3", Severity::Minor, {ErrorType::LAS}),
            rec("alice", "s4", Severity::Minor, {}, true),  // calibration, ignored
            rec("bob", "s4", Severity::Severe, {}, true),
            rec("carol", "s1", Severity::None),
        };
        CHECK(effective_records(log).size() == 7);
        const auto r = agreement(log);
        CHECK(r.annotator_a == "alice");
        CHECK(r.annotator_b == "bob");
        CHECK(r.n_overlap == 3);
        CHECK(r.kappa_severity == doctest::Approx(1.0));
        const std::vector<std::string> am_a{"1", "0", "0"}, am_b{"0", "0", "0"};
        CHECK(r.kappa_per_error_type.at(ErrorType::AM) == doctest::Approx(cohens_kappa(am_a, am_b)));
        CHECK(r.counts.at("alice").n == 3);
        CHECK(r.counts.at("alice").severity_pct.at(Severity::Minor) == doctest::Approx(100.0 / 3));

        const auto ac = agreement(log, std::make_pair(std::string("alice"), std::string("carol")));
        CHECK(ac.n_overlap == 1);
        CHECK_THROWS_AS(agreement(log, std::make_pair(std::string("bob"), std::string("dave"))), NoOverlapError);
        const auto j = to_json(r);
        CHECK(j["n_overlap"] == 3);
    }

    TEST_CASE("load_annotations reports line numbers") {
        TempDir tmp;
        spit(tmp / "a.jsonl", R"({"annotator":"a","sample_id":"x","severity":"none"})" "\n"
                              R"({"annotator":"a","sample_id":"y","severity":"awful"})" "\n");
        try {
            load_annotations(tmp / "a.jsonl");
            FAIL("expected a validation error");
        } catch (const ValidationError& e) {
            CHECK(std::string(e.what()).find('2') != std::string::npos);
        }
    }

    TEST_CASE("mimic_filter rules") {
        auto llm = mock_client();
        const std::string long_findings =
            "The lungs are clear. Compared to prior study there is no change. The heart size is normal and there "
            "is no pleural effusion.";
        std::vector<StudyRecord> studies{
            {"one", {{"a.png", "PA"}}, long_findings},
            {"two-frontal", {{"a.png", "PA"}, {"b.png", "AP"}}, long_findings},
            {"lateral", {{"a.png", "LATERAL"}}, long_findings},
            {"frontal+lat", {{"a.png", "ap"}, {"b.png", "LATERAL"}}, long_findings},
            {"short", {{"a.png", "PA"}}, "No acute cardiopulmonary process seen."},
            {"all-context", {{"a.png", "PA"}}, "Compared to prior exam, which was obtained in the emergency room, "
                                               "findings are unchanged."},
        };
        const auto r = mimic_filter(studies, llm);
        REQUIRE(r.kept.size() == 1);
        CHECK(r.kept[0].study_id == "one");
        CHECK(r.kept[0].findings.find("Compared") == std::string::npos);
        CHECK(r.kept[0].findings.find("The lungs are clear.") != std::string::npos);
        CHECK(r.kept[0].findings.find("no pleural effusion") != std::string::npos);
        const auto counts = r.counts();
        CHECK(counts.at("not_single_frontal") == 3);
        CHECK(counts.at("short_findings") == 1);
        CHECK(counts.at("rewrite_empty") == 1);
        for (const auto& e : r.excluded) {
            if (e.reason == "not_single_frontal") CHECK(e.rule == 1);
            if (e.reason == "short_findings") CHECK(e.rule == 2);
            if (e.reason == "rewrite_empty") CHECK(e.rule == 3);
        }
        CHECK(word_count("  six words are in this line ") == 6);
        CHECK(is_frontal("pa"));
        CHECK_FALSE(is_frontal("LL"));
    }

    TEST_CASE("study records") {
        const StudyRecord s{"id1", {{"x.png", "PA"}}, "text"};
        const auto back = study_from_json(to_json(s));
        CHECK(back.study_id == "id1");
        CHECK(back.images.size() == 1);
        CHECK_THROWS_AS(study_from_json(nlohmann::json::parse(R"({"images":[]})")), ValidationError);
    }

    TEST_CASE("result_json") {
        const auto j = result_json("vqa", "accuracy", 0.5, std::make_pair(0.4, 0.6), 10, {{"k", 1}});
        CHECK(j["task"] == "vqa");
        CHECK(j["ci95"][1] == 0.6);
        CHECK(j["n"] == 10);
        CHECK(j["config_hash"].get<std::string>().size() == 64);
        CHECK(result_json("vqa", "accuracy", 0.5, std::nullopt, 10, {})["ci95"].is_null());
    }
}
