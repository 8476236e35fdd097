#include <doctest.h>

#include <algorithm>

#include "../fixtures.hpp"
#include "medpo/core/error.hpp"
#include "medpo/core/rng.hpp"
#include "medpo/tagger.hpp"

using namespace medpo;
using namespace medpo::tagger;
using namespace medpo::testing;

TEST_SUITE("tagger") {
    TEST_CASE("chest CT caption") {
        const auto r = tag_sample("What is shown in this chest CT?", "A mass is seen in the right lung.",
                                  default_lexicon());
        CHECK(r.tags == TagMap{{ErrorType::MM, {"ct"}}, {ErrorType::SLC, {"right"}}, {ErrorType::AM, {"lung"}}});
        CHECK(r.tags.count(ErrorType::LAS) == 0);
        for (const auto& [t, kws] : r.tags)
            for (const auto& k : kws)
                CHECK(std::any_of(r.offsets.begin(), r.offsets.end(),
                                  [&](const TagOffset& o) { return o.phrase == k && o.category == t; }));
    }

    TEST_CASE("empty input tags nothing") { CHECK(tag_sample("", "", default_lexicon()).empty()); }

    TEST_CASE("short abbreviations are case-sensitive and word-bounded") {
        const auto& lex = default_lexicon();
        CHECK(tag_sample("", "thus the finding", lex).tags.count(ErrorType::MM) == 0);
        CHECK(tag_sample("", "please tell us more", lex).tags.count(ErrorType::MM) == 0);
        const auto r = tag_sample("", "Abdominal US shows a cyst", lex);
        REQUIRE(r.tags.count(ErrorType::MM) == 1);
        CHECK(r.tags.at(ErrorType::MM).count("us") == 1);
    }

    TEST_CASE("multiword phrases win over their parts") {
        const auto r = tag_sample("", "Opacity in the right upper lobe.", default_lexicon());
        REQUIRE(r.tags.count(ErrorType::SLC));
        CHECK(r.tags.at(ErrorType::SLC).count("upper lobe") == 1);
    }

    TEST_CASE("hyphen is a word boundary and offsets point at the normalized text") {
        const auto r = tag_sample("", "Left-sided effusion", default_lexicon());
        REQUIRE(r.tags.count(ErrorType::SLC));
        const auto norm = normalize_text("Left-sided effusion");
        for (const auto& o : r.offsets) {
            CHECK(o.source == TextSource::Response);
            CHECK(o.end <= norm.size());
        }
    }

    TEST_CASE("NFC normalisation and whitespace collapsing") {
        CHECK(normalize_text("a \t\n  b") == "a b");
        CHECK(normalize_text("e\xCC\x81") == "\xC3\xA9");  // e + combining acute -> é
    }

    TEST_CASE("result does not depend on lexicon entry order") {
        std::map<ErrorType, std::vector<LexiconEntry>> shuffled;
        Rng rng(3);
        for (ErrorType t : kAllErrorTypes) {
            auto v = default_lexicon().entries(t);
            for (std::size_t i = v.size(); i > 1; --i) std::swap(v[i - 1], v[rng.below(i)]);
            shuffled[t] = v;
        }
        const KeywordLexicon other(std::move(shuffled));
        for (const char* text : {"CT of the chest shows a nodule in the left upper lobe of the lung.",
                                 "MRI brain: lesion in the right frontal lobe", "Ultrasound of the liver"}) {
            CHECK(tag_sample("", text, other).tags == tag_sample("", text, default_lexicon()).tags);
        }
    }

    TEST_CASE("parent-only entries never tag") {
        for (const auto& e : default_lexicon().entries(ErrorType::LAS)) {
            if (!e.parent_only) continue;
            CHECK(tag_sample("", e.surface, default_lexicon()).tags.count(ErrorType::LAS) == 0);
        }
    }

    TEST_CASE("screen_vqa") {
        std::vector<VqaItem> items{{"q1", "Is the lesion in the left lobe?", "yes"},
                                   {"q2", "What color is the sky?", "blue"}};
        const auto out = screen_vqa(items, default_lexicon());
        CHECK(out.size() == 4);
        CHECK(out.at(ErrorType::SLC) == std::vector<std::string>{"q1"});
        CHECK(out.at(ErrorType::AM) == std::vector<std::string>{"q1"});
        CHECK(out.at(ErrorType::MM).empty());
        const auto empty = screen_vqa({}, default_lexicon());
        CHECK(empty.size() == 4);
        for (const auto& [t, ids] : empty) CHECK(ids.empty());
    }

    TEST_CASE("load_vqa_items: JSON array with q_lang filtering and JSONL") {
        TempDir tmp;
        spit(tmp / "slake.json",
             R"([{"qid":1,"question":"Which side?","answer":"Left","q_lang":"en"},
                 {"qid":2,"question":"哪里?","answer":"左","q_lang":"zh"}])");
        const auto a = load_vqa_items(tmp / "slake.json");
        REQUIRE(a.size() == 1);
        CHECK(a[0].id == "1");
        CHECK(a[0].answer == "Left");
        spit(tmp / "rad.jsonl", R"({"id":"r1","question":"Is there a fracture?","answer":"no"})"
                                "\n");
        CHECK(load_vqa_items(tmp / "rad.jsonl").size() == 1);
    }

    TEST_CASE("laterality_opposite") {
        CHECK(laterality_opposite("right") == "left");
        CHECK(laterality_opposite("Left-sided") == "Right-sided");
        CHECK(laterality_opposite("LEFT") == "RIGHT");
        CHECK_THROWS_AS(laterality_opposite("medial"), ContractError);
        for (const char* t : {"left", "Right", "right-sided", "LEFT-SIDED"})
            CHECK(laterality_opposite(laterality_opposite(t)) == t);
    }

    TEST_CASE("lexicon files") {
        const auto e = parse_lexicon_text("# c\nCT !cs !group=ct\ncomputed tomography !group=ct\n\nlobe !parent\n");
        REQUIRE(e.size() == 3);
        CHECK(e[0].canonical == "ct");
        CHECK(e[0].surface == "CT");
        CHECK(e[0].case_sensitive);
        CHECK(e[1].multiword);
        CHECK(e[1].group == "ct");
        CHECK(e[2].parent_only);
        CHECK_THROWS(parse_lexicon_text("ct !bogus\n"));

        TempDir tmp;
        for (ErrorType t : kAllErrorTypes) spit(tmp / lexicon_file_name(t), std::string(default_lexicon_text(t)));
        const auto loaded = load_lexicon_dir(tmp.path());
        for (ErrorType t : kAllErrorTypes)
            CHECK(loaded.entries(t).size() == default_lexicon().entries(t).size());
        spit(tmp / lexicon_file_name(ErrorType::AM), "# empty\n");
        CHECK_THROWS_AS(load_lexicon_dir(tmp.path()), ValidationError);
    }

    TEST_CASE("case helpers") {
        CHECK(detect_case("Lung") == CaseStyle::Title);
        CHECK(detect_case("LUNG") == CaseStyle::Upper);
        CHECK(detect_case("lung") == CaseStyle::Lower);
        CHECK(apply_case("left", CaseStyle::Title) == "Left");
        CHECK(apply_case("left", CaseStyle::Upper) == "LEFT");
    }
}
