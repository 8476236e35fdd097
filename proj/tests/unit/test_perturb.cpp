#include <doctest.h>

#include <cmath>
#include <map>

#include "../fixtures.hpp"
#include "medpo/core/error.hpp"
#include "medpo/perturb.hpp"
#include "medpo/tagger.hpp"

using namespace medpo;
using namespace medpo::perturb;
using namespace medpo::testing;

namespace {

double normal_cdf(double x) { return 0.5 * std::erfc(-x / std::sqrt(2.0)); }

/// Exact first and second moments of clamp(round(v + e), 0, 255) - v, e ~ N(0, s^2).
std::pair<double, double> clamped_moments(int v, double s) {
    double m1 = 0, m2 = 0;
    for (int out = 0; out <= 255; ++out) {
        const double lo = out == 0 ? -INFINITY : (out - 0.5 - v) / s;
        const double hi = out == 255 ? INFINITY : (out + 0.5 - v) / s;
        const double p = normal_cdf(hi) - normal_cdf(lo);
        const double d = out - v;
        m1 += p * d;
        m2 += p * d * d;
    }
    return {m1, m2};
}

}  // namespace

TEST_SUITE("perturb") {
    TEST_CASE("gaussian noise: sigma 0 is the identity, fixed seed is deterministic") {
        const auto img = random_image(20, 10, 3);
        CHECK(gaussian_noise(img, 0.0, 9) == img);
        CHECK(gaussian_noise(img, 30.0, 9) == gaussian_noise(img, 30.0, 9));
        CHECK(gaussian_noise(img, 30.0, 9) != gaussian_noise(img, 30.0, 10));
    }

    TEST_CASE("gaussian noise statistics match the clamp-adjusted oracle") {
        const auto img = random_image(64, 64, 77);
        std::map<int, std::pair<double, double>> cache;
        double e1 = 0, e2 = 0;
        for (auto v : img.pixels) {
            auto it = cache.find(v);
            if (it == cache.end()) it = cache.emplace(v, clamped_moments(v, 50.0)).first;
            e1 += it->second.first;
            e2 += it->second.second;
        }
        const double n = static_cast<double>(img.pixels.size());
        const double expected_std = std::sqrt(e2 / n - (e1 / n) * (e1 / n));
        for (std::uint64_t seed = 0; seed < 10; ++seed) {
            const auto out = gaussian_noise(img, 50.0, seed);
            double s1 = 0, s2 = 0;
            for (std::size_t i = 0; i < out.pixels.size(); ++i) {
                const double d = static_cast<double>(out.pixels[i]) - img.pixels[i];
                s1 += d;
                s2 += d * d;
            }
            const double mean = s1 / n;
            const double sd = std::sqrt(s2 / n - mean * mean);
            CHECK(std::abs(mean) <= 2.0);
            CHECK(std::abs(sd - expected_std) <= 0.15 * expected_std);
        }
    }

    TEST_CASE("noise depends on the element index only") {
        const auto img = random_image(8, 8, 1);
        auto small = img;
        const auto a = gaussian_noise(img, 40.0, 5);
        // The same value at the same index gets the same noise in a different image.
        small.pixels[10] = static_cast<std::uint8_t>(small.pixels[10] ^ 0x55);
        const auto b = gaussian_noise(small, 40.0, 5);
        for (std::size_t i = 0; i < img.pixels.size(); ++i)
            if (i != 10) CHECK(a.pixels[i] == b.pixels[i]);
    }

    TEST_CASE("roi noise") {
        const auto img = random_image(16, 16, 2);
        CHECK(roi_noise(img, {}, 50.0, 1) == img);
        const std::vector<RoiBox> full{{0, 0, 16, 16}};
        CHECK(roi_noise(img, full, 50.0, 1) == gaussian_noise(img, 50.0, 1));
        const std::vector<RoiBox> corner{{0, 0, 8, 8}};
        const auto out = roi_noise(img, corner, 50.0, 1);
        int changed_inside = 0;
        for (int y = 0; y < 16; ++y)
            for (int x = 0; x < 16; ++x) {
                if (x >= 8 || y >= 8) CHECK(out.at(x, y) == img.at(x, y));
                else changed_inside += out.at(x, y) != img.at(x, y);
            }
        CHECK(changed_inside > 32);
        const std::vector<RoiBox> outside{{10, 10, 8, 8}};
        CHECK_THROWS_AS(roi_noise(img, outside, 50.0, 1), ContractError);
    }

    TEST_CASE("random crop") {
        const auto img = random_image(40, 30, 4);
        CHECK(random_crop(img, 1.0, 1.0, 3) == img);
        for (std::uint64_t seed = 0; seed < 1000; ++seed) {
            const auto r = crop_rect(40, 30, 0.2, 0.5, seed);
            const double frac = static_cast<double>(r.w * r.h) / (40.0 * 30.0);
            CHECK(frac >= 0.2 - 1e-12);
            CHECK(frac <= 0.5 + 1e-12);
            CHECK(r.x >= 0);
            CHECK(r.y >= 0);
            CHECK(r.x + r.w <= 40);
            CHECK(r.y + r.h <= 30);
        }
        CHECK(crop_rect(40, 30, 0.2, 0.5, 8) == crop_rect(40, 30, 0.2, 0.5, 8));
        const auto r = crop_rect(40, 30, 0.2, 0.5, 8);
        const auto c = random_crop(img, 0.2, 0.5, 8);
        REQUIRE(c.width == r.w);
        REQUIRE(c.height == r.h);
        for (int y = 0; y < c.height; ++y)
            for (int x = 0; x < c.width; ++x) CHECK(c.at(x, y) == img.at(r.x + x, r.y + y));
        CHECK_THROWS_AS(random_crop(random_image(1, 1, 1), 0.2, 0.3, 1), ContractError);
    }

    TEST_CASE("centered half-area box") {
        const auto b = centered_half_area_box(100, 50);
        CHECK(std::abs(b.w * b.h - 2500) <= 100);
        CHECK(b.x == (100 - b.w) / 2);
        CHECK(b.y == (50 - b.h) / 2);
    }

    TEST_CASE("spec validation") {
        PerturbSpec s;
        CHECK_NOTHROW(validate(s));
        s.sigma = -1;
        CHECK_THROWS_AS(validate(s), ContractError);
        s = {};
        s.keep_lo = 0.6;
        s.keep_hi = 0.5;
        CHECK_THROWS_AS(validate(s), ContractError);
        s.keep_lo = 0.0;
        CHECK_THROWS_AS(validate(s), ContractError);
    }

    TEST_CASE("keyword substitution: laterality") {
        const auto& lex = tagger::default_lexicon();
        const auto s = substitute_keyword("mass in the right lung", "right", ErrorType::SLC, lex, 1);
        CHECK(s.text == "mass in the left lung");
        CHECK(s.replacement == "left");
        const auto t = substitute_keyword("Right lung mass; right effusion.", "right", ErrorType::SLC, lex, 1);
        CHECK(t.text == "Left lung mass; left effusion.");
    }

    TEST_CASE("keyword substitution: modality keeps casing and stays in the lexicon") {
        const auto& lex = tagger::default_lexicon();
        for (std::uint64_t seed = 0; seed < 20; ++seed) {
            const auto s = substitute_keyword("chest CT scan", "ct", ErrorType::MM, lex, seed);
            CHECK(s.replacement != "ct");
            CHECK(s.replacement != "computed tomography");  // synonym group
            CHECK(lex.find(ErrorType::MM, s.replacement) != nullptr);
            CHECK(s.text.rfind("chest ", 0) == 0);
            CHECK(s.text.size() >= 11);
            CHECK(s.text.substr(s.text.size() - 5) == " scan");
            const std::string inserted = s.text.substr(6, s.text.size() - 11);
            const auto* e = lex.find(ErrorType::MM, s.replacement);
            // Upper case on an abbreviation is intrinsic, so the replacement keeps its own spelling.
            CHECK(inserted == (e->case_sensitive ? e->surface : e->canonical));
        }
        CHECK(substitute_keyword("chest CT scan", "ct", ErrorType::MM, lex, 4).text ==
              substitute_keyword("chest CT scan", "ct", ErrorType::MM, lex, 4).text);
    }

    TEST_CASE("keyword substitution errors") {
        const auto& lex = tagger::default_lexicon();
        CHECK_THROWS_AS(substitute_keyword("clear lungs", "right", ErrorType::SLC, lex, 1), NotFoundError);
        std::map<ErrorType, std::vector<tagger::LexiconEntry>> e;
        e[ErrorType::MM] = tagger::parse_lexicon_text("ct\n");
        e[ErrorType::SLC] = tagger::parse_lexicon_text("left\n");
        e[ErrorType::AM] = tagger::parse_lexicon_text("lung\n");
        e[ErrorType::LAS] = tagger::parse_lexicon_text("mass\n");
        const tagger::KeywordLexicon tiny(std::move(e));
        CHECK_THROWS_AS(substitute_keyword("a ct scan", "ct", ErrorType::MM, tiny, 1), ExhaustionError);
    }

    TEST_CASE("substitution only touches the matched span") {
        const auto& lex = tagger::default_lexicon();
        const std::string text = "Stable opacity in the LEFT lower lobe, unchanged.";
        const auto s = substitute_keyword(text, "left", ErrorType::SLC, lex, 3);
        CHECK(s.text == "Stable opacity in the RIGHT lower lobe, unchanged.");
    }
}
