#pragma once

#include <algorithm>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <sstream>
#include <string>
#include <vector>

#include "medpo/cli.hpp"
#include "medpo/core/dataset.hpp"
#include "medpo/core/image.hpp"
#include "medpo/core/rng.hpp"
#include "medpo/core/types.hpp"
#include "medpo/tagger.hpp"

namespace medpo::testing {

namespace fs = std::filesystem;

/// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
public:
    TempDir() {
        std::string tmpl = (fs::temp_directory_path() / "medpo-test-XXXXXX").string();
        if (!::mkdtemp(tmpl.data())) throw std::runtime_error("mkdtemp failed");
        path_ = tmpl;
    }
    ~TempDir() {
        std::error_code ec;
        fs::remove_all(path_, ec);
    }
    TempDir(const TempDir&) = delete;
    TempDir& operator=(const TempDir&) = delete;

    const fs::path& path() const { return path_; }
    fs::path operator/(const std::string& name) const { return path_ / name; }

private:
    fs::path path_;
};

inline std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void spit(const fs::path& p, const std::string& text) {
    fs::create_directories(p.parent_path());
    std::ofstream(p, std::ios::binary) << text;
}

struct CliResult {
    int code = 0;
    std::string out;
    std::string err;
};

inline CliResult run_cli(std::vector<std::string> args) {
    args.insert(args.begin(), "medpo");
    std::vector<const char*> argv;
    for (const auto& a : args) argv.push_back(a.c_str());
    std::ostringstream out, err;
    CliResult r;
    r.code = cli::run(static_cast<int>(argv.size()), argv.data(), out, err);
    r.out = out.str();
    r.err = err.str();
    return r;
}

inline ImageBuffer random_image(int w, int h, std::uint64_t seed) {
    ImageBuffer img(w, h, 1);
    Rng rng(seed);
    for (auto& p : img.pixels) p = static_cast<std::uint8_t>(rng.below(256));
    return img;
}

/// Synthetic attribute-coded scan made of three horizontal bands, each lit on
/// its left or right half: modality (ct left, mri right), lesion side, and
/// organ (lung left, liver right). Every image has the same overall brightness.
struct Attributes {
    std::string modality;  // ct | mri
    std::string side;      // left | right
    std::string organ;     // lung | liver
};

inline ImageBuffer attribute_image(const Attributes& a, std::uint64_t seed, int size = 32) {
    ImageBuffer img(size, size, 1, 20);
    const int half = size / 2;
    const int band = size / 3;
    const bool lit_left[3] = {a.modality == "ct", a.side == "left", a.organ == "lung"};
    for (int y = 0; y < size; ++y) {
        const int b = std::min(2, y / band);
        for (int x = 0; x < half; ++x) img.at((lit_left[b] ? 0 : half) + x, y) = 230;
    }
    Rng rng(seed);
    for (auto& p : img.pixels)
        p = static_cast<std::uint8_t>(std::clamp<int>(p + static_cast<int>(rng.below(21)) - 10, 0, 255));
    return img;
}

inline std::string attribute_caption(const Attributes& a) {
    return a.modality + " scan shows a lesion in the " + a.side + " " + a.organ;
}

/// Lexicon restricted to the attribute vocabulary, so substitutions swap
/// between values the images can disambiguate.
inline tagger::KeywordLexicon attribute_lexicon() {
    std::map<ErrorType, std::vector<tagger::LexiconEntry>> e;
    e[ErrorType::MM] = tagger::parse_lexicon_text("ct\nmri\n", "mm");
    e[ErrorType::SLC] = tagger::parse_lexicon_text("left\nright\n", "slc");
    e[ErrorType::AM] = tagger::parse_lexicon_text("lung\nliver\n", "am");
    e[ErrorType::LAS] = tagger::parse_lexicon_text("organ !parent\n", "las");
    return tagger::KeywordLexicon(std::move(e));
}

/// `n` tagged samples with images written under `dir/images`. Image paths are
/// relative to `dir`.
inline std::vector<Sample> attribute_corpus(const fs::path& dir, int n, std::uint64_t seed,
                                            const std::string& prefix = "s") {
    static const char* kMods[] = {"ct", "mri"};
    static const char* kSides[] = {"left", "right"};
    static const char* kOrgans[] = {"lung", "liver"};
    const auto lexicon = attribute_lexicon();
    fs::create_directories(dir / "images");
    std::vector<Sample> out;
    Rng rng(seed);
    for (int i = 0; i < n; ++i) {
        Attributes a{kMods[rng.below(2)], kSides[rng.below(2)], kOrgans[rng.below(2)]};
        Sample s;
        s.id = prefix + std::to_string(1000 + i);
        s.image = "images/" + s.id + ".png";
        s.prompt = "describe the scan";
        s.response = attribute_caption(a);
        save_png(attribute_image(a, rng.next()), dir / s.image);
        s.tags = tagger::tag_sample(s.prompt, s.response, lexicon).tags;
        out.push_back(std::move(s));
    }
    return out;
}

/// Twenty radiology-style samples covering every error category, some with
/// ROI boxes and per-sample weights. Images are written under `dir/images`.
inline std::vector<Sample> pipeline_corpus(const fs::path& dir) {
    static const char* kCaptions[] = {
        "CT of the chest shows a mass in the right lung.",
        "CT of the chest shows a mass in the left lung.",
        "MRI of the brain shows a lesion in the left frontal lobe.",
        "MRI of the brain shows a lesion in the right frontal lobe.",
        "Chest X-ray shows an opacity in the right upper lobe.",
        "Chest X-ray shows an opacity in the left upper lobe.",
        "Ultrasound of the abdomen shows a cyst in the liver.",
        "Ultrasound of the abdomen shows a cyst in the kidney.",
        "CT of the abdomen shows a hypodense lesion in the liver.",
        "CT of the abdomen shows a hypodense lesion in the spleen.",
        "The heart size is normal and the lungs are clear.",
        "MRI shows an enhancing mass in the right temporal lobe.",
        "CT shows a fracture of the left femur.",
        "CT shows a fracture of the right femur.",
        "X-ray of the hand shows no fracture.",
        "There is a small right pleural effusion.",
        "There is a small left pleural effusion.",
        "MRI of the knee shows a tear of the medial meniscus.",
        "CT of the head shows hemorrhage in the left parietal lobe.",
        "Ultrasound shows gallstones in the gallbladder.",
    };
    fs::create_directories(dir / "images");
    std::vector<Sample> out;
    for (int i = 0; i < 20; ++i) {
        Sample s;
        s.id = "p" + std::to_string(100 + i);
        s.image = "images/" + s.id + ".png";
        s.prompt = "Describe the findings in this image.";
        s.response = kCaptions[i];
        s.weight = 0.5 + 0.05 * i;
        if (i % 3 == 0) s.roi = std::vector<RoiBox>{{4, 4, 12, 10}};
        save_png(random_image(24 + (i % 3) * 4, 24, 7000 + i), dir / s.image);
        out.push_back(std::move(s));
    }
    return out;
}

}  // namespace medpo::testing
