#include "medpo/toypolicy.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <mutex>
#include <set>
#include <sstream>

#include <json.hpp>

#include "medpo/core/dataset.hpp"
#include "medpo/core/error.hpp"
#include "medpo/core/rng.hpp"

namespace medpo::toy {

namespace fs = std::filesystem;
using nlohmann::json;
using losses::Field;
using losses::LossKind;

// Tokenizer -----------------------------------------------------------------

namespace {

const std::vector<std::string> kSpecials = {"<bos>", "<eos>", "<unk>"};

std::vector<std::string> split_words(std::string_view text) {
    std::vector<std::string> out;
    std::string cur;
    for (char ch : text) {
        const auto c = static_cast<unsigned char>(ch);
        if (std::isspace(c)) {
            if (!cur.empty()) out.push_back(std::move(cur));
            cur.clear();
        } else {
            cur += static_cast<char>(std::tolower(c));
        }
    }
    if (!cur.empty()) out.push_back(std::move(cur));
    return out;
}

}  // namespace

Tokenizer::Tokenizer() : vocab_(kSpecials) {
    for (std::size_t i = 0; i < vocab_.size(); ++i) ids_.emplace(vocab_[i], static_cast<int>(i));
}

Tokenizer Tokenizer::build(std::span<const std::string> corpus) {
    std::set<std::string> words;
    for (const auto& text : corpus)
        for (auto& w : split_words(text)) words.insert(std::move(w));
    std::vector<std::string> vocab = kSpecials;
    for (const auto& w : words)
        if (std::find(kSpecials.begin(), kSpecials.end(), w) == kSpecials.end()) vocab.push_back(w);
    return from_vocab(std::move(vocab));
}

Tokenizer Tokenizer::from_vocab(std::vector<std::string> words) {
    if (words.size() < kSpecials.size() || !std::equal(kSpecials.begin(), kSpecials.end(), words.begin()))
        throw ContractError("vocabulary must start with <bos>, <eos>, <unk>");
    Tokenizer t;
    t.vocab_ = std::move(words);
    t.ids_.clear();
    for (std::size_t i = 0; i < t.vocab_.size(); ++i)
        if (!t.ids_.emplace(t.vocab_[i], static_cast<int>(i)).second)
            throw ContractError("duplicate vocabulary entry '" + t.vocab_[i] + "'");
    return t;
}

std::vector<int> Tokenizer::encode(std::string_view text) const {
    std::vector<int> out;
    for (const auto& w : split_words(text)) {
        auto it = ids_.find(w);
        out.push_back(it == ids_.end() ? kUnk : it->second);
    }
    return out;
}

std::string Tokenizer::decode(std::span<const int> ids) const {
    std::string out;
    for (int id : ids) {
        if (id < 0 || id >= size()) throw ContractError("token id " + std::to_string(id) + " out of range");
        if (!out.empty()) out += ' ';
        out += vocab_[static_cast<std::size_t>(id)];
    }
    return out;
}

// Parameters ------------------------------------------------------------------

ToyParams::ToyParams(int V, int d)
    : vocab_size(V),
      feature_dim(d),
      w_tok(static_cast<std::size_t>(V) * V, 0.0),
      w_img(static_cast<std::size_t>(d) * V, 0.0),
      b(static_cast<std::size_t>(V), 0.0) {
    if (V < 2 || d < 1) throw ContractError("ToyParams needs V >= 2 and d >= 1");
}

double& ToyParams::flat(std::size_t i) {
    if (i < w_tok.size()) return w_tok[i];
    i -= w_tok.size();
    if (i < w_img.size()) return w_img[i];
    return b.at(i - w_img.size());
}

double ToyParams::flat(std::size_t i) const { return const_cast<ToyParams&>(*this).flat(i); }

void ToyParams::axpy(double a, const ToyParams& x) {
    for (std::size_t i = 0; i < w_tok.size(); ++i) w_tok[i] += a * x.w_tok[i];
    for (std::size_t i = 0; i < w_img.size(); ++i) w_img[i] += a * x.w_img[i];
    for (std::size_t i = 0; i < b.size(); ++i) b[i] += a * x.b[i];
}

void ToyParams::set_zero() {
    std::fill(w_tok.begin(), w_tok.end(), 0.0);
    std::fill(w_img.begin(), w_img.end(), 0.0);
    std::fill(b.begin(), b.end(), 0.0);
}

void validate(const ToyParams& p) {
    const auto V = static_cast<std::size_t>(p.vocab_size);
    const auto d = static_cast<std::size_t>(p.feature_dim);
    if (p.vocab_size < 2 || p.feature_dim < 1 || p.w_tok.size() != V * V || p.w_img.size() != d * V ||
        p.b.size() != V)
        throw ContractError("ToyParams dimensions are inconsistent");
    for (std::size_t i = 0; i < p.num_params(); ++i)
        if (!std::isfinite(p.flat(i))) throw ContractError("ToyParams contains a non-finite entry");
}

ToyParams random_params(int V, std::uint64_t seed, double scale, int d) {
    ToyParams p(V, d);
    Rng rng(mix_seed(seed, 0x706172616d73ULL));
    for (std::size_t i = 0; i < p.num_params(); ++i) p.flat(i) = scale * rng.normal();
    return p;
}

// Features ----------------------------------------------------------------------

namespace {

/// weights[cell][src]: overlap of source pixel src with output cell, divided by the cell width.
std::vector<std::vector<double>> pooling_weights(int src, int cells) {
    std::vector<std::vector<double>> w(static_cast<std::size_t>(cells), std::vector<double>(src, 0.0));
    const double width = static_cast<double>(src) / cells;
    for (int c = 0; c < cells; ++c) {
        const double lo = c * width, hi = (c + 1) * width;
        for (int x = static_cast<int>(std::floor(lo)); x < src && x < hi; ++x) {
            const double overlap = std::min(hi, x + 1.0) - std::max(lo, static_cast<double>(x));
            if (overlap > 0) w[c][x] = overlap / width;
        }
    }
    return w;
}

}  // namespace

Features extract_features(const ImageBuffer& img) {
    validate_image(img);
    constexpr int kGrid = 8;
    std::vector<double> gray(static_cast<std::size_t>(img.width) * img.height);
    for (int y = 0; y < img.height; ++y)
        for (int x = 0; x < img.width; ++x)
            gray[static_cast<std::size_t>(y) * img.width + x] =
                img.channels == 1 ? img.at(x, y)
                                  : 0.299 * img.at(x, y, 0) + 0.587 * img.at(x, y, 1) + 0.114 * img.at(x, y, 2);

    const auto wx = pooling_weights(img.width, kGrid);
    const auto wy = pooling_weights(img.height, kGrid);
    std::vector<double> rows(static_cast<std::size_t>(img.height) * kGrid, 0.0);  // [y][cx]
    for (int y = 0; y < img.height; ++y)
        for (int c = 0; c < kGrid; ++c) {
            double acc = 0.0;
            for (int x = 0; x < img.width; ++x) acc += wx[c][x] * gray[static_cast<std::size_t>(y) * img.width + x];
            rows[static_cast<std::size_t>(y) * kGrid + c] = acc;
        }
    Features f(kGrid * kGrid, 0.0);
    for (int r = 0; r < kGrid; ++r)
        for (int c = 0; c < kGrid; ++c) {
            double acc = 0.0;
            for (int y = 0; y < img.height; ++y) acc += wy[r][y] * rows[static_cast<std::size_t>(y) * kGrid + c];
            f[static_cast<std::size_t>(r) * kGrid + c] = acc / 255.0;
        }
    return f;
}

// Model -------------------------------------------------------------------------

namespace {

void check_tokens(const ToyParams& p, std::span<const int> ids) {
    for (int id : ids)
        if (id < 0 || id >= p.vocab_size)
            throw ContractError("token id " + std::to_string(id) + " outside vocabulary of size " +
                                std::to_string(p.vocab_size));
}

/// f^T W_img + b, constant over a sequence.
std::vector<double> image_bias(const ToyParams& p, std::span<const double> f) {
    if (static_cast<int>(f.size()) != p.feature_dim)
        throw ContractError("feature vector has " + std::to_string(f.size()) + " entries, model expects " +
                            std::to_string(p.feature_dim));
    const auto V = static_cast<std::size_t>(p.vocab_size);
    std::vector<double> z(p.b);
    for (std::size_t j = 0; j < f.size(); ++j) {
        if (f[j] == 0.0) continue;
        const double* row = &p.w_img[j * V];
        for (std::size_t k = 0; k < V; ++k) z[k] += f[j] * row[k];
    }
    return z;
}

/// In place: logits -> log-softmax.
void log_softmax(std::vector<double>& z) {
    const double mx = *std::max_element(z.begin(), z.end());
    double sum = 0.0;
    for (double v : z) sum += std::exp(v - mx);
    const double lse = mx + std::log(sum);
    for (double& v : z) v -= lse;
}

std::vector<double> logits_after(const ToyParams& p, int prev, const std::vector<double>& img_bias) {
    const auto V = static_cast<std::size_t>(p.vocab_size);
    std::vector<double> z(img_bias);
    const double* row = &p.w_tok[static_cast<std::size_t>(prev) * V];
    for (std::size_t k = 0; k < V; ++k) z[k] += row[k];
    return z;
}

}  // namespace

std::vector<double> next_logprobs(const ToyParams& p, int prev, std::span<const double> features) {
    check_tokens(p, std::span<const int>(&prev, 1));
    auto z = logits_after(p, prev, image_bias(p, features));
    log_softmax(z);
    return z;
}

double seq_logprob(const ToyParams& p, std::span<const int> prompt, std::span<const int> response,
                   std::span<const double> features, ToyParams* grad, double scale) {
    if (response.empty()) throw ContractError("response must contain at least one token");
    check_tokens(p, prompt);
    check_tokens(p, response);
    const auto V = static_cast<std::size_t>(p.vocab_size);
    const auto bias = image_bias(p, features);

    int prev = prompt.empty() ? kBos : prompt.back();
    double total = 0.0;
    std::vector<double> gsum(grad ? V : 0, 0.0);
    for (int y : response) {
        auto lp = logits_after(p, prev, bias);
        log_softmax(lp);
        total += lp[static_cast<std::size_t>(y)];
        if (grad) {
            // d log p_y / d z_k = [k == y] - p_k
            double* row = &grad->w_tok[static_cast<std::size_t>(prev) * V];
            for (std::size_t k = 0; k < V; ++k) {
                const double g = ((static_cast<int>(k) == y) ? 1.0 : 0.0) - std::exp(lp[k]);
                row[k] += scale * g;
                gsum[k] += g;
            }
        }
        prev = y;
    }
    if (grad) {
        for (std::size_t k = 0; k < V; ++k) grad->b[k] += scale * gsum[k];
        for (std::size_t j = 0; j < features.size(); ++j) {
            if (features[j] == 0.0) continue;
            double* row = &grad->w_img[j * V];
            const double fj = scale * features[j];
            for (std::size_t k = 0; k < V; ++k) row[k] += fj * gsum[k];
        }
    }
    return total;
}

std::vector<int> generate(const ToyParams& p, std::span<const int> prompt, std::span<const double> features,
                          const GenerateOptions& opts) {
    if (opts.max_len < 1) throw ContractError("max_len must be >= 1");
    if (opts.mode == DecodeMode::Sample && !(opts.temperature > 0.0))
        throw ContractError("temperature must be > 0 when sampling");
    check_tokens(p, prompt);
    const auto bias = image_bias(p, features);
    Rng rng(opts.seed);
    std::vector<int> out;
    int prev = prompt.empty() ? kBos : prompt.back();
    while (static_cast<int>(out.size()) < opts.max_len) {
        auto z = logits_after(p, prev, bias);
        int next = 0;
        if (opts.mode == DecodeMode::Greedy) {
            next = static_cast<int>(std::max_element(z.begin(), z.end()) - z.begin());
        } else {
            for (double& v : z) v /= opts.temperature;
            log_softmax(z);
            const double u = rng.uniform();
            double cum = 0.0;
            next = p.vocab_size - 1;
            for (int k = 0; k < p.vocab_size; ++k) {
                cum += std::exp(z[static_cast<std::size_t>(k)]);
                if (u < cum) {
                    next = k;
                    break;
                }
            }
        }
        if (next == kEos) break;
        out.push_back(next);
        prev = next;
    }
    return out;
}

// Pairs -------------------------------------------------------------------------

FeatureLoader image_feature_loader(fs::path base_dir) {
    struct Cache {
        std::mutex mu;
        std::map<std::string, Features> entries;
    };
    auto cache = std::make_shared<Cache>();
    return [cache, base = std::move(base_dir)](const std::string& path) -> Features {
        std::lock_guard lock(cache->mu);
        auto it = cache->entries.find(path);
        if (it != cache->entries.end()) return it->second;
        const fs::path p(path);
        Features f = extract_features(load_image(p.is_absolute() ? p : base / p));
        cache->entries.emplace(path, f);
        return f;
    };
}

EncodedPair encode_pair(const PreferencePair& pair, const Tokenizer& tok, const FeatureLoader& features) {
    EncodedPair e;
    e.method = pair.method;
    e.prompt = tok.encode(pair.prompt);
    e.chosen = tok.encode(pair.chosen_text);
    e.chosen.push_back(kEos);
    if (pair.rejected_text) {
        e.rejected = tok.encode(*pair.rejected_text);
        e.rejected->push_back(kEos);
    }
    e.chosen_features = features(pair.chosen_image);
    if (pair.rejected_image) e.rejected_features = features(*pair.rejected_image);
    e.weight = pair.weight;
    return e;
}

namespace {

struct Conditioning {
    const std::vector<int>* response;
    const Features* features;
};

Conditioning conditioning(const EncodedPair& pair, Field f) {
    const bool chosen_text = f == Field::PolWMw || f == Field::RefWMw || f == Field::PolWMl || f == Field::RefWMl;
    const bool chosen_image = f == Field::PolWMw || f == Field::RefWMw || f == Field::PolLMw || f == Field::RefLMw;
    const std::vector<int>* resp = chosen_text ? &pair.chosen : (pair.rejected ? &*pair.rejected : nullptr);
    const Features* feats =
        chosen_image ? &pair.chosen_features : (pair.rejected_features ? &*pair.rejected_features : nullptr);
    if (!resp)
        throw ContractError(std::string(losses::field_name(f)) + " needs a rejected response, pair (" +
                            std::string(to_string(pair.method)) + ") has none");
    if (!feats)
        throw ContractError(std::string(losses::field_name(f)) + " needs a rejected image, pair (" +
                            std::string(to_string(pair.method)) + ") has none");
    return {resp, feats};
}

Field reference_of(Field f) {
    switch (f) {
        case Field::PolWMw: return Field::RefWMw;
        case Field::PolLMl: return Field::RefLMl;
        case Field::PolLMw: return Field::RefLMw;
        case Field::PolWMl: return Field::RefWMl;
        default: return f;
    }
}

}  // namespace

losses::LogProbSet pair_logprobs(const ToyParams& policy, const ToyParams& ref, const EncodedPair& pair,
                                 LossKind kind, const losses::LossConfig& cfg) {
    losses::LogProbSet lp;
    lp.len_w = static_cast<int>(pair.chosen.size());
    for (Field f : losses::consumed_fields(kind, cfg)) {
        const auto c = conditioning(pair, f);
        lp.get(f) = seq_logprob(policy, pair.prompt, *c.response, *c.features);
        lp.get(reference_of(f)) = seq_logprob(ref, pair.prompt, *c.response, *c.features);
    }
    return lp;
}

losses::LogProbSet pair_logprobs(const ToyParams& policy, const ToyParams& ref, const EncodedPair& pair,
                                 const losses::LossConfig& cfg) {
    return pair_logprobs(policy, ref, pair, losses::loss_for_method(pair.method), cfg);
}

PairEval pair_loss(const ToyParams& policy, const ToyParams& ref, const EncodedPair& pair, LossKind kind,
                   const losses::LossConfig& cfg, ToyParams* grad, double grad_scale) {
    const auto lp = pair_logprobs(policy, ref, pair, kind, cfg);
    PairEval out{losses::evaluate(kind, lp, cfg, pair.weight), losses::preference_margin(kind, lp, cfg)};
    if (grad) {
        for (const auto& [field, d] : out.loss.grads) {
            if (d == 0.0) continue;
            const auto c = conditioning(pair, field);
            seq_logprob(policy, pair.prompt, *c.response, *c.features, grad, grad_scale * d);
        }
    }
    return out;
}

// Training ----------------------------------------------------------------------

void validate(const TrainConfig& cfg) {
    losses::validate(cfg.loss_cfg);
    if (!(cfg.learning_rate >= 0.0) || !std::isfinite(cfg.learning_rate))
        throw ContractError("learning_rate must be finite and >= 0");
    if (cfg.steps < 1) throw ContractError("steps must be >= 1");
}

namespace {

HistoryRow accumulate(const ToyParams& policy, const ToyParams& ref, std::span<const EncodedPair> pairs,
                      LossKind kind, const losses::LossConfig& cfg, ToyParams* grad) {
    const double inv_n = 1.0 / static_cast<double>(pairs.size());
    double loss = 0.0;
    int correct = 0;
    for (const auto& pr : pairs) {
        const PairEval e = pair_loss(policy, ref, pr, kind, cfg, grad, inv_n);
        loss += e.loss.value;
        if (e.margin > 0.0) ++correct;
    }
    return {0, loss * inv_n, static_cast<double>(correct) * inv_n};
}

}  // namespace

HistoryRow evaluate(const ToyParams& policy, const ToyParams& ref, std::span<const EncodedPair> pairs, LossKind kind,
                    const losses::LossConfig& cfg) {
    if (pairs.empty()) throw ContractError("no pairs to evaluate");
    return accumulate(policy, ref, pairs, kind, cfg, nullptr);
}

TrainResult train(std::span<const EncodedPair> pairs, const ToyParams& init, const ToyParams& ref,
                  const TrainConfig& cfg) {
    validate(cfg);
    validate(init);
    validate(ref);
    if (pairs.empty()) throw ContractError("training needs at least one pair");
    if (init.vocab_size != ref.vocab_size || init.feature_dim != ref.feature_dim)
        throw ContractError("policy and reference dimensions differ");

    TrainResult out{init, {}};
    out.history.reserve(static_cast<std::size_t>(cfg.steps) + 1);
    ToyParams grad(init.vocab_size, init.feature_dim);
    auto check = [](const HistoryRow& row) {
        if (!std::isfinite(row.loss))
            throw RunError("non-finite loss " + std::to_string(row.loss) + " at step " + std::to_string(row.step));
    };
    for (int step = 0; step < cfg.steps; ++step) {
        grad.set_zero();
        HistoryRow row = accumulate(out.params, ref, pairs, cfg.loss, cfg.loss_cfg, &grad);
        row.step = step;
        check(row);
        out.history.push_back(row);
        out.params.axpy(-cfg.learning_rate, grad);
    }
    HistoryRow last = accumulate(out.params, ref, pairs, cfg.loss, cfg.loss_cfg, nullptr);
    last.step = cfg.steps;
    check(last);
    out.history.push_back(last);
    return out;
}

// Gradient check ----------------------------------------------------------------

GradCheckReport grad_check(LossKind kind, int trials, double h, double tol, std::uint64_t seed) {
    if (!(h > 0.0) || !std::isfinite(h)) throw ContractError("grad_check step h must be > 0");
    if (trials < 1) throw ContractError("grad_check needs at least one trial");

    GradCheckReport rep;
    rep.loss = kind;
    rep.trials = trials;
    rep.tolerance = tol;
    constexpr double kScaleFloor = 1e-4;

    for (int t = 0; t < trials; ++t) {
        Rng rng(mix_seed(seed, static_cast<std::uint64_t>(t)));
        const int V = 6 + static_cast<int>(rng.below(5));
        const ToyParams policy = random_params(V, rng.next(), 0.5);
        const ToyParams ref = random_params(V, rng.next(), 0.5);

        auto tokens = [&](int lo, int hi) {
            std::vector<int> v(lo + rng.below(static_cast<std::uint64_t>(hi - lo + 1)));
            for (int& id : v) id = 3 + static_cast<int>(rng.below(static_cast<std::uint64_t>(V - 3)));
            return v;
        };
        auto feats = [&] {
            Features f(kFeatureDim);
            for (double& x : f) x = rng.uniform();
            return f;
        };
        EncodedPair pair;
        pair.method = Method::Mdpo;
        pair.prompt = tokens(0, 3);
        pair.chosen = tokens(1, 4);
        pair.chosen.push_back(kEos);
        pair.rejected = tokens(1, 4);
        pair.rejected->push_back(kEos);
        pair.chosen_features = feats();
        pair.rejected_features = feats();
        pair.weight = rng.uniform(0.2, 1.5);

        losses::LossConfig cfg;
        cfg.beta = rng.uniform(0.1, 1.0);
        cfg.alpha = rng.uniform(0.5, 1.5);
        cfg.delta = rng.uniform(-0.5, 0.5);

        ToyParams grad(V);
        pair_loss(policy, ref, pair, kind, cfg, &grad);

        ToyParams probe = policy;
        for (std::size_t i = 0; i < probe.num_params(); ++i) {
            const double x0 = probe.flat(i);
            probe.flat(i) = x0 + h;
            const double up = pair_loss(probe, ref, pair, kind, cfg).loss.value;
            probe.flat(i) = x0 - h;
            const double down = pair_loss(probe, ref, pair, kind, cfg).loss.value;
            probe.flat(i) = x0;
            const double numeric = (up - down) / (2.0 * h);
            const double analytic = grad.flat(i);
            const double abs_err = std::abs(numeric - analytic);
            rep.max_abs_error = std::max(rep.max_abs_error, abs_err);
            ++rep.entries_checked;
            const double rel = abs_err / std::max({std::abs(numeric), std::abs(analytic), kScaleFloor});
            rep.max_rel_error = std::max(rep.max_rel_error, rel);
        }
    }
    rep.passed = rep.max_rel_error < tol;
    return rep;
}

// Persistence -------------------------------------------------------------------

void save_checkpoint(const Checkpoint& ckpt, const fs::path& path) {
    validate(ckpt.params);
    if (ckpt.tokenizer.size() != ckpt.params.vocab_size)
        throw ContractError("tokenizer and parameter vocabulary sizes differ");
    nlohmann::ordered_json j;
    j["format"] = "medpo-toy-policy";
    j["version"] = 1;
    j["vocab_size"] = ckpt.params.vocab_size;
    j["feature_dim"] = ckpt.params.feature_dim;
    j["vocab"] = ckpt.tokenizer.vocab();
    j["w_tok"] = ckpt.params.w_tok;
    j["w_img"] = ckpt.params.w_img;
    j["b"] = ckpt.params.b;
    write_text_atomic(path, j.dump() + "\n");
}

Checkpoint load_checkpoint(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open checkpoint " + path.string());
    json j;
    try {
        j = json::parse(in);
    } catch (const json::exception& e) {
        throw ParseError(path.string() + ": " + e.what());
    }
    try {
        if (j.at("format") != "medpo-toy-policy" || j.at("version") != 1)
            throw ValidationError(path.string() + ": unsupported checkpoint format");
        Checkpoint c;
        c.params.vocab_size = j.at("vocab_size").get<int>();
        c.params.feature_dim = j.at("feature_dim").get<int>();
        c.params.w_tok = j.at("w_tok").get<std::vector<double>>();
        c.params.w_img = j.at("w_img").get<std::vector<double>>();
        c.params.b = j.at("b").get<std::vector<double>>();
        c.tokenizer = Tokenizer::from_vocab(j.at("vocab").get<std::vector<std::string>>());
        validate(c.params);
        if (c.tokenizer.size() != c.params.vocab_size)
            throw ValidationError(path.string() + ": vocabulary size does not match parameters");
        return c;
    } catch (const json::exception& e) {
        throw ValidationError(path.string() + ": " + e.what());
    } catch (const ContractError& e) {
        throw ValidationError(path.string() + ": " + e.what());
    }
}

std::string history_csv(std::span<const HistoryRow> history) {
    std::ostringstream os;
    os.precision(17);
    os << "step,loss,pref_accuracy\n";
    for (const auto& r : history) os << r.step << ',' << r.loss << ',' << r.pref_accuracy << '\n';
    return os.str();
}

std::string ToyPolicyClient::generate(std::string_view prompt, const ImageBuffer& image, const GenerateOptions& opts) {
    const auto ids = toy::generate(params_, tok_.encode(prompt), extract_features(image), opts);
    return tok_.decode(ids);
}

}  // namespace medpo::toy
