#include "medpo/cli.hpp"

#include <csignal>
#include <fstream>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>
#include <json.hpp>

#include "medpo/annserve.hpp"
#include "medpo/core/dataset.hpp"
#include "medpo/core/digest.hpp"
#include "medpo/core/error.hpp"
#include "medpo/evalkit.hpp"
#include "medpo/losses.hpp"
#include "medpo/manifest.hpp"
#include "medpo/pairgen.hpp"
#include "medpo/tagger.hpp"
#include "medpo/toypolicy.hpp"
#include "medpo/version.hpp"

namespace medpo::cli {

namespace fs = std::filesystem;
using nlohmann::json;
using nlohmann::ordered_json;

namespace {

struct Context {
    std::vector<std::string> args;  // argv[1..]
    std::ostream& out;
    std::ostream& err;
    std::string started = utc_now_iso8601();
};

fs::path parent_or_dot(const fs::path& p) { return p.has_parent_path() ? p.parent_path() : fs::path("."); }

std::string relative_under(const fs::path& root, const fs::path& p) {
    return fs::absolute(p).lexically_normal().lexically_relative(fs::absolute(root).lexically_normal()).generic_string();
}

/// Manifest for a single output file: "<file>.manifest.json".
fs::path manifest_beside(const fs::path& file) {
    fs::path m = file;
    m += ".manifest.json";
    return m;
}

void finish_manifest(Context& ctx, RunManifest& m, const fs::path& manifest_path,
                     const std::vector<std::string>& out_flags = {"--out"}) {
    m.args = mask_args(ctx.args, out_flags);
    write_manifest(m, manifest_path, ctx.started, utc_now_iso8601());
}

tagger::KeywordLexicon lexicon_from(const std::string& dir) {
    return dir.empty() ? tagger::default_lexicon() : tagger::load_lexicon_dir(dir);
}

json prompt_hashes() {
    json j = json::object();
    for (auto t : {llm::Task::Hallucinate, llm::Task::Perturb, llm::Task::Decompose, llm::Task::Nli,
                   llm::Task::Rewrite})
        j[std::string(llm::to_string(t))] = llm::prompt_hash(t);
    j["version"] = llm::kPromptVersion;
    j["note"] = "prompt templates are reconstructions, not the original study prompts";
    return j;
}

DecodeMode parse_decoding(const std::string& s) {
    if (s == "greedy") return DecodeMode::Greedy;
    if (s == "sample") return DecodeMode::Sample;
    throw ContractError("decoding must be greedy or sample, got '" + s + "'");
}

// pairs build ------------------------------------------------------------------

struct PairsOpts {
    std::string method, in, out, llm = "mock", policy, lexicon_dir, image_root, decoding = "greedy";
    std::uint64_t seed = 0;
    double sigma = 50.0, keep_lo = 0.2, keep_hi = 0.5, temperature = 1.2, max_skip = 0.2;
    int irpo_n = 20, target_size = 10000, max_len = 48;
    bool no_roi_fallback = false, llm_substitution = false;
};

int cmd_pairs_build(Context& ctx, const PairsOpts& o) {
    pairgen::PairBuildConfig cfg;
    cfg.method = parse_method(o.method);
    cfg.seed = o.seed;
    cfg.perturb.sigma = o.sigma;
    cfg.perturb.keep_lo = o.keep_lo;
    cfg.perturb.keep_hi = o.keep_hi;
    cfg.irpo_n = o.irpo_n;
    cfg.irpo_temperature = o.temperature;
    cfg.target_size = o.target_size;
    cfg.decoding = parse_decoding(o.decoding);
    cfg.max_len = o.max_len;
    cfg.roi_fallback = !o.no_roi_fallback;
    cfg.targeted_use_llm = o.llm_substitution;
    cfg.max_skip_fraction = o.max_skip;
    cfg.image_root = o.image_root.empty() ? parent_or_dot(o.in) : fs::path(o.image_root);
    cfg.out_dir = o.out;
    pairgen::validate(cfg);

    const auto samples = load_samples(o.in);
    const auto lexicon = lexicon_from(o.lexicon_dir);
    fs::create_directories(cfg.out_dir);
    // Stale perturbed images from an earlier run would end up in the output digests.
    fs::remove_all(cfg.out_dir / "images");

    std::shared_ptr<llm::Client> client;
    const bool uses_llm = cfg.method == Method::TextHallu || cfg.method == Method::TextHalluNll ||
                          cfg.method == Method::Mmedpo || cfg.targeted_use_llm;
    if (uses_llm) client = llm::make_client(o.llm, llm::RetryPolicy{.seed = o.seed});

    std::unique_ptr<toy::ToyPolicyClient> policy;
    json policy_info;
    const bool uses_policy = cfg.method == Method::TextNoise || cfg.method == Method::TextNoiseNll ||
                             cfg.method == Method::Irpo || cfg.method == Method::Mdpo;
    if (uses_policy) {
        if (!o.policy.empty()) {
            auto ck = toy::load_checkpoint(o.policy);
            policy = std::make_unique<toy::ToyPolicyClient>(std::move(ck.params), std::move(ck.tokenizer));
            policy_info = {{"checkpoint", o.policy}, {"sha256", sha256_file(o.policy)}};
        } else {
            std::vector<std::string> corpus;
            for (const auto& s : samples) {
                corpus.push_back(s.prompt);
                corpus.push_back(s.response);
            }
            auto tok = toy::Tokenizer::build(corpus);
            auto params = toy::random_params(tok.size(), o.seed, 0.5);
            policy = std::make_unique<toy::ToyPolicyClient>(std::move(params), std::move(tok));
            policy_info = {{"checkpoint", nullptr}, {"init", "random_params(scale=0.5, seed)"}};
        }
    }

    pairgen::Clients clients{client.get(), policy.get(), &lexicon};
    const auto result = pairgen::build_pairs(samples, clients, cfg);

    const fs::path pairs_path = cfg.out_dir / "pairs.jsonl";
    save_pairs(result.pairs, pairs_path);
    std::string skipped;
    for (const auto& s : result.skipped) {
        ordered_json j;
        j["id"] = s.id;
        j["reason"] = s.reason;
        skipped += j.dump() + "\n";
    }
    write_text_atomic(cfg.out_dir / "skipped.jsonl", skipped);

    RunManifest m;
    m.command = "pairs build";
    m.config = pairgen::to_json(cfg);
    m.config["llm"] = uses_llm ? json(o.llm) : json(nullptr);
    m.seed = o.seed;
    m.inputs[o.in] = sha256_file(o.in);
    m.outputs["pairs.jsonl"] = sha256_file(pairs_path);
    m.outputs["skipped.jsonl"] = sha256_file(cfg.out_dir / "skipped.jsonl");
    for (const auto& img : result.written_images) m.outputs[relative_under(cfg.out_dir, img)] = sha256_file(img);
    m.counts["samples"] = static_cast<int>(samples.size());
    m.counts["pairs"] = static_cast<int>(result.pairs.size());
    m.counts["skipped"] = static_cast<int>(result.skipped.size());
    for (const auto& [reason, n] : result.skip_counts()) m.counts["skipped." + reason] = n;
    if (uses_llm) m.extra["prompts"] = prompt_hashes();
    if (uses_policy) m.extra["policy"] = policy_info;
    finish_manifest(ctx, m, cfg.out_dir / "manifest.json");

    ctx.out << pairs_path.string() << "\t" << result.pairs.size() << " pairs\t" << result.skipped.size()
            << " skipped\n";
    return kExitOk;
}

// tag / screen-vqa -------------------------------------------------------------------

int cmd_tag(Context& ctx, const std::string& in, const std::string& lexicon_dir, const std::string& out) {
    const auto lexicon = lexicon_from(lexicon_dir);
    auto samples = load_samples(in);
    std::map<std::string, int> counts;
    int untagged = 0;
    for (auto& s : samples) {
        const auto res = tagger::tag_sample(s.prompt, s.response, lexicon);
        if (res.empty()) {
            s.tags.reset();
            ++untagged;
        } else {
            s.tags = res.tags;
            for (const auto& [t, _] : res.tags) ++counts[std::string(to_string(t))];
        }
    }
    save_samples(samples, out);

    RunManifest m;
    m.command = "tag";
    m.config = {{"lexicon_dir", lexicon_dir.empty() ? json(nullptr) : json(lexicon_dir)}};
    m.inputs[in] = sha256_file(in);
    m.outputs[fs::path(out).filename().string()] = sha256_file(out);
    m.counts = counts;
    m.counts["samples"] = static_cast<int>(samples.size());
    m.counts["untagged"] = untagged;
    finish_manifest(ctx, m, manifest_beside(out));
    ctx.out << out << "\t" << samples.size() << " samples\t" << untagged << " untagged\n";
    return kExitOk;
}

int cmd_screen_vqa(Context& ctx, const std::vector<std::string>& datasets, const std::string& lexicon_dir,
                   const std::string& out, bool compare) {
    const auto lexicon = lexicon_from(lexicon_dir);
    std::vector<tagger::VqaItem> items;
    for (const auto& d : datasets) {
        auto part = tagger::load_vqa_items(d);
        const std::string prefix = datasets.size() > 1 ? fs::path(d).stem().string() + ":" : "";
        for (auto& it : part) {
            it.id = prefix + it.id;
            items.push_back(std::move(it));
        }
    }
    const auto screened = tagger::screen_vqa(items, lexicon);
    ordered_json result;
    result["items"] = items.size();
    ordered_json counts, ids;
    for (ErrorType t : kAllErrorTypes) {
        counts[std::string(to_string(t))] = screened.at(t).size();
        ids[std::string(to_string(t))] = screened.at(t);
    }
    result["counts"] = counts;
    if (compare) {
        // Reference totals over SLAKE + VQA-RAD + PathVQA; a +-15% band is reported, never enforced.
        const std::map<ErrorType, int> reference = {
            {ErrorType::MM, 557}, {ErrorType::SLC, 522}, {ErrorType::AM, 6233}, {ErrorType::LAS, 813}};
        ordered_json cmp;
        for (ErrorType t : kAllErrorTypes) {
            const double got = static_cast<double>(screened.at(t).size());
            const double ref = reference.at(t);
            const double dev = (got - ref) / ref;
            cmp[std::string(to_string(t))] = {{"reference", ref},
                                              {"observed", got},
                                              {"relative_deviation", dev},
                                              {"within_15pct", std::abs(dev) <= 0.15}};
            if (std::abs(dev) > 0.15)
                ctx.err << "note: " << to_string(t) << " count " << got << " deviates " << dev * 100.0
                        << "% from the reference " << ref << "\n";
        }
        result["reference_comparison"] = cmp;
    }
    result["ids"] = ids;
    write_text_atomic(out, result.dump(2) + "\n");

    RunManifest m;
    m.command = "screen-vqa";
    m.config = {{"lexicon_dir", lexicon_dir.empty() ? json(nullptr) : json(lexicon_dir)}};
    for (const auto& d : datasets) m.inputs[d] = sha256_file(d);
    m.outputs[fs::path(out).filename().string()] = sha256_file(out);
    for (ErrorType t : kAllErrorTypes) m.counts[std::string(to_string(t))] = static_cast<int>(screened.at(t).size());
    m.counts["items"] = static_cast<int>(items.size());
    finish_manifest(ctx, m, manifest_beside(out));
    ctx.out << counts.dump() << "\n";
    return kExitOk;
}

// train toy / gradcheck ---------------------------------------------------------------

struct TrainOpts {
    std::string pairs, loss, out, init, ref, history;
    double lr = 0.05, beta = 0.1, alpha = 1.0, delta = 0.0;
    int steps = 500;
    std::uint64_t seed = 0;
    bool rejected_on_perturbed = false;
};

int cmd_train(Context& ctx, const TrainOpts& o) {
    toy::TrainConfig cfg;
    cfg.loss = losses::parse_loss_kind(o.loss);
    cfg.loss_cfg = {o.beta, o.alpha, o.delta, o.rejected_on_perturbed};
    cfg.learning_rate = o.lr;
    cfg.steps = o.steps;
    cfg.seed = o.seed;
    toy::validate(cfg);

    const auto pairs = load_pairs(o.pairs);
    if (pairs.empty()) throw ContractError("no pairs in " + o.pairs);

    toy::Checkpoint init;
    if (!o.init.empty()) {
        init = toy::load_checkpoint(o.init);
    } else {
        std::vector<std::string> corpus;
        for (const auto& p : pairs) {
            corpus.push_back(p.prompt);
            corpus.push_back(p.chosen_text);
            if (p.rejected_text) corpus.push_back(*p.rejected_text);
        }
        init.tokenizer = toy::Tokenizer::build(corpus);
        init.params = toy::random_params(init.tokenizer.size(), o.seed, 0.01);
    }
    toy::ToyParams ref = init.params;
    if (!o.ref.empty()) {
        auto r = toy::load_checkpoint(o.ref);
        if (r.tokenizer.vocab() != init.tokenizer.vocab())
            throw ContractError("reference checkpoint uses a different vocabulary");
        ref = std::move(r.params);
    }

    const auto loader = toy::image_feature_loader(parent_or_dot(o.pairs));
    std::vector<toy::EncodedPair> encoded;
    encoded.reserve(pairs.size());
    for (const auto& p : pairs) encoded.push_back(toy::encode_pair(p, init.tokenizer, loader));

    const auto result = toy::train(encoded, init.params, ref, cfg);
    toy::save_checkpoint({result.params, init.tokenizer}, o.out);
    const fs::path history = o.history.empty() ? fs::path(o.out + ".history.csv") : fs::path(o.history);
    write_text_atomic(history, toy::history_csv(result.history));

    RunManifest m;
    m.command = "train toy";
    m.config = {{"loss", losses::to_string(cfg.loss)},
                {"beta", o.beta},
                {"alpha", o.alpha},
                {"delta", o.delta},
                {"mdpo_rejected_on_perturbed", o.rejected_on_perturbed},
                {"learning_rate", o.lr},
                {"steps", o.steps}};
    m.seed = o.seed;
    m.inputs[o.pairs] = sha256_file(o.pairs);
    if (!o.init.empty()) m.inputs[o.init] = sha256_file(o.init);
    if (!o.ref.empty()) m.inputs[o.ref] = sha256_file(o.ref);
    m.outputs[fs::path(o.out).filename().string()] = sha256_file(o.out);
    m.outputs[history.filename().string()] = sha256_file(history);
    m.counts["pairs"] = static_cast<int>(pairs.size());
    finish_manifest(ctx, m, manifest_beside(o.out), {"--out", "--history"});

    const auto& first = result.history.front();
    const auto& last = result.history.back();
    ctx.out << "loss " << first.loss << " -> " << last.loss << "\tpref_accuracy " << first.pref_accuracy << " -> "
            << last.pref_accuracy << "\n";
    return kExitOk;
}

int cmd_gradcheck(Context& ctx, const std::string& loss, int trials, double h, double tol, std::uint64_t seed) {
    std::vector<losses::LossKind> kinds;
    if (loss == "all") kinds.assign(std::begin(losses::kAllLossKinds), std::end(losses::kAllLossKinds));
    else kinds.push_back(losses::parse_loss_kind(loss));
    bool ok = true;
    for (auto k : kinds) {
        const auto rep = toy::grad_check(k, trials, h, tol, seed);
        ok = ok && rep.passed;
        ctx.out << losses::to_string(k) << "\ttrials=" << rep.trials << "\tentries=" << rep.entries_checked
                << "\tmax_rel_err=" << rep.max_rel_error << "\tmax_abs_err=" << rep.max_abs_error << "\t"
                << (rep.passed ? "PASS" : "FAIL") << "\n";
    }
    return ok ? kExitOk : kExitRuntime;
}

// eval ----------------------------------------------------------------------------------

std::map<std::string, json> by_id(const fs::path& path, std::vector<std::string>* order = nullptr) {
    std::map<std::string, json> out;
    for (const auto& [line, j] : read_jsonl(path)) {
        if (!j.is_object() || !j.contains("id") || !j["id"].is_string())
            throw ValidationError(path.string() + ": record needs a string 'id'", line);
        const auto id = j["id"].get<std::string>();
        if (!out.emplace(id, j).second) throw ValidationError(path.string() + ": duplicate id '" + id + "'", line);
        if (order) order->push_back(id);
    }
    return out;
}

std::string string_field(const json& j, const char* key, const std::string& where) {
    if (!j.contains(key) || !j[key].is_string()) throw ValidationError(where + ": missing string '" + key + "'");
    return j[key].get<std::string>();
}

void emit_results(Context& ctx, const ordered_json& results, const std::string& out) {
    ctx.out << results.dump(2) << "\n";
    if (!out.empty()) write_text_atomic(out, results.dump(2) + "\n");
}

int cmd_eval_vqa(Context& ctx, const std::string& pred, const std::string& gold, const std::string& matcher_s,
                 int iters, std::uint64_t seed, const std::string& out) {
    const auto matcher = eval::parse_matcher(matcher_s);
    std::vector<std::string> order;
    const auto golds = by_id(gold, &order);
    const auto preds = by_id(pred);
    if (golds.size() != preds.size())
        throw ContractError("prediction and gold files differ in size (" + std::to_string(preds.size()) + " vs " +
                            std::to_string(golds.size()) + ")");
    std::map<std::string, std::pair<std::vector<std::string>, std::vector<std::string>>> per_dataset;
    std::vector<double> hits;
    for (const auto& id : order) {
        auto it = preds.find(id);
        if (it == preds.end()) throw ContractError("no prediction for id '" + id + "'");
        const auto& g = golds.at(id);
        const std::string ds = g.value("dataset", std::string("all"));
        const auto p_ans = string_field(it->second, "answer", pred);
        const auto g_ans = string_field(g, "answer", gold);
        per_dataset[ds].first.push_back(p_ans);
        per_dataset[ds].second.push_back(g_ans);
        hits.push_back(eval::answers_match(p_ans, g_ans, matcher) ? 1.0 : 0.0);
    }
    const json config = {{"matcher", eval::to_string(matcher.kind)},
                         {"threshold", matcher.threshold},
                         {"iters", iters},
                         {"seed", seed}};
    ordered_json results = ordered_json::array();
    double sum = 0.0;
    for (const auto& [ds, lists] : per_dataset) {
        const double acc = eval::vqa_accuracy(lists.first, lists.second, matcher);
        sum += acc;
        results.push_back(eval::result_json("vqa:" + ds, "accuracy", acc, std::nullopt, lists.first.size(), config));
    }
    const auto bs = eval::bootstrap(hits, iters, seed);
    results.push_back(eval::result_json("vqa", "accuracy_mean_over_datasets", sum / per_dataset.size(),
                                        std::make_pair(bs.ci_lo, bs.ci_hi), hits.size(), config));
    emit_results(ctx, results, out);
    return kExitOk;
}

int cmd_eval_gen(Context& ctx, const std::string& outputs, const std::string& refs, const std::string& judge_spec,
                 int iters, std::uint64_t seed, const std::string& out, const std::string& details) {
    auto client = llm::make_client(judge_spec, llm::RetryPolicy{.seed = seed});
    std::vector<std::string> order;
    const auto references = by_id(refs, &order);
    const auto outs = by_id(outputs);
    std::vector<double> completeness, contradiction;
    std::string detail_lines;
    for (const auto& id : order) {
        auto it = outs.find(id);
        if (it == outs.end()) throw ContractError("no output for id '" + id + "'");
        const auto statements = eval::decompose_reference(string_field(references.at(id), "text", refs), *client);
        const auto text = string_field(it->second, "text", outputs);
        const auto verdicts = eval::judge(text, statements, *client);
        const auto res = eval::aggregate(verdicts);
        completeness.push_back(res.completeness);
        contradiction.push_back(res.contradiction);
        ordered_json d;
        d["id"] = id;
        d["statements"] = statements;
        d["verdicts"] = ordered_json::array();
        for (Verdict v : verdicts) d["verdicts"].push_back(to_string(v));
        d["completeness"] = res.completeness;
        d["contradiction"] = res.contradiction;
        detail_lines += d.dump() + "\n";
    }
    if (order.empty()) throw ContractError("no references in " + refs);
    const json config = {{"judge", judge_spec}, {"iters", iters}, {"seed", seed}, {"prompts", prompt_hashes()}};
    ordered_json results = ordered_json::array();
    for (const auto& [name, scores] : {std::pair{"completeness", &completeness}, {"contradiction", &contradiction}}) {
        double mean = 0.0;
        for (double s : *scores) mean += s;
        mean /= static_cast<double>(scores->size());
        const auto bs = eval::bootstrap(*scores, iters, seed);
        results.push_back(eval::result_json("gen", name, mean, std::make_pair(bs.ci_lo, bs.ci_hi), scores->size(),
                                            config));
    }
    if (!details.empty()) write_text_atomic(details, detail_lines);
    emit_results(ctx, results, out);
    return kExitOk;
}

int cmd_mimic_filter(Context& ctx, const std::string& in, const std::string& out, const std::string& llm_spec,
                     int min_words, std::uint64_t seed) {
    auto client = llm::make_client(llm_spec, llm::RetryPolicy{.seed = seed});
    const auto studies = eval::load_studies(in);
    eval::MimicConfig cfg;
    cfg.min_findings_words = min_words;
    const auto res = eval::mimic_filter(studies, *client, cfg);

    std::string kept, excluded;
    for (const auto& s : res.kept) kept += eval::to_json(s).dump() + "\n";
    for (const auto& e : res.excluded) {
        ordered_json j;
        j["study_id"] = e.study_id;
        j["rule"] = e.rule;
        j["reason"] = e.reason;
        if (!e.detail.empty()) j["detail"] = e.detail;
        excluded += j.dump() + "\n";
    }
    const fs::path excl_path = fs::path(out + ".exclusions.jsonl");
    write_text_atomic(out, kept);
    write_text_atomic(excl_path, excluded);

    RunManifest m;
    m.command = "eval mimic-filter";
    m.config = {{"min_findings_words", min_words}, {"llm", llm_spec}};
    m.seed = seed;
    m.inputs[in] = sha256_file(in);
    m.outputs[fs::path(out).filename().string()] = sha256_file(out);
    m.outputs[excl_path.filename().string()] = sha256_file(excl_path);
    m.counts = res.counts();
    m.counts["studies"] = static_cast<int>(studies.size());
    m.counts["kept"] = static_cast<int>(res.kept.size());
    m.extra["prompts"] = prompt_hashes();
    finish_manifest(ctx, m, manifest_beside(out));

    ordered_json summary;
    summary["kept"] = res.kept.size();
    summary["excluded"] = res.counts();
    ctx.out << summary.dump() << "\n";
    return kExitOk;
}

std::optional<std::pair<std::string, std::string>> parse_pair_list(const std::string& s) {
    if (s.empty()) return std::nullopt;
    const auto comma = s.find(',');
    if (comma == std::string::npos || s.find(',', comma + 1) != std::string::npos)
        throw ContractError("--annotators expects exactly two comma-separated names");
    return std::make_pair(s.substr(0, comma), s.substr(comma + 1));
}

int cmd_eval_agreement(Context& ctx, const std::string& path, const std::string& annotators) {
    const auto log = eval::load_annotations(path);
    try {
        ctx.out << eval::to_json(eval::agreement(log, parse_pair_list(annotators))).dump() << "\n";
    } catch (const eval::NoOverlapError& e) {
        throw ContractError(e.what());
    }
    return kExitOk;
}

// serve annotate ------------------------------------------------------------------------

annotate::AnnotationServer* g_server = nullptr;

extern "C" void on_signal(int) {
    if (g_server) g_server->stop();
}

int cmd_serve(Context& ctx, const std::string& store_dir, const std::string& host, int port,
              const std::string& annotators, const std::string& cors) {
    std::vector<std::string> names;
    if (!annotators.empty()) {
        std::stringstream ss(annotators);
        std::string n;
        while (std::getline(ss, n, ','))
            if (!n.empty()) names.push_back(n);
    }
    annotate::AnnotationStore store(store_dir, names);
    annotate::AnnotationServer server(store, {host, port, cors});
    const int bound = server.bind();
    ctx.err << "serving " << store.tasks().size() << " tasks on http://" << host << ":" << bound << "\n";
    g_server = &server;
    std::signal(SIGINT, on_signal);
    std::signal(SIGTERM, on_signal);
    server.run();
    g_server = nullptr;
    return kExitOk;
}

}  // namespace

int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
    Context ctx{{argv + 1, argv + argc}, out, err};

    CLI::App app{"Preference-pair curation, DPO-family losses and evaluation for medical vision-language models",
                 "medpo"};
    app.set_version_flag("--version", kVersion);
    app.set_config("--config", "", "TOML config file; flags override its values");
    app.require_subcommand(1);

    // pairs build
    PairsOpts po;
    auto* pairs = app.add_subcommand("pairs", "Preference-pair construction")->require_subcommand(1);
    auto* build = pairs->add_subcommand("build", "Build preference pairs from a samples file");
    build->add_option("--method", po.method, "Curation method")->required();
    build->add_option("--in", po.in, "Samples JSONL")->required()->check(CLI::ExistingFile);
    build->add_option("--out", po.out, "Output directory")->required();
    build->add_option("--seed", po.seed, "Seed");
    build->add_option("--llm", po.llm, "LLM backend: mock, http or an endpoint URL");
    build->add_option("--policy", po.policy, "Toy policy checkpoint used for self-generation");
    build->add_option("--lexicon-dir", po.lexicon_dir, "Keyword lexicon directory");
    build->add_option("--image-root", po.image_root, "Base directory of sample images");
    build->add_option("--sigma", po.sigma, "Gaussian noise sigma (0-255 units)");
    build->add_option("--keep-lo", po.keep_lo, "Lowest retained crop area fraction");
    build->add_option("--keep-hi", po.keep_hi, "Highest retained crop area fraction");
    build->add_option("--irpo-n", po.irpo_n, "Responses sampled per IRPO sample");
    build->add_option("--temperature", po.temperature, "IRPO sampling temperature");
    build->add_option("--target-size", po.target_size, "Targeted units to produce");
    build->add_option("--decoding", po.decoding, "greedy or sample for self-generation");
    build->add_option("--max-len", po.max_len, "Maximum generated tokens");
    build->add_option("--max-skip-fraction", po.max_skip, "Allowed fraction of LLM failures");
    build->add_flag("--no-roi-fallback", po.no_roi_fallback, "Skip samples without ROI boxes");
    build->add_flag("--llm-substitution", po.llm_substitution, "Targeted rejected text from the LLM");

    // tag
    std::string tag_in, tag_lex, tag_out;
    auto* tag = app.add_subcommand("tag", "Assign error-type tags to samples");
    tag->add_option("--in", tag_in, "Samples JSONL")->required()->check(CLI::ExistingFile);
    tag->add_option("--lexicon-dir", tag_lex, "Keyword lexicon directory");
    tag->add_option("--out", tag_out, "Tagged samples JSONL")->required();

    // screen-vqa
    std::vector<std::string> sv_datasets;
    std::string sv_lex, sv_out;
    bool sv_compare = false;
    auto* screen = app.add_subcommand("screen-vqa", "Partition VQA items by error type");
    screen->add_option("--dataset", sv_datasets, "VQA dataset file (JSON array or JSONL); repeatable")
        ->required()
        ->check(CLI::ExistingFile);
    screen->add_option("--lexicon-dir", sv_lex, "Keyword lexicon directory");
    screen->add_option("--out", sv_out, "Output JSON")->required();
    screen->add_flag("--compare-reference", sv_compare, "Report deviation from the published subset sizes");

    // train toy
    TrainOpts to;
    auto* train = app.add_subcommand("train", "Training")->require_subcommand(1);
    auto* toy_cmd = train->add_subcommand("toy", "Train the toy policy on a pairs file");
    toy_cmd->add_option("--pairs", to.pairs, "Pairs JSONL")->required()->check(CLI::ExistingFile);
    toy_cmd->add_option("--loss", to.loss, "Loss kind or method name")->required();
    toy_cmd->add_option("--lr", to.lr, "Learning rate");
    toy_cmd->add_option("--steps", to.steps, "Gradient steps");
    toy_cmd->add_option("--out", to.out, "Output checkpoint")->required();
    toy_cmd->add_option("--init", to.init, "Initial checkpoint (also fixes the vocabulary)");
    toy_cmd->add_option("--ref", to.ref, "Reference checkpoint (default: the initial parameters)");
    toy_cmd->add_option("--history", to.history, "History CSV path");
    toy_cmd->add_option("--beta", to.beta, "beta");
    toy_cmd->add_option("--alpha", to.alpha, "alpha");
    toy_cmd->add_option("--delta", to.delta, "delta");
    toy_cmd->add_option("--seed", to.seed, "Seed for the initial parameters");
    toy_cmd->add_flag("--mdpo-rejected-on-perturbed", to.rejected_on_perturbed,
                      "Score the mDPO rejected response on the perturbed image");

    // gradcheck
    std::string gc_loss;
    int gc_trials = 20;
    double gc_h = 1e-5, gc_tol = 1e-4;
    std::uint64_t gc_seed = 0;
    auto* gradcheck = app.add_subcommand("gradcheck", "Finite-difference check of a loss through the toy policy");
    gradcheck->add_option("--loss", gc_loss, "Loss kind, method name or 'all'")->required();
    gradcheck->add_option("--trials", gc_trials, "Random trials");
    gradcheck->add_option("--step", gc_h, "Central-difference step");
    gradcheck->add_option("--tol", gc_tol, "Relative error tolerance");
    gradcheck->add_option("--seed", gc_seed, "Seed");

    // eval
    auto* evalc = app.add_subcommand("eval", "Evaluation")->require_subcommand(1);
    std::string vqa_pred, vqa_gold, vqa_matcher = "exact", vqa_out;
    int vqa_iters = 100;
    std::uint64_t vqa_seed = 0;
    auto* vqa = evalc->add_subcommand("vqa", "VQA accuracy with bootstrap CI");
    vqa->add_option("--pred", vqa_pred, "Predictions JSONL {id, answer}")->required()->check(CLI::ExistingFile);
    vqa->add_option("--gold", vqa_gold, "Gold JSONL {id, answer, [dataset]}")->required()->check(CLI::ExistingFile);
    vqa->add_option("--matcher", vqa_matcher, "exact, token_f1 or token_f1:<threshold>");
    vqa->add_option("--iters", vqa_iters, "Bootstrap iterations");
    vqa->add_option("--seed", vqa_seed, "Bootstrap seed");
    vqa->add_option("--out", vqa_out, "Also write results here");

    std::string gen_outputs, gen_refs, gen_judge = "mock", gen_out, gen_details;
    int gen_iters = 100;
    std::uint64_t gen_seed = 0;
    auto* gen = evalc->add_subcommand("gen", "Statement-level completeness and contradiction");
    gen->add_option("--outputs", gen_outputs, "Model outputs JSONL {id, text}")->required()->check(CLI::ExistingFile);
    gen->add_option("--refs", gen_refs, "References JSONL {id, text}")->required()->check(CLI::ExistingFile);
    gen->add_option("--judge", gen_judge, "mock, http or an endpoint URL");
    gen->add_option("--iters", gen_iters, "Bootstrap iterations");
    gen->add_option("--seed", gen_seed, "Bootstrap seed");
    gen->add_option("--out", gen_out, "Also write results here");
    gen->add_option("--details", gen_details, "Per-item statements and verdicts JSONL");

    std::string mf_in, mf_out, mf_llm = "mock";
    int mf_words = 10;
    std::uint64_t mf_seed = 0;
    auto* mimic = evalc->add_subcommand("mimic-filter", "Curate MIMIC-CXR style studies");
    mimic->add_option("--in", mf_in, "Studies JSONL")->required()->check(CLI::ExistingFile);
    mimic->add_option("--out", mf_out, "Kept studies JSONL")->required();
    mimic->add_option("--llm", mf_llm, "Rewriter backend: mock, http or an endpoint URL");
    mimic->add_option("--min-words", mf_words, "Findings shorter than this are excluded");
    mimic->add_option("--seed", mf_seed, "Retry jitter seed");

    std::string ag_path, ag_names;
    auto* agree = evalc->add_subcommand("agreement", "Cohen's kappa over an annotation log");
    agree->add_option("--annotations", ag_path, "Annotation log JSONL")->required()->check(CLI::ExistingFile);
    agree->add_option("--annotators", ag_names, "Two comma-separated annotator names");

    // serve annotate
    std::string sv_store, sv_host = "127.0.0.1", sv_names, sv_cors = "*";
    int sv_port = 8080;
    auto* serve = app.add_subcommand("serve", "Services")->require_subcommand(1);
    auto* annot = serve->add_subcommand("annotate", "Expert-annotation HTTP service");
    annot->add_option("--store", sv_store, "Store directory")->required()->check(CLI::ExistingDirectory);
    annot->add_option("--port", sv_port, "Port (0 picks a free one)");
    annot->add_option("--host", sv_host, "Bind address");
    annot->add_option("--annotators", sv_names, "Comma-separated annotator names");
    annot->add_option("--cors-origin", sv_cors, "Allowed CORS origin");

    if (argc <= 1) {
        err << app.help();
        return kExitInvalid;
    }
    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e, out, err);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e, out, err);
    } catch (const CLI::CallForVersion& e) {
        return app.exit(e, out, err);
    } catch (const CLI::ParseError& e) {
        app.exit(e, err, err);
        return kExitInvalid;
    }

    try {
        if (*build) return cmd_pairs_build(ctx, po);
        if (*tag) return cmd_tag(ctx, tag_in, tag_lex, tag_out);
        if (*screen) return cmd_screen_vqa(ctx, sv_datasets, sv_lex, sv_out, sv_compare);
        if (*toy_cmd) return cmd_train(ctx, to);
        if (*gradcheck) return cmd_gradcheck(ctx, gc_loss, gc_trials, gc_h, gc_tol, gc_seed);
        if (*vqa) return cmd_eval_vqa(ctx, vqa_pred, vqa_gold, vqa_matcher, vqa_iters, vqa_seed, vqa_out);
        if (*gen) return cmd_eval_gen(ctx, gen_outputs, gen_refs, gen_judge, gen_iters, gen_seed, gen_out, gen_details);
        if (*mimic) return cmd_mimic_filter(ctx, mf_in, mf_out, mf_llm, mf_words, mf_seed);
        if (*agree) return cmd_eval_agreement(ctx, ag_path, ag_names);
        if (*annot) return cmd_serve(ctx, sv_store, sv_host, sv_port, sv_names, sv_cors);
    } catch (const ContractError& e) {
        err << "error: " << e.what() << "\n";
        return kExitInvalid;
    } catch (const ValidationError& e) {
        err << "error: " << e.what() << "\n";
        return kExitInvalid;
    } catch (const ParseError& e) {
        err << "error: " << e.what() << "\n";
        return kExitInvalid;
    } catch (const std::exception& e) {
        err << "error: " << e.what() << "\n";
        return kExitRuntime;
    }
    err << app.help();
    return kExitInvalid;
}

}  // namespace medpo::cli
