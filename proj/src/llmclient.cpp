#include "medpo/llmclient.hpp"

#include <algorithm>
#include <atomic>
#include <cctype>
#include <cmath>
#include <cstdlib>
#include <thread>

#include <httplib.h>

#include "embedded_data.inc"
#include "medpo/core/digest.hpp"
#include "medpo/core/error.hpp"
#include "medpo/core/rng.hpp"
#include "medpo/perturb.hpp"
#include "medpo/tagger.hpp"

namespace medpo::llm {

using nlohmann::json;

std::string_view to_string(Task t) noexcept {
    switch (t) {
        case Task::Hallucinate: return "hallucinate";
        case Task::Perturb: return "perturb";
        case Task::Decompose: return "decompose";
        case Task::Nli: return "nli";
        case Task::Rewrite: return "rewrite";
    }
    return "?";
}

Task parse_task(std::string_view s) {
    for (Task t : {Task::Hallucinate, Task::Perturb, Task::Decompose, Task::Nli, Task::Rewrite})
        if (s == to_string(t)) return t;
    throw ParseError("unknown LLM task '" + std::string(s) + "'");
}

namespace {

std::vector<std::string> required_keys(Task t) {
    switch (t) {
        case Task::Hallucinate:
        case Task::Decompose:
        case Task::Rewrite: return {"text"};
        case Task::Perturb: return {"text", "keyword", "category"};
        case Task::Nli: return {"statement", "output"};
    }
    return {};
}

}  // namespace

void validate(const JudgeRequest& req) {
    for (const std::string& k : required_keys(req.task))
        if (!req.payload.contains(k))
            throw ContractError("request for " + std::string(to_string(req.task)) + " lacks payload key '" + k + "'");
}

std::string_view prompt_template(Task t) {
    switch (t) {
        case Task::Hallucinate: return embedded::kPromptHallucinate;
        case Task::Perturb: return embedded::kPromptPerturb;
        case Task::Decompose: return embedded::kPromptDecompose;
        case Task::Nli: return embedded::kPromptNli;
        case Task::Rewrite: return embedded::kPromptRewrite;
    }
    return {};
}

std::string render_prompt(const JudgeRequest& req) {
    std::string out(prompt_template(req.task));
    for (const auto& [key, value] : req.payload) {
        const std::string placeholder = "{{" + key + "}}";
        for (auto pos = out.find(placeholder); pos != std::string::npos;
             pos = out.find(placeholder, pos + value.size()))
            out.replace(pos, placeholder.size(), value);
    }
    return out;
}

std::string prompt_hash(Task t) {
    return sha256_hex(prompt_template(t));
}

json to_wire(const JudgeRequest& req) {
    json j;
    j["task"] = std::string(to_string(req.task));
    j["prompt_version"] = std::string(kPromptVersion);
    j["prompt"] = render_prompt(req);
    j["payload"] = req.payload;
    return j;
}

JudgeResponse parse_reply(Task task, const json& reply) {
    if (!reply.is_object()) throw ProtocolError("reply is not a JSON object");
    JudgeResponse r;
    r.task = task;
    switch (task) {
        case Task::Hallucinate:
        case Task::Perturb:
        case Task::Rewrite: {
            auto it = reply.find("text");
            if (it == reply.end() || !it->is_string()) throw ProtocolError("reply lacks string field 'text'");
            r.text = it->get<std::string>();
            if (r.text.empty() && task != Task::Rewrite)
                throw ProtocolError("empty text reply for " + std::string(to_string(task)));
            break;
        }
        case Task::Decompose: {
            auto it = reply.find("statements");
            if (it == reply.end() || !it->is_array()) throw ProtocolError("reply lacks array field 'statements'");
            for (const json& s : *it) {
                if (!s.is_string() || s.get<std::string>().empty())
                    throw ProtocolError("statements must be non-empty strings");
                r.statements.push_back(s.get<std::string>());
            }
            if (r.statements.empty()) throw ProtocolError("empty decomposition");
            break;
        }
        case Task::Nli: {
            auto it = reply.find("verdict");
            if (it == reply.end() || !it->is_string()) throw ProtocolError("reply lacks string field 'verdict'");
            r.verdict = parse_verdict(it->get<std::string>());
            break;
        }
    }
    return r;
}

// ---------------------------------------------------------------- mock

namespace {

std::string normalize_for_nli(std::string_view s) {
    std::string out;
    bool space = false;
    for (char ch : s) {
        const auto c = static_cast<unsigned char>(ch);
        if (std::isalnum(c) || c >= 0x80) {
            if (space && !out.empty()) out += ' ';
            space = false;
            out += static_cast<char>(std::tolower(c));
        } else {
            space = true;
        }
    }
    return out;
}

std::vector<std::string> words(std::string_view normalized) {
    std::vector<std::string> out;
    std::size_t pos = 0;
    while (pos < normalized.size()) {
        auto sp = normalized.find(' ', pos);
        if (sp == std::string_view::npos) sp = normalized.size();
        if (sp > pos) out.emplace_back(normalized.substr(pos, sp - pos));
        pos = sp + 1;
    }
    return out;
}

bool contains_phrase(const std::string& hay, const std::string& needle) {
    if (needle.empty()) return false;
    const std::string h = " " + hay + " ";
    return h.find(" " + needle + " ") != std::string::npos;
}

bool is_stopword(const std::string& w) {
    static const char* const kStop[] = {"is",   "are",   "was",     "were",       "be",     "there", "present",
                                        "seen", "noted", "visible", "identified", "the",    "a",     "an",
                                        "of",   "in",    "on",      "at",         "with",   "and",   "or",
                                        "to",   "shows", "show",    "demonstrated", "no",   "not",   "without"};
    return std::any_of(std::begin(kStop), std::end(kStop), [&](const char* s) { return w == s; });
}

bool is_negation_cue(const std::string& w) {
    return w == "no" || w == "not" || w == "without" || w == "absent" || w == "negative" || w == "free";
}

Verdict mock_nli(std::string_view statement, std::string_view output) {
    const std::string st = normalize_for_nli(statement);
    const std::string out = normalize_for_nli(output);
    if (contains_phrase(out, st)) return Verdict::Entailment;

    const auto st_words = words(st);
    std::size_t i = 0;
    while (i < st_words.size() && is_stopword(st_words[i])) ++i;
    const bool statement_negated =
        std::any_of(st_words.begin(), st_words.begin() + static_cast<std::ptrdiff_t>(i), is_negation_cue);
    std::string head;
    while (i < st_words.size() && !is_stopword(st_words[i])) head = st_words[i++];
    if (head.empty() || statement_negated) return Verdict::Neutral;

    const auto out_words = words(out);
    for (std::size_t k = 0; k < out_words.size(); ++k) {
        if (out_words[k] != head) continue;
        for (std::size_t back = 1; back <= 3 && back <= k; ++back)
            if (is_negation_cue(out_words[k - back])) return Verdict::Contradiction;
    }
    return Verdict::Neutral;
}

std::vector<std::string> split_sentences(std::string_view text) {
    std::vector<std::string> out;
    std::string cur;
    for (std::size_t i = 0; i < text.size(); ++i) {
        cur += text[i];
        const bool end_mark = text[i] == '.' || text[i] == '!' || text[i] == '?';
        const bool at_break = i + 1 == text.size() || std::isspace(static_cast<unsigned char>(text[i + 1]));
        if (end_mark && at_break) {
            out.push_back(cur);
            cur.clear();
        }
    }
    out.push_back(cur);
    std::vector<std::string> trimmed;
    for (std::string& s : out) {
        const auto b = s.find_first_not_of(" \t\r\n");
        if (b == std::string::npos) continue;
        const auto e = s.find_last_not_of(" \t\r\n");
        trimmed.push_back(s.substr(b, e - b + 1));
    }
    return trimmed;
}

constexpr const char* kFabricatedFindings[] = {
    "There is a small left apical pneumothorax.",
    "A 2 cm nodule is seen in the right upper lobe.",
    "Mild cardiomegaly is present.",
    "There is a displaced fracture of the left clavicle.",
    "A moderate right pleural effusion is noted.",
    "There is free air under the diaphragm.",
};

constexpr const char* kExternalContext[] = {
    "compared", "comparison", "prior", "previous", "previously", "history", "interval",
    "notified", "discussed", "recommend", "recommended", "clinical correlation", "as before",
};

std::string mock_rewrite(std::string_view text) {
    std::string out;
    for (const std::string& sentence : split_sentences(text)) {
        const std::string norm = normalize_for_nli(sentence);
        const bool external = std::any_of(std::begin(kExternalContext), std::end(kExternalContext),
                                          [&](const char* p) { return contains_phrase(norm, p); });
        if (external) continue;
        if (!out.empty()) out += ' ';
        out += sentence;
    }
    return out;
}

}  // namespace

json MockBackend::send(const JudgeRequest& req) {
    validate(req);
    const auto& p = req.payload;
    switch (req.task) {
        case Task::Hallucinate: {
            const std::string& text = p.at("text");
            const auto n = std::size(kFabricatedFindings);
            std::string out = text;
            const auto last = out.find_last_not_of(" \t\r\n");
            out.erase(last == std::string::npos ? 0 : last + 1);
            if (!out.empty()) out += (out.back() == '.' || out.back() == '!' || out.back() == '?') ? " " : ". ";
            out += kFabricatedFindings[fnv1a(text) % n];
            return {{"text", out}};
        }
        case Task::Perturb: {
            const std::string& text = p.at("text");
            try {
                auto sub = perturb::substitute_keyword(text, p.at("keyword"), parse_error_type(p.at("category")),
                                                       tagger::default_lexicon(), fnv1a(text));
                return {{"text", sub.text}};
            } catch (const NotFoundError&) {
                return {{"text", text}};
            } catch (const ExhaustionError&) {
                return {{"text", text}};
            }
        }
        case Task::Decompose: {
            json statements = json::array();
            for (const std::string& s : split_sentences(p.at("text"))) statements.push_back(s);
            return {{"statements", statements}};
        }
        case Task::Nli:
            return {{"verdict", std::string(medpo::to_string(mock_nli(p.at("statement"), p.at("output"))))}};
        case Task::Rewrite: return {{"text", mock_rewrite(p.at("text"))}};
    }
    throw ContractError("unknown task");
}

// ---------------------------------------------------------------- http

HttpBackend::HttpBackend(HttpConfig cfg) : cfg_(std::move(cfg)) {
    const std::string& url = cfg_.endpoint;
    const auto scheme_end = url.find("://");
    if (scheme_end == std::string::npos) throw ContractError("LLM endpoint must be an http(s) URL: " + url);
    const auto path_start = url.find('/', scheme_end + 3);
    scheme_host_port_ = url.substr(0, path_start);
    path_ = path_start == std::string::npos ? "/" : url.substr(path_start);
}

json HttpBackend::send(const JudgeRequest& req) {
    validate(req);
    httplib::Client cli(scheme_host_port_);
    const auto secs = static_cast<time_t>(cfg_.timeout_s);
    const auto usecs = static_cast<time_t>((cfg_.timeout_s - static_cast<double>(secs)) * 1e6);
    cli.set_connection_timeout(secs, usecs);
    cli.set_read_timeout(secs, usecs);
    cli.set_write_timeout(secs, usecs);
    httplib::Headers headers;
    if (const char* key = std::getenv(cfg_.api_key_env.c_str()); key && *key)
        headers.emplace("Authorization", std::string("Bearer ") + key);

    auto res = cli.Post(path_, headers, to_wire(req).dump(), "application/json");
    if (!res) throw TransportError("LLM request failed: " + httplib::to_string(res.error()));
    if (res->status == 429 || res->status >= 500)
        throw TransportError("LLM endpoint returned HTTP " + std::to_string(res->status));
    if (res->status < 200 || res->status >= 300)
        throw ProtocolError("LLM endpoint returned HTTP " + std::to_string(res->status));
    try {
        return json::parse(res->body);
    } catch (const json::parse_error&) {
        throw ProtocolError("LLM reply is not JSON");
    }
}

// ---------------------------------------------------------------- client

RateLimiter::RateLimiter(double qps, double burst)
    : qps_(qps), burst_(std::max(1.0, burst)), tokens_(std::max(1.0, burst)), last_(std::chrono::steady_clock::now()) {}

void RateLimiter::acquire() {
    if (qps_ <= 0.0) return;
    std::unique_lock lock(mu_);
    for (;;) {
        const auto now = std::chrono::steady_clock::now();
        const double elapsed = std::chrono::duration<double>(now - last_).count();
        tokens_ = std::min(burst_, tokens_ + elapsed * qps_);
        last_ = now;
        if (tokens_ >= 1.0) {
            tokens_ -= 1.0;
            return;
        }
        const double wait = (1.0 - tokens_) / qps_;
        lock.unlock();
        std::this_thread::sleep_for(std::chrono::duration<double>(wait));
        lock.lock();
    }
}

Client::Client(std::shared_ptr<Backend> backend, RetryPolicy retry, double qps)
    : backend_(std::move(backend)), retry_(retry), limiter_(qps) {
    if (!backend_) throw ContractError("LLM client needs a backend");
    if (retry_.max_retries < 0) throw ContractError("max_retries must be >= 0");
}

JudgeResponse Client::call(const JudgeRequest& req) {
    validate(req);
    const json wire = to_wire(req);
    Rng jitter(mix_seed(retry_.seed, fnv1a(wire.dump())));
    std::string last_error;
    for (int attempt = 1; attempt <= retry_.max_retries + 1; ++attempt) {
        if (attempt > 1) {
            const double base = std::min(retry_.max_delay_ms, retry_.base_delay_ms * std::pow(2.0, attempt - 2));
            const double delay = base * (1.0 + retry_.jitter * jitter.uniform());
            if (delay > 0) std::this_thread::sleep_for(std::chrono::duration<double, std::milli>(delay));
        }
        limiter_.acquire();
        const auto t0 = std::chrono::steady_clock::now();
        CallRecord rec{req.task, attempt, 0.0, false, {}, wire, nullptr};
        auto finish = [&] {
            rec.latency_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
            std::lock_guard lock(log_mu_);
            log_.push_back(rec);
        };
        try {
            json reply = backend_->send(req);
            rec.reply = reply;
            JudgeResponse r = parse_reply(req.task, reply);
            rec.ok = true;
            finish();
            return r;
        } catch (const TransportError& e) {
            rec.error = e.what();
            last_error = e.what();
            finish();
        } catch (const Error& e) {
            rec.error = e.what();
            finish();
            if (dynamic_cast<const ProtocolError*>(&e)) throw;
            throw ProtocolError(e.what());
        }
    }
    throw TransportError("LLM call failed after " + std::to_string(retry_.max_retries + 1) +
                         " attempts: " + last_error);
}

std::vector<BatchItem> Client::batch(const std::vector<JudgeRequest>& reqs, int max_parallel) {
    if (max_parallel < 1) throw ContractError("max_parallel must be >= 1");
    std::vector<BatchItem> out(reqs.size());
    std::atomic<std::size_t> next{0};
    auto worker = [&] {
        for (std::size_t i = next++; i < reqs.size(); i = next++) {
            try {
                out[i].response = call(reqs[i]);
            } catch (const std::exception& e) {
                out[i].error = e.what();
            }
        }
    };
    const std::size_t n_threads = std::min<std::size_t>(static_cast<std::size_t>(max_parallel), reqs.size());
    std::vector<std::thread> threads;
    for (std::size_t t = 0; t < n_threads; ++t) threads.emplace_back(worker);
    for (auto& t : threads) t.join();
    return out;
}

std::string Client::hallucinate(std::string_view text) {
    return call({Task::Hallucinate, {{"text", std::string(text)}}}).text;
}

std::string Client::perturb(std::string_view text, ErrorType category, std::string_view keyword) {
    return call({Task::Perturb,
                 {{"text", std::string(text)},
                  {"keyword", std::string(keyword)},
                  {"category", std::string(medpo::to_string(category))}}})
        .text;
}

std::vector<std::string> Client::decompose(std::string_view text) {
    return call({Task::Decompose, {{"text", std::string(text)}}}).statements;
}

Verdict Client::nli(std::string_view statement, std::string_view output) {
    return *call({Task::Nli, {{"statement", std::string(statement)}, {"output", std::string(output)}}}).verdict;
}

std::string Client::rewrite(std::string_view text) {
    return call({Task::Rewrite, {{"text", std::string(text)}}}).text;
}

std::vector<CallRecord> Client::log() const {
    std::lock_guard lock(log_mu_);
    return log_;
}

std::shared_ptr<Client> make_client(std::string_view spec, RetryPolicy retry, double qps) {
    if (spec == "mock") return std::make_shared<Client>(std::make_shared<MockBackend>(), retry, qps);
    HttpConfig cfg;
    if (spec == "http") {
        const char* env = std::getenv("MEDPO_LLM_ENDPOINT");
        if (!env || !*env) throw ContractError("--llm http needs MEDPO_LLM_ENDPOINT");
        cfg.endpoint = env;
    } else if (spec.starts_with("http://") || spec.starts_with("https://")) {
        cfg.endpoint = std::string(spec);
    } else {
        throw ContractError("unknown LLM backend '" + std::string(spec) + "' (expected mock, http or a URL)");
    }
    if (const char* t = std::getenv("MEDPO_LLM_TIMEOUT_S"); t && *t) cfg.timeout_s = std::atof(t);
    return std::make_shared<Client>(std::make_shared<HttpBackend>(cfg), retry, qps);
}

}  // namespace medpo::llm
