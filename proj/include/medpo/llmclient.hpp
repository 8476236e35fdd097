#pragma once

#include <chrono>
#include <cstdint>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "medpo/core/types.hpp"

namespace medpo::llm {

enum class Task { Hallucinate, Perturb, Decompose, Nli, Rewrite };

std::string_view to_string(Task t) noexcept;
Task parse_task(std::string_view s);

/// Payload keys per task:
///   hallucinate: text
///   perturb:     text, keyword, category
///   decompose:   text
///   nli:         statement, output
///   rewrite:     text
struct JudgeRequest {
    Task task = Task::Hallucinate;
    std::map<std::string, std::string> payload;
};

struct JudgeResponse {
    Task task = Task::Hallucinate;
    std::string text;                     // hallucinate, perturb, rewrite
    std::vector<std::string> statements;  // decompose
    std::optional<Verdict> verdict;       // nli
};

/// Throws ContractError when a required payload key is missing.
void validate(const JudgeRequest& req);

/// Request body sent over the wire:
///   {"task": ..., "prompt_version": "v1", "prompt": <rendered template>, "payload": {...}}
nlohmann::json to_wire(const JudgeRequest& req);

/// Validates a reply body against the task schema:
///   hallucinate/perturb/rewrite -> {"text": string}  (only rewrite may be empty)
///   decompose                   -> {"statements": [non-empty string, ...]} (>= 1)
///   nli                         -> {"verdict": "entailment"|"partial"|"contradiction"|"neutral"}
/// Throws ProtocolError.
JudgeResponse parse_reply(Task task, const nlohmann::json& reply);

inline constexpr std::string_view kPromptVersion = "v1";
std::string_view prompt_template(Task t);
std::string render_prompt(const JudgeRequest& req);
/// SHA-256 of the template text; goes into run manifests.
std::string prompt_hash(Task t);

/// One attempt against a service. Returns the raw reply body.
/// Throws TransportError for retryable failures, ProtocolError otherwise.
class Backend {
public:
    virtual ~Backend() = default;
    virtual nlohmann::json send(const JudgeRequest& req) = 0;
    virtual std::string name() const = 0;
};

/// Deterministic stand-in used for CI. Every reply is a pure function of the request.
///   hallucinate: appends one fabricated finding picked by a hash of the text
///   perturb:     rule-based keyword substitution with the shipped lexicon
///   decompose:   sentence split on . ! ?
///   nli:         normalised containment -> entailment; a negation cue within
///                three tokens before the statement's head noun -> contradiction;
///                otherwise neutral
///   rewrite:     drops sentences containing an external-context phrase
///                (prior, previous, compared, history, notified, ...)
class MockBackend : public Backend {
public:
    nlohmann::json send(const JudgeRequest& req) override;
    std::string name() const override { return "mock"; }
};

struct HttpConfig {
    std::string endpoint;  // e.g. http://localhost:8000/v1/judge
    std::string api_key_env = "MEDPO_LLM_API_KEY";
    double timeout_s = 60.0;
};

/// JSON-over-HTTP POST to a single endpoint. 429/5xx and network failures are
/// TransportError; other non-2xx statuses and malformed bodies are ProtocolError.
class HttpBackend : public Backend {
public:
    explicit HttpBackend(HttpConfig cfg);
    nlohmann::json send(const JudgeRequest& req) override;
    std::string name() const override { return "http"; }

private:
    HttpConfig cfg_;
    std::string scheme_host_port_;
    std::string path_;
};

struct RetryPolicy {
    int max_retries = 3;
    double base_delay_ms = 250.0;
    double max_delay_ms = 8000.0;
    double jitter = 0.5;  // delay *= 1 + jitter * U[0, 1)
    std::uint64_t seed = 0;
};

struct CallRecord {
    Task task;
    int attempt;  // 1-based
    double latency_ms;
    bool ok;
    std::string error;
    nlohmann::json request;
    nlohmann::json reply;
};

/// Token bucket; qps <= 0 disables limiting.
class RateLimiter {
public:
    explicit RateLimiter(double qps = 0.0, double burst = 1.0);
    void acquire();

private:
    double qps_;
    double burst_;
    double tokens_;
    std::chrono::steady_clock::time_point last_;
    std::mutex mu_;
};

struct BatchItem {
    std::optional<JudgeResponse> response;
    std::string error;  // set when response is empty

    bool ok() const noexcept { return response.has_value(); }
};

/// Thread-safe gateway: retries, rate limiting, schema validation and a call log.
class Client {
public:
    explicit Client(std::shared_ptr<Backend> backend, RetryPolicy retry = {}, double qps = 0.0);

    /// Throws TransportError once retries are exhausted, ProtocolError immediately.
    JudgeResponse call(const JudgeRequest& req);
    /// Results align index-for-index with `reqs`; at most `max_parallel` calls in flight.
    std::vector<BatchItem> batch(const std::vector<JudgeRequest>& reqs, int max_parallel);

    std::string hallucinate(std::string_view text);
    std::string perturb(std::string_view text, ErrorType category, std::string_view keyword);
    std::vector<std::string> decompose(std::string_view text);
    Verdict nli(std::string_view statement, std::string_view output);
    std::string rewrite(std::string_view text);

    std::vector<CallRecord> log() const;
    std::string backend_name() const { return backend_->name(); }

private:
    std::shared_ptr<Backend> backend_;
    RetryPolicy retry_;
    RateLimiter limiter_;
    mutable std::mutex log_mu_;
    std::vector<CallRecord> log_;
};

/// "mock" or an http(s) endpoint URL.
std::shared_ptr<Client> make_client(std::string_view spec, RetryPolicy retry = {}, double qps = 0.0);

}  // namespace medpo::llm
