#pragma once

#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <shared_mutex>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "medpo/evalkit.hpp"

namespace medpo::annotate {

/// Instruction shown to annotators next to every item.
inline constexpr std::string_view kExpertPrompt =
    "Describe the key visual features of the medical image (e.g., shape, size, location, density, contrast). "
    "Then, provide the clinical findings.";

struct AnnotationTask {
    int index = 0;
    std::string sample_id;
    std::string image_path;  // relative to the store directory
    std::string model_output;
    std::string reference;
    std::string prompt = std::string(kExpertPrompt);
    bool calibration = false;
};

/// tasks.jsonl lines: {"sample_id", "image", "model_output", "reference", ["prompt"], ["calibration"]}.
std::vector<AnnotationTask> load_tasks(const std::filesystem::path& path);
nlohmann::ordered_json to_json(const AnnotationTask& t);

/// Store directory layout:
///   tasks.jsonl        items to annotate, in presentation order
///   annotators.txt     optional, one name per line
///   annotations.jsonl  append-only log, replayed on construction
///   images referenced by tasks.jsonl, relative to the directory
class AnnotationStore {
public:
    /// An empty `annotators` list falls back to annotators.txt; when that is
    /// absent too, any annotator name is accepted.
    explicit AnnotationStore(std::filesystem::path dir, std::vector<std::string> annotators = {});

    const std::vector<AnnotationTask>& tasks() const noexcept { return tasks_; }
    bool knows(std::string_view annotator) const;

    /// Lowest-index task this annotator has not submitted; nullopt when done.
    /// Throws NotFoundError for an unknown annotator.
    std::optional<AnnotationTask> next_task(const std::string& annotator) const;

    struct SubmitResult {
        eval::AnnotationRecord record;
        bool replaced = false;
    };
    /// Stamps the time and calibration flag, appends to the log and fsyncs
    /// before returning. Throws ValidationError / NotFoundError.
    SubmitResult submit(eval::AnnotationRecord record);

    std::vector<eval::AnnotationRecord> log() const;
    nlohmann::ordered_json progress() const;
    /// Throws eval::NoOverlapError.
    eval::AgreementReport agreement() const;
    /// Absolute image path for a task's sample id. Throws NotFoundError.
    std::filesystem::path image_file(const std::string& sample_id) const;

    const std::filesystem::path& dir() const noexcept { return dir_; }
    std::filesystem::path log_path() const { return dir_ / "annotations.jsonl"; }

private:
    const AnnotationTask* find_task(const std::string& sample_id) const;

    std::filesystem::path dir_;
    std::vector<AnnotationTask> tasks_;
    std::map<std::string, std::size_t> task_index_;
    std::vector<std::string> annotators_;
    std::vector<eval::AnnotationRecord> log_;
    std::map<std::string, std::map<std::string, std::size_t>> latest_;  // annotator -> sample -> log index
    mutable std::shared_mutex mu_;
};

/// Transport-independent request/response, so routing is testable without sockets.
struct HttpRequest {
    std::string method;
    std::string path;
    std::string body;
    std::map<std::string, std::string> headers;  // lowercase names
};

struct HttpResponse {
    int status = 200;
    std::string content_type = "application/json";
    std::string body;
    std::map<std::string, std::string> headers;
};

/// REST routes:
///   GET  /api/session/{annotator}/next
///   POST /api/annotations
///   GET  /api/agreement
///   GET  /api/progress
///   GET  /img/{sample_id}
HttpResponse handle(AnnotationStore& store, const HttpRequest& req, const std::string& cors_origin = "*");

struct ServerOptions {
    std::string host = "127.0.0.1";
    int port = 8080;  // 0 picks a free port
    std::string cors_origin = "*";
};

/// HTTP front end over handle().
class AnnotationServer {
public:
    AnnotationServer(AnnotationStore& store, ServerOptions opts);
    ~AnnotationServer();
    AnnotationServer(const AnnotationServer&) = delete;
    AnnotationServer& operator=(const AnnotationServer&) = delete;

    /// Binds and returns the port. Throws IoError.
    int bind();
    /// Serves until stop(); call after bind().
    void run();
    void stop();

private:
    struct Impl;
    std::unique_ptr<Impl> impl_;
};

}  // namespace medpo::annotate
