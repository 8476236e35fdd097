#include "medpo/annserve.hpp"

#include <fcntl.h>
#include <unistd.h>

#include <algorithm>
#include <cerrno>
#include <cstring>
#include <fstream>
#include <mutex>

#include <httplib.h>

#include "medpo/core/dataset.hpp"
#include "medpo/core/error.hpp"
#include "medpo/manifest.hpp"

namespace medpo::annotate {

namespace fs = std::filesystem;
using nlohmann::json;
using nlohmann::ordered_json;

std::vector<AnnotationTask> load_tasks(const fs::path& path) {
    std::vector<AnnotationTask> out;
    std::set<std::string> seen;
    for (const auto& [line, j] : read_jsonl(path)) {
        AnnotationTask t;
        try {
            t.sample_id = j.at("sample_id").get<std::string>();
            t.image_path = j.at("image").get<std::string>();
            t.model_output = j.at("model_output").get<std::string>();
            t.reference = j.at("reference").get<std::string>();
            if (j.contains("prompt")) t.prompt = j["prompt"].get<std::string>();
            t.calibration = j.value("calibration", false);
        } catch (const json::exception& e) {
            throw ValidationError(std::string("bad task: ") + e.what(), line);
        }
        if (t.sample_id.empty() || t.image_path.empty() || t.model_output.empty() || t.reference.empty() ||
            t.prompt.empty())
            throw ValidationError("task fields must be non-empty", line);
        if (!seen.insert(t.sample_id).second) throw ValidationError("duplicate sample_id '" + t.sample_id + "'", line);
        t.index = static_cast<int>(out.size());
        out.push_back(std::move(t));
    }
    return out;
}

ordered_json to_json(const AnnotationTask& t) {
    ordered_json j;
    j["index"] = t.index;
    j["sample_id"] = t.sample_id;
    j["image_url"] = "/img/" + t.sample_id;
    j["model_output"] = t.model_output;
    j["reference"] = t.reference;
    j["prompt"] = t.prompt;
    j["calibration"] = t.calibration;
    return j;
}

// Store ---------------------------------------------------------------------

namespace {

std::vector<std::string> read_annotators(const fs::path& path) {
    std::vector<std::string> out;
    std::ifstream in(path);
    std::string line;
    while (std::getline(in, line)) {
        const auto b = line.find_first_not_of(" \t\r");
        if (b == std::string::npos || line[b] == '#') continue;
        const auto e = line.find_last_not_of(" \t\r");
        out.push_back(line.substr(b, e - b + 1));
    }
    return out;
}

void append_durably(const fs::path& path, const std::string& line) {
    const int fd = ::open(path.c_str(), O_WRONLY | O_CREAT | O_APPEND | O_CLOEXEC, 0644);
    if (fd < 0) throw IoError("cannot open " + path.string() + ": " + std::strerror(errno));
    std::size_t done = 0;
    while (done < line.size()) {
        const ssize_t n = ::write(fd, line.data() + done, line.size() - done);
        if (n < 0) {
            if (errno == EINTR) continue;
            const int err = errno;
            ::close(fd);
            throw IoError("write to " + path.string() + " failed: " + std::strerror(err));
        }
        done += static_cast<std::size_t>(n);
    }
    if (::fsync(fd) != 0) {
        const int err = errno;
        ::close(fd);
        throw IoError("fsync of " + path.string() + " failed: " + std::strerror(err));
    }
    ::close(fd);
}

}  // namespace

AnnotationStore::AnnotationStore(fs::path dir, std::vector<std::string> annotators)
    : dir_(std::move(dir)), annotators_(std::move(annotators)) {
    tasks_ = load_tasks(dir_ / "tasks.jsonl");
    for (const auto& t : tasks_) task_index_[t.sample_id] = static_cast<std::size_t>(t.index);
    if (annotators_.empty() && fs::exists(dir_ / "annotators.txt")) annotators_ = read_annotators(dir_ / "annotators.txt");
    if (fs::exists(log_path())) {
        log_ = eval::load_annotations(log_path());
        for (std::size_t i = 0; i < log_.size(); ++i) latest_[log_[i].annotator][log_[i].sample_id] = i;
    }
}

bool AnnotationStore::knows(std::string_view annotator) const {
    if (annotator.empty()) return false;
    return annotators_.empty() || std::find(annotators_.begin(), annotators_.end(), annotator) != annotators_.end();
}

const AnnotationTask* AnnotationStore::find_task(const std::string& sample_id) const {
    auto it = task_index_.find(sample_id);
    return it == task_index_.end() ? nullptr : &tasks_[it->second];
}

std::optional<AnnotationTask> AnnotationStore::next_task(const std::string& annotator) const {
    if (!knows(annotator)) throw NotFoundError("unknown annotator '" + annotator + "'");
    std::shared_lock lock(mu_);
    auto it = latest_.find(annotator);
    for (const auto& t : tasks_)
        if (it == latest_.end() || !it->second.count(t.sample_id)) return t;
    return std::nullopt;
}

AnnotationStore::SubmitResult AnnotationStore::submit(eval::AnnotationRecord record) {
    eval::validate(record);
    if (!knows(record.annotator)) throw NotFoundError("unknown annotator '" + record.annotator + "'");
    const AnnotationTask* task = find_task(record.sample_id);
    if (!task) throw NotFoundError("unknown sample '" + record.sample_id + "'");
    record.calibration = task->calibration;
    record.timestamp = utc_now_iso8601();

    std::unique_lock lock(mu_);
    auto& mine = latest_[record.annotator];
    const bool replaced = mine.count(record.sample_id) > 0;
    append_durably(log_path(), eval::to_json(record).dump() + "\n");
    log_.push_back(record);
    mine[record.sample_id] = log_.size() - 1;
    return {record, replaced};
}

std::vector<eval::AnnotationRecord> AnnotationStore::log() const {
    std::shared_lock lock(mu_);
    return log_;
}

ordered_json AnnotationStore::progress() const {
    std::shared_lock lock(mu_);
    ordered_json j;
    j["total"] = tasks_.size();
    j["calibration"] = std::count_if(tasks_.begin(), tasks_.end(), [](const auto& t) { return t.calibration; });
    j["records"] = log_.size();
    std::vector<std::string> names = annotators_;
    for (const auto& [name, _] : latest_)
        if (std::find(names.begin(), names.end(), name) == names.end()) names.push_back(name);
    ordered_json per = ordered_json::object();
    for (const auto& name : names) {
        ordered_json a;
        auto it = latest_.find(name);
        std::vector<std::string> done;
        for (const auto& t : tasks_)
            if (it != latest_.end() && it->second.count(t.sample_id)) done.push_back(t.sample_id);
        a["done"] = done.size();
        a["submitted"] = done;
        per[name] = a;
    }
    j["annotators"] = per;
    return j;
}

eval::AgreementReport AnnotationStore::agreement() const {
    const auto records = log();
    if (annotators_.size() >= 2) return eval::agreement(records, std::make_pair(annotators_[0], annotators_[1]));
    return eval::agreement(records);
}

fs::path AnnotationStore::image_file(const std::string& sample_id) const {
    const AnnotationTask* t = find_task(sample_id);
    if (!t) throw NotFoundError("unknown sample '" + sample_id + "'");
    const fs::path root = fs::weakly_canonical(dir_);
    const fs::path p = fs::weakly_canonical(dir_ / t->image_path);
    const auto rel = p.lexically_relative(root);
    if (rel.empty() || *rel.begin() == "..") throw NotFoundError("image outside the store directory");
    if (!fs::is_regular_file(p)) throw NotFoundError("image file missing for '" + sample_id + "'");
    return p;
}

// Routing -------------------------------------------------------------------------

namespace {

HttpResponse json_response(int status, const ordered_json& body) {
    HttpResponse r;
    r.status = status;
    r.body = body.dump();
    return r;
}

HttpResponse error_response(int status, const std::string& msg) {
    return json_response(status, ordered_json{{"error", msg}});
}

std::string content_type_for(const fs::path& p) {
    std::string ext = p.extension().string();
    std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
    if (ext == ".png") return "image/png";
    if (ext == ".jpg" || ext == ".jpeg") return "image/jpeg";
    return "application/octet-stream";
}

HttpResponse route(AnnotationStore& store, const HttpRequest& req) {
    const std::string& path = req.path;
    if (req.method == "OPTIONS") {
        HttpResponse r;
        r.status = 204;
        r.content_type.clear();
        return r;
    }

    constexpr std::string_view kSession = "/api/session/";
    constexpr std::string_view kNext = "/next";
    if (req.method == "GET" && path.starts_with(kSession) && path.ends_with(kNext) &&
        path.size() > kSession.size() + kNext.size()) {
        const std::string annotator = path.substr(kSession.size(), path.size() - kSession.size() - kNext.size());
        if (annotator.find('/') != std::string::npos) return error_response(404, "not found");
        auto task = store.next_task(annotator);
        if (!task) return json_response(200, ordered_json{{"done", true}});
        return json_response(200, ordered_json{{"done", false}, {"task", to_json(*task)}});
    }
    if (path == "/api/annotations") {
        if (req.method != "POST") return error_response(405, "method not allowed");
        json body;
        try {
            body = json::parse(req.body);
        } catch (const json::exception& e) {
            return error_response(400, std::string("body is not JSON: ") + e.what());
        }
        if (!body.is_object()) return error_response(400, "body must be a JSON object");
        if (!body.contains("annotator"))
            if (auto it = req.headers.find("x-annotator"); it != req.headers.end()) body["annotator"] = it->second;
        body.erase("timestamp");
        body.erase("calibration");
        const auto result = store.submit(eval::record_from_json(body));
        return json_response(200, ordered_json{{"status", "ok"},
                                               {"replaced", result.replaced},
                                               {"record", eval::to_json(result.record)}});
    }
    if (req.method == "GET" && path == "/api/agreement") return json_response(200, eval::to_json(store.agreement()));
    if (req.method == "GET" && path == "/api/progress") return json_response(200, store.progress());

    constexpr std::string_view kImg = "/img/";
    if (req.method == "GET" && path.starts_with(kImg)) {
        const fs::path file = store.image_file(path.substr(kImg.size()));
        std::ifstream in(file, std::ios::binary);
        if (!in) return error_response(404, "image unreadable");
        HttpResponse r;
        r.content_type = content_type_for(file);
        r.body.assign(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
        return r;
    }
    return error_response(404, "no route for " + req.method + " " + path);
}

}  // namespace

HttpResponse handle(AnnotationStore& store, const HttpRequest& req, const std::string& cors_origin) {
    HttpResponse r;
    try {
        r = route(store, req);
    } catch (const eval::NoOverlapError& e) {
        r = error_response(409, e.what());
    } catch (const NotFoundError& e) {
        r = error_response(404, e.what());
    } catch (const ValidationError& e) {
        r = error_response(400, e.what());
    } catch (const ParseError& e) {
        r = error_response(400, e.what());
    } catch (const std::exception& e) {
        r = error_response(500, e.what());
    }
    r.headers["Access-Control-Allow-Origin"] = cors_origin;
    r.headers["Access-Control-Allow-Methods"] = "GET, POST, OPTIONS";
    r.headers["Access-Control-Allow-Headers"] = "Content-Type, X-Annotator";
    return r;
}

// HTTP server -----------------------------------------------------------------------

struct AnnotationServer::Impl {
    Impl(AnnotationStore& s, ServerOptions o) : store(s), opts(std::move(o)) {}
    AnnotationStore& store;
    ServerOptions opts;
    httplib::Server server;
    int port = -1;
};

AnnotationServer::AnnotationServer(AnnotationStore& store, ServerOptions opts)
    : impl_(std::make_unique<Impl>(store, std::move(opts))) {
    auto handler = [this](const httplib::Request& req, httplib::Response& res) {
        HttpRequest r{req.method, req.path, req.body, {}};
        for (const auto& [k, v] : req.headers) {
            std::string key = k;
            std::transform(key.begin(), key.end(), key.begin(), [](unsigned char c) { return std::tolower(c); });
            r.headers[key] = v;
        }
        const HttpResponse out = handle(impl_->store, r, impl_->opts.cors_origin);
        res.status = out.status;
        for (const auto& [k, v] : out.headers) res.set_header(k, v);
        if (!out.content_type.empty()) res.set_content(out.body, out.content_type);
    };
    impl_->server.Get(".*", handler);
    impl_->server.Post(".*", handler);
    impl_->server.Options(".*", handler);
}

AnnotationServer::~AnnotationServer() { stop(); }

int AnnotationServer::bind() {
    auto& s = impl_->server;
    if (impl_->opts.port == 0) {
        impl_->port = s.bind_to_any_port(impl_->opts.host);
    } else {
        impl_->port = s.bind_to_port(impl_->opts.host, impl_->opts.port) ? impl_->opts.port : -1;
    }
    if (impl_->port < 0)
        throw IoError("cannot bind " + impl_->opts.host + ":" + std::to_string(impl_->opts.port));
    return impl_->port;
}

void AnnotationServer::run() {
    if (impl_->port < 0) throw ContractError("AnnotationServer::run called before bind");
    impl_->server.listen_after_bind();
}

void AnnotationServer::stop() {
    if (impl_ && impl_->server.is_running()) impl_->server.stop();
}

}  // namespace medpo::annotate
