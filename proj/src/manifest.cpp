#include "medpo/manifest.hpp"

#include <chrono>
#include <ctime>

#include "medpo/core/dataset.hpp"
#include "medpo/core/digest.hpp"
#include "medpo/version.hpp"

namespace medpo {

using nlohmann::ordered_json;

std::string config_hash(const nlohmann::json& config) { return sha256_hex(config.dump()); }

ordered_json to_json(const RunManifest& m) {
    ordered_json j;
    j["tool"] = "medpo";
    j["tool_version"] = kVersion;
    j["command"] = m.command;
    j["args"] = m.args;
    j["seed"] = m.seed;
    j["config"] = ordered_json::parse(m.config.dump());
    j["config_hash"] = config_hash(m.config);
    j["inputs"] = m.inputs;
    j["outputs"] = m.outputs;
    j["counts"] = m.counts;
    if (!m.extra.empty()) j["extra"] = ordered_json::parse(m.extra.dump());
    return j;
}

std::vector<std::string> mask_args(const std::vector<std::string>& args, const std::vector<std::string>& flags) {
    std::vector<std::string> out = args;
    for (std::size_t i = 0; i < out.size(); ++i) {
        for (const auto& f : flags) {
            if (out[i] == f && i + 1 < out.size()) {
                out[i + 1] = "<out>";
            } else if (out[i].starts_with(f + "=")) {
                out[i] = f + "=<out>";
            }
        }
    }
    return out;
}

std::string utc_now_iso8601() {
    const std::time_t t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
    std::tm tm{};
    gmtime_r(&t, &tm);
    char buf[32];
    std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
    return buf;
}

void write_manifest(const RunManifest& m, const std::filesystem::path& path, const std::string& started,
                    const std::string& finished) {
    write_text_atomic(path, to_json(m).dump(2) + "\n");
    ordered_json timing;
    timing["started"] = started;
    timing["finished"] = finished;
    auto timing_path = path;
    timing_path.replace_filename(path.stem().string() + ".timing.json");
    write_text_atomic(timing_path, timing.dump(2) + "\n");
}

}  // namespace medpo
