#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

namespace medpo {

/// Provenance record written next to the outputs of every mutating command.
///
/// The manifest itself holds only content that is a function of the inputs,
/// so reruns produce byte-identical manifests. Wall-clock timestamps go to a
/// sibling timing file.
struct RunManifest {
    std::string command;            // e.g. "pairs build"
    std::vector<std::string> args;  // argv after the program name, output location masked
    nlohmann::json config = nlohmann::json::object();
    std::uint64_t seed = 0;
    std::map<std::string, std::string> inputs;   // path as given -> sha256
    std::map<std::string, std::string> outputs;  // path relative to the output root -> sha256
    std::map<std::string, int> counts;           // skip / exclusion reasons and totals
    nlohmann::json extra = nlohmann::json::object();
};

nlohmann::ordered_json to_json(const RunManifest& m);
/// sha256 of the config's compact dump.
std::string config_hash(const nlohmann::json& config);

/// Replaces the value following any of `flags` with "<out>".
std::vector<std::string> mask_args(const std::vector<std::string>& args, const std::vector<std::string>& flags);

/// UTC, second resolution, e.g. 2026-01-31T12:00:00Z.
std::string utc_now_iso8601();

/// Writes `path` and a sibling "<stem>.timing.json" holding the timestamps.
void write_manifest(const RunManifest& m, const std::filesystem::path& path, const std::string& started,
                    const std::string& finished);

}  // namespace medpo
