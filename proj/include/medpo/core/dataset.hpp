#pragma once

#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "medpo/core/types.hpp"

namespace medpo {

// JSONL (de)serialization with a fixed key order.
//   Sample:         id, image, prompt, response, roi, tags, weight
//   PreferencePair: id, method, prompt, chosen_text, rejected_text,
//                   chosen_image, rejected_image, weight, meta
// Absent optionals are omitted, never written as null.

nlohmann::ordered_json to_json(const Sample& s);
nlohmann::ordered_json to_json(const PreferencePair& p);

Sample sample_from_json(const nlohmann::json& j, std::size_t line = 0);
PreferencePair pair_from_json(const nlohmann::json& j, std::size_t line = 0);

std::vector<Sample> load_samples(const std::filesystem::path& path);
void save_samples(std::span<const Sample> samples, const std::filesystem::path& path);

std::vector<PreferencePair> load_pairs(const std::filesystem::path& path);
/// Validates every pair first; on failure nothing is written.
void save_pairs(std::span<const PreferencePair> pairs, const std::filesystem::path& path);

/// Reads a file of JSON objects, one per non-blank line. ParseError carries the line.
std::vector<std::pair<std::size_t, nlohmann::json>> read_jsonl(const std::filesystem::path& path);
/// Writes through a sibling temp file and renames over `path`. Throws IoError.
void write_text_atomic(const std::filesystem::path& path, const std::string& content);

}  // namespace medpo
