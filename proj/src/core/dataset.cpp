#include "medpo/core/dataset.hpp"

#include <fstream>
#include <set>
#include <sstream>

#include "medpo/core/error.hpp"

namespace medpo {

using nlohmann::json;
using nlohmann::ordered_json;

namespace {

void require_keys(const json& j, std::initializer_list<const char*> allowed, std::size_t line) {
    if (!j.is_object()) throw ValidationError("record is not a JSON object", line);
    for (const auto& [key, _] : j.items()) {
        bool ok = false;
        for (const char* a : allowed) ok = ok || key == a;
        if (!ok) throw ValidationError("unknown key '" + key + "'", line);
    }
}

template <typename T>
T get_field(const json& j, const char* key, std::size_t line) {
    auto it = j.find(key);
    if (it == j.end()) throw ValidationError(std::string("missing key '") + key + "'", line);
    try {
        return it->get<T>();
    } catch (const json::exception&) {
        throw ValidationError(std::string("key '") + key + "' has the wrong type", line);
    }
}

std::string dump_line(const ordered_json& j) {
    try {
        return j.dump() + "\n";
    } catch (const json::type_error& e) {
        throw ValidationError(std::string("cannot serialize record: ") + e.what());
    }
}

}  // namespace

ordered_json to_json(const Sample& s) {
    ordered_json j;
    j["id"] = s.id;
    j["image"] = s.image;
    j["prompt"] = s.prompt;
    j["response"] = s.response;
    if (s.roi) {
        ordered_json boxes = ordered_json::array();
        for (const RoiBox& b : *s.roi) boxes.push_back({b.x, b.y, b.w, b.h});
        j["roi"] = std::move(boxes);
    }
    if (s.tags) {
        ordered_json tags = ordered_json::object();
        for (ErrorType t : kAllErrorTypes) {
            auto it = s.tags->find(t);
            if (it == s.tags->end()) continue;
            tags[std::string(to_string(t))] = ordered_json(std::vector<std::string>(it->second.begin(), it->second.end()));
        }
        j["tags"] = std::move(tags);
    }
    j["weight"] = s.weight;
    return j;
}

ordered_json to_json(const PreferencePair& p) {
    ordered_json j;
    j["id"] = p.id;
    j["method"] = std::string(to_string(p.method));
    j["prompt"] = p.prompt;
    j["chosen_text"] = p.chosen_text;
    if (p.rejected_text) j["rejected_text"] = *p.rejected_text;
    j["chosen_image"] = p.chosen_image;
    if (p.rejected_image) j["rejected_image"] = *p.rejected_image;
    j["weight"] = p.weight;
    // meta is a std::map-backed json, so its keys serialize sorted.
    j["meta"] = ordered_json::parse(p.meta.dump());
    return j;
}

Sample sample_from_json(const json& j, std::size_t line) {
    require_keys(j, {"id", "image", "prompt", "response", "roi", "tags", "weight"}, line);
    Sample s;
    s.id = get_field<std::string>(j, "id", line);
    s.image = get_field<std::string>(j, "image", line);
    s.prompt = get_field<std::string>(j, "prompt", line);
    s.response = get_field<std::string>(j, "response", line);
    if (j.contains("roi")) {
        const json& roi = j["roi"];
        if (!roi.is_array()) throw ValidationError("roi must be an array", line);
        std::vector<RoiBox> boxes;
        for (const json& b : roi) {
            if (!b.is_array() || b.size() != 4) throw ValidationError("roi box must be [x, y, w, h]", line);
            for (const json& v : b)
                if (!v.is_number_integer()) throw ValidationError("roi coordinates must be integers", line);
            boxes.push_back({b[0].get<int>(), b[1].get<int>(), b[2].get<int>(), b[3].get<int>()});
        }
        s.roi = std::move(boxes);
    }
    if (j.contains("tags")) {
        const json& tags = j["tags"];
        if (!tags.is_object()) throw ValidationError("tags must be an object", line);
        TagMap map;
        for (const auto& [key, words] : tags.items()) {
            ErrorType t;
            try {
                t = parse_error_type(key);
            } catch (const ParseError&) {
                throw ValidationError("unknown error type '" + key + "' in tags", line);
            }
            if (key != to_string(t)) throw ValidationError("error type keys must be uppercase", line);
            if (!words.is_array()) throw ValidationError("tags." + key + " must be an array", line);
            auto& set = map[t];
            for (const json& w : words) {
                if (!w.is_string()) throw ValidationError("tag keywords must be strings", line);
                set.insert(w.get<std::string>());
            }
        }
        s.tags = std::move(map);
    }
    if (j.contains("weight")) {
        if (!j["weight"].is_number()) throw ValidationError("weight must be a number", line);
        s.weight = j["weight"].get<double>();
    }
    try {
        validate_sample(s);
    } catch (const ValidationError& e) {
        throw ValidationError(e.what(), line);
    }
    return s;
}

PreferencePair pair_from_json(const json& j, std::size_t line) {
    require_keys(j,
                 {"id", "method", "prompt", "chosen_text", "rejected_text", "chosen_image", "rejected_image",
                  "weight", "meta"},
                 line);
    PreferencePair p;
    p.id = get_field<std::string>(j, "id", line);
    try {
        p.method = parse_method(get_field<std::string>(j, "method", line));
    } catch (const ParseError& e) {
        throw ValidationError(e.what(), line);
    }
    p.prompt = get_field<std::string>(j, "prompt", line);
    p.chosen_text = get_field<std::string>(j, "chosen_text", line);
    if (j.contains("rejected_text")) p.rejected_text = get_field<std::string>(j, "rejected_text", line);
    p.chosen_image = get_field<std::string>(j, "chosen_image", line);
    if (j.contains("rejected_image")) p.rejected_image = get_field<std::string>(j, "rejected_image", line);
    if (j.contains("weight")) {
        if (!j["weight"].is_number()) throw ValidationError("weight must be a number", line);
        p.weight = j["weight"].get<double>();
    }
    if (j.contains("meta")) p.meta = j["meta"];
    try {
        validate_pair(p);
    } catch (const ValidationError& e) {
        throw ValidationError(e.what(), line);
    }
    return p;
}

std::vector<std::pair<std::size_t, json>> read_jsonl(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path.string());
    std::vector<std::pair<std::size_t, json>> out;
    std::string text;
    std::size_t line = 0;
    while (std::getline(in, text)) {
        ++line;
        if (!text.empty() && text.back() == '\r') text.pop_back();
        if (text.find_first_not_of(" \t") == std::string::npos) continue;
        try {
            out.emplace_back(line, json::parse(text));
        } catch (const json::parse_error& e) {
            throw ParseError(std::string("malformed JSON: ") + e.what(), line);
        }
    }
    return out;
}

void write_text_atomic(const std::filesystem::path& path, const std::string& content) {
    std::filesystem::path tmp = path;
    tmp += ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw IoError("cannot write " + path.string());
        out << content;
        out.flush();
        if (!out) throw IoError("write failed for " + path.string());
    }
    std::error_code ec;
    std::filesystem::rename(tmp, path, ec);
    if (ec) {
        std::filesystem::remove(tmp, ec);
        throw IoError("cannot write " + path.string());
    }
}

std::vector<Sample> load_samples(const std::filesystem::path& path) {
    std::vector<Sample> out;
    std::set<std::string> seen;
    for (auto& [line, j] : read_jsonl(path)) {
        Sample s = sample_from_json(j, line);
        if (!seen.insert(s.id).second) throw ValidationError("duplicate sample id '" + s.id + "'", line);
        out.push_back(std::move(s));
    }
    return out;
}

void save_samples(std::span<const Sample> samples, const std::filesystem::path& path) {
    std::string body;
    std::set<std::string> seen;
    for (const Sample& s : samples) {
        validate_sample(s);
        if (!seen.insert(s.id).second) throw ValidationError("duplicate sample id '" + s.id + "'");
        body += dump_line(to_json(s));
    }
    write_text_atomic(path, body);
}

std::vector<PreferencePair> load_pairs(const std::filesystem::path& path) {
    std::vector<PreferencePair> out;
    for (auto& [line, j] : read_jsonl(path)) out.push_back(pair_from_json(j, line));
    return out;
}

void save_pairs(std::span<const PreferencePair> pairs, const std::filesystem::path& path) {
    std::string body;
    for (const PreferencePair& p : pairs) {
        validate_pair(p);
        body += dump_line(to_json(p));
    }
    write_text_atomic(path, body);
}

}  // namespace medpo
