#include "medpo/tagger.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <sstream>

#include <unicode/normalizer2.h>
#include <unicode/unistr.h>

#include "embedded_data.inc"
#include "medpo/core/dataset.hpp"
#include "medpo/core/error.hpp"

namespace medpo::tagger {

namespace {

std::string ascii_lower(std::string_view s) {
    std::string out(s);
    for (char& c : out) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
    return out;
}

std::string ascii_upper(std::string_view s) {
    std::string out(s);
    for (char& c : out) c = static_cast<char>(std::toupper(static_cast<unsigned char>(c)));
    return out;
}

std::string_view trim(std::string_view s) {
    const auto b = s.find_first_not_of(" \t\r\n");
    if (b == std::string_view::npos) return {};
    const auto e = s.find_last_not_of(" \t\r\n");
    return s.substr(b, e - b + 1);
}

// Non-ASCII bytes count as word characters so matches never split a UTF-8 word.
bool is_word_byte(unsigned char c) {
    return std::isalnum(c) || c >= 0x80;
}

}  // namespace

KeywordLexicon::KeywordLexicon(std::map<ErrorType, std::vector<LexiconEntry>> entries)
    : entries_(std::move(entries)) {
    for (ErrorType t : kAllErrorTypes) {
        auto it = entries_.find(t);
        if (it == entries_.end() || it->second.empty())
            throw ValidationError("lexicon category " + std::string(to_string(t)) + " is empty");
    }
}

const std::vector<LexiconEntry>& KeywordLexicon::entries(ErrorType t) const {
    static const std::vector<LexiconEntry> empty;
    auto it = entries_.find(t);
    return it == entries_.end() ? empty : it->second;
}

const LexiconEntry* KeywordLexicon::find(ErrorType t, std::string_view canonical) const {
    const std::string key = ascii_lower(canonical);
    for (const LexiconEntry& e : entries(t))
        if (e.canonical == key) return &e;
    return nullptr;
}

std::vector<LexiconEntry> parse_lexicon_text(std::string_view text, std::string_view source) {
    std::vector<LexiconEntry> out;
    std::size_t line_no = 0;
    std::size_t pos = 0;
    while (pos <= text.size()) {
        const std::size_t nl = text.find('\n', pos);
        std::string_view line = text.substr(pos, nl == std::string_view::npos ? std::string_view::npos : nl - pos);
        pos = nl == std::string_view::npos ? text.size() + 1 : nl + 1;
        ++line_no;
        if (auto hash = line.find('#'); hash != std::string_view::npos) line = line.substr(0, hash);
        line = trim(line);
        if (line.empty()) continue;

        LexiconEntry e;
        // Flags are trailing tokens that start with '!'.
        std::string phrase;
        std::istringstream words{std::string(line)};
        std::string word;
        std::vector<std::string> phrase_words;
        while (words >> word) {
            if (word.starts_with("!")) {
                if (word == "!cs") e.case_sensitive = true;
                else if (word == "!parent") e.parent_only = true;
                else if (word.starts_with("!group=") && word.size() > 7) e.group = word.substr(7);
                else throw ParseError(std::string(source) + ": unknown flag '" + word + "'", line_no);
            } else {
                if (e.case_sensitive || e.parent_only || !e.group.empty())
                    throw ParseError(std::string(source) + ": flags must follow the phrase", line_no);
                phrase_words.push_back(word);
            }
        }
        if (phrase_words.empty()) throw ParseError(std::string(source) + ": missing phrase", line_no);
        for (const auto& w : phrase_words) phrase += (phrase.empty() ? "" : " ") + w;
        e.surface = phrase;
        e.canonical = ascii_lower(phrase);
        if (!e.case_sensitive && e.surface != e.canonical) e.surface = e.canonical;
        e.multiword = phrase.find_first_of(" -") != std::string::npos;
        const bool dup = std::any_of(out.begin(), out.end(),
                                     [&](const LexiconEntry& o) { return o.canonical == e.canonical; });
        if (dup) throw ParseError(std::string(source) + ": duplicate phrase '" + phrase + "'", line_no);
        out.push_back(std::move(e));
    }
    return out;
}

std::string lexicon_file_name(ErrorType t) {
    return ascii_lower(to_string(t)) + ".txt";
}

std::string_view default_lexicon_text(ErrorType t) {
    switch (t) {
        case ErrorType::MM: return embedded::kLexiconMM;
        case ErrorType::SLC: return embedded::kLexiconSLC;
        case ErrorType::AM: return embedded::kLexiconAM;
        case ErrorType::LAS: return embedded::kLexiconLAS;
    }
    return {};
}

KeywordLexicon load_lexicon_dir(const std::filesystem::path& dir) {
    std::map<ErrorType, std::vector<LexiconEntry>> entries;
    for (ErrorType t : kAllErrorTypes) {
        const auto path = dir / lexicon_file_name(t);
        std::ifstream in(path, std::ios::binary);
        if (!in) throw IoError("cannot open lexicon file " + path.string());
        std::stringstream ss;
        ss << in.rdbuf();
        entries[t] = parse_lexicon_text(ss.str(), path.string());
    }
    return KeywordLexicon(std::move(entries));
}

const KeywordLexicon& default_lexicon() {
    static const KeywordLexicon lexicon = [] {
        std::map<ErrorType, std::vector<LexiconEntry>> entries;
        for (ErrorType t : kAllErrorTypes)
            entries[t] = parse_lexicon_text(default_lexicon_text(t), lexicon_file_name(t));
        return KeywordLexicon(std::move(entries));
    }();
    return lexicon;
}

std::string normalize_text(std::string_view text) {
    UErrorCode status = U_ZERO_ERROR;
    const icu::Normalizer2* nfc = icu::Normalizer2::getNFCInstance(status);
    std::string normalized;
    if (U_SUCCESS(status)) {
        icu::UnicodeString u = icu::UnicodeString::fromUTF8(icu::StringPiece(text.data(), static_cast<int32_t>(text.size())));
        icu::UnicodeString n = nfc->normalize(u, status);
        if (U_SUCCESS(status)) n.toUTF8String(normalized);
    }
    if (!U_SUCCESS(status)) normalized.assign(text);

    std::string out;
    out.reserve(normalized.size());
    bool pending_space = false;
    for (char c : normalized) {
        if (std::isspace(static_cast<unsigned char>(c))) {
            pending_space = !out.empty();
            continue;
        }
        if (pending_space) out += ' ';
        pending_space = false;
        out += c;
    }
    return out;
}

std::vector<Match> find_matches(std::string_view text, const std::vector<LexiconEntry>& entries,
                                bool include_parents) {
    const std::string lowered = ascii_lower(text);
    std::vector<Match> candidates;
    for (const LexiconEntry& e : entries) {
        if (e.parent_only && !include_parents) continue;
        const std::string_view hay = e.case_sensitive ? text : std::string_view(lowered);
        const std::string_view needle = e.case_sensitive ? std::string_view(e.surface) : std::string_view(e.canonical);
        if (needle.empty()) continue;
        for (std::size_t at = hay.find(needle); at != std::string_view::npos; at = hay.find(needle, at + 1)) {
            const std::size_t end = at + needle.size();
            const bool left_ok = at == 0 || !is_word_byte(static_cast<unsigned char>(hay[at - 1]));
            const bool right_ok = end == hay.size() || !is_word_byte(static_cast<unsigned char>(hay[end]));
            if (left_ok && right_ok) candidates.push_back({at, end, &e});
        }
    }
    // Longest first; ties by position then canonical form so lexicon order never matters.
    std::sort(candidates.begin(), candidates.end(), [](const Match& a, const Match& b) {
        const std::size_t la = a.end - a.start, lb = b.end - b.start;
        if (la != lb) return la > lb;
        if (a.start != b.start) return a.start < b.start;
        return a.entry->canonical < b.entry->canonical;
    });
    std::vector<Match> accepted;
    for (const Match& m : candidates) {
        const bool overlaps = std::any_of(accepted.begin(), accepted.end(),
                                          [&](const Match& a) { return m.start < a.end && a.start < m.end; });
        if (!overlaps) accepted.push_back(m);
    }
    std::sort(accepted.begin(), accepted.end(), [](const Match& a, const Match& b) { return a.start < b.start; });
    return accepted;
}

TagResult tag_sample(std::string_view prompt, std::string_view response, const KeywordLexicon& lexicon) {
    TagResult result;
    const std::string texts[2] = {normalize_text(prompt), normalize_text(response)};
    const TextSource sources[2] = {TextSource::Prompt, TextSource::Response};
    for (ErrorType t : kAllErrorTypes) {
        for (int i = 0; i < 2; ++i) {
            for (const Match& m : find_matches(texts[i], lexicon.entries(t))) {
                result.tags[t].insert(m.entry->canonical);
                result.offsets.push_back({m.entry->canonical, t, m.start, m.end, sources[i]});
            }
        }
    }
    return result;
}

std::map<ErrorType, std::vector<std::string>> screen_vqa(const std::vector<VqaItem>& items,
                                                         const KeywordLexicon& lexicon) {
    std::map<ErrorType, std::vector<std::string>> out;
    for (ErrorType t : kAllErrorTypes) out[t];
    for (const VqaItem& item : items) {
        const TagResult r = tag_sample(item.question, item.answer, lexicon);
        for (const auto& [t, _] : r.tags) out[t].push_back(item.id);
    }
    return out;
}

namespace {

std::string json_text(const nlohmann::json& v) {
    if (v.is_string()) return v.get<std::string>();
    if (v.is_null()) return {};
    return v.dump();
}

std::optional<VqaItem> vqa_item_from_json(const nlohmann::json& j, std::size_t index) {
    if (!j.is_object()) throw ValidationError("VQA record is not an object", index + 1);
    if (auto lang = j.find("q_lang"); lang != j.end() && lang->is_string() && *lang != "en") return std::nullopt;
    VqaItem item;
    for (const char* key : {"qid", "id", "question_id"}) {
        if (auto it = j.find(key); it != j.end()) {
            item.id = json_text(*it);
            break;
        }
    }
    if (item.id.empty()) item.id = std::to_string(index);
    auto q = j.find("question");
    auto a = j.find("answer");
    if (q == j.end() || a == j.end()) throw ValidationError("VQA record needs question and answer", index + 1);
    item.question = json_text(*q);
    item.answer = json_text(*a);
    return item;
}

}  // namespace

std::vector<VqaItem> load_vqa_items(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path.string());
    char first = 0;
    while (in.get(first) && std::isspace(static_cast<unsigned char>(first))) {
    }
    in.close();

    std::vector<VqaItem> out;
    if (first == '[') {
        std::ifstream all(path, std::ios::binary);
        nlohmann::json arr;
        try {
            all >> arr;
        } catch (const nlohmann::json::parse_error& e) {
            throw ParseError(std::string("malformed VQA JSON: ") + e.what());
        }
        for (std::size_t i = 0; i < arr.size(); ++i)
            if (auto item = vqa_item_from_json(arr[i], i)) out.push_back(std::move(*item));
    } else {
        std::size_t i = 0;
        for (auto& [line, j] : read_jsonl(path)) {
            if (auto item = vqa_item_from_json(j, i)) out.push_back(std::move(*item));
            ++i;
        }
    }
    return out;
}

CaseStyle detect_case(std::string_view s) {
    int upper = 0, lower = 0;
    bool first_upper = false, seen_letter = false, rest_lower = true;
    for (char ch : s) {
        const auto c = static_cast<unsigned char>(ch);
        if (!std::isalpha(c)) continue;
        const bool up = std::isupper(c) != 0;
        upper += up;
        lower += !up;
        if (!seen_letter) first_upper = up;
        else if (up) rest_lower = false;
        seen_letter = true;
    }
    if (!seen_letter || upper == 0) return CaseStyle::Lower;
    if (lower == 0 && upper > 1) return CaseStyle::Upper;
    if (first_upper && rest_lower) return CaseStyle::Title;
    return CaseStyle::Mixed;
}

std::string apply_case(std::string_view s, CaseStyle style) {
    switch (style) {
        case CaseStyle::Lower: return ascii_lower(s);
        case CaseStyle::Upper: return ascii_upper(s);
        case CaseStyle::Title: {
            std::string out = ascii_lower(s);
            for (char& c : out) {
                if (std::isalpha(static_cast<unsigned char>(c))) {
                    c = static_cast<char>(std::toupper(static_cast<unsigned char>(c)));
                    break;
                }
            }
            return out;
        }
        case CaseStyle::Mixed: return std::string(s);
    }
    return std::string(s);
}

bool is_laterality_term(std::string_view term) {
    const std::string t = ascii_lower(term);
    return t == "left" || t == "right" || t == "left-sided" || t == "right-sided";
}

std::string laterality_opposite(std::string_view term) {
    const std::string t = ascii_lower(term);
    std::string opposite;
    if (t == "left") opposite = "right";
    else if (t == "right") opposite = "left";
    else if (t == "left-sided") opposite = "right-sided";
    else if (t == "right-sided") opposite = "left-sided";
    else throw ContractError("'" + std::string(term) + "' is not a laterality term");
    const CaseStyle style = detect_case(term);
    return apply_case(opposite, style == CaseStyle::Mixed ? CaseStyle::Lower : style);
}

}  // namespace medpo::tagger
