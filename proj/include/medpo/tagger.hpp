#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <string_view>
#include <vector>

#include "medpo/core/types.hpp"

namespace medpo::tagger {

struct LexiconEntry {
    std::string canonical;  // lowercase identifier used in tag sets
    std::string surface;    // spelling matched when case_sensitive
    bool case_sensitive = false;
    bool multiword = false;
    /// Broad-parent terms are substitution targets only and never trigger a tag.
    bool parent_only = false;
    /// Entries sharing a non-empty group are synonyms and never replace each other.
    std::string group;
};

/// Keyword phrases per error category.
///
/// File format, one file per category (mm.txt, slc.txt, am.txt, las.txt):
///   # comment
///   phrase [!cs] [!parent] [!group=<name>]
/// `!cs` makes the phrase match case-sensitively; `!parent` marks a broad
/// parent term; `!group=` ties synonyms together.
class KeywordLexicon {
public:
    KeywordLexicon() = default;

    /// Throws ValidationError if a category ends up empty.
    explicit KeywordLexicon(std::map<ErrorType, std::vector<LexiconEntry>> entries);

    const std::vector<LexiconEntry>& entries(ErrorType t) const;
    /// Entry with the given canonical form, or nullptr.
    const LexiconEntry* find(ErrorType t, std::string_view canonical) const;

private:
    std::map<ErrorType, std::vector<LexiconEntry>> entries_;
};

/// Parses one category file's text. `source` names it in error messages.
std::vector<LexiconEntry> parse_lexicon_text(std::string_view text, std::string_view source = "<lexicon>");
KeywordLexicon load_lexicon_dir(const std::filesystem::path& dir);
/// The lexicon shipped under data/lexicon, compiled in.
const KeywordLexicon& default_lexicon();
/// Text of the shipped lexicon file for a category.
std::string_view default_lexicon_text(ErrorType t);
std::string lexicon_file_name(ErrorType t);

enum class TextSource { Prompt, Response };

struct TagOffset {
    std::string phrase;  // canonical
    ErrorType category;
    std::size_t start;  // byte offsets into the normalized text
    std::size_t end;
    TextSource source;

    bool operator==(const TagOffset&) const = default;
};

struct TagResult {
    TagMap tags;
    std::vector<TagOffset> offsets;

    bool empty() const noexcept { return tags.empty(); }
};

/// NFC normalisation plus whitespace collapsing; matching runs on this form.
std::string normalize_text(std::string_view text);

struct Match {
    std::size_t start;
    std::size_t end;
    const LexiconEntry* entry;
};

/// Word-boundary matches of one category's lexicon in `text` (already
/// normalised), longest phrase first, non-overlapping, in text order.
std::vector<Match> find_matches(std::string_view text, const std::vector<LexiconEntry>& entries,
                                bool include_parents = false);

TagResult tag_sample(std::string_view prompt, std::string_view response, const KeywordLexicon& lexicon);

struct VqaItem {
    std::string id;
    std::string question;
    std::string answer;
};

/// Category -> ids of matching items (in input order). All four keys always present.
std::map<ErrorType, std::vector<std::string>> screen_vqa(const std::vector<VqaItem>& items,
                                                         const KeywordLexicon& lexicon);

/// Loads SLAKE / VQA-RAD style JSON arrays or JSONL with question/answer keys.
/// English-only filtering is applied when a `q_lang` key is present.
std::vector<VqaItem> load_vqa_items(const std::filesystem::path& path);

/// left <-> right, left-sided <-> right-sided, preserving casing style.
std::string laterality_opposite(std::string_view term);
bool is_laterality_term(std::string_view term);

enum class CaseStyle { Lower, Upper, Title, Mixed };
CaseStyle detect_case(std::string_view s);
std::string apply_case(std::string_view s, CaseStyle style);

}  // namespace medpo::tagger
