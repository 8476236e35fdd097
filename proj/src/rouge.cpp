#include "medpo/rouge.hpp"

#include <algorithm>
#include <cctype>

namespace medpo {

std::vector<std::string> rouge_tokens(std::string_view text) {
    std::vector<std::string> out;
    std::string cur;
    for (char ch : text) {
        const auto c = static_cast<unsigned char>(ch);
        if (std::isalnum(c) || c >= 0x80) {
            cur += static_cast<char>(std::tolower(c));
        } else if (!cur.empty()) {
            out.push_back(std::move(cur));
            cur.clear();
        }
    }
    if (!cur.empty()) out.push_back(std::move(cur));
    return out;
}

std::size_t lcs_length(const std::vector<std::string>& a, const std::vector<std::string>& b) {
    std::vector<std::size_t> prev(b.size() + 1, 0), cur(b.size() + 1, 0);
    for (std::size_t i = 1; i <= a.size(); ++i) {
        for (std::size_t j = 1; j <= b.size(); ++j)
            cur[j] = a[i - 1] == b[j - 1] ? prev[j - 1] + 1 : std::max(prev[j], cur[j - 1]);
        std::swap(prev, cur);
    }
    return prev[b.size()];
}

double rouge_l(std::string_view candidate, std::string_view reference) {
    const auto c = rouge_tokens(candidate);
    const auto r = rouge_tokens(reference);
    if (c.empty() || r.empty()) return 0.0;
    const double lcs = static_cast<double>(lcs_length(c, r));
    if (lcs == 0.0) return 0.0;
    const double precision = lcs / static_cast<double>(c.size());
    const double recall = lcs / static_cast<double>(r.size());
    return 2.0 * precision * recall / (precision + recall);
}

}  // namespace medpo
