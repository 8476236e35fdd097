#pragma once

#include <string>
#include <string_view>
#include <vector>

namespace medpo {

/// Lowercased alphanumeric tokens.
std::vector<std::string> rouge_tokens(std::string_view text);

/// Length of the longest common subsequence of two token lists.
std::size_t lcs_length(const std::vector<std::string>& a, const std::vector<std::string>& b);

/// ROUGE-L F1 (beta = 1). Zero when either side has no tokens.
double rouge_l(std::string_view candidate, std::string_view reference);

}  // namespace medpo
