#pragma once

#include <cstdint>
#include <string>
#include <string_view>

#include "medpo/core/image.hpp"

namespace medpo {

enum class DecodeMode { Greedy, Sample };

struct GenerateOptions {
    DecodeMode mode = DecodeMode::Greedy;
    double temperature = 1.0;
    int max_len = 48;
    std::uint64_t seed = 0;
};

/// Anything that can answer a prompt about an image. Pair builders that
/// self-generate rejected responses (Text-Noise, IRPO, mDPO) go through this.
class PolicyClient {
public:
    virtual ~PolicyClient() = default;
    virtual std::string generate(std::string_view prompt, const ImageBuffer& image, const GenerateOptions& opts) = 0;
};

}  // namespace medpo
