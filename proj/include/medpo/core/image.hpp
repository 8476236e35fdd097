#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

namespace medpo {

/// Row-major 8-bit image, 1 (gray) or 3 (RGB) interleaved channels.
struct ImageBuffer {
    int width = 0;
    int height = 0;
    int channels = 1;
    std::vector<std::uint8_t> pixels;

    ImageBuffer() = default;
    ImageBuffer(int w, int h, int c, std::uint8_t fill = 0);

    std::size_t size() const noexcept { return pixels.size(); }
    std::uint8_t& at(int x, int y, int c = 0) { return pixels[index(x, y, c)]; }
    std::uint8_t at(int x, int y, int c = 0) const { return pixels[index(x, y, c)]; }
    std::size_t index(int x, int y, int c = 0) const noexcept {
        return (static_cast<std::size_t>(y) * width + x) * channels + c;
    }

    bool operator==(const ImageBuffer&) const = default;
};

/// Throws ContractError unless dimensions are positive, channels is 1 or 3
/// and the pixel count matches.
void validate_image(const ImageBuffer& img);

/// Decodes PNG or JPEG (detected by magic bytes). Alpha is dropped, 16-bit
/// samples are reduced to 8 bits, palettes expanded. Throws IoError.
ImageBuffer load_image(const std::filesystem::path& path);

/// Always PNG. Output is a pure function of the buffer.
void save_png(const ImageBuffer& img, const std::filesystem::path& path);

}  // namespace medpo
