#include "medpo/core/image.hpp"

#include <csetjmp>
#include <cstdio>
#include <fstream>
#include <memory>

#include <jpeglib.h>
#include <png.h>

#include "medpo/core/error.hpp"

namespace medpo {

ImageBuffer::ImageBuffer(int w, int h, int c, std::uint8_t fill)
    : width(w), height(h), channels(c), pixels(static_cast<std::size_t>(w) * h * c, fill) {}

void validate_image(const ImageBuffer& img) {
    if (img.width <= 0 || img.height <= 0) throw ContractError("image dimensions must be positive");
    if (img.channels != 1 && img.channels != 3) throw ContractError("image must have 1 or 3 channels");
    if (img.pixels.size() != static_cast<std::size_t>(img.width) * img.height * img.channels)
        throw ContractError("pixel buffer size does not match dimensions");
}

namespace {

ImageBuffer load_png(const std::filesystem::path& path) {
    png_image image{};
    image.version = PNG_IMAGE_VERSION;
    if (!png_image_begin_read_from_file(&image, path.c_str()))
        throw IoError("cannot decode PNG " + path.string() + ": " + image.message);
    const bool color = (image.format & PNG_FORMAT_FLAG_COLOR) != 0;
    image.format = color ? PNG_FORMAT_RGB : PNG_FORMAT_GRAY;
    ImageBuffer out(static_cast<int>(image.width), static_cast<int>(image.height), color ? 3 : 1);
    if (!png_image_finish_read(&image, nullptr, out.pixels.data(), 0, nullptr)) {
        std::string msg = image.message;
        png_image_free(&image);
        throw IoError("cannot decode PNG " + path.string() + ": " + msg);
    }
    return out;
}

struct JpegErrorManager {
    jpeg_error_mgr pub;
    std::jmp_buf jump;
};

void jpeg_error_exit(j_common_ptr cinfo) {
    auto* err = reinterpret_cast<JpegErrorManager*>(cinfo->err);
    std::longjmp(err->jump, 1);
}

ImageBuffer load_jpeg(const std::filesystem::path& path) {
    std::unique_ptr<FILE, int (*)(FILE*)> file(std::fopen(path.c_str(), "rb"), &std::fclose);
    if (!file) throw IoError("cannot open " + path.string());

    jpeg_decompress_struct cinfo{};
    JpegErrorManager jerr{};
    cinfo.err = jpeg_std_error(&jerr.pub);
    jerr.pub.error_exit = jpeg_error_exit;
    ImageBuffer out;
    if (setjmp(jerr.jump)) {
        jpeg_destroy_decompress(&cinfo);
        throw IoError("cannot decode JPEG " + path.string());
    }
    jpeg_create_decompress(&cinfo);
    jpeg_stdio_src(&cinfo, file.get());
    jpeg_read_header(&cinfo, TRUE);
    cinfo.out_color_space = cinfo.num_components == 1 ? JCS_GRAYSCALE : JCS_RGB;
    jpeg_start_decompress(&cinfo);
    out = ImageBuffer(static_cast<int>(cinfo.output_width), static_cast<int>(cinfo.output_height),
                      cinfo.output_components);
    const std::size_t stride = static_cast<std::size_t>(out.width) * out.channels;
    while (cinfo.output_scanline < cinfo.output_height) {
        JSAMPROW row = out.pixels.data() + cinfo.output_scanline * stride;
        jpeg_read_scanlines(&cinfo, &row, 1);
    }
    jpeg_finish_decompress(&cinfo);
    jpeg_destroy_decompress(&cinfo);
    return out;
}

}  // namespace

ImageBuffer load_image(const std::filesystem::path& path) {
    unsigned char magic[8] = {};
    {
        std::ifstream in(path, std::ios::binary);
        if (!in) throw IoError("cannot open image " + path.string());
        in.read(reinterpret_cast<char*>(magic), sizeof magic);
        if (in.gcount() < 3) throw IoError("not an image: " + path.string());
    }
    if (png_sig_cmp(magic, 0, 8) == 0) return load_png(path);
    if (magic[0] == 0xFF && magic[1] == 0xD8 && magic[2] == 0xFF) return load_jpeg(path);
    throw IoError("unsupported image format: " + path.string());
}

void save_png(const ImageBuffer& img, const std::filesystem::path& path) {
    validate_image(img);
    png_image image{};
    image.version = PNG_IMAGE_VERSION;
    image.width = static_cast<png_uint_32>(img.width);
    image.height = static_cast<png_uint_32>(img.height);
    image.format = img.channels == 3 ? PNG_FORMAT_RGB : PNG_FORMAT_GRAY;
    if (!png_image_write_to_file(&image, path.c_str(), 0, img.pixels.data(), 0, nullptr))
        throw IoError("cannot write PNG " + path.string() + ": " + image.message);
}

}  // namespace medpo
