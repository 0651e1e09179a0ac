#include "meshgait/image.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <memory>

#include "meshgait/errors.hpp"

namespace meshgait {

namespace {

struct FileCloser {
    void operator()(FILE* f) const {
        if (f) std::fclose(f);
    }
};
using FilePtr = std::unique_ptr<FILE, FileCloser>;

} // namespace

ImageU8 read_png_gray(const std::filesystem::path& path) {
    FilePtr fp(std::fopen(path.string().c_str(), "rb"));
    if (!fp) throw DataError("cannot open PNG " + path.string());
    png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    if (!png) throw Error("png_create_read_struct failed");
    png_infop info = png_create_info_struct(png);
    if (!info) {
        png_destroy_read_struct(&png, nullptr, nullptr);
        throw Error("png_create_info_struct failed");
    }
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw FormatError("malformed PNG " + path.string());
    }
    png_init_io(png, fp.get());
    png_read_info(png, info);

    png_uint_32 w = png_get_image_width(png, info);
    png_uint_32 h = png_get_image_height(png, info);
    int color = png_get_color_type(png, info);
    int depth = png_get_bit_depth(png, info);

    if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
    if (color == PNG_COLOR_TYPE_GRAY && depth < 8) png_set_expand_gray_1_2_4_to_8(png);
    if (depth == 16) png_set_strip_16(png);
    if (color & PNG_COLOR_MASK_ALPHA) png_set_strip_alpha(png);
    color = png_get_color_type(png, info);
    if (color == PNG_COLOR_TYPE_RGB) png_set_rgb_to_gray_fixed(png, 1, -1, -1);
    png_read_update_info(png, info);

    ImageU8 img;
    img.width = static_cast<int>(w);
    img.height = static_cast<int>(h);
    img.pixels.resize(static_cast<size_t>(w) * h);
    std::vector<png_bytep> rows(h);
    for (png_uint_32 r = 0; r < h; ++r) rows[r] = img.pixels.data() + static_cast<size_t>(r) * w;
    png_read_image(png, rows.data());
    png_read_end(png, nullptr);
    png_destroy_read_struct(&png, &info, nullptr);
    return img;
}

void write_png_gray(const std::filesystem::path& path, const ImageU8& img) {
    FilePtr fp(std::fopen(path.string().c_str(), "wb"));
    if (!fp) throw DataError("cannot write PNG " + path.string());
    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    if (!png) throw Error("png_create_write_struct failed");
    png_infop info = png_create_info_struct(png);
    if (!info) {
        png_destroy_write_struct(&png, nullptr);
        throw Error("png_create_info_struct failed");
    }
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_write_struct(&png, &info);
        throw DataError("PNG write failed for " + path.string());
    }
    png_init_io(png, fp.get());
    // fixed settings keep outputs byte-identical across runs
    png_set_compression_level(png, 6);
    png_set_IHDR(png, info, static_cast<png_uint_32>(img.width),
                 static_cast<png_uint_32>(img.height), 8, PNG_COLOR_TYPE_GRAY, PNG_INTERLACE_NONE,
                 PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);
    std::vector<png_bytep> rows(static_cast<size_t>(img.height));
    for (int r = 0; r < img.height; ++r)
        rows[static_cast<size_t>(r)] =
            const_cast<png_bytep>(img.pixels.data() + static_cast<size_t>(r) * img.width);
    png_write_image(png, rows.data());
    png_write_end(png, nullptr);
    png_destroy_write_struct(&png, &info);
}

std::vector<float> binarize(const ImageU8& img, uint8_t threshold) {
    std::vector<float> out(img.pixels.size());
    for (size_t i = 0; i < img.pixels.size(); ++i) out[i] = img.pixels[i] >= threshold ? 1.f : 0.f;
    return out;
}

namespace {

std::vector<float> resize_bilinear_plane(const std::vector<float>& x, int h, int w, int oh,
                                         int ow) {
    std::vector<float> out(static_cast<size_t>(oh) * ow);
    double sy = oh > 1 ? static_cast<double>(h - 1) / (oh - 1) : 0.0;
    double sx = ow > 1 ? static_cast<double>(w - 1) / (ow - 1) : 0.0;
    for (int i = 0; i < oh; ++i) {
        double py = i * sy;
        int y0 = std::min(static_cast<int>(py), h - 1);
        int y1 = std::min(y0 + 1, h - 1);
        double ty = py - y0;
        for (int j = 0; j < ow; ++j) {
            double px = j * sx;
            int x0 = std::min(static_cast<int>(px), w - 1);
            int x1 = std::min(x0 + 1, w - 1);
            double tx = px - x0;
            out[static_cast<size_t>(i) * ow + j] = static_cast<float>(
                (1 - ty) * ((1 - tx) * x[static_cast<size_t>(y0) * w + x0] +
                            tx * x[static_cast<size_t>(y0) * w + x1]) +
                ty * ((1 - tx) * x[static_cast<size_t>(y1) * w + x0] +
                      tx * x[static_cast<size_t>(y1) * w + x1]));
        }
    }
    return out;
}

} // namespace

std::vector<float> normalize_mask(const std::vector<float>& mask, int h, int w, int out_h,
                                  int out_w) {
    if (h == out_h && w == out_w) return mask;
    // bring width to the target aspect at constant height, centered
    int target_w = std::max(1, static_cast<int>(std::lround(static_cast<double>(h) * out_w / out_h)));
    std::vector<float> adjusted;
    if (target_w == w) {
        adjusted = mask;
    } else if (target_w < w) {
        int off = (w - target_w) / 2;
        adjusted.resize(static_cast<size_t>(h) * target_w);
        for (int r = 0; r < h; ++r)
            std::copy_n(mask.begin() + static_cast<size_t>(r) * w + off, target_w,
                        adjusted.begin() + static_cast<size_t>(r) * target_w);
    } else {
        int off = (target_w - w) / 2;
        adjusted.assign(static_cast<size_t>(h) * target_w, 0.f);
        for (int r = 0; r < h; ++r)
            std::copy_n(mask.begin() + static_cast<size_t>(r) * w, w,
                        adjusted.begin() + static_cast<size_t>(r) * target_w + off);
    }
    return resize_bilinear_plane(adjusted, h, target_w, out_h, out_w);
}

ImageU8 upscale_nearest(const ImageU8& img, int factor) {
    ImageU8 out;
    out.width = img.width * factor;
    out.height = img.height * factor;
    out.pixels.resize(static_cast<size_t>(out.width) * out.height);
    for (int r = 0; r < out.height; ++r)
        for (int c = 0; c < out.width; ++c) out.at(r, c) = img.at(r / factor, c / factor);
    return out;
}

void draw_square(ImageU8& img, int row, int col, int half, uint8_t value) {
    for (int r = std::max(0, row - half); r <= std::min(img.height - 1, row + half); ++r)
        for (int c = std::max(0, col - half); c <= std::min(img.width - 1, col + half); ++c)
            img.at(r, c) = value;
}

} // namespace meshgait
