#ifndef MESHGAIT_IMAGE_HPP
#define MESHGAIT_IMAGE_HPP

#include <cstdint>
#include <filesystem>
#include <vector>

namespace meshgait {

// 8-bit grayscale image, row-major.
struct ImageU8 {
    int width = 0;
    int height = 0;
    std::vector<uint8_t> pixels;

    uint8_t& at(int row, int col) { return pixels[static_cast<size_t>(row) * width + col]; }
    uint8_t at(int row, int col) const { return pixels[static_cast<size_t>(row) * width + col]; }
};

ImageU8 read_png_gray(const std::filesystem::path& path);
void write_png_gray(const std::filesystem::path& path, const ImageU8& img);

// float mask helpers (values in [0,1])
std::vector<float> binarize(const ImageU8& img, uint8_t threshold = 128);

// Center-crop or center-pad the width to the target aspect ratio, then
// bilinear-resize to (out_h, out_w). Identity when sizes already match.
std::vector<float> normalize_mask(const std::vector<float>& mask, int h, int w, int out_h,
                                  int out_w);

ImageU8 upscale_nearest(const ImageU8& img, int factor);
void draw_square(ImageU8& img, int row, int col, int half, uint8_t value);

} // namespace meshgait

#endif
