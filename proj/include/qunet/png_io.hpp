#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace qunet {

struct GrayImage {
    int width = 0;
    int height = 0;
    std::vector<uint8_t> pixels;  // row-major, 8-bit
};

// Decode any PNG to 8-bit grayscale (color converted to luma, alpha
// stripped, sub-8-bit and 16-bit depths normalized). Throws
// std::runtime_error naming the file on any failure.
GrayImage read_png_gray(const std::string& path);

void write_png_gray(const std::string& path, const GrayImage& img);

}  // namespace qunet
