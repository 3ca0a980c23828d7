#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace needlenet {

// Interleaved 8-bit image; channels is 1 (gray), 3 (RGB) or 4 (RGBA).
struct ImageU8 {
    int width = 0;
    int height = 0;
    int channels = 0;
    std::vector<std::uint8_t> pixels;  // row-major, interleaved

    std::uint8_t& at(int y, int x, int c) {
        return pixels[static_cast<std::size_t>((y * width + x) * channels + c)];
    }
    std::uint8_t at(int y, int x, int c) const {
        return pixels[static_cast<std::size_t>((y * width + x) * channels + c)];
    }
};

void write_png(const std::string& path, const ImageU8& img);
ImageU8 read_png(const std::string& path);

}  // namespace needlenet
