#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace mcl3d {

// Minimal 8-bit RGB PNG writer (single zlib-compressed IDAT chunk).
void write_png_rgb(const std::string& path, int width, int height,
                   const std::vector<uint8_t>& rgb);

}  // namespace mcl3d
