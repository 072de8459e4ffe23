#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

#include "maskforge/image.hpp"

namespace maskforge {

// PNG and JPEG input, PNG output. Encoding uses fixed settings and writes no
// time chunk, so identical rasters always produce identical files.

RgbaImage read_rgba(const std::filesystem::path& path);
RgbImage read_rgb(const std::filesystem::path& path);

std::vector<std::uint8_t> encode_png(const RgbaImage& img);
std::vector<std::uint8_t> encode_png(const RgbImage& img);

void write_png(const std::filesystem::path& path, const RgbaImage& img);
void write_png(const std::filesystem::path& path, const RgbImage& img);

RgbImage drop_alpha(const RgbaImage& img);

}  // namespace maskforge
