#pragma once

#include "ckm/ndarray.hpp"

#include <cstdint>
#include <filesystem>
#include <vector>

namespace ckm {

/// [0,1] -> [0,255] with clamping and round-half-up (0.5 -> 128).
std::uint8_t quantize_unit(double v);

/// Writes an 8-bit grayscale PNG; row 0 of `pixels` (height x width) is the top row.
void write_png_gray(const std::filesystem::path& path, const std::vector<std::uint8_t>& pixels,
                    int width, int height);

/// Renders channel `beam` of a C x H x W map. With `compare`, the image is the
/// two maps side by side (map | compare).
void render_png(const NdArrayF& map, int beam, const std::filesystem::path& path,
                const NdArrayF* compare = nullptr);

/// Decodes an 8-bit grayscale PNG (used for round-trip checks).
std::vector<std::uint8_t> read_png_gray(const std::filesystem::path& path, int& width, int& height);

}  // namespace ckm
