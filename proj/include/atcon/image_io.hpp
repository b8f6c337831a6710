#pragma once

#include <filesystem>

#include "atcon/tensor.hpp"

namespace atcon {

/// Binary PNM I/O. Images are [C,H,W] tensors in [0,1]; C is 1 (PGM) or 3 (PPM).
/// Values are quantised to 8 bits on write.
void write_pgm(const std::filesystem::path& path, const Tensor& map);  // [H,W]
void write_ppm(const std::filesystem::path& path, const Tensor& image);  // [3,H,W] or [1,H,W]
Tensor read_pnm(const std::filesystem::path& path);

/// Rounds to the nearest multiple of 1/255, as a round trip through 8-bit storage would.
Real quantize8(Real v);

/// Bilinear resize of a [C,H,W] image.
Tensor resize_image(const Tensor& image, int height, int width);

}  // namespace atcon
