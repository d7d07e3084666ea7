#pragma once
// Binary PPM (P6, 8-bit) images.

#include <string>

#include "magd/tensor.hpp"

namespace magd {

// [3,H,W] in [0,1]; values are clamped and rounded half away from zero.
std::vector<std::uint8_t> encode_ppm(const Tensor& image);
Tensor decode_ppm(const std::vector<std::uint8_t>& bytes, const std::string& what = "ppm");

void image_write(const std::string& path, const Tensor& image);
Tensor image_read(const std::string& path);

}  // namespace magd
