#include "magd/image_io.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>

#include "magd/binary_io.hpp"
#include "magd/errors.hpp"

namespace magd {

std::vector<std::uint8_t> encode_ppm(const Tensor& img) {
  if (img.rank() != 3 || img.dim(0) != 3) throw DimensionError("ppm: image must be [3,H,W], got " + shape_str(img.shape()));
  const int H = img.dim(1), W = img.dim(2);
  const std::string header = "P6\n" + std::to_string(W) + " " + std::to_string(H) + "\n255\n";
  std::vector<std::uint8_t> out(header.begin(), header.end());
  const std::size_t hw = static_cast<std::size_t>(H) * W;
  for (std::size_t p = 0; p < hw; ++p)
    for (int c = 0; c < 3; ++c) {
      const double v = std::clamp(static_cast<double>(img[c * hw + p]), 0.0, 1.0);
      out.push_back(static_cast<std::uint8_t>(std::lround(v * 255.0)));
    }
  return out;
}

Tensor decode_ppm(const std::vector<std::uint8_t>& b, const std::string& what) {
  std::size_t pos = 0;
  auto fail = [&](const std::string& m) -> FormatError { return FormatError(what + ": " + m); };
  auto skip_space = [&] {
    while (pos < b.size()) {
      if (b[pos] == '#') {
        while (pos < b.size() && b[pos] != '\n') ++pos;
      } else if (std::isspace(b[pos])) {
        ++pos;
      } else {
        break;
      }
    }
  };
  auto number = [&]() {
    skip_space();
    if (pos >= b.size() || !std::isdigit(b[pos])) throw fail("malformed header");
    long v = 0;
    while (pos < b.size() && std::isdigit(b[pos])) {
      v = v * 10 + (b[pos++] - '0');
      if (v > 1 << 20) throw fail("header value too large");
    }
    return static_cast<int>(v);
  };
  if (b.size() < 2 || b[0] != 'P' || b[1] != '6') throw fail("not a binary PPM (P6)");
  pos = 2;
  const int W = number(), H = number(), maxval = number();
  if (W < 1 || H < 1) throw fail("bad image size");
  if (maxval != 255) throw fail("only 8-bit PPM supported");
  if (pos >= b.size() || !std::isspace(b[pos])) throw fail("malformed header");
  ++pos;
  const std::size_t hw = static_cast<std::size_t>(H) * W;
  if (b.size() - pos != hw * 3) throw fail("payload size mismatch");
  Tensor img({3, H, W});
  for (std::size_t p = 0; p < hw; ++p)
    for (int c = 0; c < 3; ++c) img[c * hw + p] = static_cast<float>(b[pos + p * 3 + c] / 255.0);
  return img;
}

void image_write(const std::string& path, const Tensor& image) { io::write_file(path, encode_ppm(image)); }

Tensor image_read(const std::string& path) { return decode_ppm(io::read_file(path), path); }

}  // namespace magd
