#include "paintnext/canvas.hpp"

#include "paintnext/hash.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <stdexcept>

namespace paintnext {

Canvas::Canvas(int height, int width, float fill) : height_(height), width_(width) {
  if (height <= 0 || width <= 0) throw std::invalid_argument("canvas dimensions must be positive");
  pixels_.assign(static_cast<std::size_t>(height) * width * 3, fill);
}

std::vector<double> Canvas::planar() const {
  const std::size_t plane = static_cast<std::size_t>(height_) * width_;
  std::vector<double> out(plane * 3);
  for (std::size_t p = 0; p < plane; ++p) {
    for (int c = 0; c < 3; ++c) out[c * plane + p] = pixels_[p * 3 + c];
  }
  return out;
}

Canvas Canvas::resized(int height, int width) const {
  if (height == height_ && width == width_) return *this;
  Canvas out(height, width, 0.0f);
  const double sy = static_cast<double>(height_) / height;
  const double sx = static_cast<double>(width_) / width;
  for (int r = 0; r < height; ++r) {
    const double fy = std::clamp((r + 0.5) * sy - 0.5, 0.0, static_cast<double>(height_ - 1));
    const int y0 = static_cast<int>(fy);
    const int y1 = std::min(y0 + 1, height_ - 1);
    const double wy = fy - y0;
    for (int c = 0; c < width; ++c) {
      const double fx = std::clamp((c + 0.5) * sx - 0.5, 0.0, static_cast<double>(width_ - 1));
      const int x0 = static_cast<int>(fx);
      const int x1 = std::min(x0 + 1, width_ - 1);
      const double wx = fx - x0;
      for (int ch = 0; ch < 3; ++ch) {
        const double top = (1 - wx) * at(y0, x0, ch) + wx * at(y0, x1, ch);
        const double bot = (1 - wx) * at(y1, x0, ch) + wx * at(y1, x1, ch);
        out.at(r, c, ch) = static_cast<float>((1 - wy) * top + wy * bot);
      }
    }
  }
  return out;
}

std::string checksum(const Canvas& c) {
  const std::array<std::int32_t, 2> dims{c.height(), c.width()};
  return Sha256().update(dims.data(), sizeof(dims)).update(c.pixels()).hex();
}

}  // namespace paintnext
