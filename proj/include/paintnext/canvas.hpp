#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

namespace paintnext {

/// H x W x 3 image with interleaved RGB intensities in [0, 1].
class Canvas {
 public:
  Canvas() = default;
  Canvas(int height, int width, float fill = 1.0f);

  static Canvas white(int height, int width) { return Canvas(height, width, 1.0f); }
  static Canvas black(int height, int width) { return Canvas(height, width, 0.0f); }

  [[nodiscard]] int height() const { return height_; }
  [[nodiscard]] int width() const { return width_; }
  [[nodiscard]] bool empty() const { return pixels_.empty(); }

  [[nodiscard]] float at(int row, int col, int ch) const {
    return pixels_[(static_cast<std::size_t>(row) * width_ + col) * 3 + ch];
  }
  float& at(int row, int col, int ch) {
    return pixels_[(static_cast<std::size_t>(row) * width_ + col) * 3 + ch];
  }

  [[nodiscard]] std::span<const float> pixels() const { return pixels_; }
  std::span<float> pixels() { return pixels_; }

  /// Planar 3 x H x W copy in double precision, the layout the network consumes.
  [[nodiscard]] std::vector<double> planar() const;

  /// Bilinear resize (pixel-center aligned).
  [[nodiscard]] Canvas resized(int height, int width) const;

  bool operator==(const Canvas&) const = default;

 private:
  int height_ = 0;
  int width_ = 0;
  std::vector<float> pixels_;
};

/// Hex SHA-256 over dimensions and raw pixel bytes. Equal iff bit-identical.
std::string checksum(const Canvas& c);

}  // namespace paintnext
