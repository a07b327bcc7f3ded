#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "paintnext/canvas.hpp"

namespace paintnext {

class ImageDecodeError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// 8-bit RGB PNG encoding; values are rounded to the nearest of 256 levels.
std::vector<std::uint8_t> encode_png(const Canvas& canvas);
/// 8-bit single-channel PNG from a row-major map of values in [0, 1].
std::vector<std::uint8_t> encode_gray_png(std::span<const double> values, int height, int width);
Canvas decode_png(std::span<const std::uint8_t> bytes);

void write_png(const std::filesystem::path& path, const Canvas& canvas);
void write_gray_png(const std::filesystem::path& path, std::span<const double> values, int height, int width);
Canvas read_png(const std::filesystem::path& path);

/// Integer label map stored as an 8-bit grayscale PNG (label = gray level).
struct LabelMap {
  int height = 0;
  int width = 0;
  std::vector<int> labels;
  [[nodiscard]] int at(int row, int col) const { return labels[static_cast<std::size_t>(row) * width + col]; }
};
LabelMap read_label_png(const std::filesystem::path& path);
void write_label_png(const std::filesystem::path& path, const LabelMap& map);

std::string base64_encode(std::span<const std::uint8_t> bytes);
std::vector<std::uint8_t> base64_decode(std::string_view text);

}  // namespace paintnext
