#pragma once

#include <array>
#include <cstddef>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace paintnext {

class InvalidStroke : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// One brush stroke: center, color, size and orientation, each normalized to [0, 1].
///
/// Row layout used everywhere a stroke is flattened (files, tensors, metrics):
/// (x_x, x_y, rho_r, rho_g, rho_b, sigma_h, sigma_w, omega).
/// omega encodes a counter-clockwise angle omega * pi.
struct Stroke {
  static constexpr std::size_t kParams = 8;

  double x = 0.0;
  double y = 0.0;
  double r = 0.0;
  double g = 0.0;
  double b = 0.0;
  double sigma_h = 0.0;
  double sigma_w = 0.0;
  double omega = 0.0;

  [[nodiscard]] std::array<double, kParams> to_array() const {
    return {x, y, r, g, b, sigma_h, sigma_w, omega};
  }
  static Stroke from_array(std::span<const double> v);

  /// Angle in radians.
  [[nodiscard]] double angle() const;

  [[nodiscard]] bool zero_sized() const { return sigma_h <= 0.0 || sigma_w <= 0.0; }

  bool operator==(const Stroke&) const = default;
};

inline constexpr std::array<const char*, Stroke::kParams> kStrokeFieldNames = {
    "x_x", "x_y", "rho_r", "rho_g", "rho_b", "sigma_h", "sigma_w", "omega"};

/// Names of the fields that are non-finite or outside [0, 1]. Empty when valid.
std::vector<std::string> invalid_fields(const Stroke& s);

/// Throws InvalidStroke listing offending fields.
void validate(const Stroke& s);

struct StrokeSequence {
  std::vector<Stroke> strokes;
  /// Per-stroke subject label; empty when no segmentation is attached.
  std::vector<int> subject_ids;

  [[nodiscard]] std::size_t size() const { return strokes.size(); }
  [[nodiscard]] bool empty() const { return strokes.empty(); }
  [[nodiscard]] bool has_subjects() const { return subject_ids.size() == strokes.size(); }

  /// Copy of strokes [first, first + count).
  [[nodiscard]] StrokeSequence slice(std::size_t first, std::size_t count) const;

  /// Strokes reordered so that entry i of the result is strokes[order[i]].
  [[nodiscard]] StrokeSequence permuted(std::span<const std::size_t> order) const;

  /// Row-major T x 8 flattening.
  [[nodiscard]] std::vector<double> flatten() const;
  static StrokeSequence from_rows(std::span<const double> rows);
};

}  // namespace paintnext
