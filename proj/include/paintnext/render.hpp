#pragma once

#include <array>
#include <optional>
#include <span>
#include <vector>

#include "paintnext/canvas.hpp"
#include "paintnext/stroke.hpp"

namespace paintnext {

/// 2x3 affine map from the brush primitive's unit frame, (u, v) in [-0.5, 0.5]^2,
/// to canvas pixel coordinates (column, row), with pixel centers at half-integers.
struct AffineTransform {
  double a = 1, b = 0, tx = 0;
  double c = 0, d = 1, ty = 0;

  [[nodiscard]] std::array<double, 2> apply(double u, double v) const {
    return {a * u + b * v + tx, c * u + d * v + ty};
  }
  [[nodiscard]] double determinant() const { return a * d - b * c; }
  [[nodiscard]] AffineTransform inverse() const;
};

/// Scale by (sigma_w W, sigma_h H), rotate counter-clockwise by omega*pi, translate to (x W, y H).
AffineTransform stroke_to_affine(const Stroke& s, int height, int width);

/// Fixed grayscale alpha template sampled bilinearly; alpha is zero outside the unit frame.
class BrushPrimitive {
 public:
  BrushPrimitive(int size, std::vector<float> texture);

  /// The repository's oval template (64x64, one-texel antialiased rim).
  static const BrushPrimitive& default_oval();
  /// Every texel opaque; useful for full-coverage stamps.
  static BrushPrimitive solid(int size = 8);

  [[nodiscard]] int size() const { return size_; }
  [[nodiscard]] std::span<const float> texture() const { return texture_; }
  [[nodiscard]] double alpha_at(double u, double v) const;

 private:
  int size_;
  std::vector<float> texture_;
};

/// Alpha matte of one stroke restricted to its pixel bounding box.
struct AlphaFootprint {
  int row0 = 0;
  int col0 = 0;
  int rows = 0;
  int cols = 0;
  std::vector<float> alpha;

  [[nodiscard]] bool empty() const { return rows == 0 || cols == 0; }
  [[nodiscard]] float at(int row, int col) const {
    return alpha[static_cast<std::size_t>(row - row0) * cols + (col - col0)];
  }
  /// Sum of alpha divided by H*W (canvas-fraction units).
  [[nodiscard]] double mass_fraction(int height, int width) const;
};

AlphaFootprint stroke_footprint(const Stroke& s, int height, int width,
                                const BrushPrimitive& primitive = BrushPrimitive::default_oval());

/// Canvas after compositing one stroke: alpha * rho + (1 - alpha) * previous.
Canvas render_stroke(const Canvas& canvas, const Stroke& s,
                     const BrushPrimitive& primitive = BrushPrimitive::default_oval());

/// In-place variant used by incremental consumers; identical arithmetic.
void composite_in_place(Canvas& canvas, const Stroke& s,
                        const BrushPrimitive& primitive = BrushPrimitive::default_oval());

struct RenderResult {
  Canvas canvas;
  /// frames[i] is the canvas after strokes 0..i; empty unless requested.
  std::vector<Canvas> frames;
};

RenderResult render_sequence(const Canvas& canvas, const StrokeSequence& seq, bool emit_frames = false,
                             const BrushPrimitive& primitive = BrushPrimitive::default_oval());

/// Convenience: blank white canvas plus the whole sequence.
Canvas render_on_white(const StrokeSequence& seq, int height, int width);

}  // namespace paintnext
