#include "paintnext/render.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "paintnext/kernels.hpp"

namespace paintnext {

AffineTransform AffineTransform::inverse() const {
  const double det = determinant();
  if (det == 0.0 || !std::isfinite(det)) throw std::domain_error("affine transform is singular");
  AffineTransform inv;
  inv.a = d / det;
  inv.b = -b / det;
  inv.c = -c / det;
  inv.d = a / det;
  inv.tx = -(inv.a * tx + inv.b * ty);
  inv.ty = -(inv.c * tx + inv.d * ty);
  return inv;
}

AffineTransform stroke_to_affine(const Stroke& s, int height, int width) {
  for (double v : s.to_array()) {
    if (!std::isfinite(v)) throw InvalidStroke("stroke has a non-finite parameter");
  }
  const double theta = s.angle();
  const double cs = std::cos(theta);
  const double sn = std::sin(theta);
  const double sx = s.sigma_w * width;
  const double sy = s.sigma_h * height;
  AffineTransform t;
  t.a = cs * sx;
  t.b = -sn * sy;
  t.c = sn * sx;
  t.d = cs * sy;
  t.tx = s.x * width;
  t.ty = s.y * height;
  return t;
}

BrushPrimitive::BrushPrimitive(int size, std::vector<float> texture)
    : size_(size), texture_(std::move(texture)) {
  if (size <= 0 || texture_.size() != static_cast<std::size_t>(size) * size) {
    throw std::invalid_argument("brush texture must be size x size");
  }
  for (float v : texture_) {
    if (!(v >= 0.0f && v <= 1.0f)) throw std::invalid_argument("brush texture values must lie in [0,1]");
  }
}

const BrushPrimitive& BrushPrimitive::default_oval() {
  static const BrushPrimitive oval = [] {
    constexpr int n = 64;
    std::vector<float> tex(static_cast<std::size_t>(n) * n);
    for (int row = 0; row < n; ++row) {
      for (int col = 0; col < n; ++col) {
        const double u = (col + 0.5) / n - 0.5;
        const double v = (row + 0.5) / n - 0.5;
        const double radius = 2.0 * std::sqrt(u * u + v * v);
        // One texel of rim falloff, measured in texels from the ellipse boundary.
        const double alpha = std::clamp((1.0 - radius) * n * 0.5 + 0.5, 0.0, 1.0);
        tex[static_cast<std::size_t>(row) * n + col] = static_cast<float>(alpha);
      }
    }
    return BrushPrimitive(n, std::move(tex));
  }();
  return oval;
}

BrushPrimitive BrushPrimitive::solid(int size) {
  return BrushPrimitive(size, std::vector<float>(static_cast<std::size_t>(size) * size, 1.0f));
}

double BrushPrimitive::alpha_at(double u, double v) const {
  return kernels::sample_alpha(texture_.data(), size_, u, v);
}

namespace {

// Pixels whose centers can receive nonzero alpha, or nullopt for a no-op stroke.
std::optional<kernels::StrokeWindow> stroke_window(const Stroke& s, int height, int width) {
  const AffineTransform t = stroke_to_affine(s, height, width);
  if (s.zero_sized()) return std::nullopt;
  double min_x = 1e300, max_x = -1e300, min_y = 1e300, max_y = -1e300;
  for (double u : {-0.5, 0.5}) {
    for (double v : {-0.5, 0.5}) {
      const auto p = t.apply(u, v);
      min_x = std::min(min_x, p[0]);
      max_x = std::max(max_x, p[0]);
      min_y = std::min(min_y, p[1]);
      max_y = std::max(max_y, p[1]);
    }
  }
  kernels::StrokeWindow w;
  w.col0 = std::max(0, static_cast<int>(std::ceil(min_x - 0.5)));
  w.col1 = std::min(width, static_cast<int>(std::floor(max_x - 0.5)) + 1);
  w.row0 = std::max(0, static_cast<int>(std::ceil(min_y - 0.5)));
  w.row1 = std::min(height, static_cast<int>(std::floor(max_y - 0.5)) + 1);
  if (w.col0 >= w.col1 || w.row0 >= w.row1) return std::nullopt;
  const AffineTransform inv = t.inverse();
  w.inverse = {inv.a, inv.b, inv.tx, inv.c, inv.d, inv.ty};
  return w;
}

}  // namespace

double AlphaFootprint::mass_fraction(int height, int width) const {
  double sum = 0.0;
  for (float a : alpha) sum += a;
  return sum / (static_cast<double>(height) * width);
}

AlphaFootprint stroke_footprint(const Stroke& s, int height, int width, const BrushPrimitive& primitive) {
  AlphaFootprint fp;
  const auto w = stroke_window(s, height, width);
  if (!w) return fp;
  fp.row0 = w->row0;
  fp.col0 = w->col0;
  fp.rows = w->row1 - w->row0;
  fp.cols = w->col1 - w->col0;
  fp.alpha.resize(static_cast<std::size_t>(fp.rows) * fp.cols);
  kernels::rasterize_alpha(*w, primitive.texture().data(), primitive.size(), fp.alpha.data());
  return fp;
}

void composite_in_place(Canvas& canvas, const Stroke& s, const BrushPrimitive& primitive) {
  validate(s);
  const auto w = stroke_window(s, canvas.height(), canvas.width());
  if (!w) return;
  kernels::composite(*w, primitive.texture().data(), primitive.size(), {s.r, s.g, s.b},
                     canvas.pixels().data(), canvas.width());
}

Canvas render_stroke(const Canvas& canvas, const Stroke& s, const BrushPrimitive& primitive) {
  Canvas out = canvas;
  composite_in_place(out, s, primitive);
  return out;
}

RenderResult render_sequence(const Canvas& canvas, const StrokeSequence& seq, bool emit_frames,
                             const BrushPrimitive& primitive) {
  RenderResult result{canvas, {}};
  if (emit_frames) result.frames.reserve(seq.size());
  for (const auto& s : seq.strokes) {
    composite_in_place(result.canvas, s, primitive);
    if (emit_frames) result.frames.push_back(result.canvas);
  }
  return result;
}

Canvas render_on_white(const StrokeSequence& seq, int height, int width) {
  return render_sequence(Canvas::white(height, width), seq).canvas;
}

}  // namespace paintnext
