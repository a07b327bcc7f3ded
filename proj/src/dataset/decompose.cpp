#include "paintnext/decompose.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <numbers>
#include <random>
#include <stdexcept>
#include <string>

#include "paintnext/render.hpp"

namespace paintnext {

int DecompositionSchedule::total_strokes() const {
  int total = 0;
  for (std::size_t i = 0; i < grid_sizes.size() && i < strokes_per_region.size(); ++i) {
    total += grid_sizes[i] * strokes_per_region[i];
  }
  return total;
}

void DecompositionSchedule::validate() const {
  if (grid_sizes.empty() || grid_sizes.size() != strokes_per_region.size()) {
    throw std::invalid_argument("schedule needs one stroke budget per pass");
  }
  for (int g : grid_sizes) {
    const int side = static_cast<int>(std::lround(std::sqrt(g)));
    if (g <= 0 || side * side != g) throw std::invalid_argument("grid size " + std::to_string(g) + " is not a square");
  }
  for (int n : strokes_per_region) {
    if (n < 0) throw std::invalid_argument("negative stroke budget");
  }
  if (!(sigma_max > 0.0 && sigma_max <= 1.0)) throw std::invalid_argument("sigma_max must lie in (0, 1]");
}

GridCell grid_cell(int regions, int index) {
  const int side = static_cast<int>(std::lround(std::sqrt(regions)));
  const int row = index / side;
  const int col = index % side;
  return {static_cast<double>(col) / side, static_cast<double>(col + 1) / side, static_cast<double>(row) / side,
          static_cast<double>(row + 1) / side};
}

namespace {

class Fitter {
 public:
  Fitter(const Canvas& reference, const FitterOptions& opt, double sigma_max)
      : ref_(reference), canvas_(Canvas::white(reference.height(), reference.width())), opt_(opt),
        sigma_max_(sigma_max), rng_(opt.seed) {}

  Stroke fit(const GridCell& cell) {
    Stroke best;
    double best_delta = 0.0;
    bool have = false;
    for (int c = 0; c < std::max(1, opt_.candidates); ++c) {
      Stroke s = propose(cell);
      double d = refine(s, cell);
      if (!have || d < best_delta) {
        best = s;
        best_delta = d;
        have = true;
      }
    }
    composite_in_place(canvas_, best, prim_);
    return best;
  }

 private:
  int size() const { return ref_.width(); }

  Stroke propose(const GridCell& cell) {
    std::uniform_real_distribution<double> u(0.0, 1.0);
    const double cw = cell.x1 - cell.x0;
    const double ch = cell.y1 - cell.y0;
    const double w = cw * (0.3 + 0.7 * u(rng_));
    const double h = ch * (0.3 + 0.7 * u(rng_));
    const double rx = cell.x0 + u(rng_) * (cw - w);
    const double ry = cell.y0 + u(rng_) * (ch - h);

    const int n = size();
    const int c0 = std::clamp(static_cast<int>(rx * n), 0, n - 1);
    const int r0 = std::clamp(static_cast<int>(ry * n), 0, n - 1);
    const int c1 = std::clamp(static_cast<int>(std::ceil((rx + w) * n)), c0 + 1, n);
    const int r1 = std::clamp(static_cast<int>(std::ceil((ry + h) * n)), r0 + 1, n);
    std::array<double, 3> mean{0, 0, 0};
    for (int r = r0; r < r1; ++r)
      for (int c = c0; c < c1; ++c)
        for (int k = 0; k < 3; ++k) mean[k] += ref_.at(r, c, k);
    const double count = static_cast<double>(r1 - r0) * (c1 - c0);

    Stroke s;
    s.x = rx + w / 2;
    s.y = ry + h / 2;
    s.r = std::clamp(mean[0] / count, 0.0, 1.0);
    s.g = std::clamp(mean[1] / count, 0.0, 1.0);
    s.b = std::clamp(mean[2] / count, 0.0, 1.0);
    s.sigma_h = clamp_sigma(h);
    s.sigma_w = clamp_sigma(w);
    s.omega = 0.0;
    orient(s, r0, r1, c0, c1);
    return s;
  }

  // Aligns the long axis with the dominant edge direction of the region (structure
  // tensor of luminance). Regions without a clear orientation stay axis-aligned.
  void orient(Stroke& s, int r0, int r1, int c0, int c1) const {
    const int n = size();
    auto lum = [&](int r, int c) {
      r = std::clamp(r, 0, n - 1);
      c = std::clamp(c, 0, n - 1);
      return 0.299 * ref_.at(r, c, 0) + 0.587 * ref_.at(r, c, 1) + 0.114 * ref_.at(r, c, 2);
    };
    double jxx = 0, jyy = 0, jxy = 0;
    for (int r = r0; r < r1; ++r) {
      for (int c = c0; c < c1; ++c) {
        const double gx = 0.5 * (lum(r, c + 1) - lum(r, c - 1));
        const double gy = 0.5 * (lum(r + 1, c) - lum(r - 1, c));
        jxx += gx * gx;
        jyy += gy * gy;
        jxy += gx * gy;
      }
    }
    const double energy = jxx + jyy;
    const double spread = std::hypot(jxx - jyy, 2 * jxy);
    if (energy < 1e-6 || spread < kMinCoherence * energy) return;
    const double gradient = 0.5 * std::atan2(2 * jxy, jxx - jyy);
    double theta = std::fmod(gradient + std::numbers::pi / 2, std::numbers::pi);
    if (theta < 0) theta += std::numbers::pi;
    s.omega = std::clamp(theta / std::numbers::pi, 0.0, 1.0);
    const double lo = std::min(s.sigma_h, s.sigma_w), hi = std::max(s.sigma_h, s.sigma_w);
    s.sigma_w = hi;
    s.sigma_h = lo;
  }

  static constexpr double kMinCoherence = 0.3;

  // An oval rotated by a quarter turn with swapped extents covers the same pixels, so
  // omega is folded into [0.25, 0.75). Near-horizontal and isotropic strokes then sit
  // around 0.5 instead of straddling the 0/1 seam.
  static void canonicalize(Stroke& s) {
    if (s.omega >= 0.25 && s.omega < 0.75) return;
    s.omega = s.omega < 0.25 ? s.omega + 0.5 : s.omega - 0.5;
    std::swap(s.sigma_h, s.sigma_w);
  }

  double clamp_sigma(double v) const { return std::clamp(v, opt_.sigma_min, sigma_max_); }

  // Change in squared error over the canvas if s were composited now.
  double delta(const Stroke& s) const {
    const auto fp = stroke_footprint(s, size(), size(), prim_);
    const std::array<double, 3> col{s.r, s.g, s.b};
    double d = 0.0;
    for (int r = fp.row0; r < fp.row0 + fp.rows; ++r) {
      for (int c = fp.col0; c < fp.col0 + fp.cols; ++c) {
        const double a = fp.at(r, c);
        if (a <= 0.0) continue;
        for (int k = 0; k < 3; ++k) {
          const double cur = canvas_.at(r, c, k);
          const double target = ref_.at(r, c, k);
          const double next = a * col[k] + (1 - a) * cur;
          d += (next - target) * (next - target) - (cur - target) * (cur - target);
        }
      }
    }
    return d;
  }

  void recolor(Stroke& s) const {
    const auto fp = stroke_footprint(s, size(), size(), prim_);
    std::array<double, 3> acc{0, 0, 0};
    double mass = 0.0;
    for (int r = fp.row0; r < fp.row0 + fp.rows; ++r) {
      for (int c = fp.col0; c < fp.col0 + fp.cols; ++c) {
        const double a = fp.at(r, c);
        if (a <= 0.0) continue;
        mass += a;
        for (int k = 0; k < 3; ++k) acc[k] += a * ref_.at(r, c, k);
      }
    }
    if (mass <= 0.0) return;
    s.r = std::clamp(acc[0] / mass, 0.0, 1.0);
    s.g = std::clamp(acc[1] / mass, 0.0, 1.0);
    s.b = std::clamp(acc[2] / mass, 0.0, 1.0);
  }

  double refine(Stroke& s, const GridCell& cell) {
    // Keep centers strictly inside the half-open cell.
    const double eps = 1e-9;
    auto clamp_geometry = [&](Stroke& t) {
      t.x = std::clamp(t.x, cell.x0, cell.x1 - eps);
      t.y = std::clamp(t.y, cell.y0, cell.y1 - eps);
      t.sigma_h = clamp_sigma(t.sigma_h);
      t.sigma_w = clamp_sigma(t.sigma_w);
      t.omega = std::clamp(t.omega, 0.0, 1.0);
    };
    clamp_geometry(s);
    double best = delta(s);
    std::array<double, 5> step{(cell.x1 - cell.x0) / 4, (cell.y1 - cell.y0) / 4, s.sigma_h / 3, s.sigma_w / 3, 0.125};
    std::array<double Stroke::*, 5> fields{&Stroke::x, &Stroke::y, &Stroke::sigma_h, &Stroke::sigma_w, &Stroke::omega};
    for (int sweep = 0; sweep < opt_.refine_sweeps; ++sweep) {
      for (std::size_t f = 0; f < fields.size(); ++f) {
        for (double dir : {1.0, -1.0}) {
          Stroke t = s;
          t.*fields[f] += dir * step[f];
          clamp_geometry(t);
          if (t == s) continue;
          const double d = delta(t);
          if (d < best) {
            s = t;
            best = d;
            break;
          }
        }
      }
      for (auto& v : step) v /= 2;
    }
    canonicalize(s);
    recolor(s);
    return delta(s);
  }

  Canvas ref_;
  Canvas canvas_;
  FitterOptions opt_;
  double sigma_max_;
  std::mt19937_64 rng_;
  const BrushPrimitive& prim_ = BrushPrimitive::default_oval();
};

}  // namespace

StrokeSequence decompose_image(const Canvas& image, const DecompositionSchedule& schedule,
                               const FitterOptions& options) {
  schedule.validate();
  if (image.height() < 32 || image.width() < 32) {
    throw std::invalid_argument("decomposition needs an image of at least 32x32");
  }
  if (options.working_size < 32) throw std::invalid_argument("working size must be at least 32");
  const Canvas ref = image.resized(options.working_size, options.working_size);
  Fitter fitter(ref, options, schedule.sigma_max);
  StrokeSequence out;
  out.strokes.reserve(static_cast<std::size_t>(schedule.total_strokes()));
  for (std::size_t pass = 0; pass < schedule.grid_sizes.size(); ++pass) {
    const int regions = schedule.grid_sizes[pass];
    for (int cell = 0; cell < regions; ++cell) {
      const GridCell bounds = grid_cell(regions, cell);
      for (int i = 0; i < schedule.strokes_per_region[pass]; ++i) out.strokes.push_back(fitter.fit(bounds));
    }
  }
  return out;
}

}  // namespace paintnext
