#pragma once

#include <cstdint>
#include <vector>

#include "paintnext/canvas.hpp"
#include "paintnext/stroke.hpp"

namespace paintnext {

/// Progressive grid schedule: pass p splits the canvas into grid_sizes[p] square-ish
/// regions and places strokes_per_region[p] strokes in each.
struct DecompositionSchedule {
  std::vector<int> grid_sizes{4, 9, 16, 25};
  std::vector<int> strokes_per_region{30, 20, 15, 10};
  double sigma_max = 0.4;

  static DecompositionSchedule default_schedule() { return {}; }
  [[nodiscard]] int total_strokes() const;
  /// Throws std::invalid_argument on mismatched lengths, non-square grid counts or a bad clamp.
  void validate() const;
  bool operator==(const DecompositionSchedule&) const = default;
};

struct FitterOptions {
  /// Images are resampled to this square size before fitting.
  int working_size = 128;
  /// Random sub-rectangle proposals per stroke.
  int candidates = 3;
  /// Coordinate-descent sweeps per proposal; step sizes halve after each sweep.
  int refine_sweeps = 3;
  double sigma_min = 0.01;
  std::uint64_t seed = 0;
};

/// Greedy per-cell stroke fitter. Strokes are emitted pass by pass, cell by cell in
/// row-major order; each stroke's center stays inside its cell and its color is the
/// alpha-weighted mean of the reference under its footprint. The long axis follows the
/// local edge direction, and omega is folded into [0.25, 0.75).
StrokeSequence decompose_image(const Canvas& image, const DecompositionSchedule& schedule,
                               const FitterOptions& options = {});

/// Normalized bounds [x0, x1) x [y0, y1) of cell `index` when the canvas is split into
/// `regions` cells on a sqrt(regions) grid.
struct GridCell {
  double x0, x1, y0, y1;
};
GridCell grid_cell(int regions, int index);

}  // namespace paintnext
