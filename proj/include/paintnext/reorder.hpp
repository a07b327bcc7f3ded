#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <utility>
#include <vector>

#include "paintnext/image_io.hpp"
#include "paintnext/stroke.hpp"

namespace paintnext {

struct ReorderWeights {
  double position = 1.0;
  double color = 1.0;
  double size = 1.0;
  double subject = 2.0;

  void validate() const;
  bool operator==(const ReorderWeights&) const = default;
};

/// Subject label under each stroke center. Empty map gives all zeros.
std::vector<int> subject_labels(const StrokeSequence& seq, const LabelMap& mask);

/// Transition cost between consecutive strokes a -> b.
double transition_cost(const Stroke& a, int subject_a, const Stroke& b, int subject_b, const ReorderWeights& w);

/// Sum of transition costs along the sequence. Subjects come from seq.subject_ids
/// when present, otherwise they are treated as equal.
double reorder_cost(const StrokeSequence& seq, const ReorderWeights& w);
double reorder_cost(const StrokeSequence& seq, const LabelMap& mask, const ReorderWeights& w);

/// Precedence DAG over stroke indices: edge (i, j) with i < j means i must stay before j.
class PrecedenceGraph {
 public:
  explicit PrecedenceGraph(std::size_t n = 0);

  [[nodiscard]] std::size_t size() const { return n_; }
  void add_edge(std::size_t before, std::size_t after);
  [[nodiscard]] bool has_edge(std::size_t before, std::size_t after) const;
  [[nodiscard]] std::vector<std::pair<std::size_t, std::size_t>> edges() const;
  [[nodiscard]] std::size_t edge_count() const { return edges_; }
  [[nodiscard]] const std::vector<std::size_t>& predecessors(std::size_t j) const { return preds_[j]; }
  /// True when every edge's endpoints appear in order.
  [[nodiscard]] bool feasible(std::span<const std::size_t> order) const;

 private:
  std::size_t n_;
  std::size_t words_;
  std::vector<std::uint64_t> bits_;  // row i: successors of i
  std::vector<std::vector<std::size_t>> preds_;
  std::size_t edges_ = 0;
};

/// Resolution of the occupancy grid used for overlap tests.
inline constexpr int kOverlapGrid = 128;

/// Occupied cells of a stroke on the kOverlapGrid grid. A cell is marked when any point
/// of it may lie inside the stroke's rotated unit-square support, so strokes that share
/// a pixel at any square render resolution always share a marked cell.
std::vector<std::uint32_t> overlap_cells(const Stroke& s);

/// Edge (i -> j) for every i < j whose occupancy sets intersect.
PrecedenceGraph build_precedence(const StrokeSequence& seq);

struct ReorderOptions {
  /// Local-search sweeps over the whole sequence.
  int budget = 50;
  /// Instances up to this size are solved exactly by dynamic programming.
  std::size_t exact_limit = 12;
  /// Longest segment considered by segment moves and reversals.
  std::size_t max_segment = 3;
  std::size_t max_reversal = 48;
};

/// Precedence-feasible permutation that never costs more than the identity; the
/// identity wins ties. Entry i of the result is the index of the i-th stroke to paint.
std::vector<std::size_t> reorder_sequence(const StrokeSequence& seq, const PrecedenceGraph& graph,
                                          const ReorderWeights& w, const ReorderOptions& options = {});

/// Convenience: labels from the mask, precedence from the strokes.
std::vector<std::size_t> reorder_sequence(const StrokeSequence& seq, const LabelMap& mask, const ReorderWeights& w,
                                          const ReorderOptions& options = {});

}  // namespace paintnext
