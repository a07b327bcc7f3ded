#include "paintnext/reorder.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <stdexcept>

namespace paintnext {

void ReorderWeights::validate() const {
  for (double v : {position, color, size, subject}) {
    if (!std::isfinite(v) || v < 0.0) throw std::invalid_argument("reorder weights must be finite and non-negative");
  }
}

std::vector<int> subject_labels(const StrokeSequence& seq, const LabelMap& mask) {
  std::vector<int> out(seq.size(), 0);
  if (mask.labels.empty()) return out;
  for (std::size_t i = 0; i < seq.size(); ++i) {
    const int row = std::clamp(static_cast<int>(std::floor(seq.strokes[i].y * mask.height)), 0, mask.height - 1);
    const int col = std::clamp(static_cast<int>(std::floor(seq.strokes[i].x * mask.width)), 0, mask.width - 1);
    out[i] = mask.at(row, col);
  }
  return out;
}

double transition_cost(const Stroke& a, int subject_a, const Stroke& b, int subject_b, const ReorderWeights& w) {
  auto sq = [](double v) { return v * v; };
  return w.position * (sq(b.x - a.x) + sq(b.y - a.y)) + w.color * (sq(b.r - a.r) + sq(b.g - a.g) + sq(b.b - a.b)) +
         w.size * (sq(b.sigma_h - a.sigma_h) + sq(b.sigma_w - a.sigma_w)) +
         w.subject * (subject_a != subject_b ? 1.0 : 0.0);
}

namespace {

double path_cost(const StrokeSequence& seq, std::span<const int> subjects, const ReorderWeights& w) {
  double total = 0.0;
  for (std::size_t t = 1; t < seq.size(); ++t) {
    total += transition_cost(seq.strokes[t - 1], subjects[t - 1], seq.strokes[t], subjects[t], w);
  }
  return total;
}

}  // namespace

double reorder_cost(const StrokeSequence& seq, const ReorderWeights& w) {
  std::vector<int> subjects = seq.has_subjects() ? seq.subject_ids : std::vector<int>(seq.size(), 0);
  return path_cost(seq, subjects, w);
}

double reorder_cost(const StrokeSequence& seq, const LabelMap& mask, const ReorderWeights& w) {
  return path_cost(seq, subject_labels(seq, mask), w);
}

PrecedenceGraph::PrecedenceGraph(std::size_t n) : n_(n), words_((n + 63) / 64), bits_(n * words_, 0), preds_(n) {}

void PrecedenceGraph::add_edge(std::size_t before, std::size_t after) {
  if (before >= n_ || after >= n_ || before == after) throw std::out_of_range("precedence edge out of range");
  auto& word = bits_[before * words_ + after / 64];
  const std::uint64_t bit = std::uint64_t{1} << (after % 64);
  if (word & bit) return;
  word |= bit;
  preds_[after].push_back(before);
  ++edges_;
}

bool PrecedenceGraph::has_edge(std::size_t before, std::size_t after) const {
  return (bits_[before * words_ + after / 64] >> (after % 64)) & 1U;
}

std::vector<std::pair<std::size_t, std::size_t>> PrecedenceGraph::edges() const {
  std::vector<std::pair<std::size_t, std::size_t>> out;
  out.reserve(edges_);
  for (std::size_t j = 0; j < n_; ++j)
    for (std::size_t i : preds_[j]) out.emplace_back(i, j);
  std::sort(out.begin(), out.end());
  return out;
}

bool PrecedenceGraph::feasible(std::span<const std::size_t> order) const {
  if (order.size() != n_) return false;
  std::vector<std::size_t> pos(n_, n_);
  for (std::size_t i = 0; i < order.size(); ++i) {
    if (order[i] >= n_ || pos[order[i]] != n_) return false;
    pos[order[i]] = i;
  }
  for (std::size_t j = 0; j < n_; ++j)
    for (std::size_t i : preds_[j])
      if (pos[i] > pos[j]) return false;
  return true;
}

std::vector<std::uint32_t> overlap_cells(const Stroke& s) {
  std::vector<std::uint32_t> cells;
  if (s.zero_sized()) return cells;
  constexpr double n = kOverlapGrid;
  const double slack = std::sqrt(0.5) / n;  // half a cell diagonal
  const double theta = s.angle();
  const double cu = std::cos(theta);
  const double su = std::sin(theta);
  const double hu = s.sigma_w / 2 + slack;
  const double hv = s.sigma_h / 2 + slack;
  const double ex = std::abs(cu) * hu + std::abs(su) * hv;
  const double ey = std::abs(su) * hu + std::abs(cu) * hv;
  const int c0 = std::max(0, static_cast<int>(std::floor((s.x - ex) * n)) - 1);
  const int c1 = std::min(kOverlapGrid - 1, static_cast<int>(std::ceil((s.x + ex) * n)) + 1);
  const int r0 = std::max(0, static_cast<int>(std::floor((s.y - ey) * n)) - 1);
  const int r1 = std::min(kOverlapGrid - 1, static_cast<int>(std::ceil((s.y + ey) * n)) + 1);
  for (int r = r0; r <= r1; ++r) {
    const double dy = (r + 0.5) / n - s.y;
    for (int c = c0; c <= c1; ++c) {
      const double dx = (c + 0.5) / n - s.x;
      const double u = dx * cu + dy * su;
      const double v = -dx * su + dy * cu;
      if (std::abs(u) <= hu && std::abs(v) <= hv) cells.push_back(static_cast<std::uint32_t>(r * kOverlapGrid + c));
    }
  }
  return cells;
}

PrecedenceGraph build_precedence(const StrokeSequence& seq) {
  PrecedenceGraph graph(seq.size());
  std::vector<std::vector<std::uint32_t>> painted(static_cast<std::size_t>(kOverlapGrid) * kOverlapGrid);
  for (std::size_t j = 0; j < seq.size(); ++j) {
    for (auto cell : overlap_cells(seq.strokes[j])) {
      for (auto i : painted[cell]) graph.add_edge(i, j);
      painted[cell].push_back(static_cast<std::uint32_t>(j));
    }
  }
  return graph;
}

namespace {

class Solver {
 public:
  Solver(const StrokeSequence& seq, const PrecedenceGraph& graph, const ReorderWeights& w)
      : n_(seq.size()), graph_(graph), cost_(n_ * n_, 0.0) {
    const std::vector<int> subjects = seq.has_subjects() ? seq.subject_ids : std::vector<int>(n_, 0);
    for (std::size_t a = 0; a < n_; ++a)
      for (std::size_t b = a + 1; b < n_; ++b) {
        const double c = transition_cost(seq.strokes[a], subjects[a], seq.strokes[b], subjects[b], w);
        cost_[a * n_ + b] = c;
        cost_[b * n_ + a] = c;
      }
  }

  static constexpr std::size_t kNone = std::numeric_limits<std::size_t>::max();

  double c(std::size_t a, std::size_t b) const { return a == kNone || b == kNone ? 0.0 : cost_[a * n_ + b]; }

  double total(const std::vector<std::size_t>& p) const {
    double t = 0.0;
    for (std::size_t i = 1; i < p.size(); ++i) t += c(p[i - 1], p[i]);
    return t;
  }

  std::vector<std::size_t> exact() const {
    const std::size_t full = (std::size_t{1} << n_) - 1;
    const double inf = std::numeric_limits<double>::infinity();
    std::vector<double> dp((full + 1) * n_, inf);
    std::vector<std::uint8_t> from((full + 1) * n_, 0xff);
    std::vector<std::size_t> pred_mask(n_, 0);
    for (std::size_t j = 0; j < n_; ++j)
      for (std::size_t i : graph_.predecessors(j)) pred_mask[j] |= std::size_t{1} << i;
    for (std::size_t j = 0; j < n_; ++j)
      if (pred_mask[j] == 0) dp[(std::size_t{1} << j) * n_ + j] = 0.0;
    for (std::size_t mask = 1; mask <= full; ++mask) {
      for (std::size_t last = 0; last < n_; ++last) {
        const double base = dp[mask * n_ + last];
        if (base == inf) continue;
        for (std::size_t j = 0; j < n_; ++j) {
          const std::size_t bit = std::size_t{1} << j;
          if ((mask & bit) || (pred_mask[j] & ~mask)) continue;
          const double v = base + c(last, j);
          double& slot = dp[(mask | bit) * n_ + j];
          if (v < slot) {
            slot = v;
            from[(mask | bit) * n_ + j] = static_cast<std::uint8_t>(last);
          }
        }
      }
    }
    std::size_t last = 0;
    for (std::size_t j = 1; j < n_; ++j)
      if (dp[full * n_ + j] < dp[full * n_ + last]) last = j;
    std::vector<std::size_t> order;
    std::size_t mask = full;
    while (true) {
      order.push_back(last);
      const std::uint8_t prev = from[mask * n_ + last];
      mask &= ~(std::size_t{1} << last);
      if (mask == 0) break;
      last = prev;
    }
    std::reverse(order.begin(), order.end());
    return order;
  }

  // Nearest feasible neighbour, ties to the lowest index.
  std::vector<std::size_t> greedy() const {
    std::vector<std::size_t> waiting(n_);
    for (std::size_t j = 0; j < n_; ++j) waiting[j] = graph_.predecessors(j).size();
    std::vector<std::vector<std::size_t>> succ(n_);
    for (std::size_t j = 0; j < n_; ++j)
      for (std::size_t i : graph_.predecessors(j)) succ[i].push_back(j);
    std::vector<bool> done(n_, false);
    std::vector<std::size_t> order;
    std::size_t last = kNone;
    while (order.size() < n_) {
      std::size_t pick = kNone;
      double best = std::numeric_limits<double>::infinity();
      for (std::size_t j = 0; j < n_; ++j) {
        if (done[j] || waiting[j] != 0) continue;
        const double v = c(last, j);
        if (v < best) {
          best = v;
          pick = j;
        }
      }
      done[pick] = true;
      order.push_back(pick);
      for (std::size_t s : succ[pick]) --waiting[s];
      last = pick;
    }
    return order;
  }

  void improve(std::vector<std::size_t>& p, const ReorderOptions& opt) const {
    const double eps = 1e-12;
    for (int sweep = 0; sweep < opt.budget; ++sweep) {
      bool changed = false;
      for (std::size_t len = 1; len <= opt.max_segment; ++len) {
        for (std::size_t i = 0; i + len <= p.size(); ++i) changed |= move_segment(p, i, len, eps);
      }
      for (std::size_t i = 0; i + 1 < p.size(); ++i) changed |= reverse_from(p, i, opt.max_reversal, eps);
      if (!changed) break;
    }
  }

 private:
  bool blocks(std::span<const std::size_t> seg, std::size_t e, bool e_after) const {
    for (std::size_t s : seg)
      if (e_after ? graph_.has_edge(e, s) : graph_.has_edge(s, e)) return true;
    return false;
  }

  bool move_segment(std::vector<std::size_t>& p, std::size_t i, std::size_t len, double eps) const {
    const std::size_t n = p.size();
    const std::span<const std::size_t> seg(p.data() + i, len);
    const std::size_t a = p[i];
    const std::size_t b = p[i + len - 1];
    const std::size_t prev = i > 0 ? p[i - 1] : kNone;
    const std::size_t next = i + len < n ? p[i + len] : kNone;
    const double removed = c(prev, a) + c(b, next) - c(prev, next);

    // Forward: p[i+len..j] slide in front of the segment.
    for (std::size_t j = i + len; j < n; ++j) {
      if (blocks(seg, p[j], false)) break;
      const std::size_t after = j + 1 < n ? p[j + 1] : kNone;
      const double delta = c(p[j], a) + c(b, after) - c(p[j], after) - removed;
      if (delta < -eps) {
        std::rotate(p.begin() + static_cast<std::ptrdiff_t>(i), p.begin() + static_cast<std::ptrdiff_t>(i + len),
                    p.begin() + static_cast<std::ptrdiff_t>(j + 1));
        return true;
      }
    }
    // Backward: p[j..i-1] slide behind the segment.
    for (std::size_t j = i; j-- > 0;) {
      if (blocks(seg, p[j], true)) break;
      const std::size_t before = j > 0 ? p[j - 1] : kNone;
      const double delta = c(before, a) + c(b, p[j]) - c(before, p[j]) - removed;
      if (delta < -eps) {
        std::rotate(p.begin() + static_cast<std::ptrdiff_t>(j), p.begin() + static_cast<std::ptrdiff_t>(i),
                    p.begin() + static_cast<std::ptrdiff_t>(i + len));
        return true;
      }
    }
    return false;
  }

  // Reverse p[i..j] for the first improving j; only segments without internal edges qualify.
  bool reverse_from(std::vector<std::size_t>& p, std::size_t i, std::size_t max_len, double eps) const {
    const std::size_t n = p.size();
    const std::size_t before = i > 0 ? p[i - 1] : kNone;
    for (std::size_t j = i + 1; j < n && j - i < max_len; ++j) {
      bool free = true;
      for (std::size_t m = i; m < j && free; ++m) free = !graph_.has_edge(p[m], p[j]);
      if (!free) break;
      const std::size_t after = j + 1 < n ? p[j + 1] : kNone;
      const double delta = c(before, p[j]) + c(p[i], after) - c(before, p[i]) - c(p[j], after);
      if (delta < -eps) {
        std::reverse(p.begin() + static_cast<std::ptrdiff_t>(i), p.begin() + static_cast<std::ptrdiff_t>(j + 1));
        return true;
      }
    }
    return false;
  }

  std::size_t n_;
  const PrecedenceGraph& graph_;
  std::vector<double> cost_;
};

}  // namespace

std::vector<std::size_t> reorder_sequence(const StrokeSequence& seq, const PrecedenceGraph& graph,
                                          const ReorderWeights& w, const ReorderOptions& options) {
  w.validate();
  if (graph.size() != seq.size()) throw std::invalid_argument("precedence graph size does not match sequence");
  if (!seq.subject_ids.empty() && !seq.has_subjects()) throw std::invalid_argument("subject ids must be empty or one per stroke");
  std::vector<std::size_t> identity(seq.size());
  std::iota(identity.begin(), identity.end(), std::size_t{0});
  if (seq.size() < 2) return identity;

  const Solver solver(seq, graph, w);
  const double base = solver.total(identity);
  std::vector<std::size_t> best = identity;
  double best_cost = base;
  auto consider = [&](std::vector<std::size_t> cand) {
    const double v = solver.total(cand);
    if (v < best_cost - 1e-12 * std::max(1.0, std::abs(best_cost)) && graph.feasible(cand)) {
      best = std::move(cand);
      best_cost = v;
    }
  };

  if (seq.size() <= std::min<std::size_t>(options.exact_limit, 16)) {
    consider(solver.exact());
    return best;
  }
  auto from_identity = identity;
  solver.improve(from_identity, options);
  consider(std::move(from_identity));
  auto from_greedy = solver.greedy();
  solver.improve(from_greedy, options);
  consider(std::move(from_greedy));
  return best;
}

std::vector<std::size_t> reorder_sequence(const StrokeSequence& seq, const LabelMap& mask, const ReorderWeights& w,
                                          const ReorderOptions& options) {
  StrokeSequence labelled = seq;
  labelled.subject_ids = subject_labels(seq, mask);
  return reorder_sequence(labelled, build_precedence(seq), w, options);
}

}  // namespace paintnext
