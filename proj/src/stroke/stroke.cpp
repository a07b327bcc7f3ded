#include "paintnext/stroke.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

namespace paintnext {

Stroke Stroke::from_array(std::span<const double> v) {
  if (v.size() != kParams) {
    throw InvalidStroke("stroke row must have 8 entries, got " + std::to_string(v.size()));
  }
  return Stroke{v[0], v[1], v[2], v[3], v[4], v[5], v[6], v[7]};
}

double Stroke::angle() const { return omega * std::numbers::pi; }

std::vector<std::string> invalid_fields(const Stroke& s) {
  std::vector<std::string> bad;
  const auto values = s.to_array();
  for (std::size_t i = 0; i < values.size(); ++i) {
    const double v = values[i];
    if (!std::isfinite(v) || v < 0.0 || v > 1.0) bad.emplace_back(kStrokeFieldNames[i]);
  }
  return bad;
}

void validate(const Stroke& s) {
  const auto bad = invalid_fields(s);
  if (bad.empty()) return;
  std::string msg = "invalid stroke fields:";
  for (const auto& f : bad) msg += " " + f;
  throw InvalidStroke(msg);
}

StrokeSequence StrokeSequence::slice(std::size_t first, std::size_t count) const {
  StrokeSequence out;
  if (first >= strokes.size()) return out;
  const std::size_t last = std::min(strokes.size(), first + count);
  out.strokes.assign(strokes.begin() + static_cast<std::ptrdiff_t>(first),
                     strokes.begin() + static_cast<std::ptrdiff_t>(last));
  if (has_subjects()) {
    out.subject_ids.assign(subject_ids.begin() + static_cast<std::ptrdiff_t>(first),
                           subject_ids.begin() + static_cast<std::ptrdiff_t>(last));
  }
  return out;
}

StrokeSequence StrokeSequence::permuted(std::span<const std::size_t> order) const {
  StrokeSequence out;
  out.strokes.reserve(order.size());
  for (auto i : order) out.strokes.push_back(strokes.at(i));
  if (has_subjects()) {
    out.subject_ids.reserve(order.size());
    for (auto i : order) out.subject_ids.push_back(subject_ids.at(i));
  }
  return out;
}

std::vector<double> StrokeSequence::flatten() const {
  std::vector<double> rows;
  rows.reserve(strokes.size() * Stroke::kParams);
  for (const auto& s : strokes) {
    const auto a = s.to_array();
    rows.insert(rows.end(), a.begin(), a.end());
  }
  return rows;
}

StrokeSequence StrokeSequence::from_rows(std::span<const double> rows) {
  if (rows.size() % Stroke::kParams != 0) {
    throw InvalidStroke("stroke rows must be a multiple of 8 values");
  }
  StrokeSequence out;
  for (std::size_t i = 0; i < rows.size(); i += Stroke::kParams) {
    out.strokes.push_back(Stroke::from_array(rows.subspan(i, Stroke::kParams)));
  }
  return out;
}

}  // namespace paintnext
