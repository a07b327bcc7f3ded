#pragma once

#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "paintnext/dataset.hpp"
#include "paintnext/model.hpp"
#include "paintnext/objectives.hpp"
#include "paintnext/windows.hpp"

namespace paintnext {

struct EvalProtocol {
  int windows_per_image = 5;
  int top1_samples = 100;
  int diversity_samples = 5;
  int heatmap_samples = 500;
  /// Alpha above which a pixel counts as covered in heatmaps.
  double heatmap_threshold = 0.05;
  /// Heatmaps exported per report (first windows in evaluation order).
  int heatmaps_exported = 1;
  FeatureConfig fsd_features{4, true};
  std::string split = "eval";
  std::uint64_t seed = 0;

  void validate() const;
  [[nodiscard]] std::string to_json() const;
  static EvalProtocol from_json(std::string_view text);
};

// --- metrics ----------------------------------------------------------------

/// Mean over strokes of the alpha-weighted mean squared color error under each stroke,
/// sum_p a_p |rho - I(p)|^2 / sum_p a_p. Strokes with no coverage are skipped and counted.
double stroke_color_l2(const StrokeSequence& pred, const Canvas& reference, int* excluded = nullptr);

/// Frechet distance between diagonal Gaussians fitted to two row sets.
double fsd(std::span<const std::vector<double>> real, std::span<const std::vector<double>> pred);
double frechet_diagonal(const DiagonalGaussian& a, const DiagonalGaussian& b);

/// 2-Wasserstein distance between diagonal Gaussians fitted to the 8-dim stroke rows.
double wd(const StrokeSequence& gt, const StrokeSequence& pred);
double wasserstein_diagonal(const DiagonalGaussian& a, const DiagonalGaussian& b);

/// Dynamic time warping with Euclidean local cost and no window constraint.
double dtw(std::span<const std::vector<double>> a, std::span<const std::vector<double>> b);
double dtw(const StrokeSequence& gt, const StrokeSequence& pred);

/// Mean over stroke rows of the Euclidean distance between parameter vectors.
double mean_row_l2(const StrokeSequence& a, const StrokeSequence& b);

// --- generators ---------------------------------------------------------------

/// Anything that proposes continuations of k strokes for a context.
class Generator {
 public:
  virtual ~Generator() = default;
  /// Draws are sequential in `rng`, so the first m of n samples equal an m-sample call.
  virtual std::vector<StrokeSequence> sample(const ContextBundle& ctx, int n, std::mt19937_64& rng) const = 0;
};

class ModelGenerator : public Generator {
 public:
  explicit ModelGenerator(const InpModel& model, int chunk = 64) : model_(model), chunk_(chunk) {}
  std::vector<StrokeSequence> sample(const ContextBundle& ctx, int n, std::mt19937_64& rng) const override;
  /// Prior draws, one d_z vector per sample.
  [[nodiscard]] std::vector<std::vector<double>> draw_latents(int n, std::mt19937_64& rng) const;
  /// Decodes each latent against the same context.
  [[nodiscard]] std::vector<StrokeSequence> decode(const ContextBundle& ctx,
                                                   const std::vector<std::vector<double>>& latents) const;
  [[nodiscard]] const InpModel& model() const { return model_; }

 private:
  const InpModel& model_;
  int chunk_;
};

/// Every parameter uniform in [0, 1].
class UniformRandomGenerator : public Generator {
 public:
  explicit UniformRandomGenerator(int k) : k_(k) {}
  std::vector<StrokeSequence> sample(const ContextBundle& ctx, int n, std::mt19937_64& rng) const override;

 private:
  int k_;
};

/// Repeats the last valid context stroke k times; uniform when the context is empty.
class RepeatLastGenerator : public Generator {
 public:
  explicit RepeatLastGenerator(int k) : k_(k) {}
  std::vector<StrokeSequence> sample(const ContextBundle& ctx, int n, std::mt19937_64& rng) const override;

 private:
  int k_;
};

// --- protocols ----------------------------------------------------------------

/// `best` is the candidate nearest gt in parameter space; wd and dtw are each the minimum over all candidates.
struct Top1Result {
  StrokeSequence best;
  std::size_t best_index = 0;
  double selection_distance = 0;
  double wd = 0;
  double dtw = 0;
  std::vector<StrokeSequence> candidates;
};

/// Samples protocol.top1_samples continuations and scores the best ones against gt.
Top1Result top1_eval(const Generator& gen, const ContextBundle& ctx, const StrokeSequence& gt,
                     const EvalProtocol& protocol, std::mt19937_64& rng);

using DistancePlugin = std::function<double(const Canvas&, const Canvas&)>;
/// Mean over 3 pyramid levels (2x2 average pooling) of per-pixel mean squared difference.
double pyramid_mse(const Canvas& a, const Canvas& b);
/// Mean plugin distance over all unordered pairs; nullopt when the plugin throws.
std::optional<double> pairwise_diversity(const std::vector<Canvas>& renders, const DistancePlugin& plugin);
/// Renders protocol.diversity_samples continuations onto the context canvas and scores them.
std::optional<double> diversity(const Generator& gen, const ContextBundle& ctx, const EvalProtocol& protocol,
                                std::mt19937_64& rng, const DistancePlugin& plugin = pyramid_mse);

/// Per-pixel fraction of continuations covering the pixel, canvas-sized, row-major.
std::vector<double> coverage_heatmap(const std::vector<StrokeSequence>& samples, int height, int width,
                                     double threshold);
std::vector<double> heatmap(const Generator& gen, const ContextBundle& ctx, const EvalProtocol& protocol,
                            std::mt19937_64& rng);

struct WindowMetrics {
  std::string record;
  std::size_t t = 0;
  double l2 = 0;
  double wd = 0;
  double dtw = 0;
  std::optional<double> diversity;
};

struct MetricReport {
  std::map<std::string, std::string> entries;
  std::vector<WindowMetrics> windows;
  std::vector<std::vector<double>> heatmaps;
  int heatmap_size = 0;

  [[nodiscard]] double number(const std::string& key) const;
  [[nodiscard]] std::string to_text() const;
  static MetricReport from_text(std::string_view text);
};

/// Evaluates protocol.windows_per_image windows per record of the protocol split.
MetricReport evaluate(const Generator& gen, const DatasetManifest& manifest, const EvalProtocol& protocol,
                      CanvasSource& canvases, int k, const DistancePlugin& plugin = pyramid_mse);

/// Writes report text, per-window rows and heatmap PNGs next to `report_path`.
void write_report(const std::filesystem::path& report_path, const MetricReport& report);

}  // namespace paintnext
