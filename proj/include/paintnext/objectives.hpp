#pragma once

#include <filesystem>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "paintnext/dataset.hpp"
#include "paintnext/model.hpp"

namespace paintnext {

struct LossWeights {
  double kl = 2.5e-4;
  double col = 2.5e-2;
  double col_reg = 2.5e-3;
  double dist_reg = 5.0e-6;
  double x = 1.0;
  double rho = 0.25;
  double sigma = 1.0;
  double omega = 1.0;
  void validate() const;
};

struct FeatureConfig {
  int l_max = 4;
  /// When false only (x, rho) enter the features.
  bool include_sigma_omega = false;
  [[nodiscard]] int stroke_dims() const { return include_sigma_omega ? 8 : 5; }
  /// Feature length for sequences of `length` strokes.
  [[nodiscard]] int feature_dim(int length) const;
  bool operator==(const FeatureConfig&) const = default;
};

inline constexpr double kVarianceFloor = 1e-6;

struct DiagonalGaussian {
  std::vector<double> mu;
  std::vector<double> var;
};

/// Differentiable counterpart of DiagonalGaussian.
struct GaussianTensors {
  Tensor mu;   // [D]
  Tensor var;  // [D]
  [[nodiscard]] DiagonalGaussian values() const;
};

/// Weighted per-group mean squared errors over [B,k,8] stroke tensors.
Tensor reconstruction_loss(const Tensor& target, const Tensor& pred, const LossWeights& w);
/// 0.5 * sum_i (mu^2 + var - log var - 1), averaged over the batch.
Tensor kl_to_unit_prior(const Posterior& p);
/// Reference colors at predicted centers: [B,3,H,W] x [B,k,2] -> [B,k,3].
Tensor color_target(const Tensor& reference, const Tensor& positions);
/// Mean squared difference.
Tensor color_loss(const Tensor& rho_hat, const Tensor& rho_tilde);
/// Pairwise offset differences of seq[B,L,8] for offsets 1..l_max -> [B, feature_dim(L)].
Tensor stroke_features(const Tensor& seq, const FeatureConfig& cfg);
std::vector<double> stroke_features(const StrokeSequence& seq, const FeatureConfig& cfg);
/// Per-dimension mean and population variance (floored) over rows of x[N,D].
GaussianTensors fit_diag_gaussian(const Tensor& x, double floor = kVarianceFloor);
DiagonalGaussian fit_diag_gaussian(std::span<const std::vector<double>> rows, double floor = kVarianceFloor);
/// KL(p_hat || p_data) for diagonal Gaussians.
Tensor distribution_matching_loss(const GaussianTensors& p_hat, const DiagonalGaussian& p_data);
double distribution_matching_loss(const DiagonalGaussian& p_hat, const DiagonalGaussian& p_data);

struct LossBreakdown {
  double recon = 0, kl = 0, col = 0, col_reg = 0, dist_reg = 0, total = 0;
};

struct ObjectiveTerms {
  Tensor recon, kl, col, col_reg, dist_reg;
};

/// Weighted sum in a fixed order, plus the unweighted terms.
std::pair<Tensor, LossBreakdown> total_objective(const ObjectiveTerms& terms, const LossWeights& w);

/// Frozen statistics of data features over every training window of 2k strokes.
struct DatasetStats {
  static constexpr int kVersion = 1;
  DiagonalGaussian gaussian;
  FeatureConfig features;
  int k = 8;
  std::string manifest_checksum;
  std::size_t windows = 0;
};

DatasetStats compute_dataset_stats(const DatasetManifest& manifest, int k, const FeatureConfig& cfg);
void save_dataset_stats(const std::filesystem::path& path, const DatasetStats& stats);
DatasetStats load_dataset_stats(const std::filesystem::path& path);

/// Posterior pass (recon, KL, color) and prior pass (color and distribution regularizers)
/// sharing one context encoding. The distribution term is zero for batches smaller than 2.
/// Only the recon component weights of `w` are used here.
ObjectiveTerms compute_objective_terms(const InpModel& model, const ModelBatch& batch, const DatasetStats& stats,
                                       const LossWeights& w, std::mt19937_64& rng);

}  // namespace paintnext
