#include "paintnext/objectives.hpp"

#include <cmath>
#include <stdexcept>

#include "json.hpp"
#include "paintnext/fileio.hpp"

namespace paintnext {

using nlohmann::json;

void LossWeights::validate() const {
  for (double v : {kl, col, col_reg, dist_reg, x, rho, sigma, omega}) {
    if (!(v >= 0.0) || !std::isfinite(v)) throw std::invalid_argument("loss weights must be finite and non-negative");
  }
}

int FeatureConfig::feature_dim(int length) const {
  if (l_max < 1 || l_max >= length) {
    throw std::invalid_argument("l_max must lie in [1, " + std::to_string(length - 1) + "]");
  }
  int pairs = 0;
  for (int l = 1; l <= l_max; ++l) pairs += length - l;
  return stroke_dims() * pairs;
}

DiagonalGaussian GaussianTensors::values() const {
  return {std::vector<double>(mu.data().begin(), mu.data().end()),
          std::vector<double>(var.data().begin(), var.data().end())};
}

namespace {

void require_same_shape(const Tensor& a, const Tensor& b, const char* what) {
  if (a.shape() != b.shape()) {
    throw ag::ShapeError(std::string(what) + ": shapes " + ag::to_string(a.shape()) + " and " +
                         ag::to_string(b.shape()) + " differ");
  }
}

Tensor group_mse(const Tensor& target, const Tensor& pred, int start, int length) {
  return ag::mean(ag::square(ag::slice(pred, 2, start, length) - ag::slice(target, 2, start, length)));
}

void require_dims(const DiagonalGaussian& a, const DiagonalGaussian& b) {
  if (a.mu.size() != a.var.size() || b.mu.size() != b.var.size() || a.mu.size() != b.mu.size()) {
    throw ag::ShapeError("gaussian dimensions differ");
  }
}

}  // namespace

Tensor reconstruction_loss(const Tensor& target, const Tensor& pred, const LossWeights& w) {
  require_same_shape(target, pred, "reconstruction_loss");
  if (target.rank() != 3 || target.dim(2) != 8) throw ag::ShapeError("reconstruction_loss expects [B,k,8]");
  return ag::scale(group_mse(target, pred, 0, 2), w.x) + ag::scale(group_mse(target, pred, 2, 3), w.rho) +
         ag::scale(group_mse(target, pred, 5, 2), w.sigma) + ag::scale(group_mse(target, pred, 7, 1), w.omega);
}

Tensor kl_to_unit_prior(const Posterior& p) {
  require_same_shape(p.mu, p.log_var, "kl_to_unit_prior");
  const Tensor per_dim = ag::add_scalar(ag::square(p.mu) + ag::exp(p.log_var) - p.log_var, -1.0);
  return ag::scale(ag::mean(ag::sum_last(per_dim)), 0.5);
}

Tensor color_target(const Tensor& reference, const Tensor& positions) {
  return ag::bilinear_sample(reference, positions);
}

Tensor color_loss(const Tensor& rho_hat, const Tensor& rho_tilde) {
  require_same_shape(rho_hat, rho_tilde, "color_loss");
  return ag::mean(ag::square(rho_hat - rho_tilde));
}

Tensor stroke_features(const Tensor& seq, const FeatureConfig& cfg) {
  if (seq.rank() != 3 || seq.dim(2) != 8) throw ag::ShapeError("stroke_features expects [B,L,8]");
  (void)cfg.feature_dim(seq.dim(1));
  const Tensor s = cfg.include_sigma_omega ? seq : ag::slice(seq, 2, 0, 5);
  return ag::offset_differences(s, cfg.l_max);
}

std::vector<double> stroke_features(const StrokeSequence& seq, const FeatureConfig& cfg) {
  const int length = static_cast<int>(seq.size());
  const int d = cfg.stroke_dims();
  std::vector<double> out;
  out.reserve(cfg.feature_dim(length));
  for (int l = 1; l <= cfg.l_max; ++l) {
    for (int i = 0; i + l < length; ++i) {
      const auto a = seq.strokes[i].to_array();
      const auto b = seq.strokes[i + l].to_array();
      for (int c = 0; c < d; ++c) out.push_back(b[c] - a[c]);
    }
  }
  return out;
}

GaussianTensors fit_diag_gaussian(const Tensor& x, double floor) {
  if (x.rank() != 2) throw ag::ShapeError("fit_diag_gaussian expects [N,D]");
  if (x.dim(0) < 2) throw std::invalid_argument("fit_diag_gaussian needs at least 2 rows");
  const Tensor mu = ag::mean_leading(x);
  return {mu, ag::clamp_min(ag::mean_leading(ag::square(x - mu)), floor)};
}

DiagonalGaussian fit_diag_gaussian(std::span<const std::vector<double>> rows, double floor) {
  if (rows.size() < 2) throw std::invalid_argument("fit_diag_gaussian needs at least 2 rows");
  const std::size_t d = rows.front().size();
  DiagonalGaussian g{std::vector<double>(d, 0.0), std::vector<double>(d, 0.0)};
  for (const auto& r : rows) {
    if (r.size() != d) throw ag::ShapeError("fit_diag_gaussian: ragged rows");
    for (std::size_t i = 0; i < d; ++i) g.mu[i] += r[i];
  }
  const double n = static_cast<double>(rows.size());
  for (auto& m : g.mu) m /= n;
  for (const auto& r : rows)
    for (std::size_t i = 0; i < d; ++i) g.var[i] += (r[i] - g.mu[i]) * (r[i] - g.mu[i]);
  for (auto& v : g.var) v = std::max(v / n, floor);
  return g;
}

Tensor distribution_matching_loss(const GaussianTensors& p_hat, const DiagonalGaussian& p_data) {
  require_dims(p_hat.values(), p_data);
  const int d = static_cast<int>(p_data.mu.size());
  std::vector<double> inv_two_var(d), log_var(d);
  for (int i = 0; i < d; ++i) {
    if (!(p_data.var[i] > 0.0)) throw std::invalid_argument("data variance must be positive");
    inv_two_var[i] = 0.5 / p_data.var[i];
    log_var[i] = std::log(p_data.var[i]);
  }
  const Tensor mu_data = Tensor::from({d}, p_data.mu);
  // 0.5 log(var_d / var_h) + (var_h + (mu_h - mu_d)^2) / (2 var_d) - 0.5
  const Tensor log_ratio = ag::scale(Tensor::from({d}, log_var) - ag::log(p_hat.var), 0.5);
  const Tensor spread = (p_hat.var + ag::square(p_hat.mu - mu_data)) * Tensor::from({d}, inv_two_var);
  return ag::add_scalar(ag::sum(log_ratio + spread), -0.5 * d);
}

double distribution_matching_loss(const DiagonalGaussian& p_hat, const DiagonalGaussian& p_data) {
  require_dims(p_hat, p_data);
  double total = 0;
  for (std::size_t i = 0; i < p_hat.mu.size(); ++i) {
    const double dm = p_hat.mu[i] - p_data.mu[i];
    total += 0.5 * std::log(p_data.var[i] / p_hat.var[i]) + (p_hat.var[i] + dm * dm) / (2.0 * p_data.var[i]) - 0.5;
  }
  return total;
}

std::pair<Tensor, LossBreakdown> total_objective(const ObjectiveTerms& terms, const LossWeights& w) {
  w.validate();
  const Tensor total = terms.recon + ag::scale(terms.kl, w.kl) + ag::scale(terms.col, w.col) +
                       ag::scale(terms.col_reg, w.col_reg) + ag::scale(terms.dist_reg, w.dist_reg);
  LossBreakdown b{terms.recon.item(), terms.kl.item(), terms.col.item(), terms.col_reg.item(),
                  terms.dist_reg.item(), total.item()};
  return {total, b};
}

DatasetStats compute_dataset_stats(const DatasetManifest& manifest, int k, const FeatureConfig& cfg) {
  DatasetStats stats;
  stats.features = cfg;
  stats.k = k;
  stats.manifest_checksum = manifest.checksum();
  const std::size_t d = cfg.feature_dim(2 * k);
  // Welford accumulation over every window; the training split can hold millions.
  std::vector<double> mean(d, 0.0), m2(d, 0.0);
  for (const DatasetRecord* r : manifest.split(kTrainSplit)) {
    const auto& seq = r->sequence;
    if (seq.size() < static_cast<std::size_t>(2 * k)) continue;
    for (std::size_t t = k; t + k <= seq.size(); ++t) {
      const auto psi = stroke_features(seq.slice(t - k, 2 * k), cfg);
      ++stats.windows;
      const double n = static_cast<double>(stats.windows);
      for (std::size_t i = 0; i < d; ++i) {
        const double delta = psi[i] - mean[i];
        mean[i] += delta / n;
        m2[i] += delta * (psi[i] - mean[i]);
      }
    }
  }
  if (stats.windows < 2) throw std::runtime_error("dataset statistics need at least 2 training windows");
  stats.gaussian.mu = mean;
  stats.gaussian.var.resize(d);
  for (std::size_t i = 0; i < d; ++i) {
    stats.gaussian.var[i] = std::max(m2[i] / static_cast<double>(stats.windows), kVarianceFloor);
  }
  return stats;
}

void save_dataset_stats(const std::filesystem::path& path, const DatasetStats& stats) {
  const json j{{"version", DatasetStats::kVersion},
               {"k", stats.k},
               {"l_max", stats.features.l_max},
               {"include_sigma_omega", stats.features.include_sigma_omega},
               {"manifest_checksum", stats.manifest_checksum},
               {"windows", stats.windows},
               {"mu", stats.gaussian.mu},
               {"var", stats.gaussian.var}};
  write_file_atomic(path, j.dump());
}

DatasetStats load_dataset_stats(const std::filesystem::path& path) {
  const json j = json::parse(read_file(path));
  if (j.at("version").get<int>() != DatasetStats::kVersion) {
    throw std::runtime_error("unsupported dataset statistics version in " + path.string());
  }
  DatasetStats s;
  s.k = j.at("k").get<int>();
  s.features.l_max = j.at("l_max").get<int>();
  s.features.include_sigma_omega = j.at("include_sigma_omega").get<bool>();
  s.manifest_checksum = j.at("manifest_checksum").get<std::string>();
  s.windows = j.at("windows").get<std::size_t>();
  s.gaussian.mu = j.at("mu").get<std::vector<double>>();
  s.gaussian.var = j.at("var").get<std::vector<double>>();
  if (s.gaussian.mu.size() != static_cast<std::size_t>(s.features.feature_dim(2 * s.k)) ||
      s.gaussian.var.size() != s.gaussian.mu.size()) {
    throw std::runtime_error("dataset statistics in " + path.string() + " have inconsistent dimensions");
  }
  return s;
}

ObjectiveTerms compute_objective_terms(const InpModel& model, const ModelBatch& batch, const DatasetStats& stats,
                                       const LossWeights& w, std::mt19937_64& rng) {
  const ModelConfig& cfg = model.config();
  if (!batch.targets.defined()) throw std::invalid_argument("objective needs target strokes");
  if (stats.k != cfg.k) throw ConfigError("dataset statistics were computed for a different k");
  const int b = batch.size();

  const ContextEncoding ctx = model.encode_context(batch);
  ObjectiveTerms terms;

  const Posterior post = model.encode_posterior(batch.targets, ctx);
  const Tensor z = model.sample_latent(&post, LatentMode::Train, rng);
  const Tensor s_hat = model.decode(z, ctx);
  terms.recon = reconstruction_loss(batch.targets, s_hat, w);
  terms.kl = kl_to_unit_prior(post);
  terms.col = color_loss(ag::slice(s_hat, 2, 2, 3), color_target(batch.reference, ag::slice(s_hat, 2, 0, 2)));

  const Tensor z_prior = model.sample_latent(nullptr, LatentMode::Inference, rng, b);
  const Tensor s_prior = model.decode(z_prior, ctx);
  terms.col_reg =
      color_loss(ag::slice(s_prior, 2, 2, 3), color_target(batch.reference, ag::slice(s_prior, 2, 0, 2)));
  if (b >= 2) {
    const Tensor full = ag::concat({ag::slice(batch.context, 2, 0, 8), s_prior}, 1);
    terms.dist_reg = distribution_matching_loss(fit_diag_gaussian(stroke_features(full, stats.features)),
                                                stats.gaussian);
  } else {
    terms.dist_reg = Tensor::scalar(0.0);
  }
  return terms;
}

}  // namespace paintnext
