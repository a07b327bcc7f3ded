#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <numbers>
#include <random>
#include <unistd.h>

#include "paintnext/objectives.hpp"

using namespace paintnext;
using ag::Tensor;

namespace {

Tensor random_tensor(ag::Shape shape, std::mt19937_64& rng, double lo = 0.0, double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  std::vector<double> v(ag::numel(shape));
  for (auto& x : v) x = u(rng);
  return Tensor::from(std::move(shape), std::move(v), true);
}

/// Max relative error between autograd and central differences of f wrt x.
template <typename F>
double fd_error(Tensor x, F f, double h = 1e-6) {
  x.zero_grad();
  Tensor y = f();
  y.backward();
  const std::vector<double> analytic(x.grad().begin(), x.grad().end());
  double worst = 0;
  auto data = x.mutable_data();
  for (std::size_t i = 0; i < data.size(); ++i) {
    const double orig = data[i];
    data[i] = orig + h;
    const double up = f().item();
    data[i] = orig - h;
    const double down = f().item();
    data[i] = orig;
    const double numeric = (up - down) / (2 * h);
    const double a = analytic.empty() ? 0.0 : analytic[i];
    const double denom = std::max({std::abs(numeric), std::abs(a), 1e-6});
    worst = std::max(worst, std::abs(numeric - a) / denom);
  }
  return worst;
}

double log_normal(double x, double mu, double var) {
  return -0.5 * std::log(2 * std::numbers::pi * var) - (x - mu) * (x - mu) / (2 * var);
}

ModelConfig tiny_config() {
  ModelConfig c;
  c.d_emb = 16;
  c.n_heads = 2;
  c.ff_dim = 32;
  c.context_layers = 1;
  c.posterior_layers = 1;
  c.position_layers = 1;
  c.attribute_layers = 1;
  c.k = 2;
  c.image_size = 32;
  c.backbone_channels = {4, 8};
  c.d_z = 16;
  return c;
}

StrokeSequence random_sequence(int n, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  StrokeSequence s;
  for (int i = 0; i < n; ++i) {
    std::array<double, 8> a{};
    for (auto& v : a) v = u(rng);
    s.strokes.push_back(Stroke::from_array(a));
  }
  return s;
}

ModelBatch random_batch(const ModelConfig& cfg, int n, std::mt19937_64& rng) {
  std::uniform_real_distribution<float> u(0.0f, 1.0f);
  std::vector<ContextBundle> bundles;
  std::vector<StrokeSequence> targets;
  for (int i = 0; i < n; ++i) {
    Canvas ref(cfg.image_size, cfg.image_size), can(cfg.image_size, cfg.image_size);
    for (auto& p : ref.pixels()) p = u(rng);
    for (auto& p : can.pixels()) p = u(rng);
    bundles.push_back(ContextBundle::from_history(ref, can, random_sequence(cfg.k, rng).strokes, cfg.k));
    targets.push_back(random_sequence(cfg.k, rng));
  }
  return make_batch(cfg, bundles, targets);
}

DatasetStats random_stats(int k, const FeatureConfig& fc, std::mt19937_64& rng) {
  DatasetStats s;
  s.k = k;
  s.features = fc;
  const int d = fc.feature_dim(2 * k);
  std::uniform_real_distribution<double> u(-0.2, 0.2), v(0.02, 0.2);
  for (int i = 0; i < d; ++i) {
    s.gaussian.mu.push_back(u(rng));
    s.gaussian.var.push_back(v(rng));
  }
  return s;
}

}  // namespace

TEST_CASE("reconstruction loss") {
  std::mt19937_64 rng(1);
  const Tensor s = random_tensor({1, 8, 8}, rng);
  CHECK(reconstruction_loss(s, s, LossWeights{}).item() == 0.0);

  std::vector<double> v(s.data().begin(), s.data().end());
  std::vector<double> w = v;
  w[3 * 8 + 2] = v[3 * 8 + 2] + 1.0;
  const Tensor a = Tensor::from({1, 8, 8}, v), b = Tensor::from({1, 8, 8}, w);
  CHECK(std::abs(reconstruction_loss(a, b, LossWeights{}).item() - 0.25 / 24.0) < 1e-9);
  CHECK(std::abs(reconstruction_loss(a, b, LossWeights{}).item() - 0.010416666666666666) < 1e-9);

  const Tensor c = random_tensor({2, 8, 8}, rng), d = random_tensor({2, 8, 8}, rng);
  LossWeights only_rho{};
  only_rho.x = only_rho.sigma = only_rho.omega = 0.0;
  LossWeights doubled = only_rho;
  doubled.rho *= 2;
  CHECK(reconstruction_loss(c, d, doubled).item() == doctest::Approx(2 * reconstruction_loss(c, d, only_rho).item()).epsilon(1e-14));
  LossWeights base{}, boosted{};
  boosted.rho *= 2;
  CHECK(reconstruction_loss(c, d, boosted).item() - reconstruction_loss(c, d, base).item() ==
        doctest::Approx(reconstruction_loss(c, d, only_rho).item()).epsilon(1e-12));

  // Elementwise oracle under the mean convention.
  double oracle = 0;
  const double weights[8] = {1, 1, 0.25, 0.25, 0.25, 1, 1, 1};
  const double counts[8] = {2, 2, 3, 3, 3, 2, 2, 1};
  for (std::size_t i = 0; i < c.numel(); ++i) {
    const int col = static_cast<int>(i % 8);
    const double e = c.at(i) - d.at(i);
    oracle += weights[col] * e * e / (16 * counts[col]);
  }
  CHECK(reconstruction_loss(c, d, LossWeights{}).item() == doctest::Approx(oracle).epsilon(1e-12));
  CHECK_THROWS_AS((void)reconstruction_loss(c, random_tensor({2, 7, 8}, rng), LossWeights{}), ag::ShapeError);
  CHECK(fd_error(d, [&] { return reconstruction_loss(c, d, LossWeights{}); }) < 1e-3);
}

TEST_CASE("KL to the unit prior") {
  CHECK(kl_to_unit_prior({Tensor::zeros({1, 4}), Tensor::zeros({1, 4})}).item() == 0.0);
  CHECK(kl_to_unit_prior({Tensor::full({1, 1}, 1.0), Tensor::zeros({1, 1})}).item() == doctest::Approx(0.5).epsilon(1e-15));

  std::mt19937_64 rng(2);
  const int d = 4;
  const Tensor mu = random_tensor({1, d}, rng, -1.0, 1.0);
  const Tensor lv = random_tensor({1, d}, rng, -1.0, 0.5);
  const double kl = kl_to_unit_prior({mu, lv}).item();
  std::normal_distribution<double> n01;
  double mc = 0;
  const int samples = 1000000;
  for (int s = 0; s < samples; ++s) {
    double lr = 0;
    for (int i = 0; i < d; ++i) {
      const double var = std::exp(lv.at(i));
      const double z = mu.at(i) + std::sqrt(var) * n01(rng);
      lr += log_normal(z, mu.at(i), var) - log_normal(z, 0.0, 1.0);
    }
    mc += lr;
  }
  mc /= samples;
  CHECK(std::abs(mc - kl) / kl < 0.01);
  CHECK(fd_error(mu, [&] { return kl_to_unit_prior({mu, lv}); }) < 1e-3);
  CHECK(fd_error(lv, [&] { return kl_to_unit_prior({mu, lv}); }) < 1e-3);
}

TEST_CASE("color target and color loss") {
  const int s = 4;
  std::vector<double> uniform(3 * s * s);
  for (int c = 0; c < 3; ++c)
    for (int i = 0; i < s * s; ++i) uniform[c * s * s + i] = 0.2 + 0.3 * c;
  std::mt19937_64 rng(3);
  const Tensor pos = random_tensor({1, 5, 2}, rng);
  const Tensor tilde = color_target(Tensor::from({1, 3, s, s}, uniform), pos);
  for (int i = 0; i < 5; ++i)
    for (int c = 0; c < 3; ++c) CHECK(tilde.at(i * 3 + c) == doctest::Approx(0.2 + 0.3 * c).epsilon(1e-12));

  // Left half black, right half white.
  std::vector<double> split(3 * s * s);
  for (int c = 0; c < 3; ++c)
    for (int r = 0; r < s; ++r)
      for (int col = 0; col < s; ++col) split[(c * s + r) * s + col] = col >= 2 ? 1.0 : 0.0;
  const Tensor img = Tensor::from({1, 3, s, s}, split);
  const Tensor at_pixel = color_target(img, Tensor::from({1, 1, 2}, {3.5 / s, 0.5 / s}));
  for (int c = 0; c < 3; ++c) CHECK(at_pixel.at(c) == 1.0);
  const Tensor between = color_target(img, Tensor::from({1, 1, 2}, {2.0 / s, 1.5 / s}));
  for (int c = 0; c < 3; ++c) CHECK(between.at(c) == doctest::Approx(0.5).epsilon(1e-12));

  const Tensor a = random_tensor({2, 4, 3}, rng);
  CHECK(color_loss(a, a).item() == 0.0);
  CHECK(color_loss(ag::add_scalar(a, 0.1), a).item() == doctest::Approx(0.01).epsilon(1e-12));
  const Tensor b = random_tensor({2, 4, 3}, rng);
  double oracle = 0;
  for (std::size_t i = 0; i < a.numel(); ++i) oracle += (a.at(i) - b.at(i)) * (a.at(i) - b.at(i));
  CHECK(color_loss(a, b).item() == doctest::Approx(oracle / 24).epsilon(1e-13));
  CHECK(fd_error(a, [&] { return color_loss(a, b); }) < 1e-3);

  const Tensor ref = random_tensor({1, 3, 8, 8}, rng);
  const Tensor rho = random_tensor({1, 3, 3}, rng);
  const Tensor xy = random_tensor({1, 3, 2}, rng, 0.1, 0.9);
  CHECK(fd_error(xy, [&] { return color_loss(rho, color_target(ref, xy)); }) < 1e-3);
}

TEST_CASE("stroke features") {
  std::mt19937_64 rng(4);
  FeatureConfig full{1, true};
  StrokeSequence constant;
  constant.strokes.assign(6, Stroke{0.3, 0.4, 0.5, 0.6, 0.7, 0.1, 0.2, 0.9});
  for (double v : stroke_features(constant, FeatureConfig{4, true})) CHECK(v == 0.0);

  const auto pair = random_sequence(2, rng);
  const auto psi = stroke_features(pair, full);
  REQUIRE(psi.size() == 8);
  for (int c = 0; c < 8; ++c) CHECK(psi[c] == pair.strokes[1].to_array()[c] - pair.strokes[0].to_array()[c]);

  const FeatureConfig cfg{4, false};
  CHECK(cfg.feature_dim(16) == 270);
  const auto seq = random_sequence(16, rng);
  const auto f = stroke_features(seq, cfg);
  REQUIRE(f.size() == 270);
  std::size_t idx = 0;
  bool match = true;
  for (int l = 1; l <= 4; ++l)
    for (int i = 0; i + l < 16; ++i)
      for (int c = 0; c < 5; ++c) match = match && f[idx++] == seq.strokes[i + l].to_array()[c] - seq.strokes[i].to_array()[c];
  CHECK(match);

  const Tensor t = stroke_features(Tensor::from({1, 16, 8}, seq.flatten()), cfg);
  REQUIRE(t.numel() == 270);
  for (std::size_t i = 0; i < 270; ++i) CHECK(t.at(i) == f[i]);

  // Translation covariance.
  auto shifted = seq.flatten();
  for (auto& v : shifted) v += 0.25;
  const Tensor ts = stroke_features(Tensor::from({1, 16, 8}, shifted), cfg);
  for (std::size_t i = 0; i < 270; ++i) CHECK(ts.at(i) == doctest::Approx(t.at(i)).epsilon(1e-12));

  CHECK_THROWS((void)stroke_features(random_sequence(4, rng), FeatureConfig{4, false}));
}

TEST_CASE("diagonal gaussian fit") {
  const std::vector<std::vector<double>> same{{1.0, 2.0}, {1.0, 2.0}, {1.0, 2.0}};
  const auto g = fit_diag_gaussian(same);
  CHECK(g.mu == std::vector<double>{1.0, 2.0});
  CHECK(g.var == std::vector<double>{kVarianceFloor, kVarianceFloor});

  const std::vector<std::vector<double>> two{{0.0}, {2.0}};
  const auto g2 = fit_diag_gaussian(two);
  CHECK(g2.mu[0] == 1.0);
  CHECK(g2.var[0] == 1.0);
  const auto gt = fit_diag_gaussian(Tensor::from({2, 1}, {0.0, 2.0}));
  CHECK(gt.mu.item() == 1.0);
  CHECK(gt.var.item() == 1.0);
  CHECK_THROWS((void)fit_diag_gaussian(std::vector<std::vector<double>>{{1.0}}));

  std::mt19937_64 rng(5);
  std::normal_distribution<double> n(3.0, 2.0);
  std::vector<std::vector<double>> rows(20000, std::vector<double>(1));
  for (auto& r : rows) r[0] = n(rng);
  const auto big = fit_diag_gaussian(rows);
  CHECK(std::abs(big.mu[0] - 3.0) < 0.1);
  CHECK(std::abs(big.var[0] - 4.0) < 0.3);
}

TEST_CASE("distribution matching loss") {
  const DiagonalGaussian a{{0.3, -0.2}, {0.5, 2.0}};
  CHECK(std::abs(distribution_matching_loss(a, a)) < 1e-12);
  CHECK(distribution_matching_loss(DiagonalGaussian{{1.0}, {1.0}}, DiagonalGaussian{{0.0}, {1.0}}) ==
        doctest::Approx(0.5).epsilon(1e-15));

  std::mt19937_64 rng(6);
  std::uniform_real_distribution<double> u(-1, 1), v(0.3, 2.0);
  const int d = 3;
  DiagonalGaussian p, q;
  for (int i = 0; i < d; ++i) {
    p.mu.push_back(u(rng));
    p.var.push_back(v(rng));
    q.mu.push_back(u(rng));
    q.var.push_back(v(rng));
  }
  const double kl = distribution_matching_loss(p, q);
  std::normal_distribution<double> n01;
  double mc = 0;
  const int samples = 1000000;
  for (int s = 0; s < samples; ++s) {
    for (int i = 0; i < d; ++i) {
      const double x = p.mu[i] + std::sqrt(p.var[i]) * n01(rng);
      mc += log_normal(x, p.mu[i], p.var[i]) - log_normal(x, q.mu[i], q.var[i]);
    }
  }
  mc /= samples;
  CHECK(std::abs(mc - kl) / kl < 0.01);

  GaussianTensors pt{Tensor::from({d}, p.mu, true), Tensor::from({d}, p.var, true)};
  CHECK(distribution_matching_loss(pt, q).item() == doctest::Approx(kl).epsilon(1e-12));
  CHECK(fd_error(pt.mu, [&] { return distribution_matching_loss(pt, q); }) < 1e-3);
  CHECK(fd_error(pt.var, [&] { return distribution_matching_loss(pt, q); }) < 1e-3);

  // Through features and the batch fit.
  const Tensor seqs = random_tensor({4, 6, 8}, rng);
  const FeatureConfig fc{2, false};
  DiagonalGaussian data;
  for (int i = 0; i < fc.feature_dim(6); ++i) {
    data.mu.push_back(0.05 * u(rng));
    data.var.push_back(v(rng) * 0.1);
  }
  CHECK(fd_error(seqs, [&] { return distribution_matching_loss(fit_diag_gaussian(stroke_features(seqs, fc)), data); }) <
        1e-3);
  CHECK_THROWS_AS((void)distribution_matching_loss(a, DiagonalGaussian{{0.0}, {1.0}}), ag::ShapeError);
}

TEST_CASE("objective terms and accounting") {
  const ModelConfig cfg = tiny_config();
  InpModel model(cfg, 7);
  std::mt19937_64 rng(8);
  const ModelBatch batch = random_batch(cfg, 3, rng);
  const DatasetStats stats = random_stats(cfg.k, FeatureConfig{2, false}, rng);
  const LossWeights w{};

  std::mt19937_64 ra(9);
  const ObjectiveTerms terms = compute_objective_terms(model, batch, stats, w, ra);
  const auto [total, b] = total_objective(terms, w);
  CHECK(b.total == b.recon + w.kl * b.kl + w.col * b.col + w.col_reg * b.col_reg + w.dist_reg * b.dist_reg);
  for (double v : {b.recon, b.kl, b.col, b.col_reg, b.dist_reg, b.total}) {
    CHECK(std::isfinite(v));
    CHECK(v >= 0.0);
  }

  // Recompute every term standalone with the same noise stream.
  std::mt19937_64 rb(9);
  const auto ctx = model.encode_context(batch);
  const Posterior post = model.encode_posterior(batch.targets, ctx);
  const Tensor s_hat = model.decode(model.sample_latent(&post, LatentMode::Train, rb), ctx);
  const Tensor s_prior = model.decode(model.sample_latent(nullptr, LatentMode::Inference, rb, 3), ctx);
  CHECK(b.recon == reconstruction_loss(batch.targets, s_hat, w).item());
  CHECK(b.kl == kl_to_unit_prior(post).item());
  CHECK(b.col == color_loss(ag::slice(s_hat, 2, 2, 3), color_target(batch.reference, ag::slice(s_hat, 2, 0, 2))).item());
  CHECK(b.col_reg ==
        color_loss(ag::slice(s_prior, 2, 2, 3), color_target(batch.reference, ag::slice(s_prior, 2, 0, 2))).item());
  std::vector<std::vector<double>> rows;
  for (int i = 0; i < 3; ++i) {
    StrokeSequence seq;
    for (int j = 0; j < cfg.k; ++j) {
      std::array<double, 8> a{};
      for (int c = 0; c < 8; ++c) a[c] = batch.context.at((i * cfg.k + j) * 9 + c);
      seq.strokes.push_back(Stroke::from_array(a));
    }
    for (int j = 0; j < cfg.k; ++j) {
      std::array<double, 8> a{};
      for (int c = 0; c < 8; ++c) a[c] = s_prior.at((i * cfg.k + j) * 8 + c);
      seq.strokes.push_back(Stroke::from_array(a));
    }
    rows.push_back(stroke_features(seq, stats.features));
  }
  CHECK(b.dist_reg == doctest::Approx(distribution_matching_loss(fit_diag_gaussian(rows), stats.gaussian)).epsilon(1e-12));

  LossWeights recon_only{};
  recon_only.kl = recon_only.col = recon_only.col_reg = recon_only.dist_reg = 0.0;
  ObjectiveTerms exact = terms;
  exact.recon = reconstruction_loss(batch.targets, batch.targets, recon_only);
  CHECK(total_objective(exact, recon_only).second.total == 0.0);
}

TEST_CASE("distribution term ignores size and orientation") {
  std::mt19937_64 rng(10);
  const FeatureConfig fc{3, false};
  const Tensor seqs = random_tensor({5, 8, 8}, rng);
  std::vector<double> perturbed(seqs.data().begin(), seqs.data().end());
  std::uniform_real_distribution<double> u(0, 1);
  for (std::size_t i = 0; i < perturbed.size(); ++i)
    if (i % 8 >= 5) perturbed[i] = u(rng);
  DiagonalGaussian data;
  for (int i = 0; i < fc.feature_dim(8); ++i) {
    data.mu.push_back(0.0);
    data.var.push_back(0.1);
  }
  const double a = distribution_matching_loss(fit_diag_gaussian(stroke_features(seqs, fc)), data).item();
  const double b =
      distribution_matching_loss(fit_diag_gaussian(stroke_features(Tensor::from({5, 8, 8}, perturbed), fc)), data).item();
  CHECK(a == b);
}

TEST_CASE("total objective gradients on the tiny model") {
  const ModelConfig cfg = tiny_config();
  InpModel model(cfg, 11);
  std::mt19937_64 rng(12);
  const ModelBatch batch = random_batch(cfg, 3, rng);
  const DatasetStats stats = random_stats(cfg.k, FeatureConfig{2, false}, rng);
  LossWeights w{};
  // Larger regularizer weights keep every term visible to the finite-difference probe.
  w.kl = 0.1;
  w.col = 0.5;
  w.col_reg = 0.5;
  w.dist_reg = 0.01;
  auto loss = [&] {
    std::mt19937_64 noise(77);
    return total_objective(compute_objective_terms(model, batch, stats, w, noise), w).first;
  };
  model.parameters().zero_grad();
  loss().backward();
  double worst = 0;
  int dead = 0;
  for (const auto& [name, param] : model.parameters().entries()) {
    Tensor p = param;
    const auto g = p.grad();
    std::size_t big = 0;
    double norm = 0;
    for (std::size_t i = 0; i < g.size(); ++i) {
      norm += g[i] * g[i];
      if (std::abs(g[i]) > std::abs(g[big])) big = i;
    }
    if (norm == 0.0) {
      MESSAGE("dead parameter group ", name);
      ++dead;
      continue;
    }
    auto data = p.mutable_data();
    const double orig = data[big];
    const double h = 1e-5;
    double up, down;
    {
      ag::NoGradGuard guard;
      data[big] = orig + h;
      up = loss().item();
      data[big] = orig - h;
      down = loss().item();
      data[big] = orig;
    }
    const double numeric = (up - down) / (2 * h);
    const double err = std::abs(numeric - g[big]) / std::max({std::abs(numeric), std::abs(g[big]), 1e-6});
    if (err > 1e-3) MESSAGE(name, " analytic ", g[big], " numeric ", numeric);
    worst = std::max(worst, err);
  }
  CHECK(dead == 0);
  CHECK(worst < 1e-3);
}

TEST_CASE("dataset statistics") {
  namespace fs = std::filesystem;
  std::mt19937_64 rng(13);
  DatasetManifest m;
  for (int i = 0; i < 3; ++i) {
    DatasetRecord r;
    r.id = "r" + std::to_string(i);
    r.sequence = random_sequence(i == 2 ? 3 : 7 + i, rng);
    r.split = std::string(kTrainSplit);
    m.records.push_back(r);
  }
  DatasetRecord held;
  held.id = "held";
  held.sequence = random_sequence(9, rng);
  held.split = std::string(kEvalSplit);
  m.records.push_back(held);

  const FeatureConfig fc{2, false};
  const DatasetStats s = compute_dataset_stats(m, 2, fc);
  // Windows t in [2, T-2]: T=7 -> 4, T=8 -> 5, T=3 -> 0 (too short).
  CHECK(s.windows == 9);
  std::vector<std::vector<double>> rows;
  for (int i = 0; i < 2; ++i) {
    const auto& seq = m.records[i].sequence;
    for (std::size_t t = 2; t + 2 <= seq.size(); ++t) rows.push_back(stroke_features(seq.slice(t - 2, 4), fc));
  }
  const auto oracle = fit_diag_gaussian(rows);
  for (std::size_t i = 0; i < oracle.mu.size(); ++i) {
    CHECK(s.gaussian.mu[i] == doctest::Approx(oracle.mu[i]).epsilon(1e-12));
    CHECK(s.gaussian.var[i] == doctest::Approx(oracle.var[i]).epsilon(1e-10));
  }
  CHECK(s.manifest_checksum == m.checksum());

  const fs::path path = fs::temp_directory_path() / ("pn_stats_" + std::to_string(::getpid()) + ".json");
  save_dataset_stats(path, s);
  const DatasetStats back = load_dataset_stats(path);
  CHECK(back.gaussian.mu == s.gaussian.mu);
  CHECK(back.gaussian.var == s.gaussian.var);
  CHECK(back.features == s.features);
  CHECK(back.k == 2);
  CHECK(back.manifest_checksum == s.manifest_checksum);
  fs::remove(path);
}
