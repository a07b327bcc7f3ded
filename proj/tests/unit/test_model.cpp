#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>
#include <unistd.h>

#include "paintnext/model.hpp"

using namespace paintnext;
using ag::Tensor;

namespace {

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

Canvas random_canvas(int size, std::mt19937_64& rng) {
  std::uniform_real_distribution<float> u(0.0f, 1.0f);
  Canvas c(size, size);
  for (auto& p : c.pixels()) p = u(rng);
  return c;
}

Stroke random_stroke(std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::array<double, 8> a{};
  for (auto& v : a) v = u(rng);
  return Stroke::from_array(a);
}

StrokeSequence random_sequence(int n, std::mt19937_64& rng) {
  StrokeSequence s;
  for (int i = 0; i < n; ++i) s.strokes.push_back(random_stroke(rng));
  return s;
}

ContextBundle random_bundle(const ModelConfig& cfg, std::mt19937_64& rng) {
  const auto history = random_sequence(cfg.k, rng);
  return ContextBundle::from_history(random_canvas(cfg.image_size, rng), random_canvas(cfg.image_size, rng),
                                     history.strokes, cfg.k);
}

bool all_finite(const Tensor& t) {
  for (double v : t.data())
    if (!std::isfinite(v)) return false;
  return true;
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
  double m = 0;
  for (std::size_t i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(a.at(i) - b.at(i)));
  return m;
}

}  // namespace

TEST_CASE("default configuration geometry") {
  ModelConfig c;
  CHECK(c.feature_size() == 16);
  CHECK(c.token_count() == 264);
  CHECK(c.pe_widths() == std::vector<int>{84, 84, 88});
  CHECK(tiny_config().feature_size() == 8);
  ModelConfig bad;
  bad.n_heads = 3;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = ModelConfig{};
  bad.image_size = 200;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  CHECK(ModelConfig::from_json(c.to_json()) == c);
}

TEST_CASE("default model produces a 264x256 context code") {
  InpModel model(ModelConfig{}, 1);
  std::mt19937_64 rng(2);
  ag::NoGradGuard guard;
  const std::vector<ContextBundle> bundles{random_bundle(model.config(), rng)};
  const ModelBatch batch = make_batch(model.config(), bundles);
  const Tensor f = model.extract_visual_features(batch.reference, batch.canvas);
  CHECK(f.shape() == ag::Shape{1, 256, 16, 16});
  const ContextEncoding ctx = model.encode_context(batch);
  CHECK(ctx.c.shape() == ag::Shape{1, 264, 256});
  CHECK(all_finite(ctx.c));
}

TEST_CASE("context padding and batch validation") {
  const ModelConfig cfg = tiny_config();
  std::mt19937_64 rng(3);
  const auto history = random_sequence(1, rng);
  const auto b = ContextBundle::from_history(Canvas::white(32, 32), Canvas::white(32, 32), history.strokes, 2);
  REQUIRE(b.strokes.size() == 2);
  CHECK_FALSE(b.valid[0]);
  CHECK(b.valid[1]);
  CHECK(b.strokes[0] == Stroke{});
  CHECK(b.strokes[1] == history.strokes[0]);
  const auto batch = make_batch(cfg, std::vector<ContextBundle>{b});
  CHECK(batch.context.shape() == ag::Shape{1, 2, 9});
  CHECK(batch.context.at(8) == 0.0);
  CHECK(batch.context.at(17) == 1.0);

  auto wrong_size = b;
  wrong_size.reference = Canvas::white(64, 64);
  CHECK_THROWS_AS((void)make_batch(cfg, std::vector<ContextBundle>{wrong_size}), ConfigError);
  auto wrong_len = b;
  wrong_len.strokes.pop_back();
  wrong_len.valid.pop_back();
  CHECK_THROWS_AS((void)make_batch(cfg, std::vector<ContextBundle>{wrong_len}), ag::ShapeError);
}

TEST_CASE("visual features") {
  InpModel model(tiny_config(), 4);
  ag::NoGradGuard guard;
  std::mt19937_64 rng(5);
  const int s = model.config().image_size;
  const Tensor zeros = Tensor::zeros({1, 3, s, s});
  const Tensor f0 = model.extract_visual_features(zeros, zeros);
  CHECK(f0.shape() == ag::Shape{1, 16, 8, 8});
  CHECK(all_finite(f0));
  double energy = 0;
  for (double v : f0.data()) energy += std::abs(v);
  CHECK(energy > 0.0);

  const Tensor a = Tensor::randn({1, 3, s, s}, rng);
  const Tensor b = Tensor::randn({1, 3, s, s}, rng);
  CHECK(max_abs_diff(model.extract_visual_features(a, b), model.extract_visual_features(b, a)) > 1e-6);
  CHECK_THROWS_AS((void)model.extract_visual_features(Tensor::zeros({1, 3, 16, 16}), Tensor::zeros({1, 3, 16, 16})),
                  ConfigError);
}

TEST_CASE("context encoder is deterministic and token-local in its inputs") {
  InpModel model(tiny_config(), 6);
  ag::NoGradGuard guard;
  std::mt19937_64 rng(7);
  auto bundle = random_bundle(model.config(), rng);
  const auto batch = make_batch(model.config(), std::vector<ContextBundle>{bundle});
  const Tensor c1 = model.encode_context(batch).c;
  const Tensor c2 = model.encode_context(batch).c;
  CHECK(max_abs_diff(c1, c2) == 0.0);
  CHECK(c1.shape() == ag::Shape{1, 66, 16});

  bundle.strokes[1].r = 1.0 - bundle.strokes[1].r;
  const Tensor c3 = model.encode_context(make_batch(model.config(), std::vector<ContextBundle>{bundle})).c;
  const int row = 64 + 1;
  double row_diff = 0;
  for (int j = 0; j < 16; ++j) row_diff = std::max(row_diff, std::abs(c1.at(row * 16 + j) - c3.at(row * 16 + j)));
  CHECK(row_diff > 1e-6);
}

TEST_CASE("posterior encoder") {
  InpModel model(tiny_config(), 8);
  ag::NoGradGuard guard;
  std::mt19937_64 rng(9);
  const auto bundles = std::vector<ContextBundle>{random_bundle(model.config(), rng)};
  const auto ctx = model.encode_context(make_batch(model.config(), bundles));
  const auto t1 = make_batch(model.config(), bundles, std::vector<StrokeSequence>{random_sequence(2, rng)});
  const auto t2 = make_batch(model.config(), bundles, std::vector<StrokeSequence>{random_sequence(2, rng)});
  const Posterior p1 = model.encode_posterior(t1.targets, ctx);
  const Posterior p2 = model.encode_posterior(t2.targets, ctx);
  CHECK(p1.mu.shape() == ag::Shape{1, 16});
  CHECK(p1.log_var.shape() == ag::Shape{1, 16});
  for (double lv : p1.log_var.data()) CHECK(std::exp(lv) > 0.0);
  CHECK(max_abs_diff(p1.mu, p2.mu) > 1e-8);
  CHECK_THROWS_AS((void)model.encode_posterior(Tensor::zeros({1, 3, 8}), ctx), ag::ShapeError);
}

TEST_CASE("latent sampling modes") {
  InpModel model(tiny_config(), 10);
  std::mt19937_64 rng(11);
  Posterior p{Tensor::zeros({1, 16}), Tensor::zeros({1, 16})};
  const Tensor zm = model.sample_latent(&p, LatentMode::Mean, rng);
  for (double v : zm.data()) CHECK(v == 0.0);

  std::vector<double> mu(16);
  for (int i = 0; i < 16; ++i) mu[i] = 0.1 * i - 0.5;
  Posterior sharp{Tensor::from({1, 16}, mu), Tensor::full({1, 16}, -80.0)};
  const Tensor zt = model.sample_latent(&sharp, LatentMode::Train, rng);
  CHECK(max_abs_diff(zt, sharp.mu) < 1e-12);

  const int n = 10000;
  const Tensor prior = model.sample_latent(nullptr, LatentMode::Inference, rng, n);
  REQUIRE(prior.shape() == ag::Shape{n, 16});
  for (int j = 0; j < 16; ++j) {
    double m = 0;
    for (int i = 0; i < n; ++i) m += prior.at(static_cast<std::size_t>(i) * 16 + j);
    CHECK(std::abs(m / n) < 3.0 / std::sqrt(static_cast<double>(n)));
  }
  CHECK_THROWS((void)model.sample_latent(nullptr, LatentMode::Train, rng));
}

TEST_CASE("decoders and forward") {
  InpModel model(tiny_config(), 12);
  ag::NoGradGuard guard;
  std::mt19937_64 rng(13);
  const auto bundles = std::vector<ContextBundle>{random_bundle(model.config(), rng), random_bundle(model.config(), rng)};
  const auto targets = std::vector<StrokeSequence>{random_sequence(2, rng), random_sequence(2, rng)};
  const auto batch = make_batch(model.config(), bundles, targets);
  const auto ctx = model.encode_context(batch);
  const Tensor z1 = model.sample_latent(nullptr, LatentMode::Inference, rng, 2);
  const Tensor z2 = model.sample_latent(nullptr, LatentMode::Inference, rng, 2);
  const Tensor x1 = model.decode_positions(z1, ctx);
  CHECK(x1.shape() == ag::Shape{2, 2, 2});
  CHECK(max_abs_diff(x1, model.decode_positions(z2, ctx)) > 1e-9);
  const Tensor attrs = model.decode_attributes(z1, ctx, x1);
  CHECK(attrs.shape() == ag::Shape{2, 2, 6});
  for (double v : attrs.data()) CHECK((v >= 0.0 && v <= 1.0));

  const auto inference_only = make_batch(model.config(), bundles);
  const ForwardResult inf = model.forward(inference_only, LatentMode::Inference, rng);
  CHECK(inf.strokes.shape() == ag::Shape{2, 2, 8});
  CHECK_FALSE(inf.posterior.has_value());
  CHECK_THROWS((void)model.forward(inference_only, LatentMode::Train, rng));

  std::mt19937_64 ra(99), rb(99);
  const ForwardResult a = model.forward(batch, LatentMode::Train, ra);
  const ForwardResult b = model.forward(batch, LatentMode::Train, rb);
  CHECK(max_abs_diff(a.strokes, b.strokes) == 0.0);
  REQUIRE(a.posterior.has_value());
}

TEST_CASE("forward passes stay finite on random inputs") {
  InpModel model(tiny_config(), 14);
  ag::NoGradGuard guard;
  std::mt19937_64 rng(15);
  bool finite = true;
  for (int trial = 0; trial < 1000 && finite; ++trial) {
    auto bundle = random_bundle(model.config(), rng);
    if (trial % 3 == 0) {
      const auto partial = random_sequence(trial % 2, rng);
      bundle = ContextBundle::from_history(bundle.reference, bundle.canvas, partial.strokes, model.config().k);
    }
    const auto batch = make_batch(model.config(), std::vector<ContextBundle>{bundle},
                                  std::vector<StrokeSequence>{random_sequence(2, rng)});
    const auto out = model.forward(batch, trial % 2 ? LatentMode::Train : LatentMode::Inference, rng);
    finite = all_finite(out.strokes) && all_finite(out.posterior->mu) && all_finite(out.posterior->log_var);
    for (double v : out.strokes.data()) finite = finite && v >= 0.0 && v <= 1.0;
  }
  CHECK(finite);
}

TEST_CASE("end-to-end gradients match finite differences") {
  InpModel model(tiny_config(), 16);
  std::mt19937_64 rng(17);
  const auto bundles = std::vector<ContextBundle>{random_bundle(model.config(), rng), random_bundle(model.config(), rng)};
  const auto targets = std::vector<StrokeSequence>{random_sequence(2, rng), random_sequence(2, rng)};
  const auto batch = make_batch(model.config(), bundles, targets);
  std::vector<double> probe(2 * 2 * 8 + 2 * 16);
  for (auto& v : probe) v = std::normal_distribution<double>()(rng);

  auto loss = [&]() {
    std::mt19937_64 noise(123);
    const auto out = model.forward(batch, LatentMode::Train, noise);
    const Tensor flat = ag::concat({ag::reshape(out.strokes, {32}), ag::reshape(out.posterior->mu, {32})}, 0);
    return ag::sum(flat * Tensor::from({64}, probe));
  };

  model.parameters().zero_grad();
  Tensor l = loss();
  l.backward();

  std::mt19937_64 pick(18);
  double worst = 0;
  int dead = 0;
  for (const auto& [name, param] : model.parameters().entries()) {
    Tensor p = param;
    const auto g = p.grad();
    double norm = 0;
    for (double v : g) norm += v * v;
    if (norm == 0.0) {
      MESSAGE("zero gradient for ", name);
      ++dead;
      continue;
    }
    // Probe the largest-gradient entry and one random entry.
    std::size_t big = 0;
    for (std::size_t i = 1; i < g.size(); ++i)
      if (std::abs(g[i]) > std::abs(g[big])) big = i;
    for (std::size_t idx : {big, static_cast<std::size_t>(pick() % g.size())}) {
      const double analytic = g[idx];
      auto data = p.mutable_data();
      const double orig = data[idx];
      const double h = 1e-5;
      double up, down;
      {
        ag::NoGradGuard guard;
        data[idx] = orig + h;
        up = loss().item();
        data[idx] = orig - h;
        down = loss().item();
        data[idx] = orig;
      }
      const double numeric = (up - down) / (2 * h);
      const double denom = std::max({std::abs(numeric), std::abs(analytic), 1e-6});
      const double err = std::abs(numeric - analytic) / denom;
      if (err > 1e-3) MESSAGE(name, "[", idx, "] analytic ", analytic, " numeric ", numeric);
      worst = std::max(worst, err);
    }
  }
  CHECK(dead == 0);
  CHECK(worst < 1e-3);
}

TEST_CASE("checkpoint round trip") {
  namespace fs = std::filesystem;
  const fs::path dir = fs::temp_directory_path() / ("pn_model_" + std::to_string(::getpid()));
  fs::create_directories(dir);
  InpModel a(tiny_config(), 20);
  InpModel b(tiny_config(), 21);
  CHECK(a.checksum() != b.checksum());
  Checkpoint ckpt = model_checkpoint(a);
  ckpt.meta = R"({"step":5})";
  save_checkpoint(dir / "a.ckpt", ckpt);
  const Checkpoint loaded = load_checkpoint(dir / "a.ckpt");
  CHECK(loaded.meta == R"({"step":5})");
  load_parameters(b, loaded);
  CHECK(a.checksum() == b.checksum());

  ag::NoGradGuard guard;
  std::mt19937_64 rng(22);
  const auto batch = make_batch(a.config(), std::vector<ContextBundle>{random_bundle(a.config(), rng)});
  std::mt19937_64 ra(1), rb(1);
  CHECK(max_abs_diff(a.forward(batch, LatentMode::Inference, ra).strokes,
                     b.forward(batch, LatentMode::Inference, rb).strokes) == 0.0);

  ModelConfig other = tiny_config();
  other.d_emb = 32;
  InpModel c(other, 1);
  CHECK_THROWS_AS(load_parameters(c, loaded), ConfigError);

  Checkpoint missing = loaded;
  missing.tensors.erase(missing.tensors.begin());
  const std::string before = b.checksum();
  CHECK_THROWS_AS(load_parameters(b, missing), ConfigError);
  CHECK(b.checksum() == before);

  {
    std::fstream f(dir / "a.ckpt", std::ios::in | std::ios::out | std::ios::binary);
    f.seekp(-3, std::ios::end);
    f.put('\x7f');
  }
  CHECK_THROWS(load_checkpoint(dir / "a.ckpt"));
  fs::remove_all(dir);
}
