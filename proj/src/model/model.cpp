#include "paintnext/model.hpp"

#include <algorithm>
#include <cmath>

#include "json.hpp"
#include "paintnext/hash.hpp"

namespace paintnext {

using nlohmann::json;

int ModelConfig::feature_size() const {
  const int blocks = static_cast<int>(backbone_channels.size());
  return blocks >= 1 && blocks < 30 ? image_size >> blocks : 0;
}

std::vector<int> ModelConfig::pe_widths() const {
  const int spatial = 2 * (d_emb / 6);
  return {spatial, spatial, d_emb - 2 * spatial};
}

void ModelConfig::validate() const {
  auto require = [](bool ok, const std::string& what) {
    if (!ok) throw ConfigError("invalid model config: " + what);
  };
  require(d_emb >= 6 && d_emb % 2 == 0, "d_emb must be even and >= 6");
  require(n_heads >= 1 && d_emb % n_heads == 0, "d_emb must be divisible by n_heads");
  require(ff_dim >= 1, "ff_dim must be positive");
  require(dropout >= 0.0 && dropout < 1.0, "dropout must lie in [0, 1)");
  require(context_layers >= 1 && posterior_layers >= 1 && position_layers >= 1 && attribute_layers >= 1,
          "every transformer needs at least one layer");
  require(k >= 1, "k must be positive");
  require(!backbone_channels.empty(), "backbone needs at least one block");
  for (int c : backbone_channels) require(c >= 1, "backbone channels must be positive");
  require(image_size >= 2 && feature_size() >= 1 && (feature_size() << backbone_channels.size()) == image_size,
          "image_size must be divisible by 2^blocks");
  require(d_z >= 1, "d_z must be positive");
  require(pe_wavelength > 1.0, "pe_wavelength must exceed 1");
}

std::string ModelConfig::to_json() const {
  return json{{"d_emb", d_emb},
              {"n_heads", n_heads},
              {"ff_dim", ff_dim},
              {"dropout", dropout},
              {"context_layers", context_layers},
              {"posterior_layers", posterior_layers},
              {"position_layers", position_layers},
              {"attribute_layers", attribute_layers},
              {"k", k},
              {"image_size", image_size},
              {"backbone_channels", backbone_channels},
              {"d_z", d_z},
              {"pe_wavelength", pe_wavelength}}
      .dump();
}

ModelConfig ModelConfig::from_json(std::string_view text) {
  const json j = json::parse(text);
  ModelConfig c;
  c.d_emb = j.value("d_emb", c.d_emb);
  c.n_heads = j.value("n_heads", c.n_heads);
  c.ff_dim = j.value("ff_dim", c.ff_dim);
  c.dropout = j.value("dropout", c.dropout);
  c.context_layers = j.value("context_layers", c.context_layers);
  c.posterior_layers = j.value("posterior_layers", c.posterior_layers);
  c.position_layers = j.value("position_layers", c.position_layers);
  c.attribute_layers = j.value("attribute_layers", c.attribute_layers);
  c.k = j.value("k", c.k);
  c.image_size = j.value("image_size", c.image_size);
  c.backbone_channels = j.value("backbone_channels", c.backbone_channels);
  c.d_z = j.value("d_z", c.d_z);
  c.pe_wavelength = j.value("pe_wavelength", c.pe_wavelength);
  c.validate();
  return c;
}

ContextBundle ContextBundle::from_history(Canvas reference, Canvas canvas, std::span<const Stroke> history, int k) {
  ContextBundle b;
  b.reference = std::move(reference);
  b.canvas = std::move(canvas);
  const std::size_t n = std::min<std::size_t>(history.size(), static_cast<std::size_t>(k));
  b.strokes.assign(k - n, Stroke{});
  b.valid.assign(k - n, false);
  for (std::size_t i = history.size() - n; i < history.size(); ++i) {
    b.strokes.push_back(history[i]);
    b.valid.push_back(true);
  }
  return b;
}

ModelBatch make_batch(const ModelConfig& cfg, std::span<const ContextBundle> bundles,
                      std::span<const StrokeSequence> targets) {
  if (bundles.empty()) throw ConfigError("empty batch");
  if (!targets.empty() && targets.size() != bundles.size()) throw ConfigError("targets/bundles size mismatch");
  const int n = static_cast<int>(bundles.size());
  const int s = cfg.image_size;
  const std::size_t plane = static_cast<std::size_t>(3) * s * s;
  std::vector<double> ref(n * plane), can(n * plane), ctx(static_cast<std::size_t>(n) * cfg.k * kContextTokenWidth);
  for (int b = 0; b < n; ++b) {
    const ContextBundle& bundle = bundles[b];
    for (const Canvas* c : {&bundle.reference, &bundle.canvas}) {
      if (c->height() != s || c->width() != s) {
        throw ConfigError("image is " + std::to_string(c->height()) + "x" + std::to_string(c->width()) +
                          ", model expects " + std::to_string(s) + "x" + std::to_string(s));
      }
    }
    if (static_cast<int>(bundle.strokes.size()) != cfg.k || bundle.valid.size() != bundle.strokes.size()) {
      throw ag::ShapeError("context must hold exactly k=" + std::to_string(cfg.k) + " strokes");
    }
    const auto r = bundle.reference.planar();
    const auto c = bundle.canvas.planar();
    std::copy(r.begin(), r.end(), ref.begin() + b * plane);
    std::copy(c.begin(), c.end(), can.begin() + b * plane);
    for (int i = 0; i < cfg.k; ++i) {
      double* row = &ctx[(static_cast<std::size_t>(b) * cfg.k + i) * kContextTokenWidth];
      const auto a = bundle.strokes[i].to_array();
      std::copy(a.begin(), a.end(), row);
      row[8] = bundle.valid[i] ? 1.0 : 0.0;
    }
  }
  ModelBatch batch;
  batch.reference = Tensor::from({n, 3, s, s}, std::move(ref));
  batch.canvas = Tensor::from({n, 3, s, s}, std::move(can));
  batch.context = Tensor::from({n, cfg.k, kContextTokenWidth}, std::move(ctx));
  if (!targets.empty()) {
    std::vector<double> t;
    t.reserve(static_cast<std::size_t>(n) * cfg.k * 8);
    for (const auto& seq : targets) {
      if (static_cast<int>(seq.size()) != cfg.k) throw ag::ShapeError("target must hold exactly k strokes");
      const auto rows = seq.flatten();
      t.insert(t.end(), rows.begin(), rows.end());
    }
    batch.targets = Tensor::from({n, cfg.k, 8}, std::move(t));
  }
  return batch;
}

InpModel::InpModel(ModelConfig config, std::uint64_t seed) : config_(std::move(config)) {
  config_.validate();
  dropout_.p = config_.dropout;
  std::mt19937_64 rng(seed);
  nn::Builder root(store_, rng);
  const int d = config_.d_emb;
  ref_backbone_ = nn::Backbone(root.sub("ref_backbone"), config_.backbone_channels);
  canvas_backbone_ = nn::Backbone(root.sub("canvas_backbone"), config_.backbone_channels);
  visual_proj_ = nn::Linear(root.sub("visual_proj"), 2 * config_.backbone_channels.back(), d);
  context_proj_ = nn::Linear(root.sub("context_proj"), kContextTokenWidth, d);
  context_encoder_ = nn::TransformerEncoder(root.sub("context_encoder"), config_.context_layers, d, config_.n_heads,
                                            config_.ff_dim);
  target_proj_ = nn::Linear(root.sub("target_proj"), 8, d);
  mu_token_ = root.normal("mu_token", {1, 1, d}, 0.02);
  log_var_token_ = root.normal("log_var_token", {1, 1, d}, 0.02);
  posterior_decoder_ = nn::TransformerDecoder(root.sub("posterior_decoder"), config_.posterior_layers, d,
                                              config_.n_heads, config_.ff_dim);
  mu_head_ = nn::Linear(root.sub("mu_head"), d, config_.d_z);
  log_var_head_ = nn::Linear(root.sub("log_var_head"), d, config_.d_z);
  latent_proj_ = nn::Linear(root.sub("latent_proj"), config_.d_z, d);
  position_decoder_ = nn::TransformerDecoder(root.sub("position_decoder"), config_.position_layers, d,
                                             config_.n_heads, config_.ff_dim);
  position_head_ = nn::Linear(root.sub("position_head"), d, 2);
  attribute_decoder_ = nn::TransformerDecoder(root.sub("attribute_decoder"), config_.attribute_layers, d,
                                              config_.n_heads, config_.ff_dim);
  attribute_head_ = nn::Linear(root.sub("attribute_head"), d, 6);

  const int f = config_.feature_size();
  std::vector<double> coords;
  coords.reserve(static_cast<std::size_t>(f) * f * 3);
  for (int i = 0; i < f; ++i) {
    for (int j = 0; j < f; ++j) {
      coords.push_back(j + 0.5);
      coords.push_back(i + 0.5);
      coords.push_back(0.0);
    }
  }
  visual_pe_ = ag::sinusoidal(Tensor::from({f * f, 3}, std::move(coords)), config_.pe_widths(), config_.pe_wavelength);
  std::vector<double> steps(config_.k);
  for (int i = 0; i < config_.k; ++i) steps[i] = config_.k + 1 + i;
  position_queries_ = ag::sinusoidal(Tensor::from({config_.k, 1}, std::move(steps)), {d}, config_.pe_wavelength);
}

Tensor InpModel::encode_3d(const Tensor& xy, int t0) const {
  const int b = xy.dim(0), n = xy.dim(1);
  std::vector<double> t(static_cast<std::size_t>(b) * n);
  for (int i = 0; i < b; ++i)
    for (int j = 0; j < n; ++j) t[static_cast<std::size_t>(i) * n + j] = t0 + j;
  const Tensor coords = ag::concat({ag::scale(xy, config_.feature_size()), Tensor::from({b, n, 1}, std::move(t))}, 2);
  return ag::sinusoidal(coords, config_.pe_widths(), config_.pe_wavelength);
}

Tensor InpModel::extract_visual_features(const Tensor& reference, const Tensor& canvas) const {
  const int s = config_.image_size;
  for (const Tensor* t : {&reference, &canvas}) {
    if (t->rank() != 4 || t->dim(1) != 3 || t->dim(2) != s || t->dim(3) != s) {
      throw ConfigError("visual input " + ag::to_string(t->shape()) + " does not match image_size " +
                        std::to_string(s));
    }
  }
  const int b = reference.dim(0), f = config_.feature_size();
  const Tensor maps = ag::concat({ref_backbone_(reference), canvas_backbone_(canvas)}, 1);
  const Tensor tokens = visual_proj_(ag::transpose_last2(ag::reshape(maps, {b, maps.dim(1), f * f})));
  return ag::reshape(ag::transpose_last2(tokens), {b, config_.d_emb, f, f});
}

ContextEncoding InpModel::encode_context(const ModelBatch& batch) const {
  if (batch.context.rank() != 3 || batch.context.dim(1) != config_.k || batch.context.dim(2) != kContextTokenWidth) {
    throw ag::ShapeError("context tokens must be [B," + std::to_string(config_.k) + ",9], got " +
                         ag::to_string(batch.context.shape()));
  }
  ContextEncoding out;
  out.features = extract_visual_features(batch.reference, batch.canvas);
  const int b = batch.size(), f = config_.feature_size();
  const Tensor visual =
      ag::transpose_last2(ag::reshape(out.features, {b, config_.d_emb, f * f})) + visual_pe_;
  const Tensor strokes = context_proj_(batch.context) + encode_3d(ag::slice(batch.context, 2, 0, 2), 1);
  out.c = context_encoder_(ag::concat({visual, strokes}, 1), dropout_);
  return out;
}

Posterior InpModel::encode_posterior(const Tensor& targets, const ContextEncoding& ctx) const {
  if (!targets.defined() || targets.rank() != 3 || targets.dim(1) != config_.k || targets.dim(2) != 8) {
    throw ag::ShapeError("targets must be [B," + std::to_string(config_.k) + ",8]");
  }
  const int b = targets.dim(0);
  const Tensor tokens = target_proj_(targets) + encode_3d(ag::slice(targets, 2, 0, 2), config_.k + 1);
  const Tensor queries =
      ag::concat({ag::repeat_batch(mu_token_, b), ag::repeat_batch(log_var_token_, b), tokens}, 1);
  const Tensor out = posterior_decoder_(queries, ctx.c, dropout_);
  const int d = config_.d_emb;
  return {mu_head_(ag::reshape(ag::slice(out, 1, 0, 1), {b, d})),
          log_var_head_(ag::reshape(ag::slice(out, 1, 1, 1), {b, d}))};
}

Tensor InpModel::sample_latent(const Posterior* posterior, LatentMode mode, std::mt19937_64& rng, int batch) const {
  if (mode == LatentMode::Inference) return Tensor::randn({batch, config_.d_z}, rng);
  if (posterior == nullptr) throw std::invalid_argument("posterior required for this latent mode");
  if (mode == LatentMode::Mean) return posterior->mu;
  const Tensor eps = Tensor::randn(posterior->mu.shape(), rng);
  return posterior->mu + ag::exp(ag::scale(posterior->log_var, 0.5)) * eps;
}

Tensor InpModel::memory_with_latent(const Tensor& z, const ContextEncoding& ctx) const {
  const int b = ctx.c.dim(0);
  if (z.rank() != 2 || z.dim(0) != b || z.dim(1) != config_.d_z) {
    throw ag::ShapeError("latent must be [B,d_z], got " + ag::to_string(z.shape()));
  }
  return ag::concat({ctx.c, ag::reshape(latent_proj_(z), {b, 1, config_.d_emb})}, 1);
}

Tensor InpModel::decode_positions(const Tensor& z, const ContextEncoding& ctx) const {
  const int b = ctx.c.dim(0);
  const Tensor queries = ag::repeat_batch(ag::reshape(position_queries_, {1, config_.k, config_.d_emb}), b);
  return ag::sigmoid(position_head_(position_decoder_(queries, memory_with_latent(z, ctx), dropout_)));
}

Tensor InpModel::decode_attributes(const Tensor& z, const ContextEncoding& ctx, const Tensor& positions) const {
  const Tensor sampled = ag::bilinear_sample(ctx.features, positions);
  const Tensor queries = sampled + encode_3d(positions, config_.k + 1);
  return ag::sigmoid(attribute_head_(attribute_decoder_(queries, memory_with_latent(z, ctx), dropout_)));
}

Tensor InpModel::decode(const Tensor& z, const ContextEncoding& ctx) const {
  const Tensor positions = decode_positions(z, ctx);
  return ag::concat({positions, decode_attributes(z, ctx, positions)}, 2);
}

ForwardResult InpModel::forward(const ModelBatch& batch, LatentMode mode, std::mt19937_64& rng) const {
  if (mode == LatentMode::Train && !batch.targets.defined()) {
    throw std::invalid_argument("train mode requires target strokes");
  }
  const ContextEncoding ctx = encode_context(batch);
  ForwardResult out;
  if (batch.targets.defined()) out.posterior = encode_posterior(batch.targets, ctx);
  if (mode == LatentMode::Mean && !out.posterior) {
    out.z = Tensor::zeros({batch.size(), config_.d_z});
  } else {
    out.z = sample_latent(out.posterior ? &*out.posterior : nullptr, mode, rng, batch.size());
  }
  out.strokes = decode(out.z, ctx);
  return out;
}

std::string InpModel::checksum() const {
  Sha256 h;
  for (const auto& [name, t] : store_.entries()) {
    h.update(name);
    h.update(std::span<const int>(t.shape()));
    h.update(t.data());
  }
  return h.hex();
}

}  // namespace paintnext
