#include "paintnext/trainer.hpp"

#include <spdlog/spdlog.h>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <numeric>
#include <set>

#include "json.hpp"
#include "paintnext/fileio.hpp"

namespace paintnext {

using nlohmann::json;

namespace {

std::uint64_t mix(std::uint64_t a, std::uint64_t b) {
  std::uint64_t z = a + 0x9e3779b97f4a7c15ULL * (b + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

json weights_json(const LossWeights& w) {
  return {{"lambda_kl", w.kl},   {"lambda_col", w.col}, {"lambda_col_reg", w.col_reg}, {"lambda_dist_reg", w.dist_reg},
          {"lambda_x", w.x},     {"lambda_rho", w.rho}, {"lambda_sigma", w.sigma},     {"lambda_omega", w.omega}};
}

LossWeights weights_from(const json& j) {
  LossWeights w;
  w.kl = j.value("lambda_kl", w.kl);
  w.col = j.value("lambda_col", w.col);
  w.col_reg = j.value("lambda_col_reg", w.col_reg);
  w.dist_reg = j.value("lambda_dist_reg", w.dist_reg);
  w.x = j.value("lambda_x", w.x);
  w.rho = j.value("lambda_rho", w.rho);
  w.sigma = j.value("lambda_sigma", w.sigma);
  w.omega = j.value("lambda_omega", w.omega);
  return w;
}

json strokes_json(const StrokeSequence& s) {
  json rows = json::array();
  for (const auto& st : s.strokes) rows.push_back(st.to_array());
  return rows;
}

}  // namespace

void TrainConfig::validate() const {
  model.validate();
  weights.validate();
  (void)features.feature_dim(2 * model.k);
  if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
  if (epochs < 1 && max_steps < 1) throw ConfigError("epochs must be >= 1");
  if (!(base_lr > 0.0)) throw ConfigError("base_lr must be positive");
  if (weight_decay < 0.0) throw ConfigError("weight_decay must be non-negative");
  if (!(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0)) throw ConfigError("betas must lie in [0, 1)");
  if (!(clip_norm > 0.0)) throw ConfigError("clip_norm must be positive");
  if (checkpoint_every < 0) throw ConfigError("checkpoint_every must be non-negative");
  if (workers < 1) throw ConfigError("workers must be >= 1");
}

std::string TrainConfig::to_json() const {
  return json{{"model", json::parse(model.to_json())},
              {"weights", weights_json(weights)},
              {"features", {{"l_max", features.l_max}, {"include_sigma_omega", features.include_sigma_omega}}},
              {"epochs", epochs},
              {"max_steps", max_steps},
              {"batch_size", batch_size},
              {"base_lr", base_lr},
              {"weight_decay", weight_decay},
              {"beta1", beta1},
              {"beta2", beta2},
              {"adam_eps", adam_eps},
              {"clip_norm", clip_norm},
              {"seed", seed},
              {"window_seed", window_seed},
              {"checkpoint_every", checkpoint_every},
              {"records", records},
              {"canvas_cache_dir", canvas_cache_dir},
              {"workers", workers}}
      .dump(2);
}

TrainConfig TrainConfig::from_json(std::string_view text) {
  const json j = json::parse(text);
  TrainConfig c;
  if (j.contains("model")) c.model = ModelConfig::from_json(j.at("model").dump());
  if (j.contains("weights")) c.weights = weights_from(j.at("weights"));
  if (j.contains("features")) {
    c.features.l_max = j.at("features").value("l_max", c.features.l_max);
    c.features.include_sigma_omega = j.at("features").value("include_sigma_omega", c.features.include_sigma_omega);
  }
  c.epochs = j.value("epochs", c.epochs);
  c.max_steps = j.value("max_steps", c.max_steps);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.base_lr = j.value("base_lr", c.base_lr);
  c.weight_decay = j.value("weight_decay", c.weight_decay);
  c.beta1 = j.value("beta1", c.beta1);
  c.beta2 = j.value("beta2", c.beta2);
  c.adam_eps = j.value("adam_eps", c.adam_eps);
  c.clip_norm = j.value("clip_norm", c.clip_norm);
  c.seed = j.value("seed", c.seed);
  c.window_seed = j.value("window_seed", c.window_seed);
  c.checkpoint_every = j.value("checkpoint_every", c.checkpoint_every);
  c.records = j.value("records", c.records);
  c.canvas_cache_dir = j.value("canvas_cache_dir", c.canvas_cache_dir);
  c.workers = j.value("workers", c.workers);
  c.validate();
  return c;
}

double cosine_lr(double base, long step, long total) {
  if (total <= 0) return base;
  const double progress = static_cast<double>(std::clamp(step, 0L, total)) / static_cast<double>(total);
  return base * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

AdamW::AdamW(nn::ParameterStore& params, double beta1, double beta2, double eps, double weight_decay)
    : params_(params), beta1_(beta1), beta2_(beta2), eps_(eps), wd_(weight_decay) {
  for (const auto& [name, t] : params_.entries()) {
    m_.emplace_back(t.numel(), 0.0);
    v_.emplace_back(t.numel(), 0.0);
  }
}

double AdamW::grad_norm() const {
  double sq = 0;
  for (const auto& [name, t] : params_.entries())
    for (double g : t.grad()) sq += g * g;
  return std::sqrt(sq);
}

void AdamW::step(double lr, double grad_scale) {
  ++t_;
  const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  const auto& entries = params_.entries();
  for (std::size_t p = 0; p < entries.size(); ++p) {
    Tensor t = entries[p].second;
    const auto grad = t.grad();
    if (grad.empty()) continue;
    auto value = t.mutable_data();
    auto& m = m_[p];
    auto& v = v_[p];
    const double decay = t.rank() >= 2 ? wd_ : 0.0;
    for (std::size_t i = 0; i < value.size(); ++i) {
      const double g = grad[i] * grad_scale;
      m[i] = beta1_ * m[i] + (1.0 - beta1_) * g;
      v[i] = beta2_ * v[i] + (1.0 - beta2_) * g * g;
      value[i] -= lr * ((m[i] / c1) / (std::sqrt(v[i] / c2) + eps_) + decay * value[i]);
    }
  }
}

void AdamW::save_state(Checkpoint& ckpt) const {
  const auto& entries = params_.entries();
  for (std::size_t p = 0; p < entries.size(); ++p) {
    ckpt.tensors["optim.m." + entries[p].first] = {entries[p].second.shape(), m_[p]};
    ckpt.tensors["optim.v." + entries[p].first] = {entries[p].second.shape(), v_[p]};
  }
  ckpt.tensors["optim.t"] = {{}, {static_cast<double>(t_)}};
}

void AdamW::load_state(const Checkpoint& ckpt) {
  const auto& entries = params_.entries();
  auto t = ckpt.tensors.find("optim.t");
  if (t == ckpt.tensors.end()) throw ConfigError("checkpoint carries no optimizer state");
  for (std::size_t p = 0; p < entries.size(); ++p) {
    auto m = ckpt.tensors.find("optim.m." + entries[p].first);
    auto v = ckpt.tensors.find("optim.v." + entries[p].first);
    if (m == ckpt.tensors.end() || v == ckpt.tensors.end() || m->second.second.size() != m_[p].size() ||
        v->second.second.size() != v_[p].size()) {
      throw ConfigError("optimizer state missing or mismatched for " + entries[p].first);
    }
  }
  for (std::size_t p = 0; p < entries.size(); ++p) {
    m_[p] = ckpt.tensors.at("optim.m." + entries[p].first).second;
    v_[p] = ckpt.tensors.at("optim.v." + entries[p].first).second;
  }
  t_ = static_cast<long>(t->second.second.at(0));
}

Trainer::Trainer(TrainConfig config, const DatasetManifest& manifest, std::filesystem::path out_dir,
                 std::filesystem::path image_root)
    : config_(std::move(config)), out_dir_(std::move(out_dir)),
      canvases_(config_.model.image_size, std::move(image_root), config_.canvas_cache_dir) {
  config_.validate();
  const std::size_t k = config_.model.k;
  const std::set<std::string> wanted(config_.records.begin(), config_.records.end());
  for (const auto& r : manifest.records) {
    const bool selected = wanted.empty() ? r.split == kTrainSplit : wanted.count(r.id) > 0;
    if (!selected) continue;
    if (r.sequence.size() < 2 * k) {
      spdlog::warn("skipping record {}: {} strokes, need at least {}", r.id, r.sequence.size(), 2 * k);
      continue;
    }
    records_.push_back(&r);
  }
  if (records_.empty()) throw std::runtime_error("no trainable records in manifest");
  const long n = static_cast<long>(records_.size());
  steps_per_epoch_ = (n + config_.batch_size - 1) / config_.batch_size;
  total_steps_ = config_.max_steps > 0 ? config_.max_steps : static_cast<long>(config_.epochs) * steps_per_epoch_;

  model_ = std::make_unique<InpModel>(config_.model, config_.seed);
  optimizer_ = std::make_unique<AdamW>(model_->parameters(), config_.beta1, config_.beta2, config_.adam_eps,
                                       config_.weight_decay);

  DatasetManifest subset;
  subset.schedule = manifest.schedule;
  subset.weights = manifest.weights;
  subset.seed = manifest.seed;
  for (const DatasetRecord* r : records_) {
    subset.records.push_back(*r);
    subset.records.back().split = std::string(kTrainSplit);
  }
  const std::filesystem::path stats_path = out_dir_ / "dataset_stats.json";
  const std::string checksum = subset.checksum();
  bool loaded = false;
  if (std::filesystem::exists(stats_path)) {
    try {
      stats_ = load_dataset_stats(stats_path);
      loaded = stats_.manifest_checksum == checksum && stats_.k == config_.model.k && stats_.features == config_.features;
    } catch (const std::exception& e) {
      spdlog::warn("ignoring unreadable dataset statistics: {}", e.what());
    }
  }
  if (!loaded) {
    stats_ = compute_dataset_stats(subset, config_.model.k, config_.features);
    save_dataset_stats(stats_path, stats_);
  }
  spdlog::info("training on {} records, {} steps ({} per epoch), {} parameters", records_.size(), total_steps_,
               steps_per_epoch_, model_->parameters().scalar_count());
}

std::vector<TrainingWindow> Trainer::windows_for_step(long step) const {
  const long epoch = step / steps_per_epoch_;
  std::vector<std::size_t> order(records_.size());
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 shuffle_rng(mix(config_.window_seed, static_cast<std::uint64_t>(epoch)));
  std::shuffle(order.begin(), order.end(), shuffle_rng);
  std::mt19937_64 rng(mix(config_.window_seed ^ 0xa5a5a5a5ULL, static_cast<std::uint64_t>(step)));
  const std::size_t first = static_cast<std::size_t>(step % steps_per_epoch_) * config_.batch_size;
  std::vector<TrainingWindow> out;
  for (int j = 0; j < config_.batch_size; ++j) {
    const DatasetRecord& r = *records_[order[(first + j) % order.size()]];
    out.push_back(*sample_window(r, config_.model.k, rng));
  }
  return out;
}

void Trainer::resume(const std::filesystem::path& checkpoint) {
  const Checkpoint ckpt = load_checkpoint(checkpoint);
  load_parameters(*model_, ckpt);
  optimizer_->load_state(ckpt);
  const json meta = json::parse(ckpt.meta);
  step_ = meta.at("step").get<long>();
  if (step_ > total_steps_) throw ConfigError("checkpoint step exceeds the configured schedule");
  // Drop metric rows that the resumed run will write again.
  const auto log_path = out_dir_ / "metrics.jsonl";
  if (std::filesystem::exists(log_path)) {
    std::ifstream in(log_path);
    std::string line, kept;
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      if (json::parse(line).at("step").get<long>() < step_) kept += line + "\n";
    }
    write_file_atomic(log_path, kept);
  }
  spdlog::info("resumed from {} at step {}", checkpoint.string(), step_);
}

void Trainer::save(const std::filesystem::path& path) const {
  Checkpoint ckpt = model_checkpoint(*model_);
  optimizer_->save_state(ckpt);
  ckpt.meta = json{{"step", step_},
                   {"total_steps", total_steps_},
                   {"train_config", json::parse(config_.to_json())},
                   {"stats_checksum", stats_.manifest_checksum}}
                  .dump();
  save_checkpoint(path, ckpt);
}

StepLog Trainer::train_step() {
  const auto windows = windows_for_step(step_);
  const int k = config_.model.k;
  std::vector<ContextBundle> bundles(windows.size());
  std::vector<StrokeSequence> targets(windows.size());
  const int n = static_cast<int>(windows.size());
#pragma omp parallel for num_threads(config_.workers) schedule(dynamic)
  for (int j = 0; j < n; ++j) {
    bundles[j] = canvases_.bundle(windows[j], k);
    targets[j] = windows[j].target;
  }
  const ModelBatch batch = make_batch(config_.model, bundles, targets);

  std::mt19937_64 noise(mix(config_.seed, static_cast<std::uint64_t>(step_)));
  std::mt19937_64 drop(mix(config_.seed ^ 0xd0d0d0d0ULL, static_cast<std::uint64_t>(step_)));
  model_->set_dropout_rng(config_.model.dropout > 0.0 ? &drop : nullptr);
  model_->parameters().zero_grad();
  const ObjectiveTerms terms = compute_objective_terms(*model_, batch, stats_, config_.weights, noise);
  auto [total, losses] = total_objective(terms, config_.weights);
  model_->set_dropout_rng(nullptr);

  StepLog log{step_, cosine_lr(config_.base_lr, step_, total_steps_), losses};
  double norm = std::numeric_limits<double>::quiet_NaN();
  if (std::isfinite(losses.total)) {
    total.backward();
    norm = optimizer_->grad_norm();
  }
  if (!std::isfinite(losses.total) || !std::isfinite(norm)) {
    json dump{{"step", step_},
              {"grad_norm", std::isfinite(norm) ? json(norm) : json("non-finite")},
              {"losses",
               {{"recon", losses.recon}, {"kl", losses.kl}, {"col", losses.col}, {"col_reg", losses.col_reg},
                {"dist_reg", losses.dist_reg}, {"total", losses.total}}},
              {"windows", json::array()}};
    for (const auto& w : windows) {
      dump["windows"].push_back({{"record", w.record->id}, {"t", w.t}, {"context", strokes_json(w.context)},
                                 {"target", strokes_json(w.target)}});
    }
    const auto path = out_dir_ / "nan_dump.json";
    write_file_atomic(path, dump.dump(2));
    throw TrainingDiverged("non-finite loss or gradient at step " + std::to_string(step_) + "; batch dumped to " +
                           path.string());
  }
  const double scale = norm > config_.clip_norm ? config_.clip_norm / norm : 1.0;
  optimizer_->step(log.lr, scale);
  ++step_;
  return log;
}

std::vector<StepLog> Trainer::run(long until, const std::function<void(const StepLog&)>& on_step) {
  const long stop = until < 0 ? total_steps_ : std::min(until, total_steps_);
  std::filesystem::create_directories(out_dir_);
  std::ofstream metrics(out_dir_ / "metrics.jsonl", std::ios::app);
  std::vector<StepLog> logs;
  while (step_ < stop) {
    const StepLog log = train_step();
    const auto& l = log.losses;
    metrics << json{{"step", log.step},   {"lr", log.lr},           {"recon", l.recon},
                    {"kl", l.kl},         {"col", l.col},           {"col_reg", l.col_reg},
                    {"dist_reg", l.dist_reg}, {"total", l.total}}
                   .dump()
            << "\n";
    metrics.flush();
    logs.push_back(log);
    if (on_step) on_step(log);
    if (config_.checkpoint_every > 0 && step_ % config_.checkpoint_every == 0 && step_ < total_steps_) {
      save(out_dir_ / ("checkpoint_" + std::to_string(step_) + ".ckpt"));
      save(out_dir_ / "last.ckpt");
    }
  }
  if (step_ == total_steps_) {
    save(out_dir_ / "final.ckpt");
    save(out_dir_ / "last.ckpt");
  }
  return logs;
}

}  // namespace paintnext
