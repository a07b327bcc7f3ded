#pragma once

#include <filesystem>
#include <functional>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "paintnext/dataset.hpp"
#include "paintnext/model.hpp"
#include "paintnext/objectives.hpp"
#include "paintnext/windows.hpp"

namespace paintnext {

struct TrainConfig {
  ModelConfig model;
  LossWeights weights;
  FeatureConfig features;
  int epochs = 10;
  /// Overrides epochs when positive.
  int max_steps = 0;
  int batch_size = 32;
  double base_lr = 1e-4;
  double weight_decay = 1e-2;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  double clip_norm = 1.0;
  std::uint64_t seed = 0;
  std::uint64_t window_seed = 1;
  /// Steps between checkpoints; 0 writes only the final one.
  int checkpoint_every = 0;
  /// Restrict training to these record ids when non-empty.
  std::vector<std::string> records;
  /// Optional on-disk prefix-render cache.
  std::string canvas_cache_dir;
  int workers = 1;

  void validate() const;
  [[nodiscard]] std::string to_json() const;
  static TrainConfig from_json(std::string_view text);
};

/// Cosine decay from base to 0 over total steps, evaluated at `step`.
double cosine_lr(double base, long step, long total);

class TrainingDiverged : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Decoupled-weight-decay Adam over a parameter store. Decay skips rank-1 tensors.
class AdamW {
 public:
  AdamW(nn::ParameterStore& params, double beta1, double beta2, double eps, double weight_decay);
  /// Global L2 norm of all gradients.
  [[nodiscard]] double grad_norm() const;
  void step(double lr, double grad_scale = 1.0);
  [[nodiscard]] long steps() const { return t_; }

  void save_state(Checkpoint& ckpt) const;
  void load_state(const Checkpoint& ckpt);

 private:
  nn::ParameterStore& params_;
  double beta1_, beta2_, eps_, wd_;
  long t_ = 0;
  std::vector<std::vector<double>> m_, v_;
};

struct StepLog {
  long step = 0;
  double lr = 0;
  LossBreakdown losses;
};

class Trainer {
 public:
  /// Loads or recomputes the dataset statistics under out_dir.
  Trainer(TrainConfig config, const DatasetManifest& manifest, std::filesystem::path out_dir,
          std::filesystem::path image_root = {});

  [[nodiscard]] InpModel& model() { return *model_; }
  [[nodiscard]] const DatasetStats& stats() const { return stats_; }
  [[nodiscard]] long total_steps() const { return total_steps_; }
  [[nodiscard]] long step() const { return step_; }
  [[nodiscard]] CanvasSource& canvases() { return canvases_; }

  /// Restores parameters, optimizer state and step; the run continues bit-identically.
  void resume(const std::filesystem::path& checkpoint);
  /// Trains up to `until` steps (default: all). Appends metric rows and writes checkpoints.
  std::vector<StepLog> run(long until = -1, const std::function<void(const StepLog&)>& on_step = {});
  /// Windows and batch used at a given step; exposed for diagnostics and tests.
  [[nodiscard]] std::vector<TrainingWindow> windows_for_step(long step) const;
  void save(const std::filesystem::path& path) const;

 private:
  StepLog train_step();

  TrainConfig config_;
  std::vector<const DatasetRecord*> records_;
  std::filesystem::path out_dir_;
  std::unique_ptr<InpModel> model_;
  std::unique_ptr<AdamW> optimizer_;
  DatasetStats stats_;
  CanvasSource canvases_;
  long total_steps_ = 0;
  long steps_per_epoch_ = 0;
  long step_ = 0;
};

}  // namespace paintnext
