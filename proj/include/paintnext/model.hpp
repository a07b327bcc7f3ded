#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "paintnext/canvas.hpp"
#include "paintnext/nn.hpp"
#include "paintnext/stroke.hpp"
#include "paintnext/tensor.hpp"

namespace paintnext {

using ag::Tensor;

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct ModelConfig {
  int d_emb = 256;
  int n_heads = 4;
  int ff_dim = 1024;
  double dropout = 0.0;
  int context_layers = 8;
  int posterior_layers = 6;
  int position_layers = 6;
  int attribute_layers = 6;
  int k = 8;
  int image_size = 256;
  /// One residual block per entry, each halving resolution.
  std::vector<int> backbone_channels{32, 64, 128, 256};
  int d_z = 256;
  /// Base wavelength of every sinusoidal encoding.
  double pe_wavelength = 10000.0;

  [[nodiscard]] int feature_size() const;
  /// Visual tokens plus context stroke tokens.
  [[nodiscard]] int token_count() const { return feature_size() * feature_size() + k; }
  /// Widths of the (x, y, t) parts of the 3D encoding.
  [[nodiscard]] std::vector<int> pe_widths() const;
  void validate() const;

  [[nodiscard]] std::string to_json() const;
  static ModelConfig from_json(std::string_view text);
  bool operator==(const ModelConfig&) const = default;
};

/// Width of the per-token context stroke input: 8 parameters plus a validity flag.
inline constexpr int kContextTokenWidth = 9;

/// Model-ready context: the last k strokes, front-padded with zero strokes marked invalid.
struct ContextBundle {
  Canvas reference;
  Canvas canvas;
  std::vector<Stroke> strokes;
  std::vector<bool> valid;

  /// Uses the last `k` strokes of `history` (fewer are padded).
  static ContextBundle from_history(Canvas reference, Canvas canvas, std::span<const Stroke> history, int k);
};

/// Batched tensors for one forward pass.
struct ModelBatch {
  Tensor reference;  // [B,3,H,W]
  Tensor canvas;     // [B,3,H,W]
  Tensor context;    // [B,k,9]
  Tensor targets;    // [B,k,8], undefined when unknown
  [[nodiscard]] int size() const { return reference.dim(0); }
};

/// Throws ConfigError on resolution or length mismatch. `targets` may be empty.
ModelBatch make_batch(const ModelConfig& cfg, std::span<const ContextBundle> bundles,
                      std::span<const StrokeSequence> targets = {});

struct ContextEncoding {
  Tensor c;         // [B,L,d]
  Tensor features;  // [B,d,H',W']
};

struct Posterior {
  Tensor mu;       // [B,d_z]
  Tensor log_var;  // [B,d_z]
};

enum class LatentMode { Train, Inference, Mean };

struct ForwardResult {
  Tensor strokes;  // [B,k,8]
  Tensor z;        // [B,d_z]
  std::optional<Posterior> posterior;
};

class InpModel {
 public:
  explicit InpModel(ModelConfig config, std::uint64_t seed = 0);
  InpModel(const InpModel&) = delete;
  InpModel& operator=(const InpModel&) = delete;

  [[nodiscard]] const ModelConfig& config() const { return config_; }
  [[nodiscard]] nn::ParameterStore& parameters() { return store_; }
  [[nodiscard]] const nn::ParameterStore& parameters() const { return store_; }

  /// [B,3,H,W] x2 -> [B,d,H',W'].
  [[nodiscard]] Tensor extract_visual_features(const Tensor& reference, const Tensor& canvas) const;
  [[nodiscard]] ContextEncoding encode_context(const ModelBatch& batch) const;
  [[nodiscard]] Posterior encode_posterior(const Tensor& targets, const ContextEncoding& ctx) const;
  /// Train: mu + exp(log_var / 2) * eps; Inference: eps; Mean: mu. `posterior` is
  /// required except in Inference mode, where `batch` sets the row count.
  [[nodiscard]] Tensor sample_latent(const Posterior* posterior, LatentMode mode, std::mt19937_64& rng,
                                     int batch = 1) const;
  /// [B,k,2] in [0,1].
  [[nodiscard]] Tensor decode_positions(const Tensor& z, const ContextEncoding& ctx) const;
  /// [B,k,6] = (rho, sigma, omega) in [0,1].
  [[nodiscard]] Tensor decode_attributes(const Tensor& z, const ContextEncoding& ctx, const Tensor& positions) const;
  /// [B,k,8].
  [[nodiscard]] Tensor decode(const Tensor& z, const ContextEncoding& ctx) const;

  /// Train mode needs batch.targets. Mean mode without targets falls back to z = 0.
  [[nodiscard]] ForwardResult forward(const ModelBatch& batch, LatentMode mode, std::mt19937_64& rng) const;

  /// Enables dropout draws during training; pass nullptr for deterministic passes.
  void set_dropout_rng(std::mt19937_64* rng) { dropout_.rng = rng; }

  /// SHA-256 over parameter names, shapes and values.
  [[nodiscard]] std::string checksum() const;

 private:
  [[nodiscard]] Tensor encode_3d(const Tensor& xy, int t0) const;
  [[nodiscard]] Tensor memory_with_latent(const Tensor& z, const ContextEncoding& ctx) const;

  ModelConfig config_;
  nn::ParameterStore store_;
  nn::DropoutContext dropout_;

  nn::Backbone ref_backbone_, canvas_backbone_;
  nn::Linear visual_proj_, context_proj_, target_proj_, latent_proj_;
  nn::TransformerEncoder context_encoder_;
  nn::TransformerDecoder posterior_decoder_, position_decoder_, attribute_decoder_;
  Tensor mu_token_, log_var_token_;
  nn::Linear mu_head_, log_var_head_, position_head_, attribute_head_;
  Tensor visual_pe_;    // [H'W', d]
  Tensor position_queries_;  // [k, d]
};

/// Named arrays with a JSON header; the container for model and optimizer state.
struct Checkpoint {
  static constexpr int kVersion = 1;
  ModelConfig config;
  std::string meta = "{}";  // free-form JSON object
  std::map<std::string, std::pair<ag::Shape, std::vector<double>>> tensors;
};

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& path);

/// Model parameters under their own names.
Checkpoint model_checkpoint(const InpModel& model);
/// Copies parameters into `model`; throws ConfigError when configs or tensors disagree.
void load_parameters(InpModel& model, const Checkpoint& ckpt);

}  // namespace paintnext
