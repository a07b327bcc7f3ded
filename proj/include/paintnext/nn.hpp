#pragma once

#include <cstdint>
#include <map>
#include <random>
#include <string>
#include <vector>

#include "paintnext/tensor.hpp"

namespace paintnext::nn {

using ag::Tensor;

/// Named, ordered collection of trainable tensors.
class ParameterStore {
 public:
  Tensor add(const std::string& name, ag::Shape shape, std::vector<double> values);
  [[nodiscard]] const std::vector<std::pair<std::string, Tensor>>& entries() const { return entries_; }
  [[nodiscard]] Tensor find(const std::string& name) const;
  [[nodiscard]] std::size_t scalar_count() const;
  void zero_grad();

 private:
  std::vector<std::pair<std::string, Tensor>> entries_;
  std::map<std::string, std::size_t> index_;
};

/// Builds parameters under a dotted name prefix with deterministic initialization.
class Builder {
 public:
  Builder(ParameterStore& store, std::mt19937_64& rng, std::string prefix = "")
      : store_(store), rng_(rng), prefix_(std::move(prefix)) {}

  [[nodiscard]] Builder sub(const std::string& name) const;
  /// U(-1/sqrt(fan_in), 1/sqrt(fan_in)).
  Tensor uniform(const std::string& name, ag::Shape shape, int fan_in);
  Tensor normal(const std::string& name, ag::Shape shape, double stddev);
  Tensor constant(const std::string& name, ag::Shape shape, double value);

 private:
  ParameterStore& store_;
  std::mt19937_64& rng_;
  std::string prefix_;
};

/// Dropout settings for one forward pass; inactive unless p > 0 and an rng is given.
struct DropoutContext {
  double p = 0.0;
  std::mt19937_64* rng = nullptr;
  [[nodiscard]] Tensor apply(const Tensor& x) const;
};

struct Linear {
  Tensor w, b;
  Linear() = default;
  Linear(Builder b, int in, int out, bool bias = true);
  [[nodiscard]] Tensor operator()(const Tensor& x) const { return ag::linear(x, w, b); }
};

struct LayerNorm {
  Tensor gamma, beta;
  LayerNorm() = default;
  LayerNorm(Builder b, int dim);
  [[nodiscard]] Tensor operator()(const Tensor& x) const { return ag::layer_norm(x, gamma, beta); }
};

struct MultiHeadAttention {
  Linear q, k, v, o;
  int heads = 1;
  MultiHeadAttention() = default;
  MultiHeadAttention(Builder b, int dim, int heads);
  [[nodiscard]] Tensor operator()(const Tensor& query, const Tensor& memory) const;
};

struct FeedForward {
  Linear up, down;
  FeedForward() = default;
  FeedForward(Builder b, int dim, int hidden);
  [[nodiscard]] Tensor operator()(const Tensor& x, const DropoutContext& drop) const;
};

/// Pre-norm transformer encoder layer.
struct EncoderLayer {
  LayerNorm ln1, ln2;
  MultiHeadAttention attn;
  FeedForward ff;
  EncoderLayer(Builder b, int dim, int heads, int hidden);
  [[nodiscard]] Tensor operator()(const Tensor& x, const DropoutContext& drop) const;
};

/// Pre-norm transformer decoder layer: self-attention, cross-attention, feed-forward.
struct DecoderLayer {
  LayerNorm ln1, ln2, ln3;
  MultiHeadAttention self_attn, cross_attn;
  FeedForward ff;
  DecoderLayer(Builder b, int dim, int heads, int hidden);
  [[nodiscard]] Tensor operator()(const Tensor& x, const Tensor& memory, const DropoutContext& drop) const;
};

struct TransformerEncoder {
  std::vector<EncoderLayer> layers;
  LayerNorm final_norm;
  TransformerEncoder() = default;
  TransformerEncoder(Builder b, int n_layers, int dim, int heads, int hidden);
  [[nodiscard]] Tensor operator()(Tensor x, const DropoutContext& drop) const;
};

struct TransformerDecoder {
  std::vector<DecoderLayer> layers;
  LayerNorm final_norm;
  TransformerDecoder() = default;
  TransformerDecoder(Builder b, int n_layers, int dim, int heads, int hidden);
  [[nodiscard]] Tensor operator()(Tensor x, const Tensor& memory, const DropoutContext& drop) const;
};

/// Residual block halving resolution: gelu(conv3x3(gelu(conv3x3_s2(x))) + conv1x1_s2(x)).
struct ResidualBlock {
  Tensor w1, b1, w2, b2, ws, bs;
  ResidualBlock(Builder b, int in, int out);
  [[nodiscard]] Tensor operator()(const Tensor& x) const;
};

struct Backbone {
  std::vector<ResidualBlock> blocks;
  Backbone() = default;
  Backbone(Builder b, const std::vector<int>& channels);
  [[nodiscard]] Tensor operator()(Tensor x) const;
};

}  // namespace paintnext::nn
