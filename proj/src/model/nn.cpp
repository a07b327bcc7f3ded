#include "paintnext/nn.hpp"

#include <cmath>
#include <stdexcept>

namespace paintnext::nn {

Tensor ParameterStore::add(const std::string& name, ag::Shape shape, std::vector<double> values) {
  if (index_.count(name)) throw std::invalid_argument("duplicate parameter " + name);
  Tensor t = Tensor::from(std::move(shape), std::move(values), true);
  index_[name] = entries_.size();
  entries_.emplace_back(name, t);
  return t;
}

Tensor ParameterStore::find(const std::string& name) const {
  auto it = index_.find(name);
  return it == index_.end() ? Tensor() : entries_[it->second].second;
}

std::size_t ParameterStore::scalar_count() const {
  std::size_t n = 0;
  for (const auto& [name, t] : entries_) n += t.numel();
  return n;
}

void ParameterStore::zero_grad() {
  for (auto& [name, t] : entries_) t.zero_grad();
}

Builder Builder::sub(const std::string& name) const {
  return Builder(store_, rng_, prefix_.empty() ? name : prefix_ + "." + name);
}

Tensor Builder::uniform(const std::string& name, ag::Shape shape, int fan_in) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  std::uniform_real_distribution<double> d(-bound, bound);
  std::vector<double> v(ag::numel(shape));
  for (auto& x : v) x = d(rng_);
  return store_.add(sub(name).prefix_, std::move(shape), std::move(v));
}

Tensor Builder::normal(const std::string& name, ag::Shape shape, double stddev) {
  std::normal_distribution<double> d(0.0, stddev);
  std::vector<double> v(ag::numel(shape));
  for (auto& x : v) x = d(rng_);
  return store_.add(sub(name).prefix_, std::move(shape), std::move(v));
}

Tensor Builder::constant(const std::string& name, ag::Shape shape, double value) {
  std::vector<double> v(ag::numel(shape), value);
  return store_.add(sub(name).prefix_, std::move(shape), std::move(v));
}

Tensor DropoutContext::apply(const Tensor& x) const {
  if (p <= 0.0 || rng == nullptr) return x;
  return ag::dropout(x, p, *rng);
}

Linear::Linear(Builder b, int in, int out, bool bias) {
  w = b.uniform("weight", {in, out}, in);
  if (bias) this->b = b.uniform("bias", {out}, in);
}

LayerNorm::LayerNorm(Builder b, int dim) {
  gamma = b.constant("gamma", {dim}, 1.0);
  beta = b.constant("beta", {dim}, 0.0);
}

MultiHeadAttention::MultiHeadAttention(Builder b, int dim, int heads)
    : q(b.sub("q"), dim, dim), k(b.sub("k"), dim, dim), v(b.sub("v"), dim, dim), o(b.sub("o"), dim, dim),
      heads(heads) {
  if (dim % heads != 0) throw std::invalid_argument("embedding width must be divisible by the head count");
}

Tensor MultiHeadAttention::operator()(const Tensor& query, const Tensor& memory) const {
  return o(ag::attention(q(query), k(memory), v(memory), heads));
}

FeedForward::FeedForward(Builder b, int dim, int hidden) : up(b.sub("up"), dim, hidden), down(b.sub("down"), hidden, dim) {}

Tensor FeedForward::operator()(const Tensor& x, const DropoutContext& drop) const {
  return down(drop.apply(ag::gelu(up(x))));
}

EncoderLayer::EncoderLayer(Builder b, int dim, int heads, int hidden)
    : ln1(b.sub("ln1"), dim), ln2(b.sub("ln2"), dim), attn(b.sub("attn"), dim, heads), ff(b.sub("ff"), dim, hidden) {}

Tensor EncoderLayer::operator()(const Tensor& x, const DropoutContext& drop) const {
  const Tensor h = ln1(x);
  Tensor y = x + drop.apply(attn(h, h));
  return y + drop.apply(ff(ln2(y), drop));
}

DecoderLayer::DecoderLayer(Builder b, int dim, int heads, int hidden)
    : ln1(b.sub("ln1"), dim), ln2(b.sub("ln2"), dim), ln3(b.sub("ln3"), dim), self_attn(b.sub("self_attn"), dim, heads),
      cross_attn(b.sub("cross_attn"), dim, heads), ff(b.sub("ff"), dim, hidden) {}

Tensor DecoderLayer::operator()(const Tensor& x, const Tensor& memory, const DropoutContext& drop) const {
  const Tensor h = ln1(x);
  Tensor y = x + drop.apply(self_attn(h, h));
  y = y + drop.apply(cross_attn(ln2(y), memory));
  return y + drop.apply(ff(ln3(y), drop));
}

TransformerEncoder::TransformerEncoder(Builder b, int n_layers, int dim, int heads, int hidden)
    : final_norm(b.sub("norm"), dim) {
  for (int i = 0; i < n_layers; ++i) layers.emplace_back(b.sub("layer" + std::to_string(i)), dim, heads, hidden);
}

Tensor TransformerEncoder::operator()(Tensor x, const DropoutContext& drop) const {
  for (const auto& layer : layers) x = layer(x, drop);
  return final_norm(x);
}

TransformerDecoder::TransformerDecoder(Builder b, int n_layers, int dim, int heads, int hidden)
    : final_norm(b.sub("norm"), dim) {
  for (int i = 0; i < n_layers; ++i) layers.emplace_back(b.sub("layer" + std::to_string(i)), dim, heads, hidden);
}

Tensor TransformerDecoder::operator()(Tensor x, const Tensor& memory, const DropoutContext& drop) const {
  for (const auto& layer : layers) x = layer(x, memory, drop);
  return final_norm(x);
}

ResidualBlock::ResidualBlock(Builder b, int in, int out) {
  w1 = b.uniform("conv1.weight", {out, in * 9}, in * 9);
  b1 = b.uniform("conv1.bias", {out}, in * 9);
  w2 = b.uniform("conv2.weight", {out, out * 9}, out * 9);
  b2 = b.uniform("conv2.bias", {out}, out * 9);
  ws = b.uniform("skip.weight", {out, in}, in);
  bs = b.uniform("skip.bias", {out}, in);
}

Tensor ResidualBlock::operator()(const Tensor& x) const {
  const Tensor h = ag::gelu(ag::conv2d(x, w1, b1, 3, 2, 1));
  const Tensor main = ag::conv2d(h, w2, b2, 3, 1, 1);
  const Tensor skip = ag::conv2d(x, ws, bs, 1, 2, 0);
  return ag::gelu(main + skip);
}

Backbone::Backbone(Builder b, const std::vector<int>& channels) {
  int in = 3;
  for (std::size_t i = 0; i < channels.size(); ++i) {
    blocks.emplace_back(b.sub("block" + std::to_string(i)), in, channels[i]);
    in = channels[i];
  }
}

Tensor Backbone::operator()(Tensor x) const {
  for (const auto& block : blocks) x = block(x);
  return x;
}

}  // namespace paintnext::nn
