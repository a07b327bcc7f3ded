#pragma once

// Minimal reverse-mode automatic differentiation over dense row-major double tensors.
//
// A Tensor is a handle to a graph node. Ops record their parents and a backward
// closure only when gradient recording is enabled and some input requires grad,
// so inference under NoGradGuard allocates no graph.

#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace paintnext::ag {

using Shape = std::vector<int>;

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

std::string to_string(const Shape& s);
std::size_t numel(const Shape& s);

struct Node {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;  // empty until something flows in
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward_fn;

  std::vector<double>& ensure_grad() {
    if (grad.empty()) grad.assign(value.size(), 0.0);
    return grad;
  }
};

class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::shared_ptr<Node> node) : node_(std::move(node)) {}

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value);
  static Tensor from(Shape shape, std::vector<double> values, bool requires_grad = false);
  static Tensor scalar(double value) { return from({}, {value}); }
  static Tensor randn(Shape shape, std::mt19937_64& rng, double stddev = 1.0);

  [[nodiscard]] bool defined() const { return node_ != nullptr; }
  [[nodiscard]] const Shape& shape() const { return node_->shape; }
  [[nodiscard]] int rank() const { return static_cast<int>(node_->shape.size()); }
  /// Size of axis i; negative indices count from the end.
  [[nodiscard]] int dim(int i) const;
  [[nodiscard]] std::size_t numel() const { return node_->value.size(); }

  [[nodiscard]] std::span<const double> data() const { return node_->value; }
  /// Direct write access, for initialization and optimizer updates only.
  [[nodiscard]] std::span<double> mutable_data() { return node_->value; }
  [[nodiscard]] std::span<const double> grad() const { return node_->grad; }
  [[nodiscard]] std::span<double> mutable_grad() { return node_->ensure_grad(); }
  [[nodiscard]] bool requires_grad() const { return node_->requires_grad; }
  [[nodiscard]] double item() const;
  [[nodiscard]] double at(std::size_t flat) const { return node_->value.at(flat); }

  /// Backpropagate from a scalar. Intermediate graph state is released afterwards.
  void backward();
  void zero_grad() { node_->grad.clear(); }
  /// Same values, no history.
  [[nodiscard]] Tensor detach() const;

  [[nodiscard]] Node* node() const { return node_.get(); }
  [[nodiscard]] const std::shared_ptr<Node>& shared() const { return node_; }

 private:
  std::shared_ptr<Node> node_;
};

bool grad_enabled();

class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

// --- elementwise -----------------------------------------------------------
// Binary ops accept b with the same shape as a, a shape equal to a trailing
// suffix of a's shape (broadcast over leading axes), or a single element.

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double s);
Tensor add_scalar(const Tensor& a, double s);

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator/(const Tensor& a, const Tensor& b) { return div(a, b); }
inline Tensor operator*(const Tensor& a, double s) { return scale(a, s); }
inline Tensor operator*(double s, const Tensor& a) { return scale(a, s); }

Tensor exp(const Tensor& a);
Tensor log(const Tensor& a);
Tensor square(const Tensor& a);
Tensor sigmoid(const Tensor& a);
Tensor gelu(const Tensor& a);
Tensor clamp_min(const Tensor& a, double lo);
/// Inverted dropout; identity when p == 0.
Tensor dropout(const Tensor& a, double p, std::mt19937_64& rng);

// --- reductions ------------------------------------------------------------

Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);
/// [..., D] -> [D], averaging over every leading axis.
Tensor mean_leading(const Tensor& a);
/// [..., D] -> [...], summing the last axis.
Tensor sum_last(const Tensor& a);

// --- shape -----------------------------------------------------------------

Tensor reshape(const Tensor& a, Shape shape);
Tensor concat(const std::vector<Tensor>& parts, int axis);
Tensor slice(const Tensor& a, int axis, int start, int length);
/// Swaps the last two axes.
Tensor transpose_last2(const Tensor& a);
/// [1, ...] -> [n, ...] by repetition along axis 0.
Tensor repeat_batch(const Tensor& a, int n);

// --- layers ----------------------------------------------------------------

/// x[..., in] * w[in, out] + b[out]; b may be undefined.
Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b);
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps = 1e-5);
/// Scaled dot-product attention over already-projected q[B,Lq,D], k[B,Lk,D], v[B,Lk,D].
Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v, int heads);
/// x[B,C,H,W], w[Co, C*ks*ks], b[Co] -> [B,Co,Ho,Wo], zero padding.
Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b, int ksize, int stride, int pad);

/// Bilinear lookup of map[B,C,H,W] at normalized points xy[B,N,2] (x = column axis),
/// pixel-center convention: x = (j + 0.5) / W hits column j exactly. Coordinates are
/// clamped to the centers' hull. Differentiable in both arguments. Returns [B,N,C].
Tensor bilinear_sample(const Tensor& map, const Tensor& xy);

/// Sinusoidal features of coords[..., M]: coordinate j contributes widths[j] channels
/// (sin/cos pairs at geometric frequencies 1 / wavelength^(2i / widths[j])).
Tensor sinusoidal(const Tensor& coords, const std::vector<int>& widths, double wavelength = 10000.0);

/// Pairwise offset differences of sequences s[B,L,D]: for l = 1..l_max, i = 0..L-l-1,
/// the D-vector s[i+l] - s[i], concatenated in that order. Returns [B, D * sum_l (L-l)].
Tensor offset_differences(const Tensor& s, int l_max);

}  // namespace paintnext::ag
