#include <algorithm>
#include <cmath>
#include <numbers>

#include "paintnext/kernels.hpp"
#include "paintnext/tensor.hpp"

namespace paintnext::ag {

namespace {

using kernels::Trans;

Tensor make(Shape shape, std::vector<double> value, std::initializer_list<Tensor> inputs,
            std::function<void(Node&)> backward) {
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->value = std::move(value);
  if (grad_enabled()) {
    for (const auto& t : inputs) {
      if (t.defined() && t.requires_grad()) node->requires_grad = true;
    }
  }
  if (node->requires_grad) {
    for (const auto& t : inputs) node->parents.push_back(t.defined() ? t.shared() : nullptr);
    node->backward_fn = std::move(backward);
  }
  return Tensor(std::move(node));
}

Node& parent(Node& self, std::size_t i) { return *self.parents[i]; }
bool wants(Node& self, std::size_t i) { return self.parents[i] && self.parents[i]->requires_grad; }

void require_rank(const Tensor& t, int rank, const char* op) {
  if (t.rank() != rank) {
    throw ShapeError(std::string(op) + " expects rank " + std::to_string(rank) + ", got " + to_string(t.shape()));
  }
}

// Inner period of b when broadcast against a.
std::size_t broadcast_period(const Tensor& a, const Tensor& b, const char* op) {
  if (b.numel() == 1) return 1;
  const auto& as = a.shape();
  const auto& bs = b.shape();
  if (bs.size() <= as.size() && std::equal(bs.rbegin(), bs.rend(), as.rbegin())) return b.numel();
  throw ShapeError(std::string(op) + ": cannot broadcast " + to_string(bs) + " onto " + to_string(as));
}

enum class BinOp { Add, Sub, Mul, Div };

Tensor binary(const Tensor& a, const Tensor& b, BinOp op, const char* name) {
  const std::size_t period = broadcast_period(a, b, name);
  const std::size_t n = a.numel();
  const auto av = a.data();
  const auto bv = b.data();
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double x = av[i];
    const double y = bv[i % period];
    switch (op) {
      case BinOp::Add: out[i] = x + y; break;
      case BinOp::Sub: out[i] = x - y; break;
      case BinOp::Mul: out[i] = x * y; break;
      case BinOp::Div: out[i] = x / y; break;
    }
  }
  return make(a.shape(), std::move(out), {a, b}, [op, period](Node& self) {
    const auto& g = self.grad;
    Node& pa = parent(self, 0);
    Node& pb = parent(self, 1);
    const std::size_t n = g.size();
    if (pa.requires_grad) {
      auto& ga = pa.ensure_grad();
      for (std::size_t i = 0; i < n; ++i) {
        switch (op) {
          case BinOp::Add:
          case BinOp::Sub: ga[i] += g[i]; break;
          case BinOp::Mul: ga[i] += g[i] * pb.value[i % period]; break;
          case BinOp::Div: ga[i] += g[i] / pb.value[i % period]; break;
        }
      }
    }
    if (pb.requires_grad) {
      auto& gb = pb.ensure_grad();
      for (std::size_t i = 0; i < n; ++i) {
        const std::size_t j = i % period;
        switch (op) {
          case BinOp::Add: gb[j] += g[i]; break;
          case BinOp::Sub: gb[j] -= g[i]; break;
          case BinOp::Mul: gb[j] += g[i] * pa.value[i]; break;
          case BinOp::Div: gb[j] -= g[i] * pa.value[i] / (pb.value[j] * pb.value[j]); break;
        }
      }
    }
  });
}

// Elementwise unary op given f and f' expressed through (x, y = f(x)).
template <typename F, typename DF>
Tensor unary(const Tensor& a, F f, DF df) {
  const auto av = a.data();
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = f(av[i]);
  return make(a.shape(), std::move(out), {a}, [df](Node& self) {
    Node& p = parent(self, 0);
    auto& gp = p.ensure_grad();
    for (std::size_t i = 0; i < self.grad.size(); ++i) gp[i] += self.grad[i] * df(p.value[i], self.value[i]);
  });
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) { return binary(a, b, BinOp::Add, "add"); }
Tensor sub(const Tensor& a, const Tensor& b) { return binary(a, b, BinOp::Sub, "sub"); }
Tensor mul(const Tensor& a, const Tensor& b) { return binary(a, b, BinOp::Mul, "mul"); }
Tensor div(const Tensor& a, const Tensor& b) { return binary(a, b, BinOp::Div, "div"); }

Tensor scale(const Tensor& a, double s) {
  return unary(a, [s](double x) { return s * x; }, [s](double, double) { return s; });
}

Tensor add_scalar(const Tensor& a, double s) {
  return unary(a, [s](double x) { return x + s; }, [](double, double) { return 1.0; });
}

Tensor exp(const Tensor& a) {
  return unary(a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

Tensor log(const Tensor& a) {
  return unary(a, [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}

Tensor square(const Tensor& a) {
  return unary(a, [](double x) { return x * x; }, [](double x, double) { return 2.0 * x; });
}

Tensor sigmoid(const Tensor& a) {
  return unary(
      a,
      [](double x) { return x >= 0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x)); },
      [](double, double y) { return y * (1.0 - y); });
}

Tensor gelu(const Tensor& a) {
  constexpr double inv_sqrt2 = 0.70710678118654752440;
  const double inv_sqrt_2pi = 1.0 / std::sqrt(2.0 * std::numbers::pi);
  return unary(
      a, [](double x) { return 0.5 * x * (1.0 + std::erf(x * inv_sqrt2)); },
      [inv_sqrt_2pi](double x, double) {
        return 0.5 * (1.0 + std::erf(x * inv_sqrt2)) + x * inv_sqrt_2pi * std::exp(-0.5 * x * x);
      });
}

Tensor clamp_min(const Tensor& a, double lo) {
  return unary(a, [lo](double x) { return std::max(x, lo); }, [lo](double x, double) { return x > lo ? 1.0 : 0.0; });
}

Tensor dropout(const Tensor& a, double p, std::mt19937_64& rng) {
  if (p <= 0.0) return a;
  if (p >= 1.0) throw std::invalid_argument("dropout probability must be < 1");
  std::bernoulli_distribution keep(1.0 - p);
  std::vector<double> mask(a.numel());
  for (auto& m : mask) m = keep(rng) ? 1.0 / (1.0 - p) : 0.0;
  return mul(a, Tensor::from(a.shape(), std::move(mask)));
}

Tensor sum(const Tensor& a) {
  double s = 0.0;
  for (double v : a.data()) s += v;
  return make({}, {s}, {a}, [](Node& self) {
    auto& g = parent(self, 0).ensure_grad();
    for (auto& v : g) v += self.grad[0];
  });
}

Tensor mean(const Tensor& a) {
  if (a.numel() == 0) throw ShapeError("mean of empty tensor");
  return scale(sum(a), 1.0 / static_cast<double>(a.numel()));
}

Tensor mean_leading(const Tensor& a) {
  if (a.rank() < 1) throw ShapeError("mean_leading needs rank >= 1");
  const std::size_t d = static_cast<std::size_t>(a.dim(-1));
  const std::size_t rows = d ? a.numel() / d : 0;
  if (rows == 0) throw ShapeError("mean_leading over zero rows");
  std::vector<double> out(d, 0.0);
  const auto av = a.data();
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t j = 0; j < d; ++j) out[j] += av[r * d + j];
  for (auto& v : out) v /= static_cast<double>(rows);
  return make({static_cast<int>(d)}, std::move(out), {a}, [rows, d](Node& self) {
    auto& g = parent(self, 0).ensure_grad();
    const double inv = 1.0 / static_cast<double>(rows);
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t j = 0; j < d; ++j) g[r * d + j] += self.grad[j] * inv;
  });
}

Tensor sum_last(const Tensor& a) {
  if (a.rank() < 1) throw ShapeError("sum_last needs rank >= 1");
  const std::size_t d = static_cast<std::size_t>(a.dim(-1));
  const std::size_t rows = d ? a.numel() / d : 0;
  std::vector<double> out(rows, 0.0);
  const auto av = a.data();
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t j = 0; j < d; ++j) out[r] += av[r * d + j];
  Shape shape(a.shape().begin(), a.shape().end() - 1);
  return make(std::move(shape), std::move(out), {a}, [rows, d](Node& self) {
    auto& g = parent(self, 0).ensure_grad();
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t j = 0; j < d; ++j) g[r * d + j] += self.grad[r];
  });
}

Tensor reshape(const Tensor& a, Shape shape) {
  if (numel(shape) != a.numel()) {
    throw ShapeError("reshape " + to_string(a.shape()) + " -> " + to_string(shape));
  }
  std::vector<double> values(a.data().begin(), a.data().end());
  return make(std::move(shape), std::move(values), {a}, [](Node& self) {
    auto& g = parent(self, 0).ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
  });
}

Tensor concat(const std::vector<Tensor>& parts, int axis) {
  if (parts.empty()) throw ShapeError("concat of nothing");
  const int rank = parts[0].rank();
  if (axis < 0) axis += rank;
  if (axis < 0 || axis >= rank) throw ShapeError("concat axis out of range");
  Shape out_shape = parts[0].shape();
  out_shape[axis] = 0;
  for (const auto& p : parts) {
    if (p.rank() != rank) throw ShapeError("concat rank mismatch");
    for (int i = 0; i < rank; ++i) {
      if (i != axis && p.shape()[i] != parts[0].shape()[i]) {
        throw ShapeError("concat shape mismatch: " + to_string(p.shape()) + " vs " + to_string(parts[0].shape()));
      }
    }
    out_shape[axis] += p.shape()[axis];
  }
  std::size_t outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= out_shape[i];
  for (int i = axis + 1; i < rank; ++i) inner *= out_shape[i];
  const std::size_t out_block = static_cast<std::size_t>(out_shape[axis]) * inner;
  std::vector<double> out(numel(out_shape));
  std::vector<std::size_t> offsets;
  std::size_t off = 0;
  for (const auto& p : parts) {
    offsets.push_back(off);
    const std::size_t block = static_cast<std::size_t>(p.shape()[axis]) * inner;
    const auto pv = p.data();
    for (std::size_t o = 0; o < outer; ++o) {
      std::copy_n(pv.begin() + static_cast<std::ptrdiff_t>(o * block), block,
                  out.begin() + static_cast<std::ptrdiff_t>(o * out_block + off));
    }
    off += block;
  }
  auto node_shape = out_shape;
  auto result = std::make_shared<Node>();
  result->shape = std::move(node_shape);
  result->value = std::move(out);
  if (grad_enabled()) {
    for (const auto& p : parts) result->requires_grad = result->requires_grad || p.requires_grad();
  }
  if (result->requires_grad) {
    for (const auto& p : parts) result->parents.push_back(p.shared());
    result->backward_fn = [offsets, outer, out_block](Node& self) {
      for (std::size_t k = 0; k < self.parents.size(); ++k) {
        Node& p = *self.parents[k];
        if (!p.requires_grad) continue;
        auto& g = p.ensure_grad();
        const std::size_t block = outer ? g.size() / outer : 0;
        for (std::size_t o = 0; o < outer; ++o)
          for (std::size_t i = 0; i < block; ++i) g[o * block + i] += self.grad[o * out_block + offsets[k] + i];
      }
    };
  }
  return Tensor(std::move(result));
}

Tensor slice(const Tensor& a, int axis, int start, int length) {
  const int rank = a.rank();
  if (axis < 0) axis += rank;
  if (axis < 0 || axis >= rank) throw ShapeError("slice axis out of range");
  if (start < 0 || length < 0 || start + length > a.shape()[axis]) {
    throw ShapeError("slice [" + std::to_string(start) + ", +" + std::to_string(length) + ") out of range for " +
                     to_string(a.shape()));
  }
  std::size_t outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= a.shape()[i];
  for (int i = axis + 1; i < rank; ++i) inner *= a.shape()[i];
  const std::size_t in_block = static_cast<std::size_t>(a.shape()[axis]) * inner;
  const std::size_t out_block = static_cast<std::size_t>(length) * inner;
  const std::size_t skip = static_cast<std::size_t>(start) * inner;
  Shape shape = a.shape();
  shape[axis] = length;
  std::vector<double> out(outer * out_block);
  const auto av = a.data();
  for (std::size_t o = 0; o < outer; ++o) {
    std::copy_n(av.begin() + static_cast<std::ptrdiff_t>(o * in_block + skip), out_block,
                out.begin() + static_cast<std::ptrdiff_t>(o * out_block));
  }
  return make(std::move(shape), std::move(out), {a}, [outer, in_block, out_block, skip](Node& self) {
    auto& g = parent(self, 0).ensure_grad();
    for (std::size_t o = 0; o < outer; ++o)
      for (std::size_t i = 0; i < out_block; ++i) g[o * in_block + skip + i] += self.grad[o * out_block + i];
  });
}

Tensor transpose_last2(const Tensor& a) {
  if (a.rank() < 2) throw ShapeError("transpose_last2 needs rank >= 2");
  const std::size_t rows = static_cast<std::size_t>(a.dim(-2));
  const std::size_t cols = static_cast<std::size_t>(a.dim(-1));
  const std::size_t mats = a.numel() / std::max<std::size_t>(1, rows * cols);
  Shape shape = a.shape();
  std::swap(shape[shape.size() - 1], shape[shape.size() - 2]);
  std::vector<double> out(a.numel());
  const auto av = a.data();
  for (std::size_t m = 0; m < mats; ++m)
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t c = 0; c < cols; ++c) out[m * rows * cols + c * rows + r] = av[m * rows * cols + r * cols + c];
  return make(std::move(shape), std::move(out), {a}, [mats, rows, cols](Node& self) {
    auto& g = parent(self, 0).ensure_grad();
    for (std::size_t m = 0; m < mats; ++m)
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < cols; ++c)
          g[m * rows * cols + r * cols + c] += self.grad[m * rows * cols + c * rows + r];
  });
}

Tensor repeat_batch(const Tensor& a, int n) {
  if (a.rank() < 1 || a.dim(0) != 1) throw ShapeError("repeat_batch expects leading axis 1, got " + to_string(a.shape()));
  const std::size_t block = a.numel();
  Shape shape = a.shape();
  shape[0] = n;
  std::vector<double> out(block * static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) std::copy(a.data().begin(), a.data().end(), out.begin() + static_cast<std::ptrdiff_t>(i * block));
  return make(std::move(shape), std::move(out), {a}, [block, n](Node& self) {
    auto& g = parent(self, 0).ensure_grad();
    for (int i = 0; i < n; ++i)
      for (std::size_t j = 0; j < block; ++j) g[j] += self.grad[i * block + j];
  });
}

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
  require_rank(w, 2, "linear weight");
  const int in = w.dim(0);
  const int out = w.dim(1);
  if (x.rank() < 1 || x.dim(-1) != in) {
    throw ShapeError("linear: input " + to_string(x.shape()) + " vs weight " + to_string(w.shape()));
  }
  if (b.defined() && (b.rank() != 1 || b.dim(0) != out)) throw ShapeError("linear: bias shape");
  const int rows = static_cast<int>(x.numel() / static_cast<std::size_t>(in));
  std::vector<double> y(static_cast<std::size_t>(rows) * out);
  kernels::gemm(Trans::No, Trans::No, rows, out, in, x.data().data(), w.data().data(), y.data(), false);
  if (b.defined()) {
    const auto bv = b.data();
    for (int r = 0; r < rows; ++r)
      for (int j = 0; j < out; ++j) y[static_cast<std::size_t>(r) * out + j] += bv[j];
  }
  Shape shape = x.shape();
  shape.back() = out;
  return make(std::move(shape), std::move(y), {x, w, b}, [rows, in, out](Node& self) {
    const double* gy = self.grad.data();
    if (wants(self, 0)) {
      auto& gx = parent(self, 0).ensure_grad();
      kernels::gemm(Trans::No, Trans::Yes, rows, in, out, gy, parent(self, 1).value.data(), gx.data(), true);
    }
    if (wants(self, 1)) {
      auto& gw = parent(self, 1).ensure_grad();
      kernels::gemm(Trans::Yes, Trans::No, in, out, rows, parent(self, 0).value.data(), gy, gw.data(), true);
    }
    if (wants(self, 2)) {
      auto& gb = parent(self, 2).ensure_grad();
      for (int r = 0; r < rows; ++r)
        for (int j = 0; j < out; ++j) gb[j] += gy[static_cast<std::size_t>(r) * out + j];
    }
  });
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
  const int d = x.dim(-1);
  if (gamma.numel() != static_cast<std::size_t>(d) || beta.numel() != static_cast<std::size_t>(d)) {
    throw ShapeError("layer_norm parameter size mismatch");
  }
  const std::size_t rows = x.numel() / static_cast<std::size_t>(d);
  std::vector<double> y(x.numel());
  auto xhat = std::make_shared<std::vector<double>>(x.numel());
  auto rstd = std::make_shared<std::vector<double>>(rows);
  const auto xv = x.data();
  const auto gv = gamma.data();
  const auto bv = beta.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = xv.data() + r * d;
    double mu = 0.0;
    for (int j = 0; j < d; ++j) mu += row[j];
    mu /= d;
    double var = 0.0;
    for (int j = 0; j < d; ++j) var += (row[j] - mu) * (row[j] - mu);
    var /= d;
    const double rs = 1.0 / std::sqrt(var + eps);
    (*rstd)[r] = rs;
    for (int j = 0; j < d; ++j) {
      const double h = (row[j] - mu) * rs;
      (*xhat)[r * d + j] = h;
      y[r * d + j] = h * gv[j] + bv[j];
    }
  }
  return make(x.shape(), std::move(y), {x, gamma, beta}, [xhat, rstd, rows, d](Node& self) {
    const auto& gy = self.grad;
    const auto& g = parent(self, 1).value;
    if (wants(self, 1)) {
      auto& gg = parent(self, 1).ensure_grad();
      for (std::size_t r = 0; r < rows; ++r)
        for (int j = 0; j < d; ++j) gg[j] += gy[r * d + j] * (*xhat)[r * d + j];
    }
    if (wants(self, 2)) {
      auto& gb = parent(self, 2).ensure_grad();
      for (std::size_t r = 0; r < rows; ++r)
        for (int j = 0; j < d; ++j) gb[j] += gy[r * d + j];
    }
    if (wants(self, 0)) {
      auto& gx = parent(self, 0).ensure_grad();
      for (std::size_t r = 0; r < rows; ++r) {
        double mean_dh = 0.0, mean_dh_h = 0.0;
        for (int j = 0; j < d; ++j) {
          const double dh = gy[r * d + j] * g[j];
          mean_dh += dh;
          mean_dh_h += dh * (*xhat)[r * d + j];
        }
        mean_dh /= d;
        mean_dh_h /= d;
        for (int j = 0; j < d; ++j) {
          const double dh = gy[r * d + j] * g[j];
          gx[r * d + j] += (*rstd)[r] * (dh - mean_dh - (*xhat)[r * d + j] * mean_dh_h);
        }
      }
    }
  });
}

Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v, int heads) {
  require_rank(q, 3, "attention q");
  require_rank(k, 3, "attention k");
  require_rank(v, 3, "attention v");
  const int batch = q.dim(0), lq = q.dim(1), d = q.dim(2), lk = k.dim(1);
  if (k.dim(0) != batch || v.dim(0) != batch || k.dim(2) != d || v.dim(2) != d || v.dim(1) != lk) {
    throw ShapeError("attention shapes " + to_string(q.shape()) + " " + to_string(k.shape()) + " " + to_string(v.shape()));
  }
  if (heads <= 0 || d % heads != 0) throw ShapeError("attention: width not divisible by heads");
  const int dh = d / heads;
  const double inv_scale = 1.0 / std::sqrt(static_cast<double>(dh));

  auto probs = std::make_shared<std::vector<double>>(static_cast<std::size_t>(batch) * heads * lq * lk);
  std::vector<double> out(static_cast<std::size_t>(batch) * lq * d);
  std::vector<double> qh(static_cast<std::size_t>(lq) * dh), kh(static_cast<std::size_t>(lk) * dh),
      vh(static_cast<std::size_t>(lk) * dh), oh(static_cast<std::size_t>(lq) * dh);

  auto gather = [](const double* src, int rows, int width, int col0, int cols, double* dst) {
    for (int r = 0; r < rows; ++r) std::copy_n(src + static_cast<std::size_t>(r) * width + col0, cols, dst + static_cast<std::size_t>(r) * cols);
  };

  for (int b = 0; b < batch; ++b) {
    const double* qb = q.data().data() + static_cast<std::size_t>(b) * lq * d;
    const double* kb = k.data().data() + static_cast<std::size_t>(b) * lk * d;
    const double* vb = v.data().data() + static_cast<std::size_t>(b) * lk * d;
    for (int h = 0; h < heads; ++h) {
      gather(qb, lq, d, h * dh, dh, qh.data());
      gather(kb, lk, d, h * dh, dh, kh.data());
      gather(vb, lk, d, h * dh, dh, vh.data());
      double* p = probs->data() + (static_cast<std::size_t>(b) * heads + h) * lq * lk;
      kernels::gemm(Trans::No, Trans::Yes, lq, lk, dh, qh.data(), kh.data(), p, false);
      for (int i = 0; i < lq; ++i) {
        double* row = p + static_cast<std::size_t>(i) * lk;
        double mx = -1e300;
        for (int j = 0; j < lk; ++j) mx = std::max(mx, row[j] * inv_scale);
        double s = 0.0;
        for (int j = 0; j < lk; ++j) {
          row[j] = std::exp(row[j] * inv_scale - mx);
          s += row[j];
        }
        for (int j = 0; j < lk; ++j) row[j] /= s;
      }
      kernels::gemm(Trans::No, Trans::No, lq, dh, lk, p, vh.data(), oh.data(), false);
      double* ob = out.data() + static_cast<std::size_t>(b) * lq * d;
      for (int i = 0; i < lq; ++i) std::copy_n(oh.data() + static_cast<std::size_t>(i) * dh, dh, ob + static_cast<std::size_t>(i) * d + h * dh);
    }
  }

  return make(q.shape(), std::move(out), {q, k, v}, [=](Node& self) {
    std::vector<double> qh(static_cast<std::size_t>(lq) * dh), kh(static_cast<std::size_t>(lk) * dh),
        vh(static_cast<std::size_t>(lk) * dh), goh(static_cast<std::size_t>(lq) * dh),
        dp(static_cast<std::size_t>(lq) * lk), dq(static_cast<std::size_t>(lq) * dh),
        dk(static_cast<std::size_t>(lk) * dh), dv(static_cast<std::size_t>(lk) * dh);
    Node& pq = parent(self, 0);
    Node& pk = parent(self, 1);
    Node& pv = parent(self, 2);
    auto scatter_add = [](const double* src, int rows, int width, int col0, int cols, double* dst) {
      for (int r = 0; r < rows; ++r)
        for (int c = 0; c < cols; ++c) dst[static_cast<std::size_t>(r) * width + col0 + c] += src[static_cast<std::size_t>(r) * cols + c];
    };
    auto gather = [](const double* src, int rows, int width, int col0, int cols, double* dst) {
      for (int r = 0; r < rows; ++r) std::copy_n(src + static_cast<std::size_t>(r) * width + col0, cols, dst + static_cast<std::size_t>(r) * cols);
    };
    for (int b = 0; b < batch; ++b) {
      const std::size_t qoff = static_cast<std::size_t>(b) * lq * d;
      const std::size_t koff = static_cast<std::size_t>(b) * lk * d;
      for (int h = 0; h < heads; ++h) {
        const double* p = probs->data() + (static_cast<std::size_t>(b) * heads + h) * lq * lk;
        gather(self.grad.data() + qoff, lq, d, h * dh, dh, goh.data());
        gather(pq.value.data() + qoff, lq, d, h * dh, dh, qh.data());
        gather(pk.value.data() + koff, lk, d, h * dh, dh, kh.data());
        gather(pv.value.data() + koff, lk, d, h * dh, dh, vh.data());
        if (pv.requires_grad) {
          kernels::gemm(Trans::Yes, Trans::No, lk, dh, lq, p, goh.data(), dv.data(), false);
          scatter_add(dv.data(), lk, d, h * dh, dh, pv.ensure_grad().data() + koff);
        }
        if (!pq.requires_grad && !pk.requires_grad) continue;
        kernels::gemm(Trans::No, Trans::Yes, lq, lk, dh, goh.data(), vh.data(), dp.data(), false);
        for (int i = 0; i < lq; ++i) {
          const double* prow = p + static_cast<std::size_t>(i) * lk;
          double* drow = dp.data() + static_cast<std::size_t>(i) * lk;
          double dot = 0.0;
          for (int j = 0; j < lk; ++j) dot += drow[j] * prow[j];
          for (int j = 0; j < lk; ++j) drow[j] = prow[j] * (drow[j] - dot) * inv_scale;
        }
        if (pq.requires_grad) {
          kernels::gemm(Trans::No, Trans::No, lq, dh, lk, dp.data(), kh.data(), dq.data(), false);
          scatter_add(dq.data(), lq, d, h * dh, dh, pq.ensure_grad().data() + qoff);
        }
        if (pk.requires_grad) {
          kernels::gemm(Trans::Yes, Trans::No, lk, dh, lq, dp.data(), qh.data(), dk.data(), false);
          scatter_add(dk.data(), lk, d, h * dh, dh, pk.ensure_grad().data() + koff);
        }
      }
    }
  });
}

Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b, int ksize, int stride, int pad) {
  require_rank(x, 4, "conv2d input");
  require_rank(w, 2, "conv2d weight");
  const int batch = x.dim(0), ch = x.dim(1), h = x.dim(2), wd = x.dim(3);
  const int co = w.dim(0);
  const int patch = ch * ksize * ksize;
  if (w.dim(1) != patch) throw ShapeError("conv2d weight " + to_string(w.shape()) + " vs input " + to_string(x.shape()));
  if (b.defined() && b.numel() != static_cast<std::size_t>(co)) throw ShapeError("conv2d bias size");
  const int oh = kernels::conv_out_size(h, ksize, stride, pad);
  const int ow = kernels::conv_out_size(wd, ksize, stride, pad);
  const int npix = oh * ow;
  std::vector<double> out(static_cast<std::size_t>(batch) * co * npix);
  std::vector<double> cols(static_cast<std::size_t>(patch) * npix);
  const std::size_t in_stride = static_cast<std::size_t>(ch) * h * wd;
  for (int n = 0; n < batch; ++n) {
    kernels::im2col(x.data().data() + n * in_stride, ch, h, wd, ksize, stride, pad, cols.data());
    double* y = out.data() + static_cast<std::size_t>(n) * co * npix;
    kernels::gemm(Trans::No, Trans::No, co, npix, patch, w.data().data(), cols.data(), y, false);
    if (b.defined()) {
      for (int c = 0; c < co; ++c)
        for (int p = 0; p < npix; ++p) y[static_cast<std::size_t>(c) * npix + p] += b.data()[c];
    }
  }
  return make({batch, co, oh, ow}, std::move(out), {x, w, b}, [=](Node& self) {
    std::vector<double> cols(static_cast<std::size_t>(patch) * npix);
    Node& px = parent(self, 0);
    for (int n = 0; n < batch; ++n) {
      const double* gy = self.grad.data() + static_cast<std::size_t>(n) * co * npix;
      if (wants(self, 1)) {
        kernels::im2col(px.value.data() + n * in_stride, ch, h, wd, ksize, stride, pad, cols.data());
        kernels::gemm(Trans::No, Trans::Yes, co, patch, npix, gy, cols.data(), parent(self, 1).ensure_grad().data(), true);
      }
      if (wants(self, 2)) {
        auto& gb = parent(self, 2).ensure_grad();
        for (int c = 0; c < co; ++c)
          for (int p = 0; p < npix; ++p) gb[c] += gy[static_cast<std::size_t>(c) * npix + p];
      }
      if (px.requires_grad) {
        kernels::gemm(Trans::Yes, Trans::No, patch, npix, co, parent(self, 1).value.data(), gy, cols.data(), false);
        kernels::col2im(cols.data(), ch, h, wd, ksize, stride, pad, px.ensure_grad().data() + n * in_stride);
      }
    }
  });
}

namespace {

struct AxisSample {
  int i0, i1;
  double frac;
  double dcoord;  // d(grid position)/d(normalized coordinate); zero when clamped
};

AxisSample axis_sample(double coord, int size) {
  AxisSample s{0, 0, 0.0, 0.0};
  if (size == 1) return s;
  const double pos = coord * size - 0.5;
  const double hi = size - 1;
  double clamped = pos;
  s.dcoord = size;
  if (!(pos > 0.0)) {
    clamped = 0.0;
    s.dcoord = 0.0;
  } else if (pos >= hi) {
    clamped = hi;
    s.dcoord = 0.0;
  }
  s.i0 = std::min(static_cast<int>(clamped), size - 2);
  s.i1 = s.i0 + 1;
  s.frac = clamped - s.i0;
  return s;
}

}  // namespace

Tensor bilinear_sample(const Tensor& map, const Tensor& xy) {
  require_rank(map, 4, "bilinear_sample map");
  require_rank(xy, 3, "bilinear_sample points");
  const int batch = map.dim(0), ch = map.dim(1), h = map.dim(2), w = map.dim(3);
  const int npts = xy.dim(1);
  if (xy.dim(0) != batch || xy.dim(2) != 2) throw ShapeError("bilinear_sample points " + to_string(xy.shape()));
  const std::size_t plane = static_cast<std::size_t>(h) * w;
  std::vector<double> out(static_cast<std::size_t>(batch) * npts * ch);
  const auto mv = map.data();
  const auto pv = xy.data();
  for (int b = 0; b < batch; ++b) {
    const double* m = mv.data() + static_cast<std::size_t>(b) * ch * plane;
    for (int n = 0; n < npts; ++n) {
      const auto sx = axis_sample(pv[(static_cast<std::size_t>(b) * npts + n) * 2], w);
      const auto sy = axis_sample(pv[(static_cast<std::size_t>(b) * npts + n) * 2 + 1], h);
      double* o = out.data() + (static_cast<std::size_t>(b) * npts + n) * ch;
      for (int c = 0; c < ch; ++c) {
        const double* mc = m + c * plane;
        const double top = (1 - sx.frac) * mc[sy.i0 * w + sx.i0] + sx.frac * mc[sy.i0 * w + sx.i1];
        const double bot = (1 - sx.frac) * mc[sy.i1 * w + sx.i0] + sx.frac * mc[sy.i1 * w + sx.i1];
        o[c] = (1 - sy.frac) * top + sy.frac * bot;
      }
    }
  }
  return make({batch, npts, ch}, std::move(out), {map, xy}, [=](Node& self) {
    Node& pm = parent(self, 0);
    Node& pp = parent(self, 1);
    for (int b = 0; b < batch; ++b) {
      const std::size_t moff = static_cast<std::size_t>(b) * ch * plane;
      for (int n = 0; n < npts; ++n) {
        const std::size_t pidx = (static_cast<std::size_t>(b) * npts + n) * 2;
        const auto sx = axis_sample(pp.value[pidx], w);
        const auto sy = axis_sample(pp.value[pidx + 1], h);
        const double* g = self.grad.data() + (static_cast<std::size_t>(b) * npts + n) * ch;
        if (pm.requires_grad) {
          auto& gm = pm.ensure_grad();
          for (int c = 0; c < ch; ++c) {
            double* gc = gm.data() + moff + c * plane;
            gc[sy.i0 * w + sx.i0] += g[c] * (1 - sy.frac) * (1 - sx.frac);
            gc[sy.i0 * w + sx.i1] += g[c] * (1 - sy.frac) * sx.frac;
            gc[sy.i1 * w + sx.i0] += g[c] * sy.frac * (1 - sx.frac);
            gc[sy.i1 * w + sx.i1] += g[c] * sy.frac * sx.frac;
          }
        }
        if (pp.requires_grad) {
          auto& gp = pp.ensure_grad();
          double gx = 0.0, gyy = 0.0;
          for (int c = 0; c < ch; ++c) {
            const double* mc = pm.value.data() + moff + c * plane;
            const double t00 = mc[sy.i0 * w + sx.i0], t01 = mc[sy.i0 * w + sx.i1];
            const double t10 = mc[sy.i1 * w + sx.i0], t11 = mc[sy.i1 * w + sx.i1];
            gx += g[c] * ((1 - sy.frac) * (t01 - t00) + sy.frac * (t11 - t10));
            gyy += g[c] * ((1 - sx.frac) * (t10 - t00) + sx.frac * (t11 - t01));
          }
          gp[pidx] += gx * sx.dcoord;
          gp[pidx + 1] += gyy * sy.dcoord;
        }
      }
    }
  });
}

Tensor sinusoidal(const Tensor& coords, const std::vector<int>& widths, double wavelength) {
  const int m = coords.dim(-1);
  if (static_cast<int>(widths.size()) != m) throw ShapeError("sinusoidal: one width per coordinate required");
  int total = 0;
  for (int wd : widths) {
    if (wd <= 0 || wd % 2) throw ShapeError("sinusoidal widths must be positive and even");
    total += wd;
  }
  // freq[channel pair] and its source coordinate.
  std::vector<double> freq;
  std::vector<int> source;
  for (int j = 0; j < m; ++j) {
    for (int i = 0; i < widths[j] / 2; ++i) {
      freq.push_back(std::pow(wavelength, -2.0 * i / widths[j]));
      source.push_back(j);
    }
  }
  const std::size_t rows = coords.numel() / static_cast<std::size_t>(m);
  std::vector<double> out(rows * total);
  const auto cv = coords.data();
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t p = 0; p < freq.size(); ++p) {
      const double arg = cv[r * m + source[p]] * freq[p];
      out[r * total + 2 * p] = std::sin(arg);
      out[r * total + 2 * p + 1] = std::cos(arg);
    }
  }
  Shape shape = coords.shape();
  shape.back() = total;
  return make(std::move(shape), std::move(out), {coords}, [freq, source, rows, m, total](Node& self) {
    Node& pc = parent(self, 0);
    auto& g = pc.ensure_grad();
    for (std::size_t r = 0; r < rows; ++r) {
      for (std::size_t p = 0; p < freq.size(); ++p) {
        const double s = self.value[r * total + 2 * p];
        const double c = self.value[r * total + 2 * p + 1];
        g[r * m + source[p]] +=
            freq[p] * (self.grad[r * total + 2 * p] * c - self.grad[r * total + 2 * p + 1] * s);
      }
    }
  });
}

Tensor offset_differences(const Tensor& s, int l_max) {
  require_rank(s, 3, "offset_differences");
  const int batch = s.dim(0), len = s.dim(1), d = s.dim(2);
  if (l_max < 1 || l_max >= len) {
    throw ShapeError("offset_differences: l_max must lie in [1, L-1], got " + std::to_string(l_max));
  }
  std::vector<std::pair<int, int>> pairs;  // (later, earlier)
  for (int l = 1; l <= l_max; ++l)
    for (int i = 0; i + l < len; ++i) pairs.emplace_back(i + l, i);
  const int feat = static_cast<int>(pairs.size()) * d;
  std::vector<double> out(static_cast<std::size_t>(batch) * feat);
  const auto sv = s.data();
  for (int b = 0; b < batch; ++b) {
    const double* sb = sv.data() + static_cast<std::size_t>(b) * len * d;
    double* ob = out.data() + static_cast<std::size_t>(b) * feat;
    for (std::size_t p = 0; p < pairs.size(); ++p)
      for (int c = 0; c < d; ++c) ob[p * d + c] = sb[pairs[p].first * d + c] - sb[pairs[p].second * d + c];
  }
  return make({batch, feat}, std::move(out), {s}, [pairs, batch, len, d, feat](Node& self) {
    auto& g = parent(self, 0).ensure_grad();
    for (int b = 0; b < batch; ++b) {
      double* gb = g.data() + static_cast<std::size_t>(b) * len * d;
      const double* go = self.grad.data() + static_cast<std::size_t>(b) * feat;
      for (std::size_t p = 0; p < pairs.size(); ++p) {
        for (int c = 0; c < d; ++c) {
          gb[pairs[p].first * d + c] += go[p * d + c];
          gb[pairs[p].second * d + c] -= go[p * d + c];
        }
      }
    }
  });
}

}  // namespace paintnext::ag
