#include <algorithm>
#include <cstring>
#include <vector>

#include "paintnext/kernels.hpp"

namespace paintnext::kernels {

namespace {

constexpr long kParallelFlops = 1L << 16;
constexpr int kColumnTile = 512;

// C[m x n] (+)= A[m x k] * B[k x n], all row-major and untransposed.
void gemm_nn(int m, int n, int k, const double* a, const double* b, double* c, bool accumulate) {
  if (!accumulate) std::fill(c, c + static_cast<std::size_t>(m) * n, 0.0);
  const long flops = static_cast<long>(m) * n * k;
  const int row_blocks = (m + 3) / 4;
#pragma omp parallel for schedule(static) if (flops > kParallelFlops)
  for (int blk = 0; blk < row_blocks; ++blk) {
    const int i0 = blk * 4;
    const int rows = std::min(4, m - i0);
    for (int j0 = 0; j0 < n; j0 += kColumnTile) {
      const int j1 = std::min(n, j0 + kColumnTile);
      if (rows == 4) {
        double* c0 = c + static_cast<std::size_t>(i0) * n;
        double* c1 = c0 + n;
        double* c2 = c1 + n;
        double* c3 = c2 + n;
        const double* a0 = a + static_cast<std::size_t>(i0) * k;
        const double* a1 = a0 + k;
        const double* a2 = a1 + k;
        const double* a3 = a2 + k;
        for (int p = 0; p < k; ++p) {
          const double* brow = b + static_cast<std::size_t>(p) * n;
          const double v0 = a0[p], v1 = a1[p], v2 = a2[p], v3 = a3[p];
#pragma omp simd
          for (int j = j0; j < j1; ++j) {
            const double bv = brow[j];
            c0[j] += v0 * bv;
            c1[j] += v1 * bv;
            c2[j] += v2 * bv;
            c3[j] += v3 * bv;
          }
        }
      } else {
        for (int r = 0; r < rows; ++r) {
          double* crow = c + static_cast<std::size_t>(i0 + r) * n;
          const double* arow = a + static_cast<std::size_t>(i0 + r) * k;
          for (int p = 0; p < k; ++p) {
            const double* brow = b + static_cast<std::size_t>(p) * n;
            const double v = arow[p];
#pragma omp simd
            for (int j = j0; j < j1; ++j) crow[j] += v * brow[j];
          }
        }
      }
    }
  }
}

std::vector<double> transposed(const double* src, int rows, int cols) {
  std::vector<double> out(static_cast<std::size_t>(rows) * cols);
  constexpr int tile = 32;
  for (int r0 = 0; r0 < rows; r0 += tile) {
    for (int c0 = 0; c0 < cols; c0 += tile) {
      const int r1 = std::min(rows, r0 + tile);
      const int c1 = std::min(cols, c0 + tile);
      for (int r = r0; r < r1; ++r) {
        for (int cc = c0; cc < c1; ++cc) {
          out[static_cast<std::size_t>(cc) * rows + r] = src[static_cast<std::size_t>(r) * cols + cc];
        }
      }
    }
  }
  return out;
}

double window_alpha(const StrokeWindow& w, const float* texture, int tex_size, int row, int col) {
  const double px = col + 0.5;
  const double py = row + 0.5;
  const auto& m = w.inverse;
  return sample_alpha(texture, tex_size, m[0] * px + m[1] * py + m[2], m[3] * px + m[4] * py + m[5]);
}

}  // namespace

void gemm(Trans ta, Trans tb, int m, int n, int k, const double* a, const double* b, double* c,
          bool accumulate) {
  if (m == 0 || n == 0) return;
  if (k == 0) {
    if (!accumulate) std::fill(c, c + static_cast<std::size_t>(m) * n, 0.0);
    return;
  }
  std::vector<double> a_packed;
  std::vector<double> b_packed;
  if (ta == Trans::Yes) {
    a_packed = transposed(a, k, m);
    a = a_packed.data();
  }
  if (tb == Trans::Yes) {
    b_packed = transposed(b, n, k);
    b = b_packed.data();
  }
  gemm_nn(m, n, k, a, b, c, accumulate);
}

void im2col(const double* x, int channels, int height, int width, int ksize, int stride, int pad,
            double* cols) {
  const int oh = conv_out_size(height, ksize, stride, pad);
  const int ow = conv_out_size(width, ksize, stride, pad);
  const int rows = channels * ksize * ksize;
#pragma omp parallel for schedule(static) if (static_cast<long>(rows) * oh * ow > kParallelFlops)
  for (int row = 0; row < rows; ++row) {
    const int kx = row % ksize;
    const int ky = (row / ksize) % ksize;
    const int ch = row / (ksize * ksize);
    double* out = cols + static_cast<std::size_t>(row) * oh * ow;
    const double* plane = x + static_cast<std::size_t>(ch) * height * width;
    for (int oy = 0; oy < oh; ++oy) {
      const int iy = oy * stride - pad + ky;
      double* orow = out + static_cast<std::size_t>(oy) * ow;
      if (iy < 0 || iy >= height) {
        std::fill(orow, orow + ow, 0.0);
        continue;
      }
      const double* irow = plane + static_cast<std::size_t>(iy) * width;
      for (int ox = 0; ox < ow; ++ox) {
        const int ix = ox * stride - pad + kx;
        orow[ox] = (ix >= 0 && ix < width) ? irow[ix] : 0.0;
      }
    }
  }
}

void col2im(const double* cols, int channels, int height, int width, int ksize, int stride, int pad,
            double* dx) {
  const int oh = conv_out_size(height, ksize, stride, pad);
  const int ow = conv_out_size(width, ksize, stride, pad);
  // Channels own disjoint planes of dx, so they are the race-free parallel axis.
#pragma omp parallel for schedule(static) if (static_cast<long>(channels) * ksize * ksize * oh * ow > kParallelFlops)
  for (int ch = 0; ch < channels; ++ch) {
    double* plane = dx + static_cast<std::size_t>(ch) * height * width;
    for (int ky = 0; ky < ksize; ++ky) {
      for (int kx = 0; kx < ksize; ++kx) {
        const int row = (ch * ksize + ky) * ksize + kx;
        const double* in = cols + static_cast<std::size_t>(row) * oh * ow;
        for (int oy = 0; oy < oh; ++oy) {
          const int iy = oy * stride - pad + ky;
          if (iy < 0 || iy >= height) continue;
          double* drow = plane + static_cast<std::size_t>(iy) * width;
          const double* irow = in + static_cast<std::size_t>(oy) * ow;
          for (int ox = 0; ox < ow; ++ox) {
            const int ix = ox * stride - pad + kx;
            if (ix >= 0 && ix < width) drow[ix] += irow[ox];
          }
        }
      }
    }
  }
}

void rasterize_alpha(const StrokeWindow& w, const float* texture, int tex_size, float* alpha) {
  const int cols = w.col1 - w.col0;
  const long pixels = static_cast<long>(w.row1 - w.row0) * cols;
#pragma omp parallel for schedule(static) if (pixels > 16384)
  for (int r = w.row0; r < w.row1; ++r) {
    float* out = alpha + static_cast<std::size_t>(r - w.row0) * cols;
    for (int c = w.col0; c < w.col1; ++c) {
      out[c - w.col0] = static_cast<float>(window_alpha(w, texture, tex_size, r, c));
    }
  }
}

void composite(const StrokeWindow& w, const float* texture, int tex_size,
               const std::array<double, 3>& color, float* rgb, int image_width) {
  const long pixels = static_cast<long>(w.row1 - w.row0) * (w.col1 - w.col0);
#pragma omp parallel for schedule(static) if (pixels > 16384)
  for (int r = w.row0; r < w.row1; ++r) {
    float* row = rgb + static_cast<std::size_t>(r) * image_width * 3;
    for (int c = w.col0; c < w.col1; ++c) {
      const double alpha = window_alpha(w, texture, tex_size, r, c);
      if (alpha <= 0.0) continue;
      float* px = row + static_cast<std::size_t>(c) * 3;
      for (int ch = 0; ch < 3; ++ch) {
        px[ch] = static_cast<float>(alpha * color[ch] + (1.0 - alpha) * px[ch]);
      }
    }
  }
}

}  // namespace paintnext::kernels
