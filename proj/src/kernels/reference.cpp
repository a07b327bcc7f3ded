#include "paintnext/kernels.hpp"

#include <algorithm>
#include <cstring>

namespace paintnext::kernels::reference {

void gemm(Trans ta, Trans tb, int m, int n, int k, const double* a, const double* b, double* c,
          bool accumulate) {
  for (int i = 0; i < m; ++i) {
    for (int j = 0; j < n; ++j) {
      double sum = 0.0;
      for (int p = 0; p < k; ++p) {
        const double av = ta == Trans::No ? a[i * k + p] : a[p * m + i];
        const double bv = tb == Trans::No ? b[p * n + j] : b[j * k + p];
        sum += av * bv;
      }
      c[i * n + j] = accumulate ? c[i * n + j] + sum : sum;
    }
  }
}

void im2col(const double* x, int channels, int height, int width, int ksize, int stride, int pad,
            double* cols) {
  const int oh = conv_out_size(height, ksize, stride, pad);
  const int ow = conv_out_size(width, ksize, stride, pad);
  for (int ch = 0; ch < channels; ++ch) {
    for (int ky = 0; ky < ksize; ++ky) {
      for (int kx = 0; kx < ksize; ++kx) {
        const int row = (ch * ksize + ky) * ksize + kx;
        for (int oy = 0; oy < oh; ++oy) {
          for (int ox = 0; ox < ow; ++ox) {
            const int iy = oy * stride - pad + ky;
            const int ix = ox * stride - pad + kx;
            const bool inside = iy >= 0 && iy < height && ix >= 0 && ix < width;
            cols[(static_cast<std::size_t>(row) * oh + oy) * ow + ox] =
                inside ? x[(static_cast<std::size_t>(ch) * height + iy) * width + ix] : 0.0;
          }
        }
      }
    }
  }
}

void col2im(const double* cols, int channels, int height, int width, int ksize, int stride, int pad,
            double* dx) {
  const int oh = conv_out_size(height, ksize, stride, pad);
  const int ow = conv_out_size(width, ksize, stride, pad);
  for (int ch = 0; ch < channels; ++ch) {
    for (int ky = 0; ky < ksize; ++ky) {
      for (int kx = 0; kx < ksize; ++kx) {
        const int row = (ch * ksize + ky) * ksize + kx;
        for (int oy = 0; oy < oh; ++oy) {
          for (int ox = 0; ox < ow; ++ox) {
            const int iy = oy * stride - pad + ky;
            const int ix = ox * stride - pad + kx;
            if (iy >= 0 && iy < height && ix >= 0 && ix < width) {
              dx[(static_cast<std::size_t>(ch) * height + iy) * width + ix] +=
                  cols[(static_cast<std::size_t>(row) * oh + oy) * ow + ox];
            }
          }
        }
      }
    }
  }
}

namespace {

double window_alpha(const StrokeWindow& w, const float* texture, int tex_size, int row, int col) {
  const double px = col + 0.5;
  const double py = row + 0.5;
  const auto& m = w.inverse;
  return sample_alpha(texture, tex_size, m[0] * px + m[1] * py + m[2], m[3] * px + m[4] * py + m[5]);
}

}  // namespace

void rasterize_alpha(const StrokeWindow& w, const float* texture, int tex_size, float* alpha) {
  const int cols = w.col1 - w.col0;
  for (int r = w.row0; r < w.row1; ++r) {
    for (int c = w.col0; c < w.col1; ++c) {
      alpha[static_cast<std::size_t>(r - w.row0) * cols + (c - w.col0)] =
          static_cast<float>(window_alpha(w, texture, tex_size, r, c));
    }
  }
}

void composite(const StrokeWindow& w, const float* texture, int tex_size,
               const std::array<double, 3>& color, float* rgb, int image_width) {
  for (int r = w.row0; r < w.row1; ++r) {
    for (int c = w.col0; c < w.col1; ++c) {
      const double alpha = window_alpha(w, texture, tex_size, r, c);
      if (alpha <= 0.0) continue;
      float* px = rgb + (static_cast<std::size_t>(r) * image_width + c) * 3;
      for (int ch = 0; ch < 3; ++ch) {
        px[ch] = static_cast<float>(alpha * color[ch] + (1.0 - alpha) * px[ch]);
      }
    }
  }
}

}  // namespace paintnext::kernels::reference
