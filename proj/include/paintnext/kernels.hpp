#pragma once

// Data-parallel inner loops. Every kernel in namespace paintnext::kernels has a
// serial twin in paintnext::kernels::reference with identical semantics; the
// tests compare the two and bench/ times them against each other.

#include <array>
#include <cmath>
#include <cstddef>

namespace paintnext::kernels {

enum class Trans { No, Yes };

/// C[M x N] = op(A) * op(B), or C += ... when accumulate. Row-major, contiguous.
/// op(A) is M x K: A is M x K when ta == No, K x M otherwise. Likewise B.
void gemm(Trans ta, Trans tb, int m, int n, int k, const double* a, const double* b, double* c,
          bool accumulate);

/// Unfold one C x H x W image into (C*ksize*ksize) x (Ho*Wo) patch columns (zero padding).
void im2col(const double* x, int channels, int height, int width, int ksize, int stride, int pad,
            double* cols);

/// Adjoint of im2col: accumulates patch columns back into dx.
void col2im(const double* cols, int channels, int height, int width, int ksize, int stride, int pad,
            double* dx);

inline int conv_out_size(int in, int ksize, int stride, int pad) {
  return (in + 2 * pad - ksize) / stride + 1;
}

/// Bilinear alpha lookup into a size x size texture whose texels tile the unit frame
/// [-0.5, 0.5]^2. Points outside the frame have alpha 0; inside, texel indices clamp.
inline double sample_alpha(const float* texture, int size, double u, double v) {
  if (!(u >= -0.5 && u <= 0.5 && v >= -0.5 && v <= 0.5)) return 0.0;
  const double max_index = size - 1;
  const double su = std::fmin(std::fmax((u + 0.5) * size - 0.5, 0.0), max_index);
  const double sv = std::fmin(std::fmax((v + 0.5) * size - 0.5, 0.0), max_index);
  const int u0 = static_cast<int>(su);
  const int v0 = static_cast<int>(sv);
  const int u1 = u0 + 1 < size ? u0 + 1 : u0;
  const int v1 = v0 + 1 < size ? v0 + 1 : v0;
  const double fu = su - u0;
  const double fv = sv - v0;
  const double t00 = texture[v0 * size + u0];
  const double t01 = texture[v0 * size + u1];
  const double t10 = texture[v1 * size + u0];
  const double t11 = texture[v1 * size + u1];
  return (1 - fv) * ((1 - fu) * t00 + fu * t01) + fv * ((1 - fu) * t10 + fu * t11);
}

/// Pixel window [row0, row1) x [col0, col1) of a stroke plus the inverse affine map
/// (pixel center -> unit frame) laid out as {a, b, tx, c, d, ty}.
struct StrokeWindow {
  int row0 = 0, row1 = 0, col0 = 0, col1 = 0;
  std::array<double, 6> inverse{};
};

/// Alpha for every pixel of the window, row-major, written to alpha.
void rasterize_alpha(const StrokeWindow& w, const float* texture, int tex_size, float* alpha);

/// out = alpha * color + (1 - alpha) * out for every window pixel of an interleaved RGB image.
void composite(const StrokeWindow& w, const float* texture, int tex_size,
               const std::array<double, 3>& color, float* rgb, int image_width);

namespace reference {

void gemm(Trans ta, Trans tb, int m, int n, int k, const double* a, const double* b, double* c,
          bool accumulate);
void im2col(const double* x, int channels, int height, int width, int ksize, int stride, int pad,
            double* cols);
void col2im(const double* cols, int channels, int height, int width, int ksize, int stride, int pad,
            double* dx);
void rasterize_alpha(const StrokeWindow& w, const float* texture, int tex_size, float* alpha);
void composite(const StrokeWindow& w, const float* texture, int tex_size,
               const std::array<double, 3>& color, float* rgb, int image_width);

}  // namespace reference

}  // namespace paintnext::kernels
