#include <benchmark/benchmark.h>
#include <omp.h>

#include <random>
#include <vector>

#include "paintnext/kernels.hpp"
#include "paintnext/render.hpp"

namespace k = paintnext::kernels;

namespace {

std::vector<double> random_values(std::size_t n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  std::vector<double> v(n);
  for (auto& x : v) x = u(rng);
  return v;
}

/// A rotated stroke covering most of a 256 x 256 image.
k::StrokeWindow big_window() {
  k::StrokeWindow w;
  w.row0 = 0;
  w.row1 = 256;
  w.col0 = 0;
  w.col1 = 256;
  const double c = std::cos(0.6), s = std::sin(0.6), scale = 1.0 / 220.0;
  w.inverse = {c * scale, s * scale, -128.0 * (c + s) * scale, -s * scale, c * scale, 128.0 * (s - c) * scale};
  return w;
}

template <bool Parallel>
void BM_gemm(benchmark::State& state) {
  const int n = static_cast<int>(state.range(0));
  const auto a = random_values(static_cast<std::size_t>(n) * n, 1), b = random_values(static_cast<std::size_t>(n) * n, 2);
  std::vector<double> c(static_cast<std::size_t>(n) * n);
  for (auto _ : state) {
    if constexpr (Parallel) {
      k::gemm(k::Trans::No, k::Trans::No, n, n, n, a.data(), b.data(), c.data(), false);
    } else {
      k::reference::gemm(k::Trans::No, k::Trans::No, n, n, n, a.data(), b.data(), c.data(), false);
    }
    benchmark::DoNotOptimize(c.data());
  }
  state.SetItemsProcessed(state.iterations() * 2LL * n * n * n);
}

template <bool Parallel>
void BM_im2col(benchmark::State& state) {
  const int ch = 32, hw = static_cast<int>(state.range(0));
  const auto x = random_values(static_cast<std::size_t>(ch) * hw * hw, 3);
  std::vector<double> cols(static_cast<std::size_t>(ch) * 9 * hw * hw);
  for (auto _ : state) {
    if constexpr (Parallel) {
      k::im2col(x.data(), ch, hw, hw, 3, 1, 1, cols.data());
    } else {
      k::reference::im2col(x.data(), ch, hw, hw, 3, 1, 1, cols.data());
    }
    benchmark::DoNotOptimize(cols.data());
  }
}

template <bool Parallel>
void BM_col2im(benchmark::State& state) {
  const int ch = 32, hw = static_cast<int>(state.range(0));
  const auto cols = random_values(static_cast<std::size_t>(ch) * 9 * hw * hw, 4);
  std::vector<double> dx(static_cast<std::size_t>(ch) * hw * hw);
  for (auto _ : state) {
    std::fill(dx.begin(), dx.end(), 0.0);
    if constexpr (Parallel) {
      k::col2im(cols.data(), ch, hw, hw, 3, 1, 1, dx.data());
    } else {
      k::reference::col2im(cols.data(), ch, hw, hw, 3, 1, 1, dx.data());
    }
    benchmark::DoNotOptimize(dx.data());
  }
}

template <bool Parallel>
void BM_rasterize(benchmark::State& state) {
  const auto& brush = paintnext::BrushPrimitive::default_oval();
  const k::StrokeWindow w = big_window();
  std::vector<float> alpha(256 * 256);
  for (auto _ : state) {
    if constexpr (Parallel) {
      k::rasterize_alpha(w, brush.texture().data(), brush.size(), alpha.data());
    } else {
      k::reference::rasterize_alpha(w, brush.texture().data(), brush.size(), alpha.data());
    }
    benchmark::DoNotOptimize(alpha.data());
  }
}

template <bool Parallel>
void BM_composite(benchmark::State& state) {
  const auto& brush = paintnext::BrushPrimitive::default_oval();
  const k::StrokeWindow w = big_window();
  std::vector<float> rgb(256 * 256 * 3, 1.0f);
  for (auto _ : state) {
    if constexpr (Parallel) {
      k::composite(w, brush.texture().data(), brush.size(), {0.2, 0.4, 0.6}, rgb.data(), 256);
    } else {
      k::reference::composite(w, brush.texture().data(), brush.size(), {0.2, 0.4, 0.6}, rgb.data(), 256);
    }
    benchmark::DoNotOptimize(rgb.data());
  }
}

}  // namespace

BENCHMARK(BM_gemm<false>)->Name("gemm/reference")->Arg(128)->Arg(256);
BENCHMARK(BM_gemm<true>)->Name("gemm/parallel")->Arg(128)->Arg(256);
BENCHMARK(BM_im2col<false>)->Name("im2col/reference")->Arg(64);
BENCHMARK(BM_im2col<true>)->Name("im2col/parallel")->Arg(64);
BENCHMARK(BM_col2im<false>)->Name("col2im/reference")->Arg(64);
BENCHMARK(BM_col2im<true>)->Name("col2im/parallel")->Arg(64);
BENCHMARK(BM_rasterize<false>)->Name("rasterize_alpha/reference");
BENCHMARK(BM_rasterize<true>)->Name("rasterize_alpha/parallel");
BENCHMARK(BM_composite<false>)->Name("composite/reference");
BENCHMARK(BM_composite<true>)->Name("composite/parallel");

int main(int argc, char** argv) {
  benchmark::Initialize(&argc, argv);
  benchmark::AddCustomContext("omp_max_threads", std::to_string(omp_get_max_threads()));
  benchmark::RunSpecifiedBenchmarks();
  benchmark::Shutdown();
  return 0;
}
