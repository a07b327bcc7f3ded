#include "paintnext/synthetic.hpp"

#include <array>
#include <cstdio>
#include <random>
#include <stdexcept>

namespace paintnext {

SyntheticScene make_scene(std::uint64_t seed, int size) {
  if (size < 8) throw std::invalid_argument("scene size too small");
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  auto color = [&] { return std::array<double, 3>{u(rng), u(rng), u(rng)}; };

  SyntheticScene scene{Canvas(size, size), LabelMap{size, size, std::vector<int>(static_cast<std::size_t>(size) * size, 0)}};
  const auto top = color();
  const auto bottom = color();
  for (int r = 0; r < size; ++r) {
    const double t = (r + 0.5) / size;
    for (int c = 0; c < size; ++c)
      for (int k = 0; k < 3; ++k) scene.image.at(r, c, k) = static_cast<float>((1 - t) * top[k] + t * bottom[k]);
  }

  const int shapes = 1 + static_cast<int>(u(rng) * 3) % 3;
  for (int s = 1; s <= shapes; ++s) {
    const bool ellipse = u(rng) < 0.5;
    const double cx = 0.2 + 0.6 * u(rng);
    const double cy = 0.2 + 0.6 * u(rng);
    const double rx = 0.08 + 0.2 * u(rng);
    const double ry = 0.08 + 0.2 * u(rng);
    const auto fill = color();
    for (int r = 0; r < size; ++r) {
      const double dy = ((r + 0.5) / size - cy) / ry;
      for (int c = 0; c < size; ++c) {
        const double dx = ((c + 0.5) / size - cx) / rx;
        const bool inside = ellipse ? dx * dx + dy * dy <= 1.0 : (dx >= -1 && dx <= 1 && dy >= -1 && dy <= 1);
        if (!inside) continue;
        for (int k = 0; k < 3; ++k) scene.image.at(r, c, k) = static_cast<float>(fill[k]);
        scene.mask.labels[static_cast<std::size_t>(r) * size + c] = s;
      }
    }
  }
  return scene;
}

void write_synthetic_corpus(const std::filesystem::path& image_dir, const std::filesystem::path& mask_dir, int count,
                            std::uint64_t seed, int size) {
  std::filesystem::create_directories(image_dir);
  std::filesystem::create_directories(mask_dir);
  for (int i = 0; i < count; ++i) {
    const auto scene = make_scene(seed * 1000003ULL + static_cast<std::uint64_t>(i), size);
    std::array<char, 32> name{};
    std::snprintf(name.data(), name.size(), "scene_%04d.png", i);
    write_png(image_dir / name.data(), scene.image);
    write_label_png(mask_dir / name.data(), scene.mask);
  }
}

}  // namespace paintnext
