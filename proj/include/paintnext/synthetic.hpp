#pragma once

#include <cstdint>
#include <filesystem>

#include "paintnext/canvas.hpp"
#include "paintnext/image_io.hpp"

namespace paintnext {

/// Procedural image with a matching subject mask: a two-color gradient background
/// (label 0) with one to three filled ellipses or rectangles (labels 1..3).
struct SyntheticScene {
  Canvas image;
  LabelMap mask;
};

SyntheticScene make_scene(std::uint64_t seed, int size);

/// Writes scene_XXXX.png pairs into image_dir and mask_dir.
void write_synthetic_corpus(const std::filesystem::path& image_dir, const std::filesystem::path& mask_dir, int count,
                            std::uint64_t seed, int size);

}  // namespace paintnext
