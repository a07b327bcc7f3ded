#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "paintnext/decompose.hpp"
#include "paintnext/reorder.hpp"
#include "paintnext/stroke.hpp"

namespace paintnext {

inline constexpr std::string_view kTrainSplit = "train";
inline constexpr std::string_view kEvalSplit = "eval";

struct DatasetRecord {
  std::string id;
  std::string image_path;
  StrokeSequence sequence;  // painting order, subject ids attached
  /// Canvas checksum of the sequence rendered on white at the manifest's render size.
  std::string render_checksum;
  std::string split{kTrainSplit};
};

struct DatasetManifest {
  static constexpr int kVersion = 1;

  DecompositionSchedule schedule;
  ReorderWeights weights;
  std::uint64_t seed = 0;
  double split_ratio = 0.95;
  int render_size = 256;
  std::vector<DatasetRecord> records;

  [[nodiscard]] std::vector<const DatasetRecord*> split(std::string_view name) const;
  /// SHA-256 of the canonical serialization.
  [[nodiscard]] std::string checksum() const;
};

std::string render_checksum(const StrokeSequence& seq, int render_size);

/// Number of eval images for n inputs: floor(n * (1 - ratio)) but at least one, and
/// never all of them when n >= 2. A single image goes to training.
std::size_t eval_count(std::size_t n, double split_ratio);

std::string record_to_json(const DatasetRecord& r);
DatasetRecord record_from_json(std::string_view text);
std::string manifest_to_json(const DatasetManifest& m);
DatasetManifest manifest_from_json(std::string_view text);

void save_manifest(const std::filesystem::path& path, const DatasetManifest& m);
DatasetManifest load_manifest(const std::filesystem::path& path);

struct BuildOptions {
  DecompositionSchedule schedule;
  ReorderWeights weights;
  FitterOptions fitter;
  ReorderOptions reorder;
  double split_ratio = 0.95;
  std::uint64_t seed = 0;
  int workers = 1;
  int render_size = 256;
};

/// Decomposes and reorders every PNG in image_dir that has a same-named PNG mask in
/// mask_dir, writes out_dir/records/<id>.json and out_dir/manifest.json, and returns
/// the manifest. Images without a mask are skipped with a warning.
DatasetManifest build_dataset(const std::filesystem::path& image_dir, const std::filesystem::path& mask_dir,
                              const std::filesystem::path& out_dir, const BuildOptions& options);

}  // namespace paintnext
