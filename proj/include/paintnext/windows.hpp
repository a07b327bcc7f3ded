#pragma once

#include <filesystem>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "paintnext/dataset.hpp"
#include "paintnext/model.hpp"

namespace paintnext {

/// One training or evaluation example cut from a record at split index t.
struct TrainingWindow {
  const DatasetRecord* record = nullptr;
  std::size_t t = 0;
  StrokeSequence context;  // strokes [t-k, t)
  StrokeSequence target;   // strokes [t, t+k)
};

/// Window at a given split index; requires k <= t <= T - k.
TrainingWindow make_window(const DatasetRecord& record, std::size_t t, int k);
/// t uniform in [k, T-k]; nullopt when T < 2k.
std::optional<TrainingWindow> sample_window(const DatasetRecord& record, int k, std::mt19937_64& rng);

/// Reference images and rendered prefixes at model resolution. Prefix renders are
/// rebuilt from per-record keyframes, optionally persisted to a disk cache keyed by
/// (record, t, size). Thread-safe.
class CanvasSource {
 public:
  CanvasSource(int image_size, std::filesystem::path image_root = {}, std::filesystem::path disk_cache = {},
               std::size_t keyframe_stride = 64);

  [[nodiscard]] int image_size() const { return size_; }
  /// Reference image resized to model resolution.
  [[nodiscard]] std::shared_ptr<const Canvas> reference(const DatasetRecord& record);
  /// White canvas with strokes [0, t) composited.
  [[nodiscard]] Canvas prefix(const DatasetRecord& record, std::size_t t);
  /// Context bundle for a window.
  [[nodiscard]] ContextBundle bundle(const TrainingWindow& w, int k);

 private:
  struct RecordCache {
    std::mutex mutex;
    std::shared_ptr<const Canvas> reference;
    std::map<std::size_t, Canvas> keyframes;
  };
  RecordCache& cache_for(const DatasetRecord& record);
  std::filesystem::path resolve(const std::string& image_path) const;

  int size_;
  std::filesystem::path image_root_;
  std::filesystem::path disk_cache_;
  std::size_t stride_;
  std::mutex mutex_;
  std::map<std::string, std::unique_ptr<RecordCache>> records_;
};

}  // namespace paintnext
