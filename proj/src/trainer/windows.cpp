#include "paintnext/windows.hpp"

#include <cstring>
#include <stdexcept>

#include "paintnext/fileio.hpp"
#include "paintnext/image_io.hpp"
#include "paintnext/render.hpp"

namespace paintnext {

TrainingWindow make_window(const DatasetRecord& record, std::size_t t, int k) {
  const std::size_t kk = static_cast<std::size_t>(k);
  if (t < kk || t + kk > record.sequence.size()) {
    throw std::out_of_range("window t=" + std::to_string(t) + " out of range for record " + record.id);
  }
  return {&record, t, record.sequence.slice(t - kk, kk), record.sequence.slice(t, kk)};
}

std::optional<TrainingWindow> sample_window(const DatasetRecord& record, int k, std::mt19937_64& rng) {
  const std::size_t kk = static_cast<std::size_t>(k);
  if (record.sequence.size() < 2 * kk) return std::nullopt;
  std::uniform_int_distribution<std::size_t> pick(kk, record.sequence.size() - kk);
  return make_window(record, pick(rng), k);
}

CanvasSource::CanvasSource(int image_size, std::filesystem::path image_root, std::filesystem::path disk_cache,
                           std::size_t keyframe_stride)
    : size_(image_size), image_root_(std::move(image_root)), disk_cache_(std::move(disk_cache)),
      stride_(std::max<std::size_t>(1, keyframe_stride)) {}

std::filesystem::path CanvasSource::resolve(const std::string& image_path) const {
  const std::filesystem::path p(image_path);
  if (p.is_absolute() || std::filesystem::exists(p) || image_root_.empty()) return p;
  return image_root_ / p;
}

CanvasSource::RecordCache& CanvasSource::cache_for(const DatasetRecord& record) {
  std::lock_guard lock(mutex_);
  auto& slot = records_[record.id];
  if (!slot) slot = std::make_unique<RecordCache>();
  return *slot;
}

std::shared_ptr<const Canvas> CanvasSource::reference(const DatasetRecord& record) {
  RecordCache& cache = cache_for(record);
  std::lock_guard lock(cache.mutex);
  if (!cache.reference) {
    Canvas image = read_png(resolve(record.image_path));
    if (image.height() != size_ || image.width() != size_) image = image.resized(size_, size_);
    cache.reference = std::make_shared<const Canvas>(std::move(image));
  }
  return cache.reference;
}

Canvas CanvasSource::prefix(const DatasetRecord& record, std::size_t t) {
  if (t > record.sequence.size()) throw std::out_of_range("prefix longer than record " + record.id);
  std::filesystem::path cached;
  if (!disk_cache_.empty()) {
    cached = disk_cache_ / (record.id + "_" + std::to_string(t) + "_" + std::to_string(size_) + ".bin");
    if (std::filesystem::exists(cached)) {
      const std::string bytes = read_file(cached);
      Canvas c(size_, size_);
      if (bytes.size() == c.pixels().size_bytes()) {
        std::memcpy(c.pixels().data(), bytes.data(), bytes.size());
        return c;
      }
    }
  }
  RecordCache& cache = cache_for(record);
  Canvas canvas;
  std::size_t from = 0;
  {
    std::lock_guard lock(cache.mutex);
    // Extend the keyframe chain up to t, then start from the closest one.
    std::size_t last = 0;
    Canvas frame = Canvas::white(size_, size_);
    if (!cache.keyframes.empty()) {
      last = cache.keyframes.rbegin()->first;
      frame = cache.keyframes.rbegin()->second;
    } else {
      cache.keyframes.emplace(0, frame);
    }
    while (last + stride_ <= t) {
      for (std::size_t i = last; i < last + stride_; ++i) composite_in_place(frame, record.sequence.strokes[i]);
      last += stride_;
      cache.keyframes.emplace(last, frame);
    }
    auto it = std::prev(cache.keyframes.upper_bound(t));
    from = it->first;
    canvas = it->second;
  }
  for (std::size_t i = from; i < t; ++i) composite_in_place(canvas, record.sequence.strokes[i]);
  if (!cached.empty()) {
    const auto px = canvas.pixels();
    write_file_atomic(cached, std::string_view(reinterpret_cast<const char*>(px.data()), px.size_bytes()));
  }
  return canvas;
}

ContextBundle CanvasSource::bundle(const TrainingWindow& w, int k) {
  return ContextBundle::from_history(*reference(*w.record), prefix(*w.record, w.t), w.context.strokes, k);
}

}  // namespace paintnext
