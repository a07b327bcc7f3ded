#include "paintnext/dataset.hpp"

#include <spdlog/spdlog.h>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <exception>
#include <map>
#include <mutex>
#include <random>
#include <stdexcept>
#include <thread>

#include "json.hpp"
#include "paintnext/fileio.hpp"
#include "paintnext/hash.hpp"
#include "paintnext/image_io.hpp"
#include "paintnext/render.hpp"

namespace paintnext {

using nlohmann::json;

namespace {

json schedule_json(const DecompositionSchedule& s) {
  return {{"grid_sizes", s.grid_sizes}, {"strokes_per_region", s.strokes_per_region}, {"sigma_max", s.sigma_max}};
}

DecompositionSchedule schedule_from(const json& j) {
  DecompositionSchedule s;
  s.grid_sizes = j.at("grid_sizes").get<std::vector<int>>();
  s.strokes_per_region = j.at("strokes_per_region").get<std::vector<int>>();
  s.sigma_max = j.at("sigma_max").get<double>();
  s.validate();
  return s;
}

json weights_json(const ReorderWeights& w) {
  return {{"lambda_ord_x", w.position}, {"lambda_ord_rho", w.color}, {"lambda_ord_sigma", w.size},
          {"lambda_obj", w.subject}};
}

ReorderWeights weights_from(const json& j) {
  ReorderWeights w{j.at("lambda_ord_x").get<double>(), j.at("lambda_ord_rho").get<double>(),
                   j.at("lambda_ord_sigma").get<double>(), j.at("lambda_obj").get<double>()};
  w.validate();
  return w;
}

json record_json(const DatasetRecord& r) {
  json rows = json::array();
  for (const auto& s : r.sequence.strokes) rows.push_back(s.to_array());
  return {{"id", r.id},
          {"image", r.image_path},
          {"T", r.sequence.size()},
          {"strokes", rows},
          {"subject_ids", r.sequence.subject_ids},
          {"render_checksum", r.render_checksum},
          {"split", r.split}};
}

DatasetRecord record_from(const json& j) {
  DatasetRecord r;
  r.id = j.at("id").get<std::string>();
  r.image_path = j.value("image", std::string{});
  for (const auto& row : j.at("strokes")) {
    const auto v = row.get<std::vector<double>>();
    r.sequence.strokes.push_back(Stroke::from_array(v));
  }
  r.sequence.subject_ids = j.value("subject_ids", std::vector<int>{});
  if (j.at("T").get<std::size_t>() != r.sequence.size()) {
    throw std::runtime_error("record " + r.id + ": T does not match stroke count");
  }
  if (!r.sequence.subject_ids.empty() && !r.sequence.has_subjects()) {
    throw std::runtime_error("record " + r.id + ": subject_ids length mismatch");
  }
  r.render_checksum = j.at("render_checksum").get<std::string>();
  r.split = j.value("split", std::string(kTrainSplit));
  return r;
}

json manifest_json(const DatasetManifest& m) {
  json records = json::array();
  for (const auto& r : m.records) records.push_back(record_json(r));
  return {{"version", DatasetManifest::kVersion},
          {"schedule", schedule_json(m.schedule)},
          {"weights", weights_json(m.weights)},
          {"seed", m.seed},
          {"split_ratio", m.split_ratio},
          {"render_size", m.render_size},
          {"records", records}};
}

std::uint64_t fnv1a(std::string_view s) {
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return h;
}

std::uint64_t mix(std::uint64_t a, std::uint64_t b) {
  std::uint64_t z = a + 0x9e3779b97f4a7c15ULL * (b + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

}  // namespace

std::vector<const DatasetRecord*> DatasetManifest::split(std::string_view name) const {
  std::vector<const DatasetRecord*> out;
  for (const auto& r : records)
    if (r.split == name) out.push_back(&r);
  return out;
}

std::string DatasetManifest::checksum() const { return sha256_hex(manifest_json(*this).dump()); }

std::string render_checksum(const StrokeSequence& seq, int render_size) {
  return paintnext::checksum(render_on_white(seq, render_size, render_size));
}

std::size_t eval_count(std::size_t n, double split_ratio) {
  if (!(split_ratio >= 0.0 && split_ratio <= 1.0)) throw std::invalid_argument("split ratio must lie in [0, 1]");
  if (n < 2) return 0;
  // The epsilon absorbs representation error, e.g. 5000 * (1 - 0.95) = 249.99999999999997.
  const auto raw = static_cast<std::size_t>(std::floor(static_cast<double>(n) * (1.0 - split_ratio) + 1e-9));
  return std::clamp<std::size_t>(raw, 1, n - 1);
}

std::string record_to_json(const DatasetRecord& r) { return record_json(r).dump(); }
DatasetRecord record_from_json(std::string_view text) { return record_from(json::parse(text)); }
std::string manifest_to_json(const DatasetManifest& m) { return manifest_json(m).dump(); }

DatasetManifest manifest_from_json(std::string_view text) {
  const json j = json::parse(text);
  if (j.at("version").get<int>() != DatasetManifest::kVersion) {
    throw std::runtime_error("unsupported manifest version " + std::to_string(j.at("version").get<int>()));
  }
  DatasetManifest m;
  m.schedule = schedule_from(j.at("schedule"));
  m.weights = weights_from(j.at("weights"));
  m.seed = j.at("seed").get<std::uint64_t>();
  m.split_ratio = j.at("split_ratio").get<double>();
  m.render_size = j.at("render_size").get<int>();
  for (const auto& r : j.at("records")) m.records.push_back(record_from(r));
  return m;
}

void save_manifest(const std::filesystem::path& path, const DatasetManifest& m) {
  write_file_atomic(path, manifest_to_json(m));
}

DatasetManifest load_manifest(const std::filesystem::path& path) { return manifest_from_json(read_file(path)); }

DatasetManifest build_dataset(const std::filesystem::path& image_dir, const std::filesystem::path& mask_dir,
                              const std::filesystem::path& out_dir, const BuildOptions& options) {
  namespace fs = std::filesystem;
  options.schedule.validate();
  options.weights.validate();
  if (options.workers < 1) throw std::invalid_argument("workers must be >= 1");
  if (!fs::is_directory(image_dir)) throw std::runtime_error("image directory not found: " + image_dir.string());

  struct Job {
    std::string id;
    fs::path image;
    fs::path mask;
  };
  std::vector<Job> jobs;
  for (const auto& entry : fs::directory_iterator(image_dir)) {
    if (!entry.is_regular_file() || entry.path().extension() != ".png") continue;
    const std::string id = entry.path().stem().string();
    const fs::path mask = mask_dir / (id + ".png");
    if (!fs::exists(mask)) {
      spdlog::warn("skipping {}: no mask at {}", id, mask.string());
      continue;
    }
    jobs.push_back({id, entry.path(), mask});
  }
  std::sort(jobs.begin(), jobs.end(), [](const Job& a, const Job& b) { return a.id < b.id; });

  std::vector<DatasetRecord> records(jobs.size());
  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  std::mutex failure_mutex;
  auto work = [&] {
    for (std::size_t i = next++; i < jobs.size(); i = next++) {
      try {
        const Job& job = jobs[i];
        const Canvas image = read_png(job.image);
        const LabelMap mask = read_label_png(job.mask);
        FitterOptions fit = options.fitter;
        fit.seed = mix(options.seed, fnv1a(job.id));
        StrokeSequence seq = decompose_image(image, options.schedule, fit);
        seq.subject_ids = subject_labels(seq, mask);
        const auto order = reorder_sequence(seq, build_precedence(seq), options.weights, options.reorder);
        DatasetRecord& r = records[i];
        r.id = job.id;
        r.image_path = job.image.string();
        r.sequence = seq.permuted(order);
        r.render_checksum = render_checksum(r.sequence, options.render_size);
        spdlog::info("{}: {} strokes, reorder cost {:.3f} -> {:.3f}", job.id, seq.size(),
                     reorder_cost(seq, options.weights), reorder_cost(r.sequence, options.weights));
      } catch (...) {
        std::lock_guard lock(failure_mutex);
        if (!failure) failure = std::current_exception();
      }
    }
  };
  std::vector<std::thread> pool;
  const int threads = std::min<int>(options.workers, static_cast<int>(std::max<std::size_t>(1, jobs.size())));
  for (int t = 1; t < threads; ++t) pool.emplace_back(work);
  work();
  for (auto& t : pool) t.join();
  if (failure) std::rethrow_exception(failure);

  // Deterministic split: shuffle ids with the build seed, first n_eval go to eval.
  std::vector<std::size_t> idx(records.size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  std::mt19937_64 rng(options.seed);
  std::shuffle(idx.begin(), idx.end(), rng);
  const std::size_t n_eval = eval_count(records.size(), options.split_ratio);
  for (std::size_t i = 0; i < idx.size(); ++i) {
    records[idx[i]].split = std::string(i < n_eval ? kEvalSplit : kTrainSplit);
  }

  DatasetManifest manifest;
  manifest.schedule = options.schedule;
  manifest.weights = options.weights;
  manifest.seed = options.seed;
  manifest.split_ratio = options.split_ratio;
  manifest.render_size = options.render_size;
  manifest.records = std::move(records);

  for (const auto& r : manifest.records) write_file_atomic(out_dir / "records" / (r.id + ".json"), record_to_json(r));
  save_manifest(out_dir / "manifest.json", manifest);
  return manifest;
}

}  // namespace paintnext
