#include "paintnext/service.hpp"

#include <spdlog/spdlog.h>

#include <cstdio>

#include "json.hpp"
#include "paintnext/fileio.hpp"
#include "paintnext/image_io.hpp"
#include "paintnext/render.hpp"

namespace paintnext {

using nlohmann::json;
using Kind = ServiceError::Kind;

namespace {

std::uint64_t mix(std::uint64_t a, std::uint64_t b) {
  std::uint64_t z = a + 0x9e3779b97f4a7c15ULL * (b + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

std::string hex16(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

constexpr int kMaxInterpolationSteps = 256;

}  // namespace

int ServiceError::http_status() const {
  switch (kind_) {
    case Kind::BadRequest: return 400;
    case Kind::NotFound: return 404;
    case Kind::Conflict: return 409;
    case Kind::Unavailable: return 503;
  }
  return 500;
}

SuggestionService::SuggestionService(std::shared_ptr<const InpModel> model, ServiceOptions options)
    : model_(std::move(model)), options_(options) {
  image_size_ = model_ ? model_->config().image_size : options_.image_size;
  if (image_size_ < 1) throw std::invalid_argument("image size must be positive");
  if (options_.max_variants < 1) throw std::invalid_argument("max_variants must be positive");
}

int SuggestionService::k() const { return model_ ? model_->config().k : 8; }

std::uint64_t SuggestionService::stream_seed(std::uint64_t server_seed, std::uint64_t ordinal, std::uint64_t draw) {
  return mix(mix(server_seed, ordinal), draw);
}

const InpModel& SuggestionService::require_model() const {
  if (!model_) throw ServiceError(Kind::Unavailable, "no model loaded");
  return *model_;
}

void SuggestionService::touch(Session& s) { s.last_active = std::chrono::steady_clock::now(); }

std::mt19937_64 SuggestionService::next_rng(Session& s) {
  return std::mt19937_64(stream_seed(options_.seed, s.ordinal, s.draws++));
}

std::shared_ptr<SuggestionService::Session> SuggestionService::insert(Canvas reference, StrokeSequence history,
                                                                       std::optional<std::string> id) {
  auto s = std::make_shared<Session>();
  s->reference = reference.height() == image_size_ && reference.width() == image_size_
                     ? std::move(reference)
                     : reference.resized(image_size_, image_size_);
  s->history = std::move(history);
  s->canvas = render_sequence(Canvas::white(image_size_, image_size_), s->history).canvas;
  s->created = s->last_active = std::chrono::steady_clock::now();
  std::lock_guard lock(sessions_mutex_);
  s->ordinal = next_ordinal_++;
  if (id) {
    if (sessions_.count(*id)) throw ServiceError(Kind::Conflict, "session " + *id + " already exists");
    s->id = *id;
  } else {
    std::uint64_t salt = 0;
    do {
      s->id = hex16(mix(options_.seed ^ 0x5e5510f1ULL, s->ordinal + (salt++ << 40)));
    } while (sessions_.count(s->id));
  }
  sessions_[s->id] = s;
  return s;
}

std::string SuggestionService::create_session(const Canvas& reference) {
  if (reference.empty()) throw ServiceError(Kind::BadRequest, "reference image is empty", {"image"});
  return insert(reference, {}, std::nullopt)->id;
}

std::string SuggestionService::create_session_png(std::span<const std::uint8_t> png) {
  Canvas reference;
  try {
    reference = decode_png(png);
  } catch (const std::exception& e) {
    throw ServiceError(Kind::BadRequest, std::string("undecodable image: ") + e.what(), {"image"});
  }
  return create_session(reference);
}

std::shared_ptr<SuggestionService::Session> SuggestionService::find(const std::string& id) {
  if (options_.idle_timeout.count() > 0) expire_idle();
  std::lock_guard lock(sessions_mutex_);
  auto it = sessions_.find(id);
  if (it == sessions_.end()) throw ServiceError(Kind::NotFound, "unknown session " + id);
  return it->second;
}

SessionState SuggestionService::state(const std::string& id) {
  auto s = find(id);
  std::lock_guard lock(s->mutex);
  touch(*s);
  return {s->canvas, s->history.size()};
}

StrokeSequence SuggestionService::history(const std::string& id) {
  auto s = find(id);
  std::lock_guard lock(s->mutex);
  return s->history;
}

Canvas SuggestionService::reference(const std::string& id) {
  auto s = find(id);
  std::lock_guard lock(s->mutex);
  return s->reference;
}

std::size_t SuggestionService::commit(const std::string& id, const std::vector<Stroke>& strokes) {
  std::vector<std::string> bad;
  for (std::size_t i = 0; i < strokes.size(); ++i) {
    for (const auto& f : invalid_fields(strokes[i])) bad.push_back("strokes[" + std::to_string(i) + "]." + f);
  }
  if (!bad.empty()) {
    std::string msg = "invalid stroke parameters:";
    for (const auto& f : bad) msg += " " + f;
    throw ServiceError(Kind::BadRequest, msg, bad);
  }
  auto s = find(id);
  std::lock_guard lock(s->mutex);
  touch(*s);
  if (strokes.empty()) return s->history.size();
  for (const auto& st : strokes) {
    s->canvas = render_stroke(s->canvas, st);
    s->history.strokes.push_back(st);
  }
  s->history.subject_ids.clear();
  s->pending.clear();
  ++s->generation;
  return s->history.size();
}

ContextBundle SuggestionService::context_of(const Session& s) const {
  return ContextBundle::from_history(s.reference, s.canvas, s.history.strokes, k());
}

ContextBundle SuggestionService::context(const std::string& id) {
  auto s = find(id);
  std::lock_guard lock(s->mutex);
  return context_of(*s);
}

std::vector<Variant> SuggestionService::suggest(const std::string& id, int n_variants) {
  const InpModel& model = require_model();
  if (n_variants < 1 || n_variants > options_.max_variants) {
    throw ServiceError(Kind::BadRequest, "n_variants must lie in [1, " + std::to_string(options_.max_variants) + "]",
                       {"n_variants"});
  }
  auto s = find(id);
  std::lock_guard lock(s->mutex);
  touch(*s);
  const ContextBundle ctx = context_of(*s);
  const ModelGenerator gen(model);
  std::mt19937_64 rng = next_rng(*s);
  const auto latents = gen.draw_latents(n_variants, rng);
  const auto decoded = gen.decode(ctx, latents);
  std::vector<Variant> out;
  for (int i = 0; i < n_variants; ++i) {
    Variant v;
    v.id = "g" + std::to_string(s->generation) + "d" + std::to_string(s->draws - 1) + "v" + std::to_string(i);
    v.z = latents[i];
    v.strokes = decoded[i];
    v.preview = render_sequence(s->canvas, v.strokes).canvas;
    s->pending[v.id] = v;
    out.push_back(std::move(v));
  }
  return out;
}

std::size_t SuggestionService::accept(const std::string& id, const std::string& variant_id, int prefix_len) {
  auto s = find(id);
  std::lock_guard lock(s->mutex);
  touch(*s);
  auto it = s->pending.find(variant_id);
  if (it == s->pending.end()) {
    throw ServiceError(Kind::Conflict, "variant " + variant_id + " is unknown or stale", {"variant_id"});
  }
  const StrokeSequence& strokes = it->second.strokes;
  if (prefix_len < 1 || prefix_len > static_cast<int>(strokes.size())) {
    throw ServiceError(Kind::BadRequest, "prefix_len must lie in [1, " + std::to_string(strokes.size()) + "]",
                       {"prefix_len"});
  }
  for (int i = 0; i < prefix_len; ++i) {
    s->canvas = render_stroke(s->canvas, strokes.strokes[i]);
    s->history.strokes.push_back(strokes.strokes[i]);
  }
  s->history.subject_ids.clear();
  s->pending.clear();
  ++s->generation;
  return s->history.size();
}

std::size_t SuggestionService::undo(const std::string& id, int count) {
  auto s = find(id);
  std::lock_guard lock(s->mutex);
  touch(*s);
  if (count < 1 || static_cast<std::size_t>(count) > s->history.size()) {
    throw ServiceError(Kind::BadRequest, "count must lie in [1, " + std::to_string(s->history.size()) + "]",
                       {"count"});
  }
  s->history.strokes.resize(s->history.size() - count);
  s->history.subject_ids.clear();
  s->canvas = render_sequence(Canvas::white(image_size_, image_size_), s->history).canvas;
  s->pending.clear();
  ++s->generation;
  return s->history.size();
}

Interpolation SuggestionService::interpolate(const std::string& id, int steps) {
  const InpModel& model = require_model();
  if (steps < 2 || steps > kMaxInterpolationSteps) {
    throw ServiceError(Kind::BadRequest, "steps must lie in [2, " + std::to_string(kMaxInterpolationSteps) + "]",
                       {"steps"});
  }
  auto s = find(id);
  std::lock_guard lock(s->mutex);
  touch(*s);
  const ContextBundle ctx = context_of(*s);
  const ModelGenerator gen(model);
  std::mt19937_64 rng = next_rng(*s);
  const auto ends = gen.draw_latents(2, rng);
  Interpolation out;
  for (int i = 0; i < steps; ++i) {
    const double a = static_cast<double>(i) / (steps - 1);
    std::vector<double> z(ends[0].size());
    for (std::size_t j = 0; j < z.size(); ++j) z[j] = (1.0 - a) * ends[0][j] + a * ends[1][j];
    out.alphas.push_back(a);
    out.latents.push_back(std::move(z));
  }
  out.sequences = gen.decode(ctx, out.latents);
  return out;
}

std::vector<double> SuggestionService::heatmap(const std::string& id) {
  const InpModel& model = require_model();
  auto s = find(id);
  std::lock_guard lock(s->mutex);
  touch(*s);
  EvalProtocol protocol;
  protocol.heatmap_samples = options_.heatmap_samples;
  protocol.heatmap_threshold = options_.heatmap_threshold;
  std::mt19937_64 rng = next_rng(*s);
  return paintnext::heatmap(ModelGenerator(model), context_of(*s), protocol, rng);
}

std::size_t SuggestionService::expire_idle() {
  if (options_.idle_timeout.count() <= 0) return 0;
  const auto now = std::chrono::steady_clock::now();
  std::lock_guard lock(sessions_mutex_);
  std::size_t removed = 0;
  for (auto it = sessions_.begin(); it != sessions_.end();) {
    std::unique_lock session_lock(it->second->mutex, std::try_to_lock);
    if (session_lock.owns_lock() && now - it->second->last_active > options_.idle_timeout) {
      session_lock.unlock();
      it = sessions_.erase(it);
      ++removed;
    } else {
      ++it;
    }
  }
  if (removed > 0) spdlog::info("expired {} idle sessions", removed);
  return removed;
}

std::size_t SuggestionService::session_count() const {
  std::lock_guard lock(sessions_mutex_);
  return sessions_.size();
}

void SuggestionService::snapshot(const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  std::vector<std::shared_ptr<Session>> all;
  {
    std::lock_guard lock(sessions_mutex_);
    for (const auto& [id, s] : sessions_) all.push_back(s);
  }
  for (const auto& s : all) {
    std::lock_guard lock(s->mutex);
    json rows = json::array();
    for (const auto& st : s->history.strokes) rows.push_back(st.to_array());
    const json j{{"id", s->id}, {"reference", base64_encode(encode_png(s->reference))}, {"history", rows}};
    write_file_atomic(dir / (s->id + ".session.json"), j.dump());
  }
}

std::size_t SuggestionService::restore(const std::filesystem::path& dir) {
  if (!std::filesystem::is_directory(dir)) return 0;
  std::size_t restored = 0;
  for (const auto& entry : std::filesystem::directory_iterator(dir)) {
    const std::string name = entry.path().filename().string();
    if (name.size() < 13 || name.substr(name.size() - 13) != ".session.json") continue;
    const json j = json::parse(read_file(entry.path()));
    const auto png = base64_decode(j.at("reference").get<std::string>());
    StrokeSequence history;
    for (const auto& row : j.at("history")) history.strokes.push_back(Stroke::from_array(row.get<std::vector<double>>()));
    insert(decode_png(png), std::move(history), j.at("id").get<std::string>());
    ++restored;
  }
  return restored;
}

}  // namespace paintnext
