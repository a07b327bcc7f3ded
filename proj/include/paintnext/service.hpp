#pragma once

#include <chrono>
#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

#include "paintnext/evaluation.hpp"
#include "paintnext/model.hpp"

namespace paintnext {

class ServiceError : public std::runtime_error {
 public:
  enum class Kind { BadRequest, NotFound, Conflict, Unavailable };
  ServiceError(Kind kind, const std::string& what, std::vector<std::string> fields = {})
      : std::runtime_error(what), kind_(kind), fields_(std::move(fields)) {}
  [[nodiscard]] Kind kind() const { return kind_; }
  [[nodiscard]] int http_status() const;
  /// Offending request fields for validation errors.
  [[nodiscard]] const std::vector<std::string>& fields() const { return fields_; }

 private:
  Kind kind_;
  std::vector<std::string> fields_;
};

struct ServiceOptions {
  std::uint64_t seed = 0;
  /// Canvas resolution when no model is loaded; otherwise the model's image size wins.
  int image_size = 256;
  int heatmap_samples = 500;
  double heatmap_threshold = 0.05;
  int max_variants = 16;
  /// Sessions idle longer than this are dropped; 0 keeps them forever.
  std::chrono::seconds idle_timeout{0};
};

struct Variant {
  std::string id;
  std::vector<double> z;
  StrokeSequence strokes;
  /// Current canvas with the variant composited on top.
  Canvas preview;
};

struct SessionState {
  Canvas canvas;
  std::size_t history_len = 0;
};

struct Interpolation {
  std::vector<double> alphas;
  std::vector<std::vector<double>> latents;
  std::vector<StrokeSequence> sequences;
};

/// In-memory painting sessions around a shared read-only model.
class SuggestionService {
 public:
  /// `model` may be null; inference endpoints then report Unavailable.
  SuggestionService(std::shared_ptr<const InpModel> model, ServiceOptions options);

  [[nodiscard]] bool model_loaded() const { return model_ != nullptr; }
  [[nodiscard]] int image_size() const { return image_size_; }
  [[nodiscard]] int k() const;

  std::string create_session(const Canvas& reference);
  /// Decodes a PNG; undecodable bytes are a BadRequest.
  std::string create_session_png(std::span<const std::uint8_t> png);

  SessionState state(const std::string& id);
  [[nodiscard]] StrokeSequence history(const std::string& id);
  [[nodiscard]] Canvas reference(const std::string& id);

  /// Appends user strokes. An empty list changes nothing, pending variants included.
  std::size_t commit(const std::string& id, const std::vector<Stroke>& strokes);
  std::vector<Variant> suggest(const std::string& id, int n_variants);
  std::size_t accept(const std::string& id, const std::string& variant_id, int prefix_len);
  std::size_t undo(const std::string& id, int count);
  Interpolation interpolate(const std::string& id, int steps);
  std::vector<double> heatmap(const std::string& id);

  /// Seed of the `draw`-th inference call on the session created `ordinal`-th (0-based).
  static std::uint64_t stream_seed(std::uint64_t server_seed, std::uint64_t ordinal, std::uint64_t draw);

  /// Context snapshot the model sees for the session.
  ContextBundle context(const std::string& id);

  /// Drops idle sessions; returns how many were removed.
  std::size_t expire_idle();
  [[nodiscard]] std::size_t session_count() const;

  /// One JSON file per session with its reference PNG and history.
  void snapshot(const std::filesystem::path& dir);
  /// Loads every session snapshot in `dir`; returns the number restored.
  std::size_t restore(const std::filesystem::path& dir);

 private:
  struct Session {
    std::mutex mutex;
    std::string id;
    std::uint64_t ordinal = 0;
    Canvas reference;
    StrokeSequence history;
    Canvas canvas;
    std::map<std::string, Variant> pending;
    std::uint64_t generation = 0;
    std::uint64_t draws = 0;
    std::chrono::steady_clock::time_point created;
    std::chrono::steady_clock::time_point last_active;
  };

  std::shared_ptr<Session> find(const std::string& id);
  std::shared_ptr<Session> insert(Canvas reference, StrokeSequence history, std::optional<std::string> id);
  const InpModel& require_model() const;
  ContextBundle context_of(const Session& s) const;
  /// Deterministic per-session stream; advances with every inference call.
  std::mt19937_64 next_rng(Session& s);
  void touch(Session& s);

  std::shared_ptr<const InpModel> model_;
  ServiceOptions options_;
  int image_size_;
  mutable std::mutex sessions_mutex_;
  std::map<std::string, std::shared_ptr<Session>> sessions_;
  std::uint64_t next_ordinal_ = 0;
};

/// HTTP front end; blocks in listen until stop() is called from another thread.
class ServiceHttpServer {
 public:
  explicit ServiceHttpServer(SuggestionService& service);
  ~ServiceHttpServer();
  ServiceHttpServer(const ServiceHttpServer&) = delete;
  ServiceHttpServer& operator=(const ServiceHttpServer&) = delete;

  /// Binds to `port` (0 picks a free port) and returns the bound port, or -1.
  int bind(const std::string& host, int port);
  /// Serves on the bound socket until stop().
  bool listen();
  void stop();
  void wait_until_ready() const;

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

}  // namespace paintnext
