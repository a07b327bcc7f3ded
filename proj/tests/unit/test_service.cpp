#include <doctest.h>

#include <filesystem>
#include <random>
#include <thread>
#include <unistd.h>

#include "httplib.h"
#include "json.hpp"
#include "paintnext/image_io.hpp"
#include "paintnext/render.hpp"
#include "paintnext/service.hpp"
#include "paintnext/synthetic.hpp"

using namespace paintnext;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

ModelConfig tiny_config() {
  ModelConfig c;
  c.d_emb = 16;
  c.n_heads = 2;
  c.ff_dim = 32;
  c.context_layers = 1;
  c.posterior_layers = 1;
  c.position_layers = 1;
  c.attribute_layers = 1;
  c.k = 8;
  c.image_size = 32;
  c.backbone_channels = {4, 8};
  c.d_z = 8;
  return c;
}

std::shared_ptr<const InpModel> tiny_model() { return std::make_shared<const InpModel>(tiny_config(), 11); }

ServiceOptions options(std::uint64_t seed) {
  ServiceOptions o;
  o.seed = seed;
  o.heatmap_samples = 60;
  return o;
}

Stroke random_stroke(std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(0.0, 1.0), s(0.02, 0.4);
  return {u(rng), u(rng), u(rng), u(rng), u(rng), s(rng), s(rng), u(rng)};
}

Canvas reference_image() { return make_scene(2, 48).image; }

ServiceError::Kind error_kind(const std::function<void()>& f) {
  try {
    f();
  } catch (const ServiceError& e) {
    return e.kind();
  }
  FAIL("expected a ServiceError");
  return ServiceError::Kind::BadRequest;
}

/// Runs the HTTP front end on a free local port for the lifetime of the object.
struct RunningServer {
  SuggestionService service;
  ServiceHttpServer http;
  int port;
  std::thread thread;

  RunningServer(std::shared_ptr<const InpModel> model, ServiceOptions opts)
      : service(std::move(model), opts), http(service), port(http.bind("127.0.0.1", 0)) {
    REQUIRE(port > 0);
    thread = std::thread([this] { http.listen(); });
    http.wait_until_ready();
  }
  ~RunningServer() {
    http.stop();
    thread.join();
  }
  httplib::Client client() const {
    httplib::Client c("127.0.0.1", port);
    c.set_read_timeout(60, 0);
    return c;
  }
};

json post(httplib::Client& c, const std::string& path, const json& body, int expect = 200) {
  auto res = c.Post(path, body.dump(), "application/json");
  REQUIRE(res);
  CHECK(res->status == expect);
  return json::parse(res->body);
}

std::string png_base64(const Canvas& c) { return base64_encode(encode_png(c)); }

}  // namespace

TEST_CASE("sessions start blank and replay their history") {
  SuggestionService svc(tiny_model(), options(1));
  const std::string a = svc.create_session(reference_image());
  const std::string b = svc.create_session(reference_image());
  CHECK(a != b);
  const SessionState st = svc.state(a);
  CHECK(st.history_len == 0);
  CHECK(st.canvas.height() == 32);
  CHECK(checksum(st.canvas) == checksum(Canvas::white(32, 32)));
  CHECK(svc.reference(a).width() == 32);

  std::mt19937_64 rng(2);
  std::vector<Stroke> strokes;
  for (int i = 0; i < 5; ++i) strokes.push_back(random_stroke(rng));
  CHECK(svc.commit(a, strokes) == 5);
  CHECK(checksum(svc.state(a).canvas) == checksum(render_on_white(svc.history(a), 32, 32)));

  const auto variants = svc.suggest(a, 2);
  CHECK(svc.commit(a, {}) == 5);
  CHECK(svc.accept(a, variants[0].id, 8) == 13);
  CHECK(checksum(svc.state(a).canvas) == checksum(render_on_white(svc.history(a), 32, 32)));
  CHECK(svc.undo(a, 4) == 9);
  CHECK(checksum(svc.state(a).canvas) == checksum(render_on_white(svc.history(a), 32, 32)));
  CHECK(svc.history(b).empty());

  CHECK(error_kind([&] { svc.state("nope"); }) == ServiceError::Kind::NotFound);
  CHECK(error_kind([&] { svc.undo(a, 10); }) == ServiceError::Kind::BadRequest);
  CHECK(error_kind([&] { svc.undo(a, 0); }) == ServiceError::Kind::BadRequest);
  CHECK(error_kind([&] { svc.create_session_png(std::vector<std::uint8_t>{1, 2, 3}); }) ==
        ServiceError::Kind::BadRequest);
}

TEST_CASE("commit validation lists offending fields") {
  SuggestionService svc(nullptr, options(1));
  const std::string id = svc.create_session(reference_image());
  std::vector<Stroke> strokes{{0.5, 0.5, 0.5, 0.5, 0.5, 0.1, 0.1, 0.0}, {1.5, 0.5, 0.5, -0.1, 0.5, 0.1, 0.1, 0.0}};
  try {
    svc.commit(id, strokes);
    FAIL("expected rejection");
  } catch (const ServiceError& e) {
    CHECK(e.kind() == ServiceError::Kind::BadRequest);
    CHECK(e.fields() == std::vector<std::string>{"strokes[1].x_x", "strokes[1].rho_g"});
  }
  CHECK(svc.state(id).history_len == 0);
  CHECK(error_kind([&] { svc.suggest(id, 1); }) == ServiceError::Kind::Unavailable);
  CHECK(error_kind([&] { svc.heatmap(id); }) == ServiceError::Kind::Unavailable);
  CHECK(error_kind([&] { svc.interpolate(id, 3); }) == ServiceError::Kind::Unavailable);
}

TEST_CASE("suggestions, acceptance and staleness") {
  auto model = tiny_model();
  SuggestionService svc(model, options(3));
  const std::string id = svc.create_session(reference_image());

  const auto one = svc.suggest(id, 1);
  REQUIRE(one.size() == 1);
  CHECK(one[0].strokes.size() == 8);
  CHECK(one[0].z.size() == 8);
  for (const auto& v : svc.suggest(id, 16))
    for (const auto& s : v.strokes.strokes) CHECK(invalid_fields(s).empty());
  CHECK(error_kind([&] { svc.suggest(id, 0); }) == ServiceError::Kind::BadRequest);
  CHECK(error_kind([&] { svc.suggest(id, 17); }) == ServiceError::Kind::BadRequest);

  // Previews composite the variant over the live canvas.
  const auto batch = svc.suggest(id, 3);
  for (const auto& v : batch) CHECK(checksum(v.preview) == checksum(render_on_white(v.strokes, 32, 32)));
  // Variants from one batch share the frozen context: decoding their latents again reproduces them.
  const auto again = ModelGenerator(*model).decode(svc.context(id), {batch[0].z, batch[2].z});
  CHECK(again[0].strokes == batch[0].strokes.strokes);
  CHECK(again[1].strokes == batch[2].strokes.strokes);

  CHECK(error_kind([&] { svc.accept(id, batch[1].id, 0); }) == ServiceError::Kind::BadRequest);
  CHECK(error_kind([&] { svc.accept(id, batch[1].id, 9); }) == ServiceError::Kind::BadRequest);
  CHECK(svc.accept(id, batch[1].id, 3) == 3);
  CHECK(svc.history(id).strokes == batch[1].strokes.slice(0, 3).strokes);
  CHECK(error_kind([&] { svc.accept(id, batch[1].id, 3); }) == ServiceError::Kind::Conflict);
  CHECK(error_kind([&] { svc.accept(id, batch[0].id, 3); }) == ServiceError::Kind::Conflict);

  const auto fresh = svc.suggest(id, 2);
  std::mt19937_64 rng(4);
  svc.commit(id, {random_stroke(rng)});
  CHECK(error_kind([&] { svc.accept(id, fresh[0].id, 1); }) == ServiceError::Kind::Conflict);
  const auto after_undo = svc.suggest(id, 1);
  svc.undo(id, 1);
  CHECK(error_kind([&] { svc.accept(id, after_undo[0].id, 1); }) == ServiceError::Kind::Conflict);
  CHECK(error_kind([&] { svc.accept(id, "made-up", 1); }) == ServiceError::Kind::Conflict);

  // Same seed and same call sequence give the same batch.
  SuggestionService s1(model, options(9)), s2(model, options(9)), s3(model, options(10));
  const auto i1 = s1.create_session(reference_image()), i2 = s2.create_session(reference_image()),
             i3 = s3.create_session(reference_image());
  const auto b1 = s1.suggest(i1, 4), b2 = s2.suggest(i2, 4), b3 = s3.suggest(i3, 4);
  for (int i = 0; i < 4; ++i) {
    CHECK(b1[i].id == b2[i].id);
    CHECK(b1[i].strokes.strokes == b2[i].strokes.strokes);
  }
  CHECK(b1[0].z != b3[0].z);
}

TEST_CASE("interpolation and heatmaps") {
  auto model = tiny_model();
  SuggestionService svc(model, options(5));
  const std::string id = svc.create_session(reference_image());
  std::mt19937_64 rng(6);
  svc.commit(id, {random_stroke(rng), random_stroke(rng), random_stroke(rng)});

  const Interpolation two = svc.interpolate(id, 2);
  CHECK(two.alphas == std::vector<double>{0.0, 1.0});
  const auto ends = ModelGenerator(*model).decode(svc.context(id), two.latents);
  CHECK(ends[0].strokes == two.sequences[0].strokes);
  CHECK(ends[1].strokes == two.sequences[1].strokes);

  const Interpolation five = svc.interpolate(id, 5);
  REQUIRE(five.sequences.size() == 5);
  CHECK(five.alphas[2] == 0.5);
  for (std::size_t j = 0; j < five.latents[2].size(); ++j) {
    CHECK(five.latents[2][j] == doctest::Approx(0.5 * (five.latents[0][j] + five.latents[4][j])).epsilon(1e-15));
  }
  CHECK(error_kind([&] { svc.interpolate(id, 1); }) == ServiceError::Kind::BadRequest);

  // The service heatmap is the evaluation heatmap on the same context and stream.
  SuggestionService fresh(model, options(5));
  const std::string f = fresh.create_session(reference_image());
  fresh.commit(f, svc.history(id).strokes);
  const auto map = fresh.heatmap(f);
  EvalProtocol p;
  p.heatmap_samples = 60;
  std::mt19937_64 stream(SuggestionService::stream_seed(5, 0, 0));
  CHECK(map == heatmap(ModelGenerator(*model), fresh.context(f), p, stream));
  for (double v : map) CHECK((v >= 0.0 && v <= 1.0));
  SuggestionService replay(model, options(5));
  const std::string r = replay.create_session(reference_image());
  replay.commit(r, svc.history(id).strokes);
  CHECK(replay.heatmap(r) == map);
}

TEST_CASE("sessions are isolated under concurrent use") {
  auto model = tiny_model();
  SuggestionService svc(model, options(7));
  std::vector<std::string> ids;
  for (int i = 0; i < 4; ++i) ids.push_back(svc.create_session(reference_image()));
  std::vector<std::thread> threads;
  for (int t = 0; t < 4; ++t) {
    threads.emplace_back([&, t] {
      std::mt19937_64 rng(100 + t);
      for (int step = 0; step < 15; ++step) {
        svc.commit(ids[t], {random_stroke(rng)});
        const auto v = svc.suggest(ids[t], 2);
        svc.accept(ids[t], v[step % 2].id, 1 + step % 8);
        if (step % 4 == 3) svc.undo(ids[t], 2);
      }
    });
  }
  for (auto& th : threads) th.join();
  for (const auto& id : ids) {
    const StrokeSequence h = svc.history(id);
    CHECK(checksum(svc.state(id).canvas) == checksum(render_on_white(h, 32, 32)));
  }
}

TEST_CASE("snapshots and idle expiry") {
  const fs::path dir = fs::temp_directory_path() / ("pn_service_" + std::to_string(::getpid()));
  fs::remove_all(dir);
  SuggestionService svc(nullptr, options(1));
  const std::string id = svc.create_session(reference_image());
  std::mt19937_64 rng(8);
  svc.commit(id, {random_stroke(rng), random_stroke(rng)});
  svc.snapshot(dir);
  SuggestionService back(nullptr, options(1));
  CHECK(back.restore(dir) == 1);
  CHECK(back.history(id).strokes == svc.history(id).strokes);
  CHECK(checksum(back.state(id).canvas) == checksum(svc.state(id).canvas));
  fs::remove_all(dir);

  ServiceOptions o = options(1);
  o.idle_timeout = std::chrono::seconds(1);
  SuggestionService idle(nullptr, o);
  const std::string gone = idle.create_session(reference_image());
  std::this_thread::sleep_for(std::chrono::milliseconds(1100));
  CHECK(idle.expire_idle() == 1);
  CHECK(error_kind([&] { idle.state(gone); }) == ServiceError::Kind::NotFound);
}

TEST_CASE("HTTP API replays 100 random operations") {
  RunningServer server(tiny_model(), options(12));
  auto c = server.client();
  const json created = post(c, "/sessions", {{"image", png_base64(reference_image())}});
  const std::string id = created.at("id");
  const std::string base = "/sessions/" + id;

  StrokeSequence mirror;
  std::mt19937_64 rng(13);
  std::vector<std::pair<std::string, json>> pending;
  int stale_checked = 0;
  for (int op = 0; op < 100; ++op) {
    const int kind = static_cast<int>(rng() % 4);
    if (kind == 0) {
      json rows = json::array();
      const int n = static_cast<int>(rng() % 4);
      for (int i = 0; i < n; ++i) {
        const Stroke s = random_stroke(rng);
        rows.push_back(s.to_array());
        mirror.strokes.push_back(s);
      }
      const json r = post(c, base + "/strokes", {{"strokes", rows}});
      CHECK(r.at("history_len") == mirror.size());
      if (n > 0) {
        // Anything suggested before this commit is now stale.
        for (const auto& [vid, strokes] : pending) {
          post(c, base + "/accept", {{"variant_id", vid}, {"prefix_len", 1}}, 409);
          ++stale_checked;
          break;
        }
        pending.clear();
      }
    } else if (kind == 1) {
      const json r = post(c, base + "/suggest", {{"n_variants", 3}});
      REQUIRE(r.at("variants").size() == 3);
      for (const auto& v : r.at("variants")) {
        CHECK(v.at("strokes").size() == 8);
        CHECK(decode_png(base64_decode(v.at("preview").get<std::string>())).height() == 32);
        pending.emplace_back(v.at("variant_id"), v.at("strokes"));
      }
    } else if (kind == 2 && !pending.empty()) {
      const auto& [vid, strokes] = pending[rng() % pending.size()];
      const int prefix = 1 + static_cast<int>(rng() % 8);
      for (int i = 0; i < prefix; ++i) mirror.strokes.push_back(Stroke::from_array(strokes[i].get<std::vector<double>>()));
      const json r = post(c, base + "/accept", {{"variant_id", vid}, {"prefix_len", prefix}});
      CHECK(r.at("history_len") == mirror.size());
      pending.clear();
    } else if (kind == 3 && !mirror.empty()) {
      const int count = 1 + static_cast<int>(rng() % std::min<std::size_t>(3, mirror.size()));
      mirror.strokes.resize(mirror.size() - count);
      const json r = post(c, base + "/undo", {{"count", count}});
      CHECK(r.at("history_len") == mirror.size());
      pending.clear();
    }
    auto res = c.Get(base + "/state");
    REQUIRE(res);
    const json st = json::parse(res->body);
    CHECK(st.at("history_len") == mirror.size());
    CHECK(st.at("canvas") == png_base64(render_on_white(mirror, 32, 32)));
  }
  CHECK(stale_checked > 0);
  CHECK(checksum(server.service.state(id).canvas) == checksum(render_on_white(mirror, 32, 32)));
}

TEST_CASE("HTTP API errors, heatmap and interpolation") {
  RunningServer server(tiny_model(), options(14));
  auto c = server.client();
  post(c, "/sessions", {{"image", "not base64 at all!"}}, 400);
  post(c, "/sessions", {{"image", base64_encode(std::vector<std::uint8_t>{1, 2, 3, 4})}}, 400);
  post(c, "/sessions", json::object(), 400);
  auto bad = c.Post("/sessions", "{", "application/json");
  REQUIRE(bad);
  CHECK(bad->status == 400);

  const std::string id = post(c, "/sessions", {{"image", png_base64(reference_image())}}).at("id");
  const std::string base = "/sessions/" + id;
  auto missing = c.Get("/sessions/unknown/state");
  REQUIRE(missing);
  CHECK(missing->status == 404);

  const json invalid = post(c, base + "/strokes", {{"strokes", {{0.5, 0.5, 0.5, 0.5, 0.5, 0.1, 0.1, 2.0}}}}, 400);
  CHECK(invalid.at("fields") == json::array({"strokes[0].omega"}));
  post(c, base + "/strokes", {{"strokes", {{0.5, 0.5}}}}, 400);
  post(c, base + "/suggest", {{"n_variants", 0}}, 400);
  post(c, base + "/suggest", {{"n_variants", "three"}}, 400);
  post(c, base + "/accept", {{"variant_id", "x"}, {"prefix_len", 1}}, 409);
  post(c, base + "/undo", {{"count", 1}}, 400);

  const json interp = post(c, base + "/interpolate", {{"steps", 4}});
  CHECK(interp.at("sequences").size() == 4);
  CHECK(interp.at("alphas").back() == 1.0);
  post(c, base + "/interpolate", {{"steps", 1}}, 400);

  auto heat = c.Get(base + "/heatmap");
  REQUIRE(heat);
  CHECK(heat->status == 200);
  CHECK(heat->get_header_value("Content-Type") == "image/png");
  const std::vector<std::uint8_t> bytes(heat->body.begin(), heat->body.end());
  const Canvas decoded = decode_png(bytes);
  CHECK(decoded.height() == 32);
  CHECK(decoded.width() == 32);

  // Two servers with the same seed answer identically.
  RunningServer twin(tiny_model(), options(14));
  auto c2 = twin.client();
  const std::string id2 = post(c2, "/sessions", {{"image", png_base64(reference_image())}}).at("id");
  CHECK(id2 == id);
  RunningServer other(tiny_model(), options(14));
  auto c3 = other.client();
  const std::string id3 = post(c3, "/sessions", {{"image", png_base64(reference_image())}}).at("id");
  const json s2 = post(c2, "/sessions/" + id2 + "/suggest", {{"n_variants", 2}});
  const json s3 = post(c3, "/sessions/" + id3 + "/suggest", {{"n_variants", 2}});
  CHECK(s2 == s3);
}
