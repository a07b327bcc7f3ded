#include <thread>

#include "acceptance.hpp"
#include "httplib.h"
#include "json.hpp"
#include "paintnext/image_io.hpp"
#include "paintnext/render.hpp"
#include "paintnext/service.hpp"
#include "paintnext/synthetic.hpp"

using namespace paintnext;
using nlohmann::json;

namespace acceptance {

namespace {

std::shared_ptr<const InpModel> service_model() {
  ModelConfig c;
  c.d_emb = 32;
  c.n_heads = 4;
  c.ff_dim = 64;
  c.context_layers = c.posterior_layers = c.position_layers = c.attribute_layers = 1;
  c.k = 8;
  c.image_size = 64;
  c.backbone_channels = {8, 16};
  c.d_z = 16;
  return std::make_shared<const InpModel>(c, 21);
}

class LocalServer {
 public:
  LocalServer(std::shared_ptr<const InpModel> model, std::uint64_t seed)
      : service_(std::move(model), [seed] {
          ServiceOptions o;
          o.seed = seed;
          return o;
        }()),
        http_(service_) {
    port_ = http_.bind("127.0.0.1", 0);
    if (port_ <= 0) throw std::runtime_error("cannot bind a local port");
    thread_ = std::thread([this] { http_.listen(); });
    http_.wait_until_ready();
  }
  ~LocalServer() {
    http_.stop();
    thread_.join();
  }
  [[nodiscard]] int port() const { return port_; }

 private:
  SuggestionService service_;
  ServiceHttpServer http_;
  int port_ = -1;
  std::thread thread_;
};

struct Reply {
  int status = 0;
  json body;
};

Reply post(httplib::Client& c, const std::string& path, const json& body) {
  auto res = c.Post(path, body.dump(), "application/json");
  if (!res) throw std::runtime_error("no response from " + path);
  return {res->status, json::parse(res->body)};
}

}  // namespace

Outcome service_suite(const Context&) {
  Outcome out;
  auto model = service_model();
  const int size = model->config().image_size;
  LocalServer server(model, 31);
  httplib::Client c("127.0.0.1", server.port());
  c.set_read_timeout(60, 0);

  const std::string image = base64_encode(encode_png(make_scene(4, 96).image));
  const std::string id = post(c, "/sessions", {{"image", image}}).body.at("id");
  const std::string base = "/sessions/" + id;

  StrokeSequence mirror;
  std::vector<std::pair<std::string, json>> pending, stale;
  std::mt19937_64 rng(41);
  int ops = 0, replay_ok = 0, stale_tried = 0, stale_rejected = 0, http_errors = 0;
  while (ops < 100) {
    const int kind = static_cast<int>(rng() % 4);
    Reply r;
    if (kind == 0) {
      json rows = json::array();
      const int n = 1 + static_cast<int>(rng() % 3);
      for (int i = 0; i < n; ++i) {
        const Stroke s = random_stroke(rng, 0.4);
        rows.push_back(s.to_array());
        mirror.strokes.push_back(s);
      }
      r = post(c, base + "/strokes", {{"strokes", rows}});
      stale.insert(stale.end(), pending.begin(), pending.end());
      pending.clear();
    } else if (kind == 1) {
      r = post(c, base + "/suggest", {{"n_variants", 1 + static_cast<int>(rng() % 4)}});
      for (const auto& v : r.body.at("variants")) pending.emplace_back(v.at("variant_id"), v.at("strokes"));
    } else if (kind == 2) {
      if (pending.empty()) continue;
      const auto [vid, strokes] = pending[rng() % pending.size()];
      const int prefix = 1 + static_cast<int>(rng() % strokes.size());
      for (int i = 0; i < prefix; ++i) mirror.strokes.push_back(Stroke::from_array(strokes[i].get<std::vector<double>>()));
      r = post(c, base + "/accept", {{"variant_id", vid}, {"prefix_len", prefix}});
      stale.insert(stale.end(), pending.begin(), pending.end());
      pending.clear();
    } else {
      if (mirror.empty()) continue;
      const int count = 1 + static_cast<int>(rng() % std::min<std::size_t>(4, mirror.size()));
      mirror.strokes.resize(mirror.size() - count);
      r = post(c, base + "/undo", {{"count", count}});
      stale.insert(stale.end(), pending.begin(), pending.end());
      pending.clear();
    }
    ++ops;
    if (r.status != 200) ++http_errors;

    // Every variant generated against an earlier context must be refused.
    if (!stale.empty() && rng() % 2 == 0) {
      const auto& [vid, strokes] = stale[rng() % stale.size()];
      ++stale_tried;
      if (post(c, base + "/accept", {{"variant_id", vid}, {"prefix_len", 1}}).status == 409) ++stale_rejected;
    }
    auto st = c.Get(base + "/state");
    if (!st) throw std::runtime_error("no state response");
    const json state = json::parse(st->body);
    const Canvas live = decode_png(base64_decode(state.at("canvas").get<std::string>()));
    const Canvas offline = render_on_white(mirror, size, size);
    if (state.at("history_len") == mirror.size() &&
        state.at("canvas") == base64_encode(encode_png(offline)) && live.height() == size) {
      ++replay_ok;
    }
  }
  out.check(http_errors == 0, "operations " + std::to_string(ops) + ", HTTP errors " + std::to_string(http_errors));
  out.check(replay_ok == ops, "replay invariance " + std::to_string(replay_ok) + "/" + std::to_string(ops));
  out.check(stale_tried > 0 && stale_rejected == stale_tried,
            "stale accepts rejected " + std::to_string(stale_rejected) + "/" + std::to_string(stale_tried));

  // Two servers with the same seed produce identical suggestion batches.
  LocalServer a(model, 77), b(model, 77), other(model, 78);
  auto batch = [&](int port) {
    httplib::Client cl("127.0.0.1", port);
    cl.set_read_timeout(60, 0);
    const std::string sid = post(cl, "/sessions", {{"image", image}}).body.at("id");
    post(cl, "/sessions/" + sid + "/strokes", {{"strokes", {{0.3, 0.3, 0.2, 0.4, 0.6, 0.2, 0.1, 0.5}}}});
    return post(cl, "/sessions/" + sid + "/suggest", {{"n_variants", 4}}).body;
  };
  const json ra = batch(a.port()), rb = batch(b.port()), ro = batch(other.port());
  out.check(ra == rb && ra.at("variants").size() == 4, "seeded /suggest reproducible");
  out.check(ra != ro, "different seed gives a different batch");
  return out;
}

}  // namespace acceptance
