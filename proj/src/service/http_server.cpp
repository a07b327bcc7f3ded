#include <spdlog/spdlog.h>

#include "httplib.h"
#include "json.hpp"
#include "paintnext/image_io.hpp"
#include "paintnext/service.hpp"

namespace paintnext {

using nlohmann::json;
using Kind = ServiceError::Kind;

namespace {

json stroke_rows(const StrokeSequence& seq) {
  json rows = json::array();
  for (const auto& s : seq.strokes) rows.push_back(s.to_array());
  return rows;
}

json parse_body(const httplib::Request& req) {
  if (req.body.empty()) return json::object();
  try {
    json j = json::parse(req.body);
    if (!j.is_object()) throw ServiceError(Kind::BadRequest, "request body must be a JSON object");
    return j;
  } catch (const json::parse_error& e) {
    throw ServiceError(Kind::BadRequest, std::string("malformed JSON: ") + e.what());
  }
}

template <typename T>
T field(const json& body, const char* name, std::optional<T> fallback = std::nullopt) {
  if (!body.contains(name)) {
    if (fallback) return *fallback;
    throw ServiceError(Kind::BadRequest, std::string("missing field ") + name, {name});
  }
  try {
    return body.at(name).get<T>();
  } catch (const json::exception&) {
    throw ServiceError(Kind::BadRequest, std::string("field ") + name + " has the wrong type", {name});
  }
}

int int_field(const json& body, const char* name, std::optional<int> fallback = std::nullopt) {
  if (body.contains(name) && !body.at(name).is_number_integer()) {
    throw ServiceError(Kind::BadRequest, std::string("field ") + name + " must be an integer", {name});
  }
  return field<int>(body, name, fallback);
}

std::vector<Stroke> parse_strokes(const json& body) {
  if (!body.contains("strokes") || !body.at("strokes").is_array()) {
    throw ServiceError(Kind::BadRequest, "strokes must be an array of 8-number rows", {"strokes"});
  }
  std::vector<Stroke> out;
  std::vector<std::string> bad;
  const json& rows = body.at("strokes");
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const json& row = rows[i];
    bool ok = row.is_array() && row.size() == Stroke::kParams;
    for (std::size_t c = 0; ok && c < row.size(); ++c) ok = row[c].is_number();
    if (!ok) {
      bad.push_back("strokes[" + std::to_string(i) + "]");
      continue;
    }
    out.push_back(Stroke::from_array(row.get<std::vector<double>>()));
  }
  if (!bad.empty()) {
    std::string msg = "each stroke must be 8 numbers:";
    for (const auto& b : bad) msg += " " + b;
    throw ServiceError(Kind::BadRequest, msg, bad);
  }
  return out;
}

void send_json(httplib::Response& res, const json& j, int status = 200) {
  res.status = status;
  res.set_content(j.dump(), "application/json");
}

using Handler = std::function<void(const httplib::Request&, httplib::Response&)>;

/// Maps service errors to status codes with a JSON error body.
Handler guarded(Handler inner) {
  return [inner = std::move(inner)](const httplib::Request& req, httplib::Response& res) {
    try {
      inner(req, res);
    } catch (const ServiceError& e) {
      send_json(res, {{"error", e.what()}, {"fields", e.fields()}}, e.http_status());
    } catch (const std::exception& e) {
      spdlog::error("{} {}: {}", req.method, req.path, e.what());
      send_json(res, {{"error", e.what()}}, 500);
    }
  };
}

}  // namespace

struct ServiceHttpServer::Impl {
  SuggestionService& service;
  httplib::Server server;
  explicit Impl(SuggestionService& s) : service(s) {}
};

ServiceHttpServer::ServiceHttpServer(SuggestionService& service) : impl_(std::make_unique<Impl>(service)) {
  auto& svc = impl_->service;
  auto& srv = impl_->server;
  srv.set_payload_max_length(64u << 20);

  srv.Post("/sessions", guarded([&svc](const httplib::Request& req, httplib::Response& res) {
             const json body = parse_body(req);
             std::vector<std::uint8_t> bytes;
             try {
               bytes = base64_decode(field<std::string>(body, "image"));
             } catch (const ServiceError&) {
               throw;
             } catch (const std::exception& e) {
               throw ServiceError(Kind::BadRequest, std::string("image is not base64: ") + e.what(), {"image"});
             }
             send_json(res, {{"id", svc.create_session_png(bytes)}});
           }));

  srv.Get(R"(/sessions/([^/]+)/state)", guarded([&svc](const httplib::Request& req, httplib::Response& res) {
            const SessionState st = svc.state(req.matches[1]);
            send_json(res, {{"canvas", base64_encode(encode_png(st.canvas))}, {"history_len", st.history_len}});
          }));

  srv.Post(R"(/sessions/([^/]+)/strokes)", guarded([&svc](const httplib::Request& req, httplib::Response& res) {
             const auto strokes = parse_strokes(parse_body(req));
             send_json(res, {{"history_len", svc.commit(req.matches[1], strokes)}});
           }));

  srv.Post(R"(/sessions/([^/]+)/suggest)", guarded([&svc](const httplib::Request& req, httplib::Response& res) {
             const int n = int_field(parse_body(req), "n_variants", 1);
             json variants = json::array();
             for (const Variant& v : svc.suggest(req.matches[1], n)) {
               variants.push_back({{"variant_id", v.id},
                                   {"strokes", stroke_rows(v.strokes)},
                                   {"preview", base64_encode(encode_png(v.preview))}});
             }
             send_json(res, {{"variants", variants}});
           }));

  srv.Post(R"(/sessions/([^/]+)/accept)", guarded([&svc](const httplib::Request& req, httplib::Response& res) {
             const json body = parse_body(req);
             const auto variant = field<std::string>(body, "variant_id");
             const int prefix = int_field(body, "prefix_len");
             send_json(res, {{"history_len", svc.accept(req.matches[1], variant, prefix)}});
           }));

  srv.Post(R"(/sessions/([^/]+)/undo)", guarded([&svc](const httplib::Request& req, httplib::Response& res) {
             const int count = int_field(parse_body(req), "count", 1);
             send_json(res, {{"history_len", svc.undo(req.matches[1], count)}});
           }));

  srv.Get(R"(/sessions/([^/]+)/heatmap)", guarded([&svc](const httplib::Request& req, httplib::Response& res) {
            const auto map = svc.heatmap(req.matches[1]);
            const auto png = encode_gray_png(map, svc.image_size(), svc.image_size());
            res.set_content(std::string(png.begin(), png.end()), "image/png");
          }));

  srv.Post(R"(/sessions/([^/]+)/interpolate)", guarded([&svc](const httplib::Request& req, httplib::Response& res) {
             const int steps = int_field(parse_body(req), "steps");
             const Interpolation interp = svc.interpolate(req.matches[1], steps);
             json seqs = json::array();
             for (const auto& s : interp.sequences) seqs.push_back(stroke_rows(s));
             send_json(res, {{"alphas", interp.alphas}, {"sequences", seqs}});
           }));
}

ServiceHttpServer::~ServiceHttpServer() { stop(); }

int ServiceHttpServer::bind(const std::string& host, int port) {
  if (port == 0) return impl_->server.bind_to_any_port(host);
  return impl_->server.bind_to_port(host, port) ? port : -1;
}

bool ServiceHttpServer::listen() { return impl_->server.listen_after_bind(); }

void ServiceHttpServer::stop() {
  if (impl_->server.is_running()) impl_->server.stop();
}

void ServiceHttpServer::wait_until_ready() const { impl_->server.wait_until_ready(); }

}  // namespace paintnext
