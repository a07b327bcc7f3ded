#include "paintnext/evaluation.hpp"

#include <spdlog/spdlog.h>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <set>
#include <sstream>

#include "json.hpp"
#include "paintnext/fileio.hpp"
#include "paintnext/image_io.hpp"
#include "paintnext/render.hpp"

namespace paintnext {

using nlohmann::json;

namespace {

std::uint64_t mix(std::uint64_t a, std::uint64_t b) {
  std::uint64_t z = a + 0x9e3779b97f4a7c15ULL * (b + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

std::uint64_t fnv1a(std::string_view s) {
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return h;
}

std::vector<std::vector<double>> rows_of(const StrokeSequence& s) {
  std::vector<std::vector<double>> rows;
  for (const auto& st : s.strokes) {
    const auto a = st.to_array();
    rows.emplace_back(a.begin(), a.end());
  }
  return rows;
}

StrokeSequence concat(const StrokeSequence& a, const StrokeSequence& b) {
  StrokeSequence out = a;
  out.strokes.insert(out.strokes.end(), b.strokes.begin(), b.strokes.end());
  out.subject_ids.clear();
  return out;
}

std::string format_number(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

double mean_of(const std::vector<double>& v) {
  double s = 0;
  for (double x : v) s += x;
  return v.empty() ? 0.0 : s / static_cast<double>(v.size());
}

}  // namespace

void EvalProtocol::validate() const {
  if (windows_per_image < 1 || top1_samples < 1 || diversity_samples < 1 || heatmap_samples < 1) {
    throw std::invalid_argument("protocol sample counts must be positive");
  }
  if (!(heatmap_threshold >= 0.0 && heatmap_threshold < 1.0)) {
    throw std::invalid_argument("heatmap threshold must lie in [0, 1)");
  }
  if (heatmaps_exported < 0) throw std::invalid_argument("heatmaps_exported must be non-negative");
}

std::string EvalProtocol::to_json() const {
  return json{{"windows_per_image", windows_per_image},
              {"top1_samples", top1_samples},
              {"diversity_samples", diversity_samples},
              {"heatmap_samples", heatmap_samples},
              {"heatmap_threshold", heatmap_threshold},
              {"heatmaps_exported", heatmaps_exported},
              {"fsd_l_max", fsd_features.l_max},
              {"fsd_include_sigma_omega", fsd_features.include_sigma_omega},
              {"split", split},
              {"seed", seed}}
      .dump(2);
}

EvalProtocol EvalProtocol::from_json(std::string_view text) {
  const json j = json::parse(text);
  EvalProtocol p;
  p.windows_per_image = j.value("windows_per_image", p.windows_per_image);
  p.top1_samples = j.value("top1_samples", p.top1_samples);
  p.diversity_samples = j.value("diversity_samples", p.diversity_samples);
  p.heatmap_samples = j.value("heatmap_samples", p.heatmap_samples);
  p.heatmap_threshold = j.value("heatmap_threshold", p.heatmap_threshold);
  p.heatmaps_exported = j.value("heatmaps_exported", p.heatmaps_exported);
  p.fsd_features.l_max = j.value("fsd_l_max", p.fsd_features.l_max);
  p.fsd_features.include_sigma_omega = j.value("fsd_include_sigma_omega", p.fsd_features.include_sigma_omega);
  p.split = j.value("split", p.split);
  p.seed = j.value("seed", p.seed);
  p.validate();
  return p;
}

double stroke_color_l2(const StrokeSequence& pred, const Canvas& reference, int* excluded) {
  const int h = reference.height(), w = reference.width();
  double total = 0;
  int used = 0, skipped = 0;
  for (const auto& s : pred.strokes) {
    const AlphaFootprint fp = stroke_footprint(s, h, w);
    const double rho[3] = {s.r, s.g, s.b};
    double mass = 0, err = 0;
    for (int r = fp.row0; r < fp.row0 + fp.rows; ++r) {
      for (int c = fp.col0; c < fp.col0 + fp.cols; ++c) {
        const double a = fp.at(r, c);
        if (a <= 0.0) continue;
        double d2 = 0;
        for (int ch = 0; ch < 3; ++ch) {
          const double d = rho[ch] - reference.at(r, c, ch);
          d2 += d * d;
        }
        mass += a;
        err += a * d2;
      }
    }
    if (mass <= 0.0) {
      ++skipped;
      continue;
    }
    total += err / mass;
    ++used;
  }
  if (skipped > 0) spdlog::warn("stroke color L2: {} zero-area strokes excluded", skipped);
  if (excluded) *excluded = skipped;
  return used == 0 ? 0.0 : total / used;
}

double frechet_diagonal(const DiagonalGaussian& a, const DiagonalGaussian& b) {
  if (a.mu.size() != b.mu.size()) throw ag::ShapeError("fsd: feature dimensions differ");
  double d = 0;
  for (std::size_t i = 0; i < a.mu.size(); ++i) {
    const double dm = a.mu[i] - b.mu[i];
    d += dm * dm + a.var[i] + b.var[i] - 2.0 * std::sqrt(a.var[i] * b.var[i]);
  }
  return std::max(d, 0.0);
}

double fsd(std::span<const std::vector<double>> real, std::span<const std::vector<double>> pred) {
  return frechet_diagonal(fit_diag_gaussian(real), fit_diag_gaussian(pred));
}

double wasserstein_diagonal(const DiagonalGaussian& a, const DiagonalGaussian& b) {
  if (a.mu.size() != b.mu.size()) throw ag::ShapeError("wd: dimensions differ");
  double d = 0;
  for (std::size_t i = 0; i < a.mu.size(); ++i) {
    const double dm = a.mu[i] - b.mu[i];
    const double ds = std::sqrt(a.var[i]) - std::sqrt(b.var[i]);
    d += dm * dm + ds * ds;
  }
  return std::sqrt(d);
}

double wd(const StrokeSequence& gt, const StrokeSequence& pred) {
  const auto a = rows_of(gt), b = rows_of(pred);
  return wasserstein_diagonal(fit_diag_gaussian(a), fit_diag_gaussian(b));
}

double dtw(std::span<const std::vector<double>> a, std::span<const std::vector<double>> b) {
  if (a.empty() || b.empty()) throw std::invalid_argument("dtw needs non-empty sequences");
  const std::size_t n = a.size(), m = b.size();
  const double inf = std::numeric_limits<double>::infinity();
  std::vector<double> prev(m + 1, inf), cur(m + 1, inf);
  prev[0] = 0.0;
  for (std::size_t i = 1; i <= n; ++i) {
    cur[0] = inf;
    for (std::size_t j = 1; j <= m; ++j) {
      if (a[i - 1].size() != b[j - 1].size()) throw ag::ShapeError("dtw: row widths differ");
      double d2 = 0;
      for (std::size_t c = 0; c < a[i - 1].size(); ++c) {
        const double d = a[i - 1][c] - b[j - 1][c];
        d2 += d * d;
      }
      cur[j] = std::sqrt(d2) + std::min({prev[j], cur[j - 1], prev[j - 1]});
    }
    std::swap(prev, cur);
  }
  return prev[m];
}

double dtw(const StrokeSequence& gt, const StrokeSequence& pred) { return dtw(rows_of(gt), rows_of(pred)); }

double mean_row_l2(const StrokeSequence& a, const StrokeSequence& b) {
  if (a.size() != b.size() || a.empty()) throw ag::ShapeError("mean_row_l2: sequences must have equal length");
  double total = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const auto x = a.strokes[i].to_array(), y = b.strokes[i].to_array();
    double d2 = 0;
    for (std::size_t c = 0; c < x.size(); ++c) d2 += (x[c] - y[c]) * (x[c] - y[c]);
    total += std::sqrt(d2);
  }
  return total / static_cast<double>(a.size());
}

std::vector<std::vector<double>> ModelGenerator::draw_latents(int n, std::mt19937_64& rng) const {
  std::normal_distribution<double> normal;
  std::vector<std::vector<double>> z(n, std::vector<double>(model_.config().d_z));
  for (auto& row : z)
    for (auto& v : row) v = normal(rng);
  return z;
}

std::vector<StrokeSequence> ModelGenerator::decode(const ContextBundle& ctx,
                                                   const std::vector<std::vector<double>>& latents) const {
  ag::NoGradGuard guard;
  const ModelConfig& cfg = model_.config();
  const ModelBatch batch = make_batch(cfg, std::vector<ContextBundle>{ctx});
  const ContextEncoding enc = model_.encode_context(batch);
  std::vector<StrokeSequence> out;
  out.reserve(latents.size());
  for (std::size_t first = 0; first < latents.size(); first += chunk_) {
    const int m = static_cast<int>(std::min<std::size_t>(chunk_, latents.size() - first));
    std::vector<double> z;
    for (int i = 0; i < m; ++i) {
      const auto& row = latents[first + i];
      if (static_cast<int>(row.size()) != cfg.d_z) throw ag::ShapeError("latent width must equal d_z");
      z.insert(z.end(), row.begin(), row.end());
    }
    const ContextEncoding rep{ag::repeat_batch(enc.c, m), ag::repeat_batch(enc.features, m)};
    const Tensor strokes = model_.decode(Tensor::from({m, cfg.d_z}, std::move(z)), rep);
    const auto values = strokes.data();
    for (int i = 0; i < m; ++i) {
      out.push_back(StrokeSequence::from_rows(values.subspan(static_cast<std::size_t>(i) * cfg.k * 8, cfg.k * 8)));
    }
  }
  return out;
}

std::vector<StrokeSequence> ModelGenerator::sample(const ContextBundle& ctx, int n, std::mt19937_64& rng) const {
  return decode(ctx, draw_latents(n, rng));
}

std::vector<StrokeSequence> UniformRandomGenerator::sample(const ContextBundle&, int n, std::mt19937_64& rng) const {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::vector<StrokeSequence> out(n);
  for (auto& seq : out) {
    for (int i = 0; i < k_; ++i) {
      std::array<double, 8> a{};
      for (auto& v : a) v = u(rng);
      seq.strokes.push_back(Stroke::from_array(a));
    }
  }
  return out;
}

std::vector<StrokeSequence> RepeatLastGenerator::sample(const ContextBundle& ctx, int n, std::mt19937_64& rng) const {
  for (std::size_t i = ctx.strokes.size(); i-- > 0;) {
    if (ctx.valid[i]) {
      StrokeSequence seq;
      seq.strokes.assign(k_, ctx.strokes[i]);
      return std::vector<StrokeSequence>(n, seq);
    }
  }
  return UniformRandomGenerator(k_).sample(ctx, n, rng);
}

Top1Result top1_eval(const Generator& gen, const ContextBundle& ctx, const StrokeSequence& gt,
                     const EvalProtocol& protocol, std::mt19937_64& rng) {
  Top1Result r;
  r.candidates = gen.sample(ctx, protocol.top1_samples, rng);
  r.selection_distance = std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < r.candidates.size(); ++i) {
    const double d = mean_row_l2(gt, r.candidates[i]);
    if (d < r.selection_distance) {
      r.selection_distance = d;
      r.best_index = i;
    }
  }
  r.best = r.candidates[r.best_index];
  r.wd = std::numeric_limits<double>::infinity();
  r.dtw = std::numeric_limits<double>::infinity();
  for (const auto& c : r.candidates) {
    r.wd = std::min(r.wd, wd(gt, c));
    r.dtw = std::min(r.dtw, dtw(gt, c));
  }
  return r;
}

double pyramid_mse(const Canvas& a, const Canvas& b) {
  if (a.height() != b.height() || a.width() != b.width()) throw std::invalid_argument("pyramid_mse: sizes differ");
  auto mse = [](const std::vector<double>& x, const std::vector<double>& y) {
    double s = 0;
    for (std::size_t i = 0; i < x.size(); ++i) s += (x[i] - y[i]) * (x[i] - y[i]);
    return s / static_cast<double>(x.size());
  };
  auto down = [](const std::vector<double>& x, int h, int w) {
    const int h2 = h / 2, w2 = w / 2;
    std::vector<double> y(static_cast<std::size_t>(h2) * w2 * 3);
    for (int r = 0; r < h2; ++r)
      for (int c = 0; c < w2; ++c)
        for (int ch = 0; ch < 3; ++ch) {
          auto at = [&](int rr, int cc) { return x[(static_cast<std::size_t>(rr) * w + cc) * 3 + ch]; };
          y[(static_cast<std::size_t>(r) * w2 + c) * 3 + ch] =
              0.25 * (at(2 * r, 2 * c) + at(2 * r, 2 * c + 1) + at(2 * r + 1, 2 * c) + at(2 * r + 1, 2 * c + 1));
        }
    return y;
  };
  std::vector<double> x(a.pixels().begin(), a.pixels().end()), y(b.pixels().begin(), b.pixels().end());
  int h = a.height(), w = a.width();
  double total = 0;
  int levels = 0;
  for (int level = 0; level < 3; ++level) {
    total += mse(x, y);
    ++levels;
    if (h < 2 || w < 2) break;
    x = down(x, h, w);
    y = down(y, h, w);
    h /= 2;
    w /= 2;
  }
  return total / levels;
}

std::optional<double> pairwise_diversity(const std::vector<Canvas>& renders, const DistancePlugin& plugin) {
  if (renders.size() < 2) return 0.0;
  try {
    double total = 0;
    int pairs = 0;
    for (std::size_t i = 0; i < renders.size(); ++i)
      for (std::size_t j = i + 1; j < renders.size(); ++j) {
        total += plugin(renders[i], renders[j]);
        ++pairs;
      }
    return total / pairs;
  } catch (const std::exception& e) {
    spdlog::warn("diversity metric unavailable: {}", e.what());
    return std::nullopt;
  }
}

std::optional<double> diversity(const Generator& gen, const ContextBundle& ctx, const EvalProtocol& protocol,
                                std::mt19937_64& rng, const DistancePlugin& plugin) {
  std::vector<Canvas> renders;
  for (const auto& seq : gen.sample(ctx, protocol.diversity_samples, rng)) {
    renders.push_back(render_sequence(ctx.canvas, seq).canvas);
  }
  return pairwise_diversity(renders, plugin);
}

std::vector<double> coverage_heatmap(const std::vector<StrokeSequence>& samples, int height, int width,
                                     double threshold) {
  std::vector<int> counts(static_cast<std::size_t>(height) * width, 0);
  std::vector<char> covered(counts.size());
  for (const auto& seq : samples) {
    std::fill(covered.begin(), covered.end(), 0);
    for (const auto& s : seq.strokes) {
      const AlphaFootprint fp = stroke_footprint(s, height, width);
      for (int r = fp.row0; r < fp.row0 + fp.rows; ++r)
        for (int c = fp.col0; c < fp.col0 + fp.cols; ++c)
          if (fp.at(r, c) > threshold) covered[static_cast<std::size_t>(r) * width + c] = 1;
    }
    for (std::size_t i = 0; i < counts.size(); ++i) counts[i] += covered[i];
  }
  std::vector<double> out(counts.size());
  const double n = static_cast<double>(std::max<std::size_t>(1, samples.size()));
  for (std::size_t i = 0; i < counts.size(); ++i) out[i] = counts[i] / n;
  return out;
}

std::vector<double> heatmap(const Generator& gen, const ContextBundle& ctx, const EvalProtocol& protocol,
                            std::mt19937_64& rng) {
  return coverage_heatmap(gen.sample(ctx, protocol.heatmap_samples, rng), ctx.canvas.height(), ctx.canvas.width(),
                          protocol.heatmap_threshold);
}

double MetricReport::number(const std::string& key) const {
  auto it = entries.find(key);
  if (it == entries.end()) throw std::out_of_range("report has no entry " + key);
  return std::stod(it->second);
}

std::string MetricReport::to_text() const {
  std::string out;
  for (const auto& [k, v] : entries) out += k + "=" + v + "\n";
  return out;
}

MetricReport MetricReport::from_text(std::string_view text) {
  MetricReport r;
  std::istringstream in{std::string(text)};
  std::string line;
  while (std::getline(in, line)) {
    const auto eq = line.find('=');
    if (line.empty() || eq == std::string::npos) continue;
    r.entries[line.substr(0, eq)] = line.substr(eq + 1);
  }
  return r;
}

MetricReport evaluate(const Generator& gen, const DatasetManifest& manifest, const EvalProtocol& protocol,
                      CanvasSource& canvases, int k, const DistancePlugin& plugin) {
  protocol.validate();
  std::vector<TrainingWindow> windows;
  std::set<std::string> images;
  for (const DatasetRecord* r : manifest.split(protocol.split)) {
    const std::size_t T = r->sequence.size();
    if (T < static_cast<std::size_t>(2 * k)) continue;
    const std::size_t range = T - 2 * k + 1;
    const std::size_t want = std::min<std::size_t>(protocol.windows_per_image, range);
    std::mt19937_64 rng(mix(protocol.seed, fnv1a(r->id)));
    std::uniform_int_distribution<std::size_t> pick(k, T - k);
    std::set<std::size_t> ts;
    while (ts.size() < want) ts.insert(pick(rng));
    for (std::size_t t : ts) windows.push_back(make_window(*r, t, k));
    images.insert(r->id);
  }
  if (windows.empty()) throw std::runtime_error("evaluation split '" + protocol.split + "' has no usable records");

  struct Result {
    WindowMetrics m;
    std::vector<double> psi_real;
    std::vector<std::vector<double>> psi_pred;
    std::vector<double> heat;
    int excluded = 0;
  };
  std::vector<Result> results(windows.size());
  const int n = static_cast<int>(windows.size());
#pragma omp parallel for schedule(dynamic)
  for (int i = 0; i < n; ++i) {
    const TrainingWindow& w = windows[i];
    const ContextBundle ctx = canvases.bundle(w, k);
    std::mt19937_64 rng(mix(protocol.seed, fnv1a(w.record->id) + w.t));
    Result& res = results[i];
    const Top1Result top = top1_eval(gen, ctx, w.target, protocol, rng);
    res.m.record = w.record->id;
    res.m.t = w.t;
    res.m.wd = top.wd;
    res.m.dtw = top.dtw;
    res.m.l2 = stroke_color_l2(top.best, ctx.reference, &res.excluded);
    res.psi_real = stroke_features(concat(w.context, w.target), protocol.fsd_features);
    for (const auto& c : top.candidates) res.psi_pred.push_back(stroke_features(concat(w.context, c), protocol.fsd_features));
    res.m.diversity = diversity(gen, ctx, protocol, rng, plugin);
    if (i < protocol.heatmaps_exported) res.heat = heatmap(gen, ctx, protocol, rng);
  }

  MetricReport report;
  std::vector<double> l2, wds, dtws, divs;
  std::vector<std::vector<double>> real, pred;
  int excluded = 0;
  bool diversity_ok = true;
  for (auto& res : results) {
    l2.push_back(res.m.l2);
    wds.push_back(res.m.wd);
    dtws.push_back(res.m.dtw);
    if (res.m.diversity) {
      divs.push_back(*res.m.diversity);
    } else {
      diversity_ok = false;
    }
    real.push_back(std::move(res.psi_real));
    for (auto& p : res.psi_pred) pred.push_back(std::move(p));
    excluded += res.excluded;
    if (!res.heat.empty()) report.heatmaps.push_back(std::move(res.heat));
    report.windows.push_back(res.m);
  }
  report.heatmap_size = canvases.image_size();
  auto& e = report.entries;
  e["l2"] = format_number(mean_of(l2));
  e["wd"] = format_number(mean_of(wds));
  e["dtw"] = format_number(mean_of(dtws));
  e["fsd"] = real.size() >= 2 ? format_number(fsd(real, pred)) : "unavailable";
  e["diversity"] = diversity_ok ? format_number(mean_of(divs)) : "unavailable";
  e["windows"] = std::to_string(windows.size());
  e["images"] = std::to_string(images.size());
  e["l2_excluded_strokes"] = std::to_string(excluded);
  e["fsd_dim"] = std::to_string(real.front().size());
  e["protocol.windows_per_image"] = std::to_string(protocol.windows_per_image);
  e["protocol.top1_samples"] = std::to_string(protocol.top1_samples);
  e["protocol.diversity_samples"] = std::to_string(protocol.diversity_samples);
  e["protocol.heatmap_samples"] = std::to_string(protocol.heatmap_samples);
  e["protocol.heatmap_threshold"] = format_number(protocol.heatmap_threshold);
  e["protocol.fsd_l_max"] = std::to_string(protocol.fsd_features.l_max);
  e["protocol.fsd_include_sigma_omega"] = protocol.fsd_features.include_sigma_omega ? "true" : "false";
  e["protocol.split"] = protocol.split;
  e["protocol.seed"] = std::to_string(protocol.seed);
  return report;
}

void write_report(const std::filesystem::path& report_path, const MetricReport& report) {
  write_file_atomic(report_path, report.to_text());
  std::string rows = "record,t,l2,wd,dtw,diversity\n";
  for (const auto& w : report.windows) {
    rows += w.record + "," + std::to_string(w.t) + "," + format_number(w.l2) + "," + format_number(w.wd) + "," +
            format_number(w.dtw) + "," + (w.diversity ? format_number(*w.diversity) : "unavailable") + "\n";
  }
  write_file_atomic(report_path.string() + ".windows.csv", rows);
  for (std::size_t i = 0; i < report.heatmaps.size(); ++i) {
    const auto path = report_path.parent_path() /
                      (report_path.stem().string() + "_heatmap_" + std::to_string(i) + ".png");
    write_gray_png(path, report.heatmaps[i], report.heatmap_size, report.heatmap_size);
  }
}

}  // namespace paintnext
