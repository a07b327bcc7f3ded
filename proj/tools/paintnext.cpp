#include <spdlog/spdlog.h>

#include <csignal>
#include <condition_variable>
#include <iostream>
#include <mutex>
#include <thread>

#include "CLI11.hpp"
#include "json.hpp"
#include "paintnext/dataset.hpp"
#include "paintnext/evaluation.hpp"
#include "paintnext/fileio.hpp"
#include "paintnext/service.hpp"
#include "paintnext/synthetic.hpp"
#include "paintnext/trainer.hpp"

namespace fs = std::filesystem;
using namespace paintnext;

namespace {

DecompositionSchedule parse_schedule(const std::string& arg) {
  if (arg == "default") return DecompositionSchedule::default_schedule();
  const auto j = nlohmann::json::parse(read_file(arg));
  DecompositionSchedule s;
  s.grid_sizes = j.at("grid_sizes").get<std::vector<int>>();
  s.strokes_per_region = j.at("strokes_per_region").get<std::vector<int>>();
  s.sigma_max = j.value("sigma_max", s.sigma_max);
  s.validate();
  return s;
}

std::unique_ptr<InpModel> load_model(const fs::path& path) {
  const Checkpoint ckpt = load_checkpoint(path);
  auto model = std::make_unique<InpModel>(ckpt.config, 0);
  load_parameters(*model, ckpt);
  return model;
}

int build_dataset_cmd(const fs::path& images, const fs::path& masks, const fs::path& out, const std::string& schedule,
                      BuildOptions opts) {
  opts.schedule = parse_schedule(schedule);
  const DatasetManifest m = build_dataset(images, masks, out, opts);
  std::cout << "records=" << m.records.size() << " train=" << m.split(kTrainSplit).size()
            << " eval=" << m.split(kEvalSplit).size() << " manifest=" << (out / "manifest.json").string() << "\n";
  return 0;
}

int train_cmd(const fs::path& manifest_path, const fs::path& config_path, const fs::path& out,
              const std::string& resume, int log_every) {
  const DatasetManifest manifest = load_manifest(manifest_path);
  const TrainConfig config = TrainConfig::from_json(read_file(config_path));
  Trainer trainer(config, manifest, out, manifest_path.parent_path());
  if (!resume.empty()) trainer.resume(resume);
  spdlog::info("training {} steps from step {}", trainer.total_steps(), trainer.step());
  trainer.run(-1, [&](const StepLog& log) {
    if (log_every > 0 && (log.step % log_every == 0 || log.step + 1 == trainer.total_steps())) {
      spdlog::info("step {} lr {:.3g} recon {:.5f} kl {:.4f} col {:.5f} total {:.5f}", log.step, log.lr,
                   log.losses.recon, log.losses.kl, log.losses.col, log.losses.total);
    }
  });
  std::cout << "final=" << (out / "final.ckpt").string() << "\n";
  return 0;
}

int eval_cmd(const fs::path& checkpoint, const fs::path& manifest_path, const std::string& protocol_path,
             const fs::path& out, const std::string& generator) {
  const DatasetManifest manifest = load_manifest(manifest_path);
  const EvalProtocol protocol =
      protocol_path.empty() ? EvalProtocol{} : EvalProtocol::from_json(read_file(protocol_path));
  std::unique_ptr<InpModel> model;
  std::unique_ptr<Generator> gen;
  int k = 8, image_size = 256;
  if (generator == "model") {
    model = load_model(checkpoint);
    k = model->config().k;
    image_size = model->config().image_size;
    gen = std::make_unique<ModelGenerator>(*model);
  } else if (!checkpoint.empty()) {
    const Checkpoint ckpt = load_checkpoint(checkpoint);
    k = ckpt.config.k;
    image_size = ckpt.config.image_size;
  }
  if (generator == "uniform") gen = std::make_unique<UniformRandomGenerator>(k);
  if (generator == "repeat-last") gen = std::make_unique<RepeatLastGenerator>(k);
  if (!gen) throw std::invalid_argument("unknown generator " + generator);
  CanvasSource canvases(image_size, manifest_path.parent_path());
  const MetricReport report = evaluate(*gen, manifest, protocol, canvases, k);
  write_report(out, report);
  std::cout << report.to_text();
  return 0;
}

int serve_cmd(const fs::path& checkpoint, const std::string& host, int port, std::uint64_t seed,
              const std::string& snapshot_dir, int idle_minutes, int heatmap_samples) {
  // Signals are taken synchronously by this thread; worker threads inherit the mask.
  sigset_t signals;
  sigemptyset(&signals);
  sigaddset(&signals, SIGINT);
  sigaddset(&signals, SIGTERM);
  pthread_sigmask(SIG_BLOCK, &signals, nullptr);

  std::shared_ptr<const InpModel> model = load_model(checkpoint);
  ServiceOptions opts;
  opts.seed = seed;
  opts.heatmap_samples = heatmap_samples;
  opts.idle_timeout = std::chrono::minutes(idle_minutes);
  SuggestionService service(model, opts);
  if (!snapshot_dir.empty()) spdlog::info("restored {} sessions", service.restore(snapshot_dir));

  ServiceHttpServer server(service);
  const int bound = server.bind(host, port);
  if (bound < 0) {
    spdlog::error("cannot bind {}:{}", host, port);
    return 1;
  }
  spdlog::info("serving on http://{}:{} (model image size {}, k {})", host, bound, service.image_size(), service.k());
  std::thread http([&] { server.listen(); });

  std::mutex mu;
  std::condition_variable cv;
  bool done = false;
  std::thread housekeeping([&] {
    std::unique_lock lock(mu);
    while (!cv.wait_for(lock, std::chrono::seconds(60), [&] { return done; })) {
      service.expire_idle();
      if (!snapshot_dir.empty()) service.snapshot(snapshot_dir);
    }
  });

  int sig = 0;
  sigwait(&signals, &sig);
  spdlog::info("signal {}, shutting down", sig);
  server.stop();
  http.join();
  {
    std::lock_guard lock(mu);
    done = true;
  }
  cv.notify_all();
  housekeeping.join();
  if (!snapshot_dir.empty()) service.snapshot(snapshot_dir);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"paintnext: next-stroke prediction for interactive painting"};
  app.require_subcommand(1);

  auto* build = app.add_subcommand("build-dataset", "Decompose images into ordered stroke sequences");
  fs::path images, masks, out;
  std::string schedule = "default";
  BuildOptions build_opts;
  build->add_option("--images", images, "Directory of PNG images")->required();
  build->add_option("--masks", masks, "Directory of same-named PNG subject masks")->required();
  build->add_option("--out", out, "Output directory")->required();
  build->add_option("--schedule", schedule, "'default' or a JSON file with grid_sizes/strokes_per_region");
  build->add_option("--seed", build_opts.seed, "Fitter seed");
  build->add_option("--workers", build_opts.workers, "Worker threads")->check(CLI::PositiveNumber);
  build->add_option("--split-ratio", build_opts.split_ratio, "Fraction of images used for training");
  build->add_option("--render-size", build_opts.render_size, "Resolution of the stored render checksums");
  build->add_option("--working-size", build_opts.fitter.working_size, "Fitting resolution");

  auto* train = app.add_subcommand("train", "Train the model");
  fs::path manifest, config;
  std::string resume;
  int log_every = 50;
  train->add_option("--manifest", manifest)->required()->check(CLI::ExistingFile);
  train->add_option("--config", config, "Training config JSON")->required()->check(CLI::ExistingFile);
  train->add_option("--out", out)->required();
  train->add_option("--resume", resume, "Checkpoint to resume from")->check(CLI::ExistingFile);
  train->add_option("--log-every", log_every);

  auto* eval = app.add_subcommand("eval", "Compute the metric suite on a split");
  fs::path checkpoint, report;
  std::string protocol, generator = "model";
  eval->add_option("--checkpoint", checkpoint)->check(CLI::ExistingFile);
  eval->add_option("--manifest", manifest)->required()->check(CLI::ExistingFile);
  eval->add_option("--protocol", protocol, "Protocol JSON; defaults when omitted")->check(CLI::ExistingFile);
  eval->add_option("--out", report, "Report path")->required();
  eval->add_option("--generator", generator, "model, uniform or repeat-last")
      ->check(CLI::IsMember({"model", "uniform", "repeat-last"}));

  auto* serve = app.add_subcommand("serve", "Run the suggestion HTTP service");
  std::string host = "127.0.0.1", snapshot_dir;
  int port = 8080, idle_minutes = 0, heatmap_samples = 500;
  std::uint64_t seed = 0;
  serve->add_option("--checkpoint", checkpoint)->required()->check(CLI::ExistingFile);
  serve->add_option("--port", port)->check(CLI::Range(0, 65535));
  serve->add_option("--seed", seed);
  serve->add_option("--host", host);
  serve->add_option("--snapshot-dir", snapshot_dir, "Persist sessions here");
  serve->add_option("--idle-minutes", idle_minutes, "Drop sessions idle this long; 0 keeps them");
  serve->add_option("--heatmap-samples", heatmap_samples)->check(CLI::PositiveNumber);

  auto* synth = app.add_subcommand("synth-corpus", "Write procedural images and masks");
  int count = 10, size = 256;
  synth->add_option("--out", out)->required();
  synth->add_option("--count", count)->check(CLI::PositiveNumber);
  synth->add_option("--seed", seed);
  synth->add_option("--size", size)->check(CLI::PositiveNumber);

  auto* defaults = app.add_subcommand("defaults", "Print a default train config or eval protocol");
  std::string kind = "train";
  defaults->add_option("kind", kind)->check(CLI::IsMember({"train", "protocol"}));

  CLI11_PARSE(app, argc, argv);
  try {
    if (*build) return build_dataset_cmd(images, masks, out, schedule, build_opts);
    if (*train) return train_cmd(manifest, config, out, resume, log_every);
    if (*eval) {
      if (generator == "model" && checkpoint.empty()) throw std::invalid_argument("--checkpoint is required");
      return eval_cmd(checkpoint, manifest, protocol, report, generator);
    }
    if (*serve) return serve_cmd(checkpoint, host, port, seed, snapshot_dir, idle_minutes, heatmap_samples);
    if (*synth) {
      write_synthetic_corpus(out / "images", out / "masks", count, seed, size);
      std::cout << "images=" << (out / "images").string() << " masks=" << (out / "masks").string() << "\n";
      return 0;
    }
    if (*defaults) {
      std::cout << (kind == "train" ? TrainConfig{}.to_json() : EvalProtocol{}.to_json()) << "\n";
      return 0;
    }
  } catch (const std::exception& e) {
    spdlog::error("{}", e.what());
    return 1;
  }
  return 0;
}
