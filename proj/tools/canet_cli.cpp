// canet command-line driver: dataset generation, training, evaluation,
// single-image inference and the gradient self-check.

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "canet/canet.hpp"

namespace fs = std::filesystem;
using namespace canet;

namespace {

constexpr int kExitUsage = 1;
constexpr int kExitRuntime = 2;

/// Errors go to stderr as one JSON object per line.
void report_error(const std::string& kind, const std::string& message) {
  std::cerr << nlohmann::json{{"error", kind}, {"message", message}}.dump() << std::endl;
}

struct GenerateArgs {
  std::string out;
  std::size_t count = 0;
  std::size_t size = 64;
  std::uint64_t seed = 0;
  double difficulty = 0.5;
};

struct TrainArgs {
  std::string data, config, out, mode, resume, log;
  std::optional<double> lr_scale;
  std::optional<int> epochs;
};

struct EvalArgs {
  std::string ckpt, data, report, pred_dir;
};

struct InferArgs {
  std::string ckpt, image, pred, conf;
};

struct GradcheckArgs {
  double tol = 1e-3;
  std::uint64_t seed = 2024;
};

int run_generate(const GenerateArgs& a) {
  const auto m = generate_dataset(a.out, a.count, a.size, a.seed, a.difficulty);
  std::printf("wrote %zu samples of %zux%zu to %s\n", m.count, m.size, m.size, a.out.c_str());
  return 0;
}

TrainConfig load_config(const std::string& path) {
  if (path.empty()) return {};
  if (!fs::exists(path)) throw IoError("missing config file " + path);
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(read_file(path));
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("config " + path + ": " + e.what());
  }
  return config_from_json(j);
}

int run_train(const TrainArgs& a) {
  const auto data = load_dataset(a.data);
  std::optional<Trainer> trainer;
  if (!a.resume.empty()) {
    auto ck = load_checkpoint(a.resume);
    if (a.epochs) ck.meta["config"]["epochs"] = *a.epochs;
    trainer.emplace(Trainer::from_checkpoint(ck));
  } else {
    TrainConfig cfg = load_config(a.config);
    if (!a.mode.empty()) cfg.set_mode(parse_mode(a.mode));
    if (a.lr_scale) cfg.lr_scale = *a.lr_scale;
    if (a.epochs) cfg.epochs = *a.epochs;
    trainer.emplace(std::move(cfg));
  }
  TrainOptions opt;
  opt.checkpoint_path = fs::path(a.out);
  if (!a.log.empty()) opt.log_path = fs::path(a.log);
  opt.on_epoch = [](const EpochLog& r) {
    std::printf("epoch %d  L_s %.5f  L_c %.5f  mean_yc %.5f  lambda %g  %.1fs\n", r.epoch, r.loss_s, r.loss_c,
                r.mean_yc, r.lambda, r.seconds);
    std::fflush(stdout);
  };
  train(*trainer, data, opt);
  std::printf("checkpoint written to %s\n", a.out.c_str());
  return 0;
}

Trainer load_trainer(const std::string& ckpt) { return Trainer::from_checkpoint(load_checkpoint(ckpt)); }

int run_eval(const EvalArgs& a) {
  const Trainer trainer = load_trainer(a.ckpt);
  const auto data = load_dataset(a.data);
  const std::size_t size = trainer.config().image_size;
  if (!a.pred_dir.empty()) fs::create_directories(a.pred_dir);
  std::vector<metrics::ScoredPair> pairs;
  constexpr std::size_t kChunk = 10;
  for (std::size_t start = 0; start < data.size(); start += kChunk) {
    std::vector<std::size_t> idx;
    for (std::size_t i = start; i < std::min(data.size(), start + kChunk); ++i) {
      if (data[i].image.height != size || data[i].image.width != size) {
        throw ShapeError("sample " + data[i].id + " does not match the checkpoint image size " +
                         std::to_string(size));
      }
      idx.push_back(i);
    }
    const auto p = trainer.predict(make_batch(data, idx).images);
    for (std::size_t k = 0; k < idx.size(); ++k) {
      Image pred = from_tensor(p.y_ref, k);
      if (!a.pred_dir.empty()) write_pgm(fs::path(a.pred_dir) / ("pred_" + data[idx[k]].id + ".pgm"), pred);
      pairs.push_back({data[idx[k]].id, std::move(pred), data[idx[k]].mask});
    }
  }
  const auto report = metrics::evaluate(std::move(pairs));
  write_file(a.report, metrics::to_csv(report));
  const auto& g = report.aggregate;
  std::printf("%zu images  MAE %.4f  mean-F %.4f  mean-E %.4f  S %.4f\n", report.rows.size(), g.mae, g.mean_f,
              g.mean_e, g.s_measure);
  return 0;
}

int run_infer(const InferArgs& a) {
  const Trainer trainer = load_trainer(a.ckpt);
  const Image image = read_ppm(a.image);
  const std::size_t size = trainer.config().image_size;
  if (image.height != size || image.width != size) {
    throw ShapeError("image " + a.image + " is " + std::to_string(image.width) + "x" + std::to_string(image.height) +
                     ", checkpoint expects " + std::to_string(size) + "x" + std::to_string(size));
  }
  const auto p = trainer.predict(to_tensor<float>({&image}));
  write_pgm(a.pred, from_tensor(p.y_ref, 0));
  write_pgm(a.conf, from_tensor(p.c_ref, 0));
  return 0;
}

int run_gradcheck(const GradcheckArgs& a) {
  GradSuiteOptions opt;
  opt.seed = a.seed;
  bool ok = true;
  std::printf("%-32s %12s %8s %8s %8s\n", "operation", "max_rel_err", "coords", "skipped", "seconds");
  opt.on_row = [&](const GradSuiteRow& r) {
    const bool pass = r.max_rel_error < a.tol;
    ok = ok && pass;
    std::printf("%-32s %12.3e %8zu %8zu %8.2f %s\n", r.name.c_str(), r.max_rel_error, r.coords, r.skipped, r.seconds,
                pass ? "ok" : "FAIL");
    std::fflush(stdout);
  };
  run_grad_suite(opt);
  if (!ok) {
    report_error("gradcheck", "at least one operation exceeded tolerance " + std::to_string(a.tol));
    return kExitRuntime;
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"canet: camouflaged object detection with confidence estimation"};
  app.require_subcommand(1);

  GenerateArgs gen;
  auto* g = app.add_subcommand("generate", "Write a synthetic camouflage dataset");
  g->add_option("--out", gen.out, "Output directory")->required();
  g->add_option("--count", gen.count, "Number of samples")->required();
  g->add_option("--size", gen.size, "Image side length")->capture_default_str();
  g->add_option("--seed", gen.seed, "Base seed; sample i uses seed + i")->capture_default_str();
  g->add_option("--difficulty", gen.difficulty, "Camouflage strength in [0, 1]")
      ->check(CLI::Range(0.0, 1.0))
      ->capture_default_str();

  TrainArgs tr;
  auto* t = app.add_subcommand("train", "Train both networks");
  t->add_option("--data", tr.data, "Dataset directory")->required();
  t->add_option("--config", tr.config, "JSON training config (defaults when omitted)");
  t->add_option("--out", tr.out, "Checkpoint path")->required();
  t->add_option("--mode", tr.mode, "ours, m1, m2 or m3 (overrides the config)")
      ->check(CLI::IsMember({"ours", "m1", "m2", "m3"}));
  t->add_option("--resume", tr.resume, "Continue from this checkpoint");
  t->add_option("--log", tr.log, "Per-epoch CSV log");
  t->add_option("--lr-scale", tr.lr_scale, "Learning-rate multiplier");
  t->add_option("--epochs", tr.epochs, "Override the epoch count");

  EvalArgs ev;
  auto* e = app.add_subcommand("eval", "Score a checkpoint on a dataset");
  e->add_option("--ckpt", ev.ckpt, "Checkpoint")->required();
  e->add_option("--data", ev.data, "Dataset directory")->required();
  e->add_option("--report", ev.report, "CSV report path")->required();
  e->add_option("--pred-dir", ev.pred_dir, "Also write pred_<id>.pgm files here");

  InferArgs in;
  auto* i = app.add_subcommand("infer", "Predict one image");
  i->add_option("--ckpt", in.ckpt, "Checkpoint")->required();
  i->add_option("--image", in.image, "Input PPM")->required();
  i->add_option("--pred", in.pred, "Output prediction PGM")->required();
  i->add_option("--conf", in.conf, "Output confidence PGM")->required();

  GradcheckArgs gc;
  auto* c = app.add_subcommand("gradcheck", "Finite-difference check of every differentiable operation");
  c->add_option("--tol", gc.tol, "Maximum relative error")->capture_default_str();
  c->add_option("--seed", gc.seed, "Random seed")->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& err) {
    return app.exit(err);
  } catch (const CLI::ParseError& err) {
    report_error("usage", err.what());
    std::cerr << app.help();
    return kExitUsage;
  }

  try {
    if (*g) return run_generate(gen);
    if (*t) return run_train(tr);
    if (*e) return run_eval(ev);
    if (*i) return run_infer(in);
    if (*c) return run_gradcheck(gc);
  } catch (const ConfigError& err) {
    report_error("config", err.what());
    return kExitRuntime;
  } catch (const IoError& err) {
    report_error("io", err.what());
    return kExitRuntime;
  } catch (const CheckpointError& err) {
    report_error("checkpoint", err.what());
    return kExitRuntime;
  } catch (const std::exception& err) {
    report_error("runtime", err.what());
    return kExitRuntime;
  }
  return kExitUsage;
}
