#pragma once

#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <numeric>
#include <optional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "canet/core/optim.hpp"
#include "canet/core/rng.hpp"
#include "canet/data/dataset.hpp"
#include "canet/data/image.hpp"
#include "canet/loss/supervision.hpp"
#include "canet/nn/cod_network.hpp"
#include "canet/nn/confidence_network.hpp"
#include "canet/train/checkpoint.hpp"
#include "canet/train/config.hpp"

namespace canet {

class NonFiniteLoss : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct Batch {
  Tensor<float> images;  // N x 3 x H x W
  Tensor<float> masks;   // N x 1 x H x W, binary
};

struct StepStats {
  double loss_s = 0;
  double loss_c = 0;
  double mean_yc = 0;
  double lambda = 0;
};

struct EpochLog {
  int epoch = 0;
  double loss_s = 0;
  double loss_c = 0;
  double mean_yc = 0;
  double lambda = 0;
  double seconds = 0;
};

inline constexpr const char* kEpochLogHeader = "epoch,loss_s,loss_c,mean_yc,lambda,seconds";

inline std::string to_csv_row(const EpochLog& r) {
  char buf[256];
  std::snprintf(buf, sizeof buf, "%d,%.8g,%.8g,%.8g,%.8g,%.3f", r.epoch, r.loss_s, r.loss_c, r.mean_yc, r.lambda,
                r.seconds);
  return buf;
}

inline Batch make_batch(const std::vector<LabeledImage>& data, const std::vector<std::size_t>& indices) {
  std::vector<const Image*> images, masks;
  for (auto i : indices) {
    images.push_back(&data.at(i).image);
    masks.push_back(&data.at(i).mask);
  }
  return {to_tensor<float>(images), to_tensor<float>(masks)};
}

/// Splits a permutation into batches; a remainder too small for batch
/// statistics is folded into the last full batch.
inline std::vector<std::vector<std::size_t>> split_batches(const std::vector<std::size_t>& order,
                                                           std::size_t batch_size) {
  if (order.size() < TrainConfig::kMinBatch) {
    throw std::invalid_argument("training set needs at least " + std::to_string(TrainConfig::kMinBatch) + " samples");
  }
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t i = 0; i < order.size(); i += batch_size) {
    const auto end = std::min(order.size(), i + batch_size);
    std::vector<std::size_t> b(order.begin() + static_cast<std::ptrdiff_t>(i), order.begin() + static_cast<std::ptrdiff_t>(end));
    if (b.size() < TrainConfig::kMinBatch && !out.empty()) {
      out.back().insert(out.back().end(), b.begin(), b.end());
    } else {
      out.push_back(std::move(b));
    }
  }
  return out;
}

struct Prediction {
  Tensor<float> y_ref;  // N x 1 x H x W
  Tensor<float> c_ref;  // N x 1 x H x W, high where the prediction is likely wrong
};

/// Owns both networks, their optimizers and the training random stream.
class Trainer {
 public:
  explicit Trainer(TrainConfig cfg) : cfg_(std::move(cfg)) {
    cfg_.validate();
    Rng init(cfg_.seed);
    cod_ = nn::CodNetwork<float>(cod_store_, cfg_.cod_config(), init);
    conf_ = nn::ConfidenceNetwork<float>(conf_store_, cfg_.conf_config(), init);
    cod_opt_ = Adam<float>(cod_store_, AdamHyper{cfg_.lr_cod * cfg_.lr_scale});
    conf_opt_ = Adam<float>(conf_store_, AdamHyper{cfg_.lr_conf * cfg_.lr_scale});
    rng_ = Rng(cfg_.seed ^ 0x5deece66dull);
  }

  static Trainer from_checkpoint(const Checkpoint& ck) {
    Trainer t(config_from_json(ck.meta.at("config")));
    t.load_state(ck);
    return t;
  }

  const TrainConfig& config() const noexcept { return cfg_; }
  int epoch() const noexcept { return epoch_; }
  ParamStore<float>& cod_store() noexcept { return cod_store_; }
  ParamStore<float>& conf_store() noexcept { return conf_store_; }
  const nn::CodNetwork<float>& cod() const noexcept { return cod_; }
  const nn::ConfidenceNetwork<float>& conf() const noexcept { return conf_; }
  Rng& rng() noexcept { return rng_; }

  /// One alternating update: detector forward, confidence targets, confidence
  /// update, fresh confidence maps, weighted detector update.
  StepStats train_step(const Batch& batch, int epoch) {
    const auto supervision = cfg_.loss.supervision;
    const bool train_cem = supervision != loss::SupervisionMode::none && cfg_.cem_updates;
    // Both sub-seeds are drawn every step so every mode consumes the stream identically.
    Rng dropout_rng(rng_.next());
    Rng perturb_rng(rng_.next());

    StepStats st;
    st.lambda = cfg_.lambda_at(epoch);
    auto image = constant(batch.images);
    const Tensor<float>& y = batch.masks;

    Tape<float> cod_tape;
    auto out = cod_(cod_tape, image, nn::Mode{true, nullptr});
    const auto yc_ini = loss::dynamic_supervision(y, out.y_ini->value);
    const auto yc_ref = loss::dynamic_supervision(y, out.y_ref->value);
    st.mean_yc = 0.5 * (mean_of(yc_ini) + mean_of(yc_ref));
    auto pred_ini = detach(out.y_ini);
    auto pred_ref = detach(out.y_ref);

    if (train_cem) {
      Tape<float> tape;
      const nn::Mode train_mode{true, &dropout_rng};
      Var<float> lc;
      if (supervision == loss::SupervisionMode::dynamic) {
        auto c_ini = conf_(tape, image, pred_ini, train_mode);
        auto c_ref = conf_(tape, image, pred_ref, train_mode);
        lc = loss::confidence_loss(tape, c_ini, c_ref, yc_ini, yc_ref);
      } else {
        auto y_soft = constant(loss::perturb_labels(y, cfg_.loss.perturbation_band, perturb_rng));
        auto d_ini = conf_(tape, image, pred_ini, train_mode);
        auto d_ref = conf_(tape, image, pred_ref, train_mode);
        auto d_gt = conf_(tape, image, y_soft, train_mode);
        lc = loss::adversarial_confidence_loss(tape, d_ini, d_ref, d_gt);
      }
      st.loss_c = lc->value[0];
      require_finite(st.loss_c, supervision == loss::SupervisionMode::dynamic ? "L_c" : "L_c'", epoch);
      conf_store_.zero_grad();
      tape.backward(lc);
      conf_opt_.step(conf_store_);
    }

    Tensor<float> w_ini(y.shape(), 1.0f), w_ref(y.shape(), 1.0f);
    if (supervision != loss::SupervisionMode::none && st.lambda != 0.0) {
      w_ini = loss::confidence_weight(confidence_map(image, pred_ini), st.lambda);
      w_ref = loss::confidence_weight(confidence_map(image, pred_ref), st.lambda);
    }

    auto ls = loss::structure_loss_pair(cod_tape, out.y_ini, out.y_ref, y, w_ini, w_ref, cfg_.loss.dice_smoothing);
    st.loss_s = ls->value[0];
    require_finite(st.loss_s, "L_s", epoch);
    cod_store_.zero_grad();
    cod_tape.backward(ls);
    cod_opt_.step(cod_store_);
    return st;
  }

  /// Runs epoch `epoch() + 1` over the data in a seed-derived order.
  EpochLog run_epoch(const std::vector<LabeledImage>& data) {
    const auto start = std::chrono::steady_clock::now();
    const int t = epoch_ + 1;
    std::vector<std::size_t> order(data.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng_.below(i)]);

    EpochLog log;
    log.epoch = t;
    log.lambda = cfg_.lambda_at(t);
    const auto batches = split_batches(order, cfg_.batch_size);
    for (const auto& idx : batches) {
      const auto st = train_step(make_batch(data, idx), t);
      log.loss_s += st.loss_s;
      log.loss_c += st.loss_c;
      log.mean_yc += st.mean_yc;
    }
    const double n = static_cast<double>(batches.size());
    log.loss_s /= n;
    log.loss_c /= n;
    log.mean_yc /= n;
    epoch_ = t;
    log.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    return log;
  }

  /// Eval-mode forward of both networks. The adversarial variant reports
  /// distance from the undecided discriminator output as its uncertainty.
  Prediction predict(const Tensor<float>& images) const {
    auto image = constant(images);
    Tape<float> tape(false);
    auto out = cod_(tape, image, nn::Mode{false, nullptr});
    auto pred = detach(out.y_ref);
    return {out.y_ref->value, confidence_map(image, pred)};
  }

  Checkpoint snapshot() const {
    Checkpoint ck;
    ck.meta = {{"config", to_json(cfg_)},
               {"epoch", epoch_},
               {"rng", rng_.state()},
               {"optim", {{"cod_step", cod_opt_.step_count()}, {"conf_step", conf_opt_.step_count()}}}};
    auto add_store = [&](const ParamStore<float>& s) {
      for (const auto& e : s.params()) ck.tensors.push_back(NamedTensor::from(e.name, e.var->value));
      for (const auto& e : s.buffers()) ck.tensors.push_back(NamedTensor::from(e.name, e.var->value));
    };
    auto add_optim = [&](const std::string& prefix, const ParamStore<float>& s, const Adam<float>& opt) {
      for (std::size_t k = 0; k < s.params().size(); ++k) {
        ck.tensors.push_back(NamedTensor::from(prefix + ".m/" + s.params()[k].name, opt.first_moments()[k]));
        ck.tensors.push_back(NamedTensor::from(prefix + ".v/" + s.params()[k].name, opt.second_moments()[k]));
      }
    };
    add_store(cod_store_);
    add_store(conf_store_);
    add_optim("adam.cod", cod_store_, cod_opt_);
    add_optim("adam.conf", conf_store_, conf_opt_);
    return ck;
  }

  /// Overwrites all state from a checkpoint taken with compatible shapes.
  void load_state(const Checkpoint& ck) {
    auto fetch = [&](const std::string& name, Tensor<float>& dst) {
      const auto* nt = ck.find(name);
      if (!nt) throw CheckpointError("checkpoint lacks tensor " + name);
      if (nt->shape != dst.shape()) {
        throw CheckpointError("shape mismatch for tensor " + name + ": checkpoint " + to_string(nt->shape) +
                              ", model " + to_string(dst.shape()));
      }
      dst = nt->to<float>();
    };
    auto load_store = [&](ParamStore<float>& s) {
      for (const auto& e : s.params()) fetch(e.name, e.var->value);
      for (const auto& e : s.buffers()) fetch(e.name, e.var->value);
    };
    auto load_optim = [&](const std::string& prefix, ParamStore<float>& s, Adam<float>& opt) {
      for (std::size_t k = 0; k < s.params().size(); ++k) {
        fetch(prefix + ".m/" + s.params()[k].name, opt.first_moments()[k]);
        fetch(prefix + ".v/" + s.params()[k].name, opt.second_moments()[k]);
      }
    };
    load_store(cod_store_);
    load_store(conf_store_);
    load_optim("adam.cod", cod_store_, cod_opt_);
    load_optim("adam.conf", conf_store_, conf_opt_);
    try {
      epoch_ = ck.meta.at("epoch").get<int>();
      rng_.set_state(ck.meta.at("rng").get<std::string>());
      cod_opt_.set_step_count(ck.meta.at("optim").at("cod_step").get<std::uint64_t>());
      conf_opt_.set_step_count(ck.meta.at("optim").at("conf_step").get<std::uint64_t>());
    } catch (const nlohmann::json::exception& e) {
      throw CheckpointError(std::string("malformed checkpoint state: ") + e.what());
    }
  }

 private:
  static double mean_of(const Tensor<float>& t) {
    double s = 0;
    for (float v : t.data()) s += v;
    return s / static_cast<double>(t.size());
  }

  static void require_finite(double v, const char* term, int epoch) {
    if (!std::isfinite(v)) {
      throw NonFiniteLoss("non-finite loss " + std::string(term) + " at epoch " + std::to_string(epoch));
    }
  }

  Tensor<float> confidence_map(const Var<float>& image, const Var<float>& pred) const {
    Tape<float> tape(false);
    auto c = conf_(tape, image, pred, nn::Mode{false, nullptr})->value;
    if (cfg_.loss.supervision == loss::SupervisionMode::adversarial) c = loss::adversarial_confidence(c);
    return c;
  }

  TrainConfig cfg_;
  ParamStore<float> cod_store_, conf_store_;
  nn::CodNetwork<float> cod_;
  nn::ConfidenceNetwork<float> conf_;
  Adam<float> cod_opt_, conf_opt_;
  Rng rng_;
  int epoch_ = 0;
};

struct TrainOptions {
  std::optional<std::filesystem::path> checkpoint_path;
  std::optional<std::filesystem::path> log_path;
  std::function<void(const EpochLog&)> on_epoch;
};

/// Trains from the trainer's current epoch to the configured epoch count.
/// The log file is appended to, so a resumed run continues the same CSV.
inline std::vector<EpochLog> train(Trainer& trainer, const std::vector<LabeledImage>& data,
                                   const TrainOptions& opt = {}) {
  const auto& cfg = trainer.config();
  for (const auto& s : data) {
    if (s.image.height != cfg.image_size || s.image.width != cfg.image_size) {
      throw ShapeError("sample " + s.id + " is " + std::to_string(s.image.width) + "x" +
                       std::to_string(s.image.height) + ", config expects " + std::to_string(cfg.image_size));
    }
  }
  std::ofstream log_file;
  if (opt.log_path) {
    const bool fresh = !std::filesystem::exists(*opt.log_path) || trainer.epoch() == 0;
    log_file.open(*opt.log_path, fresh ? std::ios::trunc : std::ios::app);
    if (!log_file) throw IoError("cannot open log " + opt.log_path->string());
    if (fresh) log_file << kEpochLogHeader << '\n';
  }
  std::vector<EpochLog> rows;
  while (trainer.epoch() < cfg.epochs) {
    rows.push_back(trainer.run_epoch(data));
    if (log_file.is_open()) log_file << to_csv_row(rows.back()) << std::endl;
    if (opt.on_epoch) opt.on_epoch(rows.back());
    if (opt.checkpoint_path && cfg.checkpoint_every > 0 && trainer.epoch() % cfg.checkpoint_every == 0) {
      save_checkpoint(*opt.checkpoint_path, trainer.snapshot());
    }
  }
  if (opt.checkpoint_path) save_checkpoint(*opt.checkpoint_path, trainer.snapshot());
  return rows;
}

}  // namespace canet
