#pragma once

#include <array>
#include <cstdint>
#include <stdexcept>
#include <string>

#include <nlohmann/json.hpp>

#include "canet/loss/supervision.hpp"
#include "canet/nn/cod_network.hpp"
#include "canet/nn/confidence_network.hpp"

namespace canet {

/// Which lines of the alternating update run.
///   ours: dynamic supervision, confidence-weighted structure loss
///   m1:   no refinement branch, lambda 0, confidence network untouched
///   m2:   full detector, lambda 0, confidence network untouched
///   m3:   confidence network trained as a discriminator on perturbed labels
enum class TrainMode { ours, m1, m2, m3 };

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

inline std::string to_string(TrainMode m) {
  switch (m) {
    case TrainMode::ours: return "ours";
    case TrainMode::m1: return "m1";
    case TrainMode::m2: return "m2";
    case TrainMode::m3: return "m3";
  }
  return "?";
}

inline TrainMode parse_mode(const std::string& s) {
  if (s == "ours") return TrainMode::ours;
  if (s == "m1") return TrainMode::m1;
  if (s == "m2") return TrainMode::m2;
  if (s == "m3") return TrainMode::m3;
  throw ConfigError("unknown mode '" + s + "' (expected ours, m1, m2 or m3)");
}

inline loss::SupervisionMode supervision_for(TrainMode m) {
  switch (m) {
    case TrainMode::ours: return loss::SupervisionMode::dynamic;
    case TrainMode::m3: return loss::SupervisionMode::adversarial;
    default: return loss::SupervisionMode::none;
  }
}

struct TrainConfig {
  int epochs = 20;
  std::size_t batch_size = 10;
  double lr_cod = 2.5e-5;
  double lr_conf = 1.5e-5;
  double lr_scale = 20.0;
  std::size_t image_size = 64;
  loss::LossConfig loss;
  std::uint64_t seed = 0;
  int checkpoint_every = 0;  // 0: only at the end
  TrainMode mode = TrainMode::ours;
  // Disabling this with lambda 0 reduces `ours` to the m2 trajectory.
  bool cem_updates = true;
  std::array<std::size_t, 5> cod_widths{16, 32, 64, 64, 64};
  std::size_t fusion_width = 32;
  std::array<std::size_t, 5> conf_widths{8, 16, 32, 32, 32};

  static constexpr std::size_t kMinBatch = 4;

  void validate() const {
    if (epochs < 0) throw ConfigError("epochs must be >= 0");
    if (batch_size < kMinBatch) throw ConfigError("batch_size must be >= 4 for batch statistics");
    if (image_size == 0 || image_size % 32 != 0) throw ConfigError("image_size must be a positive multiple of 32");
    if (!(lr_cod > 0 && lr_conf > 0 && lr_scale > 0)) throw ConfigError("learning rates must be positive");
    if (checkpoint_every < 0) throw ConfigError("checkpoint_every must be >= 0");
    loss.validate();
    if (loss.supervision != supervision_for(mode)) {
      throw ConfigError("loss.supervision is inconsistent with mode " + to_string(mode));
    }
  }

  /// Sets the mode and the supervision it implies.
  void set_mode(TrainMode m) {
    mode = m;
    loss.supervision = supervision_for(m);
  }

  nn::CodConfig cod_config() const {
    nn::CodConfig c;
    c.image_size = image_size;
    c.widths = cod_widths;
    c.fusion_width = fusion_width;
    c.refine = mode != TrainMode::m1;
    return c;
  }

  nn::ConfConfig conf_config() const {
    nn::ConfConfig c;
    c.image_size = image_size;
    c.widths = conf_widths;
    return c;
  }

  /// Lambda actually applied at epoch t; m1/m2 never weight the loss.
  double lambda_at(int epoch) const {
    if (mode == TrainMode::m1 || mode == TrainMode::m2) return 0.0;
    return loss::lambda_schedule(loss, epoch);
  }
};

inline std::string to_string(loss::SupervisionMode s) {
  switch (s) {
    case loss::SupervisionMode::dynamic: return "dynamic";
    case loss::SupervisionMode::adversarial: return "adversarial";
    case loss::SupervisionMode::none: return "none";
  }
  return "?";
}

inline nlohmann::json to_json(const TrainConfig& c) {
  nlohmann::json loss{{"lambda_mode", c.loss.lambda_mode == loss::LambdaMode::fixed ? "fixed" : "dynamic"},
                      {"lambda", c.loss.lambda},
                      {"supervision", to_string(c.loss.supervision)},
                      {"dice_smoothing", c.loss.dice_smoothing},
                      {"perturbation_band", c.loss.perturbation_band}};
  return {{"epochs", c.epochs},
          {"batch_size", c.batch_size},
          {"lr_cod", c.lr_cod},
          {"lr_conf", c.lr_conf},
          {"lr_scale", c.lr_scale},
          {"image_size", c.image_size},
          {"loss", loss},
          {"seed", c.seed},
          {"checkpoint_every", c.checkpoint_every},
          {"mode", to_string(c.mode)},
          {"cem_updates", c.cem_updates},
          {"cod_widths", c.cod_widths},
          {"fusion_width", c.fusion_width},
          {"conf_widths", c.conf_widths}};
}

/// Reads a config object; absent keys keep their defaults. A `mode` key
/// implies the matching supervision unless `loss.supervision` is also given.
inline TrainConfig config_from_json(const nlohmann::json& j) {
  TrainConfig c;
  try {
    auto get = [&](const char* key, auto& dst) {
      if (j.contains(key)) dst = j.at(key).get<std::decay_t<decltype(dst)>>();
    };
    get("epochs", c.epochs);
    get("batch_size", c.batch_size);
    get("lr_cod", c.lr_cod);
    get("lr_conf", c.lr_conf);
    get("lr_scale", c.lr_scale);
    get("image_size", c.image_size);
    get("seed", c.seed);
    get("checkpoint_every", c.checkpoint_every);
    get("cem_updates", c.cem_updates);
    get("cod_widths", c.cod_widths);
    get("fusion_width", c.fusion_width);
    get("conf_widths", c.conf_widths);
    if (j.contains("mode")) c.set_mode(parse_mode(j.at("mode").get<std::string>()));
    if (j.contains("loss")) {
      const auto& l = j.at("loss");
      if (l.contains("lambda_mode")) {
        const auto m = l.at("lambda_mode").get<std::string>();
        if (m == "fixed") c.loss.lambda_mode = loss::LambdaMode::fixed;
        else if (m == "dynamic") c.loss.lambda_mode = loss::LambdaMode::dynamic;
        else throw ConfigError("unknown lambda_mode '" + m + "'");
      }
      if (l.contains("lambda")) c.loss.lambda = l.at("lambda").get<double>();
      if (l.contains("supervision")) {
        const auto s = l.at("supervision").get<std::string>();
        if (s == "dynamic") c.loss.supervision = loss::SupervisionMode::dynamic;
        else if (s == "adversarial") c.loss.supervision = loss::SupervisionMode::adversarial;
        else if (s == "none") c.loss.supervision = loss::SupervisionMode::none;
        else throw ConfigError("unknown supervision '" + s + "'");
      }
      if (l.contains("dice_smoothing")) c.loss.dice_smoothing = l.at("dice_smoothing").get<double>();
      if (l.contains("perturbation_band")) c.loss.perturbation_band = l.at("perturbation_band").get<double>();
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("malformed config: ") + e.what());
  }
  return c;
}

}  // namespace canet
