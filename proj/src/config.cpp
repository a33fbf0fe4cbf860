#include "mcsc/config.hpp"

#include <algorithm>
#include <sstream>
#include <stdexcept>

namespace mcsc {

void TrainConfig::validate() const {
  model.validate();
  if (batch_size < 2 || batch_size % 2 != 0) throw std::invalid_argument("batch_size must be even and >= 2");
  if (iterations <= 0) throw std::invalid_argument("iterations must be positive");
  if (!(lr0_cnn > 0.0) || !(lr0_attn > 0.0)) throw std::invalid_argument("learning rates must be positive");
  if (!(poly_power > 0.0)) throw std::invalid_argument("poly_power must be positive");
  if (!(tau > 0.0)) throw std::invalid_argument("tau must be positive");
  if (!(w_cl >= 0.0) || !(weight_decay >= 0.0)) throw std::invalid_argument("weights must be non-negative");
  if (validate_every <= 0) throw std::invalid_argument("validate_every must be positive");
  if (augment_shift < 0) throw std::invalid_argument("augment_shift must be non-negative");
  if (patch_sizes.size() != model.tap_scales.size()) {
    throw std::invalid_argument("patch_sizes needs one entry per tap scale");
  }
  for (std::size_t t = 0; t < patch_sizes.size(); ++t) {
    const auto& [h, w] = model.tap_scales[t];
    if (patch_sizes[t] < 1 || patch_sizes[t] > std::min(h, w)) {
      throw std::invalid_argument("patch size " + std::to_string(patch_sizes[t]) + " does not fit tap " +
                                  std::to_string(h) + "x" + std::to_string(w));
    }
  }
  for (auto t : ablations.active_taps) {
    if (t >= model.tap_scales.size()) throw std::invalid_argument("active tap index out of range");
  }
}

std::vector<std::size_t> TrainConfig::contrastive_taps() const {
  if (!ablations.active_taps.empty()) return ablations.active_taps;
  std::vector<std::size_t> all(model.tap_scales.size());
  for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
  return all;
}

losses::ContrastiveOptions TrainConfig::contrastive_options() const {
  losses::ContrastiveOptions o;
  o.denominator = ablations.enable_balancing ? losses::Denominator::Balanced : losses::Denominator::Standard;
  o.discard_background_anchors = ablations.discard_background_anchors;
  return o;
}

nlohmann::json TrainConfig::to_json() const {
  nlohmann::json j;
  j["model"] = model.to_json();
  j["patch_sizes"] = patch_sizes;
  j["batch_size"] = batch_size;
  j["iterations"] = iterations;
  j["lr0_cnn"] = lr0_cnn;
  j["lr0_attn"] = lr0_attn;
  j["poly_power"] = poly_power;
  j["weight_decay"] = weight_decay;
  j["tau"] = tau;
  j["w_cl"] = w_cl;
  j["supervised"] = supervised == losses::SupervisedKind::DiceOnly ? "dice" : "ce+dice";
  j["augment_flip"] = augment_flip;
  j["augment_rot90"] = augment_rot90;
  j["augment_shift"] = augment_shift;
  j["random_grid_offset"] = random_grid_offset;
  j["seed"] = seed;
  j["validate_every"] = validate_every;
  j["out_dir"] = out_dir;
  j["ablations"] = {{"enable_cl", ablations.enable_cl},
                    {"enable_cross_labels", ablations.enable_cross_labels},
                    {"enable_balancing", ablations.enable_balancing},
                    {"use_unlabeled", ablations.use_unlabeled},
                    {"discard_background_anchors", ablations.discard_background_anchors},
                    {"active_taps", ablations.active_taps}};
  return j;
}

TrainConfig TrainConfig::from_json(const nlohmann::json& j) {
  TrainConfig c;
  if (j.contains("model")) c.model = models::ModelConfig::from_json(j.at("model"));
  c.patch_sizes = j.value("patch_sizes", c.patch_sizes);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.iterations = j.value("iterations", c.iterations);
  c.lr0_cnn = j.value("lr0_cnn", c.lr0_cnn);
  c.lr0_attn = j.value("lr0_attn", c.lr0_attn);
  c.poly_power = j.value("poly_power", c.poly_power);
  c.weight_decay = j.value("weight_decay", c.weight_decay);
  c.tau = j.value("tau", c.tau);
  c.w_cl = j.value("w_cl", c.w_cl);
  if (j.contains("supervised")) {
    const auto s = j.at("supervised").get<std::string>();
    if (s == "dice") {
      c.supervised = losses::SupervisedKind::DiceOnly;
    } else if (s == "ce+dice") {
      c.supervised = losses::SupervisedKind::CrossEntropyDice;
    } else {
      throw std::invalid_argument("unknown supervised loss kind: " + s);
    }
  }
  c.augment_flip = j.value("augment_flip", c.augment_flip);
  c.augment_rot90 = j.value("augment_rot90", c.augment_rot90);
  c.augment_shift = j.value("augment_shift", c.augment_shift);
  c.random_grid_offset = j.value("random_grid_offset", c.random_grid_offset);
  c.seed = j.value("seed", c.seed);
  c.validate_every = j.value("validate_every", c.validate_every);
  c.out_dir = j.value("out_dir", c.out_dir);
  if (j.contains("ablations")) {
    const auto& a = j.at("ablations");
    c.ablations.enable_cl = a.value("enable_cl", c.ablations.enable_cl);
    c.ablations.enable_cross_labels = a.value("enable_cross_labels", c.ablations.enable_cross_labels);
    c.ablations.enable_balancing = a.value("enable_balancing", c.ablations.enable_balancing);
    c.ablations.use_unlabeled = a.value("use_unlabeled", c.ablations.use_unlabeled);
    c.ablations.discard_background_anchors =
        a.value("discard_background_anchors", c.ablations.discard_background_anchors);
    c.ablations.active_taps = a.value("active_taps", c.ablations.active_taps);
  }
  return c;
}

void apply_ablation(TrainConfig& config, const std::string& token) {
  if (token == "cl") {
    config.ablations.enable_cl = false;
    config.w_cl = 0.0;
  } else if (token == "cross") {
    config.ablations.enable_cross_labels = false;
  } else if (token == "balance") {
    config.ablations.enable_balancing = false;
  } else if (token == "labeled-only") {
    config.ablations.use_unlabeled = false;
    config.ablations.enable_cl = false;
    config.w_cl = 0.0;
  } else if (token.rfind("scales=", 0) == 0) {
    std::vector<std::size_t> taps;
    std::stringstream list(token.substr(7));
    std::string item;
    while (std::getline(list, item, ',')) {
      std::size_t pos = 0;
      long long h = -1;
      try {
        h = std::stoll(item, &pos);
      } catch (const std::exception&) {
        pos = 0;
      }
      if (pos == 0 || pos != item.size()) throw std::invalid_argument("bad scale in ablation token: " + token);
      bool found = false;
      for (std::size_t t = 0; t < config.model.tap_scales.size(); ++t) {
        if (config.model.tap_scales[t].first == h) {
          if (std::find(taps.begin(), taps.end(), t) == taps.end()) taps.push_back(t);
          found = true;
        }
      }
      if (!found) throw std::invalid_argument("no tap scale with height " + item);
    }
    if (taps.empty()) throw std::invalid_argument("empty scale list in ablation token");
    config.ablations.active_taps = taps;
  } else {
    throw std::invalid_argument("unknown ablation token: " + token);
  }
}

}  // namespace mcsc
