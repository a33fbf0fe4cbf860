#pragma once

#include "mcsc/losses.hpp"
#include "mcsc/models.hpp"

#include <json.hpp>

#include <cstdint>
#include <string>
#include <vector>

namespace mcsc {

struct Ablations {
  bool enable_cl = true;            // false: cross-teaching only (w_cl = 0)
  bool enable_cross_labels = true;  // false: each branch's pixels carry its own pseudo labels
  bool enable_balancing = true;     // false: standard supervised contrastive denominator
  bool use_unlabeled = true;        // false: labeled half only, no pseudo supervision
  bool discard_background_anchors = false;  // test-only reproduction of the "discard background" variant
  std::vector<std::size_t> active_taps;     // empty: every tap scale contributes
};

struct TrainConfig {
  models::ModelConfig model;
  std::vector<int> patch_sizes{8, 8, 4};  // one per tap scale

  int batch_size = 8;  // half labeled, half unlabeled
  std::int64_t iterations = 3000;
  double lr0_cnn = 5e-4;
  double lr0_attn = 1e-4;
  double poly_power = 0.9;
  double weight_decay = 5e-4;
  double tau = 0.1;
  double w_cl = 1e-3;
  losses::SupervisedKind supervised = losses::SupervisedKind::CrossEntropyDice;

  bool augment_flip = true;
  bool augment_rot90 = true;
  int augment_shift = 0;       // random translation by up to this many pixels (pad then crop)
  bool random_grid_offset = false;

  std::uint64_t seed = 0;
  std::int64_t validate_every = 250;
  std::string out_dir;          // empty: nothing written to disk

  Ablations ablations;

  void validate() const;
  // Taps that contribute to the contrastive loss.
  std::vector<std::size_t> contrastive_taps() const;
  losses::ContrastiveOptions contrastive_options() const;

  nlohmann::json to_json() const;
  // Missing keys keep their defaults.
  static TrainConfig from_json(const nlohmann::json& j);
};

// Applies a command-line ablation token: "cl", "cross", "balance",
// "labeled-only", or "scales=<h>[,<h>...]" naming tap scales by their
// height (e.g. scales=64 keeps only the full-resolution tap). Throws
// std::invalid_argument on anything else.
void apply_ablation(TrainConfig& config, const std::string& token);

}  // namespace mcsc
