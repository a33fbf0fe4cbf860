#pragma once

#include "mcsc/tensorio.hpp"

#include <torch/torch.h>

#include <array>
#include <cstdint>
#include <filesystem>
#include <random>
#include <vector>

namespace mcsc::synthdata {

// Classes: 0 background, 1 disk, 2 ring around the disk, 3 crescent outside the ring.
struct SynthConfig {
  std::uint64_t seed = 0;
  int n_cases = 20;
  int slices_per_case = 8;
  int height = 64;
  int width = 64;
  int num_classes = 4;
  double noise_std = 0.05;
  double bias_field_strength = 0.3;
  double class3_presence_prob = 0.7;

  void validate() const;
};

struct CaseData {
  torch::Tensor images;  // S x H x W float32 in [0, 1]
  torch::Tensor labels;  // S x H x W uint8
  // Per-slice class mean intensity before bias and noise, S x num_classes.
  torch::Tensor class_means;
  bool has_crescent = false;
};

// Deterministic per-case stream derived from the dataset seed.
std::mt19937_64 case_rng(std::uint64_t seed, int case_index);

CaseData generate_case(const SynthConfig& config, std::mt19937_64& rng);

struct SplitFractions {
  double labeled_train = 0.05;
  double unlabeled_train = 0.65;
  double val = 0.15;
  double test = 0.15;
};

// Floor each fraction times n, then hand the remaining cases one at a time to
// the splits with the largest fractional remainder (ties keep split order).
std::array<int, 4> split_counts(int n_cases, const SplitFractions& fractions);

struct DatasetSummary {
  std::vector<double> class_fraction;  // over all generated pixels
};

tensorio::DatasetManifest generate_dataset(const SynthConfig& config, const std::filesystem::path& out_dir,
                                           const SplitFractions& fractions, DatasetSummary* summary = nullptr);

}  // namespace mcsc::synthdata
