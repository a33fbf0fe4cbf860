#pragma once

#include <torch/torch.h>

#include <json.hpp>

#include <optional>
#include <string>
#include <vector>

namespace mcsc::metrics {

// 2|P n G| / (|P| + |G|) over masks of any matching shape; 1.0 when both are empty.
double dsc(const torch::Tensor& pred_mask, const torch::Tensor& gt_mask);

// 95th percentile (nearest rank) of the pooled boundary-to-boundary nearest
// distances between two 2-D masks, in pixels times `spacing`. Boundary pixels
// are foreground pixels with a 4-neighbour that is background or outside the
// image. nullopt when exactly one mask is empty, 0 when both are.
std::optional<double> hd95(const torch::Tensor& pred_mask, const torch::Tensor& gt_mask, double spacing = 1.0);

// Same rule for an arbitrary percentile; hd95 is percentile_hausdorff(..., 95).
std::optional<double> percentile_hausdorff(const torch::Tensor& pred_mask, const torch::Tensor& gt_mask,
                                           double percentile, double spacing = 1.0);

struct ClassScore {
  double dsc = 0.0;
  std::optional<double> hd95;  // nullopt when undefined on every slice
  int hd_undefined = 0;        // slices excluded from the HD mean
};

struct CaseReport {
  std::string case_id;
  std::vector<ClassScore> classes;  // index c-1 for foreground class c
};

// Per-class scores are reported for foreground classes 1..C-1. Every slice is
// scored on its own; a case scores the mean over its slices; the dataset
// scores the mean over cases. Undefined HD values are skipped and counted.
struct EvalReport {
  int num_classes = 0;
  std::vector<double> class_dsc;
  std::vector<std::optional<double>> class_hd95;
  std::vector<int> class_hd_undefined;
  double mean_dsc = 0.0;
  std::optional<double> mean_hd95;
  std::vector<CaseReport> cases;

  nlohmann::ordered_json to_json() const;
};

struct CasePrediction {
  std::string case_id;
  torch::Tensor pred;  // S x H x W class indices
  torch::Tensor gt;    // S x H x W class indices
};

CaseReport evaluate_case(const CasePrediction& c, int num_classes, double spacing = 1.0);
EvalReport evaluate(const std::vector<CasePrediction>& cases, int num_classes, double spacing = 1.0);

}  // namespace mcsc::metrics
