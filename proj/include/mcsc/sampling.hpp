#pragma once

#include "mcsc/losses.hpp"

#include <torch/torch.h>

#include <cstdint>
#include <random>
#include <vector>

namespace mcsc::sampling {

enum class Source : std::uint8_t {
  GroundTruth,
  CrossPseudoForCnn,   // attention-branch argmax labelling CNN features
  CrossPseudoForAttn,  // CNN argmax labelling attention features
  OwnPseudoCnn,        // ablation: a branch labelled by its own prediction
  OwnPseudoAttn,
};

struct SupervisionMap {
  torch::Tensor labels;         // B x H x W, int64
  std::vector<Source> source;   // one tag per slice
};

struct FusedLabels {
  SupervisionMap for_cnn;
  SupervisionMap for_attn;
};

// Labeled slices take ground truth for both branches. Unlabeled slices take
// the other branch's pseudo labels, or their own when `cross` is false.
// `gt_labels` may be undefined when no slice is labeled.
FusedLabels fuse_labels(const std::vector<bool>& is_labeled, const torch::Tensor& gt_labels,
                        const torch::Tensor& pseudo_cnn, const torch::Tensor& pseudo_attn, bool cross = true);

// Nearest-neighbour sampling at cell centres: row i of the output reads
// source row floor((2i + 1) * H / (2 h)); likewise for columns.
torch::Tensor downsample_labels(const torch::Tensor& labels, std::int64_t target_h, std::int64_t target_w);

// Grid cells of size patch x patch over every feature map. Group m takes
// cell `cells[m][n]` from map n; per map the column of cells is a random
// permutation of the whole grid.
struct PatchPlan {
  std::int64_t map_h = 0, map_w = 0;
  std::int64_t patch = 0;
  std::int64_t grid_rows = 0, grid_cols = 0;
  std::int64_t offset_y = 0, offset_x = 0;  // top-left of the grid; residual margin lies outside it
  std::vector<std::vector<std::int64_t>> cells;  // M x num_maps, row-major cell index

  std::int64_t groups() const { return static_cast<std::int64_t>(cells.size()); }
  std::int64_t num_maps() const { return cells.empty() ? 0 : static_cast<std::int64_t>(cells.front().size()); }
};

// Uniform index in [0, n) that does not depend on the standard library's distribution implementation.
std::uint64_t uniform_index(std::mt19937_64& rng, std::uint64_t n);

// `random_offset` shifts the grid by a random amount within the margin.
PatchPlan partition_patches(std::int64_t num_maps, std::int64_t map_h, std::int64_t map_w, std::int64_t patch,
                            std::mt19937_64& rng, bool random_offset = false);

// Flattens every group's 2N patches into rows. Rows come map by map (the N
// CNN maps first, then the N attention maps), each patch row-major. Each
// pixel is labelled from the supervision map of its own branch.
losses::AnchorBatch build_anchor_batch(const torch::Tensor& cnn_embeddings, const torch::Tensor& attn_embeddings,
                                       const torch::Tensor& labels_for_cnn, const torch::Tensor& labels_for_attn,
                                       const PatchPlan& plan);

losses::AnchorSet build_anchor_set(const losses::AnchorBatch& batch, std::int64_t group);

}  // namespace mcsc::sampling
