#include "mcsc/sampling.hpp"

#include <algorithm>
#include <limits>
#include <numeric>
#include <stdexcept>
#include <string>

namespace mcsc::sampling {

FusedLabels fuse_labels(const std::vector<bool>& is_labeled, const torch::Tensor& gt_labels,
                        const torch::Tensor& pseudo_cnn, const torch::Tensor& pseudo_attn, bool cross) {
  if (pseudo_cnn.sizes() != pseudo_attn.sizes() || pseudo_cnn.dim() != 3) {
    throw std::invalid_argument("fuse_labels: pseudo label maps must be B x H x W of equal shape");
  }
  const auto batch = pseudo_cnn.size(0);
  if (static_cast<std::int64_t>(is_labeled.size()) != batch) {
    throw std::invalid_argument("fuse_labels: labeled flags do not match batch size");
  }
  const bool any_labeled = std::find(is_labeled.begin(), is_labeled.end(), true) != is_labeled.end();
  if (any_labeled && (!gt_labels.defined() || gt_labels.sizes() != pseudo_cnn.sizes())) {
    throw std::invalid_argument("fuse_labels: ground truth shape mismatch");
  }

  auto cnn_src = cross ? pseudo_attn : pseudo_cnn;
  auto attn_src = cross ? pseudo_cnn : pseudo_attn;
  FusedLabels out;
  out.for_cnn.labels = cnn_src.detach().to(torch::kInt64).clone();
  out.for_attn.labels = attn_src.detach().to(torch::kInt64).clone();
  for (std::int64_t b = 0; b < batch; ++b) {
    if (is_labeled[b]) {
      auto g = gt_labels[b].to(torch::kInt64);
      out.for_cnn.labels[b].copy_(g);
      out.for_attn.labels[b].copy_(g);
      out.for_cnn.source.push_back(Source::GroundTruth);
      out.for_attn.source.push_back(Source::GroundTruth);
    } else {
      out.for_cnn.source.push_back(cross ? Source::CrossPseudoForCnn : Source::OwnPseudoCnn);
      out.for_attn.source.push_back(cross ? Source::CrossPseudoForAttn : Source::OwnPseudoAttn);
    }
  }
  return out;
}

torch::Tensor downsample_labels(const torch::Tensor& labels, std::int64_t target_h, std::int64_t target_w) {
  if (labels.dim() != 3) throw std::invalid_argument("downsample_labels: labels must be B x H x W");
  const auto h = labels.size(1), w = labels.size(2);
  if (target_h <= 0 || target_w <= 0 || target_h > h || target_w > w) {
    throw std::invalid_argument("downsample_labels: target must be within (0, H] x (0, W]");
  }
  if (target_h == h && target_w == w) return labels;
  auto rows = torch::empty({target_h}, torch::kInt64);
  auto cols = torch::empty({target_w}, torch::kInt64);
  for (std::int64_t i = 0; i < target_h; ++i) rows[i] = (2 * i + 1) * h / (2 * target_h);
  for (std::int64_t j = 0; j < target_w; ++j) cols[j] = (2 * j + 1) * w / (2 * target_w);
  return labels.index_select(1, rows.to(labels.device())).index_select(2, cols.to(labels.device()));
}

std::uint64_t uniform_index(std::mt19937_64& rng, std::uint64_t n) {
  if (n == 0) throw std::invalid_argument("uniform_index: empty range");
  // Rejection sampling removes modulo bias.
  const std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() - std::numeric_limits<std::uint64_t>::max() % n;
  std::uint64_t r;
  do {
    r = rng();
  } while (r >= limit);
  return r % n;
}

PatchPlan partition_patches(std::int64_t num_maps, std::int64_t map_h, std::int64_t map_w, std::int64_t patch,
                            std::mt19937_64& rng, bool random_offset) {
  if (num_maps <= 0) throw std::invalid_argument("partition_patches: need at least one feature map");
  if (patch <= 0 || patch > map_h || patch > map_w) {
    throw std::invalid_argument("partition_patches: patch size " + std::to_string(patch) + " does not fit a " +
                                std::to_string(map_h) + "x" + std::to_string(map_w) + " map");
  }
  PatchPlan plan;
  plan.map_h = map_h;
  plan.map_w = map_w;
  plan.patch = patch;
  plan.grid_rows = map_h / patch;
  plan.grid_cols = map_w / patch;
  if (random_offset) {
    plan.offset_y = static_cast<std::int64_t>(uniform_index(rng, map_h % patch + 1));
    plan.offset_x = static_cast<std::int64_t>(uniform_index(rng, map_w % patch + 1));
  }
  const auto cells = plan.grid_rows * plan.grid_cols;
  plan.cells.assign(cells, std::vector<std::int64_t>(num_maps));
  std::vector<std::int64_t> order(cells);
  for (std::int64_t n = 0; n < num_maps; ++n) {
    std::iota(order.begin(), order.end(), 0);
    for (std::int64_t i = cells - 1; i > 0; --i) {
      std::swap(order[i], order[uniform_index(rng, static_cast<std::uint64_t>(i + 1))]);
    }
    for (std::int64_t m = 0; m < cells; ++m) plan.cells[m][n] = order[m];
  }
  return plan;
}

losses::AnchorBatch build_anchor_batch(const torch::Tensor& cnn_embeddings, const torch::Tensor& attn_embeddings,
                                       const torch::Tensor& labels_for_cnn, const torch::Tensor& labels_for_attn,
                                       const PatchPlan& plan) {
  if (cnn_embeddings.dim() != 4 || cnn_embeddings.sizes() != attn_embeddings.sizes()) {
    throw std::invalid_argument("build_anchor_batch: embeddings must be matching B x d x h x w");
  }
  const auto n = cnn_embeddings.size(0), d = cnn_embeddings.size(1);
  const auto h = cnn_embeddings.size(2), w = cnn_embeddings.size(3);
  if (h != plan.map_h || w != plan.map_w || plan.num_maps() != 2 * n) {
    throw std::invalid_argument("build_anchor_batch: patch plan does not match the feature maps");
  }
  const auto expect = std::vector<std::int64_t>{n, h, w};
  if (labels_for_cnn.sizes() != expect || labels_for_attn.sizes() != expect) {
    throw std::invalid_argument("build_anchor_batch: supervision maps must be B x h x w at this scale");
  }

  const auto p = plan.patch;
  const auto groups = plan.groups();
  const auto maps = 2 * n;
  const auto rows = maps * p * p;
  auto index = torch::empty({groups, rows}, torch::kInt64);
  auto branch = torch::empty({groups, rows}, torch::kInt64);
  auto idx = index.accessor<std::int64_t, 2>();
  auto br = branch.accessor<std::int64_t, 2>();
  for (std::int64_t m = 0; m < groups; ++m) {
    std::int64_t r = 0;
    for (std::int64_t map = 0; map < maps; ++map) {
      const auto cell = plan.cells[m][map];
      const auto y0 = plan.offset_y + (cell / plan.grid_cols) * p;
      const auto x0 = plan.offset_x + (cell % plan.grid_cols) * p;
      for (std::int64_t dy = 0; dy < p; ++dy) {
        for (std::int64_t dx = 0; dx < p; ++dx, ++r) {
          idx[m][r] = (map * h + y0 + dy) * w + x0 + dx;
          br[m][r] = map < n ? 0 : 1;
        }
      }
    }
  }

  auto stacked = torch::cat({cnn_embeddings, attn_embeddings}, 0).permute({0, 2, 3, 1}).reshape({maps * h * w, d});
  auto labels = torch::cat({labels_for_cnn, labels_for_attn}, 0).reshape({maps * h * w}).to(torch::kInt64);
  auto flat = index.reshape({groups * rows}).to(stacked.device());

  losses::AnchorBatch out;
  out.embeddings = stacked.index_select(0, flat).reshape({groups, rows, d});
  out.labels = labels.index_select(0, flat).reshape({groups, rows});
  out.valid = torch::ones({groups, rows}, torch::TensorOptions().dtype(torch::kBool));
  out.branch = branch;
  out.origin = index;
  return out;
}

losses::AnchorSet build_anchor_set(const losses::AnchorBatch& batch, std::int64_t group) {
  if (group < 0 || group >= batch.groups()) throw std::out_of_range("build_anchor_set: no such group");
  return batch.group(group);
}

}  // namespace mcsc::sampling
