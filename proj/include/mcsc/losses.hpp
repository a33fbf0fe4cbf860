#pragma once

#include <torch/torch.h>

#include <vector>

namespace mcsc::losses {

inline constexpr double kDiceEps = 1e-5;

// Pixels of one contrastive group: both branches' patches flattened together.
struct AnchorSet {
  torch::Tensor embeddings;  // L x d, unit-norm rows
  torch::Tensor labels;      // L, int64 class indices
  torch::Tensor valid;       // L, bool; false rows are left out of the set entirely
  torch::Tensor branch;      // L, int64 source branch (0 = cnn, 1 = attn); audit only, may be undefined
  torch::Tensor origin;      // L, int64 flat pixel index into the stacked feature maps; audit only

  std::int64_t size() const { return embeddings.size(0); }
};

// A stack of M equally sized groups evaluated together.
struct AnchorBatch {
  torch::Tensor embeddings;  // M x L x d
  torch::Tensor labels;      // M x L
  torch::Tensor valid;       // M x L
  torch::Tensor branch;      // M x L (optional)
  torch::Tensor origin;      // M x L (optional)

  std::int64_t groups() const { return embeddings.size(0); }
  AnchorSet group(std::int64_t m) const;
};

struct LossWeights {
  double w_cps = 0.0;
  double w_cl = 1e-3;
  double tau = 0.1;

  void validate() const;
};

enum class Denominator {
  Balanced,  // per-class mean of exp-similarities, summed over present classes
  Standard,  // plain SupCon: sum over every other member of the set
};

struct ContrastiveOptions {
  Denominator denominator = Denominator::Balanced;
  // Background pixels stay in the denominators but are never anchors.
  bool discard_background_anchors = false;
};

struct ContrastiveResult {
  torch::Tensor loss;          // scalar
  std::int64_t anchors = 0;    // anchors that contributed to the mean
  bool degenerate = false;     // no anchor had a same-class partner; loss is 0
};

// 1 - mean over (sample, class) of (2 sum p g + eps) / (sum p + sum g + eps).
torch::Tensor dice_loss(const torch::Tensor& probs, const torch::Tensor& target, double eps = kDiceEps);

enum class SupervisedKind { CrossEntropyDice, DiceOnly };

// 0.5 * (cross-entropy + Dice) by default.
torch::Tensor supervised_loss(const torch::Tensor& logits, const torch::Tensor& labels,
                              SupervisedKind kind = SupervisedKind::CrossEntropyDice);

// Dice of this branch's probabilities against the other branch's argmax.
// The pseudo labels are treated as constants.
torch::Tensor cps_loss(const torch::Tensor& probs_self, const torch::Tensor& pseudo_labels_other);

ContrastiveResult balanced_contrastive_loss(const AnchorSet& set, double tau, const ContrastiveOptions& options = {});

struct GroupLosses {
  torch::Tensor per_group;   // M
  torch::Tensor anchors;     // M, int64
};

// Vectorized over M groups; each group's value matches balanced_contrastive_loss on that group.
GroupLosses group_contrastive_losses(const AnchorBatch& batch, double tau, const ContrastiveOptions& options = {});

struct MultiScaleResult {
  torch::Tensor total;                  // sum over scales of the per-scale group mean
  std::vector<torch::Tensor> per_scale;
  std::vector<bool> empty_scale;        // scale had no groups and contributed 0
  std::int64_t degenerate_groups = 0;
};

MultiScaleResult multiscale_contrastive_loss(const std::vector<std::vector<AnchorSet>>& groups_per_scale, double tau,
                                             const ContrastiveOptions& options = {});
MultiScaleResult multiscale_contrastive_loss(const std::vector<AnchorBatch>& batches_per_scale, double tau,
                                             const ContrastiveOptions& options = {});

}  // namespace mcsc::losses
