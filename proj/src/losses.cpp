#include "mcsc/losses.hpp"

#include <limits>
#include <stdexcept>

namespace mcsc::losses {

namespace F = torch::nn::functional;

namespace {

// Empty scales contribute a zero of the same dtype as the populated ones.
torch::Tensor sum_scales(std::vector<torch::Tensor>& per_scale, const std::vector<bool>& empty) {
  if (per_scale.empty()) return torch::zeros({});
  auto dtype = torch::kFloat32;
  for (std::size_t i = 0; i < per_scale.size(); ++i) {
    if (!empty[i]) {
      dtype = per_scale[i].scalar_type();
      break;
    }
  }
  for (std::size_t i = 0; i < per_scale.size(); ++i) {
    if (empty[i]) per_scale[i] = per_scale[i].to(dtype);
  }
  return torch::stack(per_scale).sum();
}

}  // namespace

AnchorSet AnchorBatch::group(std::int64_t m) const {
  AnchorSet s;
  s.embeddings = embeddings[m];
  s.labels = labels[m];
  s.valid = valid[m];
  if (branch.defined()) s.branch = branch[m];
  if (origin.defined()) s.origin = origin[m];
  return s;
}

void LossWeights::validate() const {
  if (!(tau > 0.0)) throw std::invalid_argument("tau must be positive");
  if (!(w_cps >= 0.0) || !(w_cl >= 0.0)) throw std::invalid_argument("loss weights must be non-negative");
}

torch::Tensor dice_loss(const torch::Tensor& probs, const torch::Tensor& target, double eps) {
  if (probs.dim() != 4) throw std::invalid_argument("dice_loss: probs must be B x C x H x W");
  if (target.dim() != 3 || target.size(0) != probs.size(0) || target.size(1) != probs.size(2) ||
      target.size(2) != probs.size(3)) {
    throw std::invalid_argument("dice_loss: target must be B x H x W matching probs");
  }
  if (torch::isnan(probs).any().item<bool>()) throw std::domain_error("dice_loss: NaN in probabilities");
  const auto classes = probs.size(1);
  auto target_long = target.to(torch::kInt64);
  if (target_long.numel() > 0 &&
      (target_long.min().item<std::int64_t>() < 0 || target_long.max().item<std::int64_t>() >= classes)) {
    throw std::invalid_argument("dice_loss: target class out of range");
  }
  auto onehot = F::one_hot(target_long, classes).permute({0, 3, 1, 2}).to(probs.scalar_type());
  auto inter = (probs * onehot).sum({2, 3});
  auto denom = probs.sum({2, 3}) + onehot.sum({2, 3});
  auto dice = (2.0 * inter + eps) / (denom + eps);
  return 1.0 - dice.mean();
}

torch::Tensor supervised_loss(const torch::Tensor& logits, const torch::Tensor& labels, SupervisedKind kind) {
  auto target = labels.to(torch::kInt64);
  auto dice = dice_loss(torch::softmax(logits, 1), target);
  if (kind == SupervisedKind::DiceOnly) return dice;
  auto ce = F::cross_entropy(logits, target);
  return 0.5 * (ce + dice);
}

torch::Tensor cps_loss(const torch::Tensor& probs_self, const torch::Tensor& pseudo_labels_other) {
  return dice_loss(probs_self, pseudo_labels_other.detach().to(torch::kInt64));
}

GroupLosses group_contrastive_losses(const AnchorBatch& batch, double tau, const ContrastiveOptions& options) {
  if (!(tau > 0.0)) throw std::invalid_argument("tau must be positive");
  const auto& emb = batch.embeddings;
  if (emb.dim() != 3) throw std::invalid_argument("anchor batch embeddings must be M x L x d");
  const auto groups = emb.size(0), rows = emb.size(1);
  auto labels = batch.labels.to(torch::kInt64);
  auto valid = batch.valid.defined() ? batch.valid.to(torch::kBool)
                                     : torch::ones({groups, rows}, torch::TensorOptions().dtype(torch::kBool));

  const std::int64_t classes = labels.numel() > 0 ? labels.max().item<std::int64_t>() + 1 : 1;
  auto onehot = F::one_hot(labels, classes).to(emb.scalar_type()) * valid.unsqueeze(-1).to(emb.scalar_type());
  auto counts = onehot.sum(1);                                      // M x C
  auto own_count = counts.gather(1, labels);                        // M x L

  auto scaled = emb / tau;
  auto sim = torch::bmm(scaled, emb.transpose(1, 2));              // M x L x L

  auto anchor = valid.logical_and(own_count >= 2.0);
  if (options.discard_background_anchors) anchor = anchor.logical_and(labels != 0);

  const bool all_valid = valid.all().item<bool>();
  const bool balanced = options.denominator == Denominator::Balanced;
  // Row shift for a stable exp; constant with respect to the loss value.
  torch::Tensor shift, exp_sim;
  if (all_valid && balanced) {
    // Invalid columns cannot occur and the one-hot product below picks the classes.
    shift = sim.detach().amax(2, true);
    exp_sim = torch::exp(sim - shift);
  } else {
    auto valid_cols = valid.unsqueeze(1);                           // M x 1 x L
    shift = sim.detach().masked_fill(valid_cols.logical_not(), -1e30).amax(2, true);
    shift = shift.masked_fill(shift < -1e29, 0.0);
    auto excluded = valid_cols.logical_not().expand_as(sim);
    if (!balanced) {
      auto eye = torch::eye(rows, torch::TensorOptions().dtype(torch::kBool)).unsqueeze(0);
      excluded = excluded.logical_or(eye);
    }
    exp_sim = torch::exp((sim - shift).masked_fill(excluded, -std::numeric_limits<double>::infinity()));
  }

  torch::Tensor denom;
  if (balanced) {
    auto class_sums = torch::bmm(exp_sim, onehot);                  // M x L x C
    denom = (class_sums / counts.clamp_min(1.0).unsqueeze(1)).sum(2);
  } else {
    denom = exp_sim.sum(2);
  }
  // Rows that are not anchors may have an empty denominator; keep them out of log().
  auto log_denom = torch::log(torch::where(anchor, denom, torch::ones_like(denom))) + shift.squeeze(2);

  // Sum of a_i . a_p / tau over same-class p != i, through per-class embedding sums.
  auto class_emb = torch::bmm(onehot.transpose(1, 2), emb);         // M x C x d
  auto own_class_emb = class_emb.gather(1, labels.unsqueeze(2).expand({groups, rows, emb.size(2)}));
  auto positive_sum = (scaled * own_class_emb).sum(2) - (scaled * emb).sum(2) * valid.to(emb.scalar_type());

  auto mean_positive = positive_sum / (own_count - 1.0).clamp_min(1.0);
  auto per_anchor = (log_denom - mean_positive).masked_fill(anchor.logical_not(), 0.0);
  auto anchors = anchor.sum(1);
  auto per_group = per_anchor.sum(1) / anchors.clamp_min(1).to(emb.scalar_type());
  return {per_group, anchors};
}

ContrastiveResult balanced_contrastive_loss(const AnchorSet& set, double tau, const ContrastiveOptions& options) {
  if (set.embeddings.dim() != 2) throw std::invalid_argument("anchor set embeddings must be L x d");
  AnchorBatch b;
  b.embeddings = set.embeddings.unsqueeze(0);
  b.labels = set.labels.unsqueeze(0);
  if (set.valid.defined()) b.valid = set.valid.unsqueeze(0);
  auto g = group_contrastive_losses(b, tau, options);
  ContrastiveResult r;
  r.loss = g.per_group.squeeze(0);
  r.anchors = g.anchors.item<std::int64_t>();
  r.degenerate = r.anchors == 0;
  return r;
}

MultiScaleResult multiscale_contrastive_loss(const std::vector<AnchorBatch>& batches_per_scale, double tau,
                                             const ContrastiveOptions& options) {
  MultiScaleResult r;
  for (const auto& batch : batches_per_scale) {
    if (!batch.embeddings.defined() || batch.groups() == 0) {
      r.per_scale.push_back(torch::zeros({}));
      r.empty_scale.push_back(true);
      continue;
    }
    auto g = group_contrastive_losses(batch, tau, options);
    r.degenerate_groups += (g.anchors == 0).sum().item<std::int64_t>();
    r.per_scale.push_back(g.per_group.mean());
    r.empty_scale.push_back(false);
  }
  r.total = sum_scales(r.per_scale, r.empty_scale);
  return r;
}

MultiScaleResult multiscale_contrastive_loss(const std::vector<std::vector<AnchorSet>>& groups_per_scale, double tau,
                                             const ContrastiveOptions& options) {
  MultiScaleResult r;
  for (const auto& groups : groups_per_scale) {
    if (groups.empty()) {
      r.per_scale.push_back(torch::zeros({}));
      r.empty_scale.push_back(true);
      continue;
    }
    std::vector<torch::Tensor> values;
    for (const auto& g : groups) {
      auto res = balanced_contrastive_loss(g, tau, options);
      r.degenerate_groups += res.degenerate;
      values.push_back(res.loss);
    }
    r.per_scale.push_back(torch::stack(values).mean());
    r.empty_scale.push_back(false);
  }
  r.total = sum_scales(r.per_scale, r.empty_scale);
  return r;
}

}  // namespace mcsc::losses
