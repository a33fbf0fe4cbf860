#pragma once

// Brute-force oracles that certify the production implementations. Plain
// loops over std::vector<double>; nothing here touches libtorch or mcsc.

#include <cstdint>
#include <functional>
#include <optional>
#include <vector>

namespace mcsc_ref {

using Matrix = std::vector<std::vector<double>>;

// Balanced supervised contrastive loss, written as the literal nested sums.
// Anchors whose class has a single member are skipped and the outer mean is
// taken over the surviving anchors. The anchor itself stays inside its own
// class mean in the denominator. Returns 0 when no anchor survives.
double bcl_oracle(const Matrix& embeddings, const std::vector<int>& labels, double tau);

// Standard supervised contrastive loss (denominator sums over every other
// member of the set), used for the "balancing disabled" ablation.
double supcon_oracle(const Matrix& embeddings, const std::vector<int>& labels, double tau);

// Central differences: (f(x + h e_i) - f(x - h e_i)) / 2h per coordinate.
std::vector<double> finite_diff_grad(const std::function<double(const std::vector<double>&)>& f,
                                     std::vector<double> x, double h = 1e-5);

// Reference soft Dice loss over B x C x H x W probabilities (flattened
// row-major) and B x H x W targets; per (sample, class) Dice averaged.
double dice_loss_oracle(const std::vector<double>& probs, const std::vector<int>& target, int batch, int classes,
                        int height, int width, double eps = 1e-5);

struct Mask {
  int height = 0;
  int width = 0;
  std::vector<std::uint8_t> data;  // row-major, non-zero = foreground

  bool at(int y, int x) const { return data[static_cast<std::size_t>(y) * width + x] != 0; }
};

// All-pairs boundary distance percentile (nearest rank over the pooled list
// of both directed distance sets). nullopt when exactly one mask is empty;
// 0 when both are.
std::optional<double> hd_oracle(const Mask& pred, const Mask& gt, double percentile = 95.0);

double dsc_oracle(const Mask& pred, const Mask& gt);

}  // namespace mcsc_ref
