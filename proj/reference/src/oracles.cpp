#include "mcsc_ref/oracles.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <set>
#include <stdexcept>

namespace mcsc_ref {

namespace {

double dot(const std::vector<double>& a, const std::vector<double>& b) {
  double s = 0.0;
  for (std::size_t k = 0; k < a.size(); ++k) s += a[k] * b[k];
  return s;
}

}  // namespace

double bcl_oracle(const Matrix& emb, const std::vector<int>& labels, double tau) {
  const std::size_t n = emb.size();
  std::set<int> classes(labels.begin(), labels.end());

  double total = 0.0;
  std::size_t anchors = 0;
  for (std::size_t i = 0; i < n; ++i) {
    std::size_t same = 0;
    for (std::size_t k = 0; k < n; ++k) same += labels[k] == labels[i];
    if (same < 2) continue;

    double denom = 0.0;
    for (int j : classes) {
      double class_sum = 0.0;
      std::size_t class_count = 0;
      for (std::size_t k = 0; k < n; ++k) {
        if (labels[k] != j) continue;
        class_sum += std::exp(dot(emb[i], emb[k]) / tau);
        ++class_count;
      }
      denom += class_sum / static_cast<double>(class_count);
    }

    double positive = 0.0;
    for (std::size_t p = 0; p < n; ++p) {
      if (p == i || labels[p] != labels[i]) continue;
      positive += std::log(std::exp(dot(emb[i], emb[p]) / tau) / denom);
    }
    total += positive / static_cast<double>(same - 1);
    ++anchors;
  }
  if (anchors == 0) return 0.0;
  return -total / static_cast<double>(anchors);
}

double supcon_oracle(const Matrix& emb, const std::vector<int>& labels, double tau) {
  const std::size_t n = emb.size();
  double total = 0.0;
  std::size_t anchors = 0;
  for (std::size_t i = 0; i < n; ++i) {
    std::size_t same = 0;
    for (std::size_t k = 0; k < n; ++k) same += labels[k] == labels[i];
    if (same < 2) continue;
    double denom = 0.0;
    for (std::size_t k = 0; k < n; ++k) {
      if (k != i) denom += std::exp(dot(emb[i], emb[k]) / tau);
    }
    double positive = 0.0;
    for (std::size_t p = 0; p < n; ++p) {
      if (p == i || labels[p] != labels[i]) continue;
      positive += std::log(std::exp(dot(emb[i], emb[p]) / tau) / denom);
    }
    total += positive / static_cast<double>(same - 1);
    ++anchors;
  }
  if (anchors == 0) return 0.0;
  return -total / static_cast<double>(anchors);
}

std::vector<double> finite_diff_grad(const std::function<double(const std::vector<double>&)>& f,
                                     std::vector<double> x, double h) {
  std::vector<double> grad(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double saved = x[i];
    x[i] = saved + h;
    const double up = f(x);
    x[i] = saved - h;
    const double down = f(x);
    x[i] = saved;
    grad[i] = (up - down) / (2.0 * h);
  }
  return grad;
}

double dice_loss_oracle(const std::vector<double>& probs, const std::vector<int>& target, int batch, int classes,
                        int height, int width, double eps) {
  const std::size_t plane = static_cast<std::size_t>(height) * width;
  double dice_sum = 0.0;
  for (int b = 0; b < batch; ++b) {
    for (int c = 0; c < classes; ++c) {
      double inter = 0.0, psum = 0.0, gsum = 0.0;
      for (std::size_t px = 0; px < plane; ++px) {
        const double p = probs[(static_cast<std::size_t>(b) * classes + c) * plane + px];
        const double g = target[static_cast<std::size_t>(b) * plane + px] == c ? 1.0 : 0.0;
        inter += p * g;
        psum += p;
        gsum += g;
      }
      dice_sum += (2.0 * inter + eps) / (psum + gsum + eps);
    }
  }
  return 1.0 - dice_sum / (static_cast<double>(batch) * classes);
}

namespace {

// A foreground pixel is on the boundary when any 4-neighbour is background or
// lies outside the image.
std::vector<std::pair<int, int>> boundary_pixels(const Mask& m) {
  std::vector<std::pair<int, int>> out;
  const int dy[4] = {-1, 1, 0, 0};
  const int dx[4] = {0, 0, -1, 1};
  for (int y = 0; y < m.height; ++y) {
    for (int x = 0; x < m.width; ++x) {
      if (!m.at(y, x)) continue;
      bool edge = false;
      for (int k = 0; k < 4 && !edge; ++k) {
        const int ny = y + dy[k], nx = x + dx[k];
        if (ny < 0 || ny >= m.height || nx < 0 || nx >= m.width || !m.at(ny, nx)) edge = true;
      }
      if (edge) out.emplace_back(y, x);
    }
  }
  return out;
}

bool empty(const Mask& m) {
  return std::none_of(m.data.begin(), m.data.end(), [](std::uint8_t v) { return v != 0; });
}

}  // namespace

std::optional<double> hd_oracle(const Mask& pred, const Mask& gt, double percentile) {
  if (pred.height != gt.height || pred.width != gt.width) throw std::invalid_argument("mask shape mismatch");
  const bool pe = empty(pred), ge = empty(gt);
  if (pe && ge) return 0.0;
  if (pe || ge) return std::nullopt;

  const auto bp = boundary_pixels(pred);
  const auto bg = boundary_pixels(gt);
  std::vector<double> pooled;
  auto directed = [&pooled](const auto& from, const auto& to) {
    for (const auto& [y0, x0] : from) {
      double best = std::numeric_limits<double>::infinity();
      for (const auto& [y1, x1] : to) {
        const double dy = y0 - y1, dx = x0 - x1;
        best = std::min(best, std::sqrt(dy * dy + dx * dx));
      }
      pooled.push_back(best);
    }
  };
  directed(bp, bg);
  directed(bg, bp);
  std::sort(pooled.begin(), pooled.end());
  const double n = static_cast<double>(pooled.size());
  auto rank = static_cast<std::size_t>(std::ceil(percentile * n / 100.0));
  rank = std::clamp<std::size_t>(rank, 1, pooled.size());
  return pooled[rank - 1];
}

double dsc_oracle(const Mask& pred, const Mask& gt) {
  double inter = 0.0, p = 0.0, g = 0.0;
  for (std::size_t i = 0; i < pred.data.size(); ++i) {
    const bool a = pred.data[i] != 0, b = gt.data[i] != 0;
    inter += a && b;
    p += a;
    g += b;
  }
  if (p + g == 0.0) return 1.0;
  return 2.0 * inter / (p + g);
}

}  // namespace mcsc_ref
