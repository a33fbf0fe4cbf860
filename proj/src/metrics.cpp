#include "mcsc/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

namespace mcsc::metrics {

namespace {

void check_same_shape(const torch::Tensor& a, const torch::Tensor& b) {
  if (a.sizes() != b.sizes()) throw std::invalid_argument("mask shape mismatch");
}

torch::Tensor as_bool(const torch::Tensor& m) { return m.to(torch::kCPU).ne(0).contiguous(); }

// Boundary = mask AND NOT erode4(mask), with out-of-image pixels treated as background.
std::vector<std::uint8_t> boundary(const torch::Tensor& mask2d) {
  auto m = as_bool(mask2d);
  auto padded = torch::constant_pad_nd(m.to(torch::kUInt8), {1, 1, 1, 1}, 0);
  const auto h = m.size(0), w = m.size(1);
  auto center = padded.slice(0, 1, h + 1).slice(1, 1, w + 1);
  auto eroded = center.logical_and(padded.slice(0, 0, h).slice(1, 1, w + 1))
                    .logical_and(padded.slice(0, 2, h + 2).slice(1, 1, w + 1))
                    .logical_and(padded.slice(0, 1, h + 1).slice(1, 0, w))
                    .logical_and(padded.slice(0, 1, h + 1).slice(1, 2, w + 2));
  auto b = m.logical_and(eroded.logical_not()).to(torch::kUInt8).contiguous();
  return {b.data_ptr<std::uint8_t>(), b.data_ptr<std::uint8_t>() + b.numel()};
}

// One-dimensional squared distance transform (lower envelope of parabolas).
void sdt_1d(const std::vector<double>& f, std::vector<double>& d, std::vector<int>& v, std::vector<double>& z) {
  const int n = static_cast<int>(f.size());
  constexpr double inf = std::numeric_limits<double>::infinity();
  int k = 0;
  v[0] = 0;
  z[0] = -inf;
  z[1] = inf;
  for (int q = 1; q < n; ++q) {
    if (f[q] == inf) continue;
    if (f[v[k]] == inf) {
      v[k] = q;
      continue;
    }
    double s = ((f[q] + double(q) * q) - (f[v[k]] + double(v[k]) * v[k])) / (2.0 * (q - v[k]));
    while (k > 0 && s <= z[k]) {
      --k;
      s = ((f[q] + double(q) * q) - (f[v[k]] + double(v[k]) * v[k])) / (2.0 * (q - v[k]));
    }
    ++k;
    v[k] = q;
    z[k] = s;
    z[k + 1] = inf;
  }
  if (f[v[0]] == inf) {
    std::fill(d.begin(), d.end(), inf);
    return;
  }
  k = 0;
  for (int q = 0; q < n; ++q) {
    while (z[k + 1] < q) ++k;
    const double dq = q - v[k];
    d[q] = dq * dq + f[v[k]];
  }
}

// Exact squared Euclidean distance from every pixel to the nearest site.
std::vector<double> squared_edt(const std::vector<std::uint8_t>& sites, int h, int w) {
  constexpr double inf = std::numeric_limits<double>::infinity();
  std::vector<double> grid(static_cast<std::size_t>(h) * w);
  for (std::size_t i = 0; i < grid.size(); ++i) grid[i] = sites[i] ? 0.0 : inf;

  const int n = std::max(h, w);
  std::vector<double> f(n), d(n), z(n + 1);
  std::vector<int> v(n);
  f.resize(h);
  d.resize(h);
  for (int x = 0; x < w; ++x) {
    for (int y = 0; y < h; ++y) f[y] = grid[static_cast<std::size_t>(y) * w + x];
    sdt_1d(f, d, v, z);
    for (int y = 0; y < h; ++y) grid[static_cast<std::size_t>(y) * w + x] = d[y];
  }
  f.resize(w);
  d.resize(w);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) f[x] = grid[static_cast<std::size_t>(y) * w + x];
    sdt_1d(f, d, v, z);
    for (int x = 0; x < w; ++x) grid[static_cast<std::size_t>(y) * w + x] = d[x];
  }
  return grid;
}

}  // namespace

double dsc(const torch::Tensor& pred_mask, const torch::Tensor& gt_mask) {
  check_same_shape(pred_mask, gt_mask);
  auto p = as_bool(pred_mask);
  auto g = as_bool(gt_mask);
  const double inter = p.logical_and(g).sum().item<double>();
  const double total = p.sum().item<double>() + g.sum().item<double>();
  if (total == 0.0) return 1.0;
  return 2.0 * inter / total;
}

std::optional<double> percentile_hausdorff(const torch::Tensor& pred_mask, const torch::Tensor& gt_mask,
                                           double percentile, double spacing) {
  check_same_shape(pred_mask, gt_mask);
  if (pred_mask.dim() != 2) throw std::invalid_argument("hausdorff distance expects 2-D masks");
  const bool pe = !as_bool(pred_mask).any().item<bool>();
  const bool ge = !as_bool(gt_mask).any().item<bool>();
  if (pe && ge) return 0.0;
  if (pe || ge) return std::nullopt;

  const int h = static_cast<int>(pred_mask.size(0)), w = static_cast<int>(pred_mask.size(1));
  const auto bp = boundary(pred_mask);
  const auto bg = boundary(gt_mask);
  const auto dist_to_g = squared_edt(bg, h, w);
  const auto dist_to_p = squared_edt(bp, h, w);

  std::vector<double> pooled;
  for (std::size_t i = 0; i < bp.size(); ++i) {
    if (bp[i]) pooled.push_back(std::sqrt(dist_to_g[i]));
  }
  for (std::size_t i = 0; i < bg.size(); ++i) {
    if (bg[i]) pooled.push_back(std::sqrt(dist_to_p[i]));
  }
  const auto n = pooled.size();
  auto rank = static_cast<std::size_t>(std::ceil(percentile * static_cast<double>(n) / 100.0));
  rank = std::clamp<std::size_t>(rank, 1, n);
  std::nth_element(pooled.begin(), pooled.begin() + static_cast<std::ptrdiff_t>(rank - 1), pooled.end());
  return pooled[rank - 1] * spacing;
}

std::optional<double> hd95(const torch::Tensor& pred_mask, const torch::Tensor& gt_mask, double spacing) {
  return percentile_hausdorff(pred_mask, gt_mask, 95.0, spacing);
}

CaseReport evaluate_case(const CasePrediction& c, int num_classes, double spacing) {
  check_same_shape(c.pred, c.gt);
  if (c.pred.dim() != 3) throw std::invalid_argument("case predictions must be S x H x W");
  CaseReport report;
  report.case_id = c.case_id;
  const auto slices = c.pred.size(0);
  for (int cls = 1; cls < num_classes; ++cls) {
    ClassScore score;
    double dsc_sum = 0.0, hd_sum = 0.0;
    int hd_count = 0;
    for (std::int64_t s = 0; s < slices; ++s) {
      auto p = c.pred[s].eq(cls);
      auto g = c.gt[s].eq(cls);
      dsc_sum += dsc(p, g);
      if (auto hd = hd95(p, g, spacing)) {
        hd_sum += *hd;
        ++hd_count;
      } else {
        ++score.hd_undefined;
      }
    }
    score.dsc = dsc_sum / static_cast<double>(slices);
    if (hd_count > 0) score.hd95 = hd_sum / hd_count;
    report.classes.push_back(score);
  }
  return report;
}

EvalReport evaluate(const std::vector<CasePrediction>& cases, int num_classes, double spacing) {
  if (cases.empty()) throw std::invalid_argument("no cases to evaluate");
  EvalReport r;
  r.num_classes = num_classes;
  const int fg = num_classes - 1;
  r.class_dsc.assign(fg, 0.0);
  r.class_hd95.assign(fg, std::nullopt);
  r.class_hd_undefined.assign(fg, 0);
  std::vector<double> hd_sum(fg, 0.0);
  std::vector<int> hd_count(fg, 0);
  for (const auto& c : cases) {
    auto cr = evaluate_case(c, num_classes, spacing);
    for (int k = 0; k < fg; ++k) {
      r.class_dsc[k] += cr.classes[k].dsc / static_cast<double>(cases.size());
      r.class_hd_undefined[k] += cr.classes[k].hd_undefined;
      if (cr.classes[k].hd95) {
        hd_sum[k] += *cr.classes[k].hd95;
        ++hd_count[k];
      }
    }
    r.cases.push_back(std::move(cr));
  }
  double hd_mean = 0.0;
  int hd_classes = 0;
  for (int k = 0; k < fg; ++k) {
    r.mean_dsc += r.class_dsc[k] / fg;
    if (hd_count[k] > 0) {
      r.class_hd95[k] = hd_sum[k] / hd_count[k];
      hd_mean += *r.class_hd95[k];
      ++hd_classes;
    }
  }
  if (hd_classes > 0) r.mean_hd95 = hd_mean / hd_classes;
  return r;
}

namespace {
nlohmann::ordered_json opt(const std::optional<double>& v) {
  return v ? nlohmann::ordered_json(*v) : nlohmann::ordered_json(nullptr);
}
}  // namespace

nlohmann::ordered_json EvalReport::to_json() const {
  nlohmann::ordered_json j;
  j["num_classes"] = num_classes;
  j["mean"] = {{"dsc", mean_dsc}, {"hd95", opt(mean_hd95)}};
  auto per_class = nlohmann::ordered_json::array();
  for (std::size_t k = 0; k < class_dsc.size(); ++k) {
    per_class.push_back({{"class", k + 1},
                         {"dsc", class_dsc[k]},
                         {"hd95", opt(class_hd95[k])},
                         {"hd95_undefined_slices", class_hd_undefined[k]}});
  }
  j["classes"] = per_class;
  auto jc = nlohmann::ordered_json::array();
  for (const auto& c : cases) {
    nlohmann::ordered_json e;
    e["case_id"] = c.case_id;
    auto cls = nlohmann::ordered_json::array();
    for (std::size_t k = 0; k < c.classes.size(); ++k) {
      cls.push_back({{"class", k + 1}, {"dsc", c.classes[k].dsc}, {"hd95", opt(c.classes[k].hd95)}});
    }
    e["classes"] = cls;
    jc.push_back(e);
  }
  j["cases"] = jc;
  return j;
}

}  // namespace mcsc::metrics
