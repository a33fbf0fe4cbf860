// Acceptance suite: one PASS/FAIL line per criterion.
//
//   acceptance [--workdir DIR] [--only 1,2,8] [--seeds 3] [--preset FILE]
//
// Criteria 8-10 share one set of training runs on the default synthetic
// dataset. A JSON report is written to <workdir>/acceptance_report.json.

#include "helpers.hpp"
#include "mcsc/config.hpp"
#include "mcsc/losses.hpp"
#include "mcsc/metrics.hpp"
#include "mcsc/random.hpp"
#include "mcsc/sampling.hpp"
#include "mcsc/schedule.hpp"
#include "mcsc/synthdata.hpp"
#include "mcsc/trainer.hpp"
#include "mcsc_ref/oracles.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <functional>
#include <map>
#include <random>
#include <set>
#include <sstream>

namespace fs = std::filesystem;
using namespace mcsc;
using test_helpers::to_ints;
using test_helpers::to_matrix;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
  nlohmann::json data;
};

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

double rel(double a, double b) { return std::abs(a - b) / std::max(std::abs(b), 1e-12); }

// ---------------------------------------------------------------------------
// 1. Oracle equivalence

Outcome criterion1() {
  std::mt19937_64 rng(101);
  const int trials = 1000;
  double worst = 0.0;
  int degenerate = 0;
  for (int t = 0; t < trials; ++t) {
    const auto L = 2 + static_cast<std::int64_t>(sampling::uniform_index(rng, 63));
    const auto d = 1 + static_cast<std::int64_t>(sampling::uniform_index(rng, 16));
    const int classes = 2 + static_cast<int>(sampling::uniform_index(rng, 4));
    auto s = test_helpers::random_anchor_set(rng, L, d, classes, torch::kFloat64, t % 4 != 0);
    auto got = losses::balanced_contrastive_loss(s, 0.1);
    const double want = mcsc_ref::bcl_oracle(to_matrix(s.embeddings), to_ints(s.labels), 0.1);
    degenerate += got.degenerate;
    const double err = want == 0.0 ? std::abs(got.loss.item<double>()) : rel(got.loss.item<double>(), want);
    worst = std::max(worst, err);
  }
  Outcome o;
  o.pass = worst < 1e-6;
  o.detail = fmt("%d sets (L<=64, d<=16, 2-5 classes), worst relative error %.3g (tol 1e-6), %d degenerate", trials,
                 worst, degenerate);
  o.data = {{"trials", trials}, {"worst_relative_error", worst}};
  return o;
}

// ---------------------------------------------------------------------------
// 2. Gradient checks

// Element-wise |a - b| <= 1e-4 * max(|a|, |b|) + 1e-8.
double grad_violation(const std::vector<double>& analytic, const std::vector<double>& numeric) {
  double worst = 0.0;
  for (std::size_t i = 0; i < analytic.size(); ++i) {
    const double tol = 1e-4 * std::max(std::abs(analytic[i]), std::abs(numeric[i])) + 1e-8;
    worst = std::max(worst, std::abs(analytic[i] - numeric[i]) / tol);
  }
  return worst;  // <= 1 passes
}

Outcome criterion2() {
  std::mt19937_64 rng(202);
  const int trials = 100;
  double worst_bcl = 0.0, worst_dice = 0.0;
  double worst_bcl_rel = 0.0, worst_dice_rel = 0.0;
  for (int t = 0; t < trials; ++t) {
    const auto L = 4 + static_cast<std::int64_t>(sampling::uniform_index(rng, 17));
    const auto d = 2 + static_cast<std::int64_t>(sampling::uniform_index(rng, 5));
    const int classes = 2 + static_cast<int>(sampling::uniform_index(rng, 3));
    auto s = test_helpers::random_anchor_set(rng, L, d, classes);
    const double tau = 0.5;  // keeps exponents moderate for finite differences
    auto x = s.embeddings.clone().requires_grad_(true);
    auto set = s;
    set.embeddings = x;
    losses::balanced_contrastive_loss(set, tau).loss.backward();
    auto g = x.grad().contiguous();
    std::vector<double> analytic(g.data_ptr<double>(), g.data_ptr<double>() + g.numel());
    const auto labels = to_ints(s.labels);
    auto flat = s.embeddings.contiguous();
    std::vector<double> x0(flat.data_ptr<double>(), flat.data_ptr<double>() + flat.numel());
    auto f = [&](const std::vector<double>& v) {
      mcsc_ref::Matrix m(L, std::vector<double>(d));
      for (std::int64_t i = 0; i < L; ++i)
        for (std::int64_t j = 0; j < d; ++j) m[i][j] = v[i * d + j];
      return mcsc_ref::bcl_oracle(m, labels, tau);
    };
    auto numeric = mcsc_ref::finite_diff_grad(f, x0, 1e-6);
    worst_bcl = std::max(worst_bcl, grad_violation(analytic, numeric));
    double num = 0, den = 0;
    for (std::size_t i = 0; i < numeric.size(); ++i) {
      num = std::max(num, std::abs(analytic[i] - numeric[i]));
      den = std::max(den, std::abs(numeric[i]));
    }
    worst_bcl_rel = std::max(worst_bcl_rel, num / std::max(den, 1e-12));
  }
  for (int t = 0; t < trials; ++t) {
    const int B = 1 + static_cast<int>(sampling::uniform_index(rng, 2));
    const int C = 2 + static_cast<int>(sampling::uniform_index(rng, 3));
    const int H = 2 + static_cast<int>(sampling::uniform_index(rng, 4));
    const int W = 2 + static_cast<int>(sampling::uniform_index(rng, 4));
    torch::manual_seed(rng());
    auto probs = torch::softmax(torch::randn({B, C, H, W}, torch::kFloat64), 1);
    auto target = torch::randint(0, C, {B, H, W}, torch::kInt64);
    auto x = probs.clone().requires_grad_(true);
    losses::dice_loss(x, target).backward();
    auto g = x.grad().contiguous();
    std::vector<double> analytic(g.data_ptr<double>(), g.data_ptr<double>() + g.numel());
    std::vector<double> p0(probs.data_ptr<double>(), probs.data_ptr<double>() + probs.numel());
    const auto tgt = to_ints(target);
    auto f = [&](const std::vector<double>& v) { return mcsc_ref::dice_loss_oracle(v, tgt, B, C, H, W); };
    auto numeric = mcsc_ref::finite_diff_grad(f, p0, 1e-6);
    worst_dice = std::max(worst_dice, grad_violation(analytic, numeric));
    double num = 0, den = 0;
    for (std::size_t i = 0; i < numeric.size(); ++i) {
      num = std::max(num, std::abs(analytic[i] - numeric[i]));
      den = std::max(den, std::abs(numeric[i]));
    }
    worst_dice_rel = std::max(worst_dice_rel, num / std::max(den, 1e-12));
  }
  Outcome o;
  o.pass = worst_bcl <= 1.0 && worst_dice <= 1.0;
  o.detail = fmt("%d trials each vs central differences of the float64 oracles; contrastive max rel %.2g, dice max rel "
                 "%.2g (tol 1e-4 element-wise)",
                 trials, worst_bcl_rel, worst_dice_rel);
  o.data = {{"trials", trials},
            {"contrastive_max_relative", worst_bcl_rel},
            {"dice_max_relative", worst_dice_rel},
            {"contrastive_violation_ratio", worst_bcl},
            {"dice_violation_ratio", worst_dice}};
  return o;
}

// ---------------------------------------------------------------------------
// 3. Balance property

// Each class is `counts[c]` exact copies of one random unit vector.
losses::AnchorSet copy_class_set(std::mt19937_64& rng, const std::vector<int>& counts, std::int64_t d) {
  torch::manual_seed(rng());
  const auto C = static_cast<std::int64_t>(counts.size());
  auto protos = torch::nn::functional::normalize(torch::randn({C, d}, torch::kFloat64),
                                                 torch::nn::functional::NormalizeFuncOptions().dim(1));
  std::vector<std::int64_t> labels;
  for (std::int64_t c = 0; c < C; ++c)
    for (int k = 0; k < counts[c]; ++k) labels.push_back(c);
  losses::AnchorSet s;
  s.labels = torch::tensor(labels, torch::kInt64);
  auto perm = torch::randperm(s.labels.size(0), torch::kInt64);
  s.labels = s.labels.index({perm});
  s.embeddings = protos.index({s.labels});
  s.valid = torch::ones({s.labels.size(0)}, torch::kBool);
  return s;
}

losses::AnchorSet replicate(const losses::AnchorSet& s, const torch::Tensor& rows_mask, int k) {
  std::vector<torch::Tensor> e{s.embeddings}, y{s.labels};
  for (int i = 1; i < k; ++i) {
    e.push_back(s.embeddings.index({rows_mask}));
    y.push_back(s.labels.index({rows_mask}));
  }
  losses::AnchorSet out;
  out.embeddings = torch::cat(e);
  out.labels = torch::cat(y);
  out.valid = torch::ones({out.labels.size(0)}, torch::kBool);
  return out;
}

double bcl(const losses::AnchorSet& s) { return losses::balanced_contrastive_loss(s, 0.1).loss.item<double>(); }

Outcome criterion3() {
  std::mt19937_64 rng(303);
  const int trials = 200;
  double worst_uniform = 0.0, worst_class = 0.0, worst_perm = 0.0, worst_bg = 0.0;
  for (int t = 0; t < trials; ++t) {
    const int C = 2 + static_cast<int>(sampling::uniform_index(rng, 4));
    const auto d = 2 + static_cast<std::int64_t>(sampling::uniform_index(rng, 15));
    std::vector<int> counts(C);
    for (auto& c : counts) c = 2 + static_cast<int>(sampling::uniform_index(rng, 8));
    auto s = copy_class_set(rng, counts, d);
    const double base = bcl(s);

    // Whole set replicated k-fold.
    const int k = 2 + static_cast<int>(sampling::uniform_index(rng, 4));
    auto all = torch::ones({s.labels.size(0)}, torch::kBool);
    worst_uniform = std::max(worst_uniform, std::abs(bcl(replicate(s, all, k)) - base));

    // One class replicated k-fold: every anchor keeps its value, so the loss
    // is the anchor-weighted mean (A + k B) / (N_o + k n_j). Fit A and B from
    // k = 1, 2 and predict k = 3, 4.
    const auto j = static_cast<std::int64_t>(sampling::uniform_index(rng, C));
    auto cls = s.labels.eq(j);
    const double n_j = counts[j];
    const double n_o = static_cast<double>(s.labels.size(0)) - n_j;
    const double l1 = base, l2 = bcl(replicate(s, cls, 2));
    // l1 (n_o + n_j) = A + B ; l2 (n_o + 2 n_j) = A + 2B
    const double B = l2 * (n_o + 2 * n_j) - l1 * (n_o + n_j);
    const double A = l1 * (n_o + n_j) - B;
    for (int kk : {3, 4}) {
      const double predicted = (A + kk * B) / (n_o + kk * n_j);
      worst_class = std::max(worst_class, std::abs(bcl(replicate(s, cls, kk)) - predicted));
    }

    // Background never anchors: replicating the background class leaves the loss as is.
    auto g = test_helpers::random_anchor_set(rng, 24, d, C);
    losses::ContrastiveOptions db;
    db.discard_background_anchors = true;
    auto bg = g.labels.eq(0);
    auto g2 = replicate(g, bg, k);
    worst_bg = std::max(worst_bg, std::abs(losses::balanced_contrastive_loss(g, 0.1, db).loss.item<double>() -
                                           losses::balanced_contrastive_loss(g2, 0.1, db).loss.item<double>()));

    // Row permutation of a general random set.
    auto r = test_helpers::random_anchor_set(rng, 8 + static_cast<std::int64_t>(sampling::uniform_index(rng, 57)), d, C,
                                             torch::kFloat64, t % 3 != 0);
    auto perm = torch::randperm(r.labels.size(0), torch::kInt64);
    losses::AnchorSet rp;
    rp.embeddings = r.embeddings.index({perm});
    rp.labels = r.labels.index({perm});
    rp.valid = r.valid.index({perm});
    worst_perm = std::max(worst_perm, std::abs(bcl(rp) - bcl(r)));
  }
  Outcome o;
  o.pass = worst_uniform < 1e-6 && worst_class < 1e-6 && worst_perm < 1e-6 && worst_bg < 1e-6;
  o.detail = fmt("%d trials; max change: k-fold set %.2g, k-fold class (per-anchor values) %.2g, background rows %.2g, "
                 "permutation %.2g (tol 1e-6)",
                 trials, worst_uniform, worst_class, worst_bg, worst_perm);
  o.data = {{"trials", trials},
            {"uniform_replication", worst_uniform},
            {"class_replication", worst_class},
            {"background_replication", worst_bg},
            {"permutation", worst_perm}};
  return o;
}

// ---------------------------------------------------------------------------
// 4. Stop-gradient

Outcome criterion4(const fs::path& data_dir) {
  auto manifest = tensorio::load_manifest(data_dir / "manifest.json");
  TrainConfig cfg;
  cfg.batch_size = 4;
  cfg.iterations = 20;
  cfg.patch_sizes = {8, 4, 4};
  cfg.model.proj_hidden = 32;
  cfg.model.proj_out = 16;
  trainer::Trainer tr(manifest, cfg);
  auto attn = tr.model()->attn_parameters();
  auto cnn = tr.model()->cnn_parameters();
  auto max_abs = [](const torch::Tensor& cps, const std::vector<torch::Tensor>& ps) {
    auto gs = torch::autograd::grad({cps}, ps, {}, true, false, true);
    double m = 0.0;
    std::int64_t defined = 0;
    for (auto& g : gs) {
      if (!g.defined()) continue;
      ++defined;
      m = std::max(m, g.abs().max().item<double>());
    }
    return std::pair{m, defined};
  };
  double leak_c2a = 0.0, leak_a2c = 0.0, own_c = 0.0, own_a = 0.0;
  const std::vector<std::int64_t> steps{0, 5, 10, 19};
  for (std::int64_t t = 0; t < cfg.iterations; ++t) {
    auto b = tr.next_batch();
    if (std::find(steps.begin(), steps.end(), t) != steps.end()) {
      auto L = tr.compute_losses(b, t);
      leak_c2a = std::max(leak_c2a, max_abs(L.cps_cnn, attn).first);
      leak_a2c = std::max(leak_a2c, max_abs(L.cps_attn, cnn).first);
      own_c = std::max(own_c, max_abs(L.cps_cnn, tr.model()->cnn->parameters()).first);
      own_a = std::max(own_a, max_abs(L.cps_attn, tr.model()->attn->parameters()).first);
    }
    tr.train_step(b, t);
  }
  Outcome o;
  o.pass = leak_c2a == 0.0 && leak_a2c == 0.0 && own_c > 0.0 && own_a > 0.0;
  o.detail = fmt("max |d cps_cnn / d attn| = %g, max |d cps_attn / d cnn| = %g over %zu steps of a training run; own-branch "
                 "gradients non-zero (%.2g, %.2g)",
                 leak_c2a, leak_a2c, steps.size(), own_c, own_a);
  o.data = {{"cnn_to_attn", leak_c2a}, {"attn_to_cnn", leak_a2c}, {"own_cnn", own_c}, {"own_attn", own_a}};
  return o;
}

// ---------------------------------------------------------------------------
// 5. Schedule

Outcome criterion5() {
  const std::int64_t T = 3000;
  const double e0 = std::abs(schedule::cps_weight(0, T) - 0.1 * std::exp(-5.0));
  const double eT = std::abs(schedule::cps_weight(T, T) - 0.1);
  std::mt19937_64 rng(505);
  std::vector<std::int64_t> ts;
  for (int i = 0; i < 1000; ++i) ts.push_back(static_cast<std::int64_t>(sampling::uniform_index(rng, T + 1)));
  std::sort(ts.begin(), ts.end());
  bool monotone = true;
  for (std::size_t i = 1; i < ts.size(); ++i) {
    monotone = monotone && schedule::cps_weight(ts[i], T) >= schedule::cps_weight(ts[i - 1], T);
  }
  Outcome o;
  o.pass = e0 <= 1e-12 && eT <= 1e-12 && monotone;
  o.detail = fmt("|w(0)-0.1e^-5| = %.2g, |w(T)-0.1| = %.2g (tol 1e-12), monotone over 1000 sampled t: %s", e0, eT,
                 monotone ? "yes" : "no");
  o.data = {{"err_t0", e0}, {"err_T", eT}, {"monotone", monotone}};
  return o;
}

// ---------------------------------------------------------------------------
// 6. Sampling exhaustiveness

Outcome criterion6() {
  std::mt19937_64 rng(606);
  int indivisible = 0, failures = 0;
  const int trials = 100;
  for (int t = 0; t < trials; ++t) {
    const auto h = 2 + static_cast<std::int64_t>(sampling::uniform_index(rng, 63));
    const auto w = t % 2 ? h : 2 + static_cast<std::int64_t>(sampling::uniform_index(rng, 63));
    const auto p = 1 + static_cast<std::int64_t>(sampling::uniform_index(rng, std::min(h, w)));
    const auto maps = 2 * (1 + static_cast<std::int64_t>(sampling::uniform_index(rng, 4)));
    if (h % p || w % p) ++indivisible;
    auto plan = sampling::partition_patches(maps, h, w, p, rng, t % 3 == 0);
    bool ok = plan.groups() == (h / p) * (w / p) && plan.num_maps() == maps;
    for (std::int64_t n = 0; ok && n < maps; ++n) {
      std::vector<int> used(plan.groups(), 0);
      for (std::int64_t m = 0; m < plan.groups(); ++m) ++used.at(plan.cells[m][n]);
      ok = std::all_of(used.begin(), used.end(), [](int u) { return u == 1; });
    }
    // Pixel-level check through the gathered rows.
    const auto N = maps / 2;
    auto emb = torch::zeros({N, 1, h, w});
    auto lab = torch::zeros({N, h, w}, torch::kInt64);
    auto batch = sampling::build_anchor_batch(emb, emb, lab, lab, plan);
    auto counts = torch::bincount(batch.origin.reshape({-1}), {}, 2 * N * h * w).reshape({2 * N, h, w});
    auto region = counts.slice(1, plan.offset_y, plan.offset_y + plan.grid_rows * p)
                      .slice(2, plan.offset_x, plan.offset_x + plan.grid_cols * p);
    ok = ok && region.eq(1).all().item<bool>() && counts.sum().item<std::int64_t>() == region.numel();
    failures += !ok;
  }
  Outcome o;
  o.pass = failures == 0;
  o.detail = fmt("%d random (h, w, h', maps) combinations, %d indivisible, %d failures; every grid cell and pixel used "
                 "exactly once per map",
                 trials, indivisible, failures);
  o.data = {{"trials", trials}, {"indivisible", indivisible}, {"failures", failures}};
  return o;
}

// ---------------------------------------------------------------------------
// 7. Metrics oracle

mcsc_ref::Mask to_mask(const torch::Tensor& t) {
  auto c = t.to(torch::kUInt8).contiguous();
  mcsc_ref::Mask m{static_cast<int>(c.size(0)), static_cast<int>(c.size(1)), {}};
  m.data.assign(c.data_ptr<std::uint8_t>(), c.data_ptr<std::uint8_t>() + c.numel());
  return m;
}

torch::Tensor random_mask(std::mt19937_64& rng, std::int64_t h, std::int64_t w) {
  const auto kind = sampling::uniform_index(rng, 5);
  if (kind == 0) return torch::zeros({h, w}, torch::kBool);
  if (kind == 1) return torch::rand({h, w}) < mcsc::uniform(rng, 0.05, 0.6);
  auto m = torch::zeros({h, w}, torch::kBool);
  const int shapes = 1 + static_cast<int>(sampling::uniform_index(rng, 3));
  for (int s = 0; s < shapes; ++s) {
    const double cy = mcsc::uniform(rng, 0, h), cx = mcsc::uniform(rng, 0, w), r = mcsc::uniform(rng, 0.5, h / 3.0);
    auto yy = torch::arange(h, torch::kFloat64).unsqueeze(1), xx = torch::arange(w, torch::kFloat64).unsqueeze(0);
    m = m | ((yy - cy).pow(2) + (xx - cx).pow(2) <= r * r);
  }
  return m;
}

Outcome criterion7() {
  std::mt19937_64 rng(707);
  torch::manual_seed(707);
  const int trials = 500;
  int hd_mismatch = 0, dsc_mismatch = 0, undefined = 0, identity_fail = 0;
  for (int t = 0; t < trials; ++t) {
    const auto h = 4 + static_cast<std::int64_t>(sampling::uniform_index(rng, 45));
    const auto w = 4 + static_cast<std::int64_t>(sampling::uniform_index(rng, 45));
    auto p = random_mask(rng, h, w), g = random_mask(rng, h, w);
    auto got = metrics::hd95(p, g);
    auto want = mcsc_ref::hd_oracle(to_mask(p), to_mask(g), 95.0);
    if (got.has_value() != want.has_value() || (got && *got != *want)) ++hd_mismatch;
    if (!want) ++undefined;
    // Closed form 2|P n G| / (|P| + |G|) from counts.
    const double inter = (p & g).sum().item<double>();
    const double total = p.sum().item<double>() + g.sum().item<double>();
    const double closed = total == 0 ? 1.0 : 2.0 * inter / total;
    if (std::abs(metrics::dsc(p, g) - closed) > 1e-12) ++dsc_mismatch;
    auto hi = metrics::hd95(p, p);
    if (!hi || *hi != 0.0 || metrics::dsc(p, p) != 1.0) ++identity_fail;
  }
  Outcome o;
  o.pass = hd_mismatch == 0 && dsc_mismatch == 0 && identity_fail == 0;
  o.detail = fmt("%d random mask pairs (%d with HD undefined): hd95 != oracle %d, dsc != closed form %d, identity "
                 "failures %d",
                 trials, undefined, hd_mismatch, dsc_mismatch, identity_fail);
  o.data = {{"trials", trials},
            {"hd_mismatch", hd_mismatch},
            {"dsc_mismatch", dsc_mismatch},
            {"identity_failures", identity_fail}};
  return o;
}

// ---------------------------------------------------------------------------
// 8-10. Desk experiments

// Settings of the desk experiment. Defaults are the shipped preset; a JSON
// file passed with --preset overrides any TrainConfig key.
TrainConfig experiment_config(const nlohmann::json& overrides) {
  TrainConfig c;
  c.batch_size = 4;
  c.iterations = 1000;
  c.validate_every = 100;
  c.patch_sizes = {4, 4, 4};
  c.model.proj_hidden = 64;
  c.model.proj_out = 32;
  // The attention branch underfits at 1e-4 within this budget.
  c.lr0_attn = 5e-4;
  if (!overrides.is_null()) {
    auto j = c.to_json();
    j.merge_patch(overrides);
    c = TrainConfig::from_json(j);
  }
  return c;
}

struct RunResult {
  double test_dsc = 0.0;
  double separation = 0.0;  // only for mcsc and baseline
  double seconds = 0.0;
  std::int64_t best_iteration = 0;
};

const std::vector<std::pair<std::string, std::vector<std::string>>> kVariants{
    {"mcsc", {}},
    {"baseline", {"cl"}},
    {"labeled-only", {"labeled-only"}},
    {"no-cross", {"cross"}},
    {"no-balance", {"balance"}},
    {"single-scale", {"scales=64"}},
};

double embedding_separation(models::DualModel& model, const trainer::SliceSet& test) {
  const auto scale = model->config().tap_scales.front();
  std::vector<torch::Tensor> e, y;
  for (std::int64_t i = 0; i < test.images.size(0); ++i) {
    auto ex = trainer::export_embeddings(model, test.images[i][0], test.labels[i], scale);
    e.push_back(ex.embeddings);
    y.push_back(ex.labels);
  }
  return trainer::mean_centroid_distance(torch::cat(e), torch::cat(y));
}

class Experiments {
 public:
  Experiments(fs::path data_dir, nlohmann::json preset, int seeds)
      : data_dir_(std::move(data_dir)), preset_(std::move(preset)), seeds_(seeds) {}

  const RunResult& get(const std::string& variant, int seed) {
    const auto key = variant + "/" + std::to_string(seed);
    auto it = results_.find(key);
    if (it != results_.end()) return it->second;
    if (!manifest_) {
      manifest_ = tensorio::load_manifest(data_dir_ / "manifest.json");
      test_ = trainer::load_split(*manifest_, tensorio::Split::Test, true);
    }
    auto cfg = experiment_config(preset_);
    cfg.seed = static_cast<std::uint64_t>(seed);
    for (const auto& [name, tokens] : kVariants) {
      if (name == variant)
        for (const auto& tok : tokens) apply_ablation(cfg, tok);
    }
    const auto t0 = std::chrono::steady_clock::now();
    trainer::Trainer tr(*manifest_, cfg);
    auto rec = tr.run();
    auto best = tr.best_model();
    RunResult r;
    r.test_dsc = 100.0 * trainer::evaluate_split(best, test_, manifest_->num_classes).mean_dsc;
    if (variant == "mcsc" || variant == "baseline") r.separation = embedding_separation(best, test_);
    r.best_iteration = rec.best_iteration;
    r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    std::printf("  run %-13s seed %d: test DSC %6.2f  separation %.4f  best@%lld  (%.0f s)\n", variant.c_str(), seed,
                r.test_dsc, r.separation, static_cast<long long>(r.best_iteration), r.seconds);
    std::fflush(stdout);
    return results_[key] = r;
  }

  std::vector<double> dsc(const std::string& variant) {
    std::vector<double> out;
    for (int s = 0; s < seeds_; ++s) out.push_back(get(variant, s).test_dsc);
    return out;
  }
  std::vector<double> separation(const std::string& variant) {
    std::vector<double> out;
    for (int s = 0; s < seeds_; ++s) out.push_back(get(variant, s).separation);
    return out;
  }
  double total_seconds(const std::vector<std::string>& variants) const {
    double t = 0.0;
    for (const auto& [key, r] : results_) {
      const auto v = key.substr(0, key.find('/'));
      if (std::find(variants.begin(), variants.end(), v) != variants.end()) t += r.seconds;
    }
    return t;
  }
  int seeds() const { return seeds_; }
  nlohmann::json config_json() const { return experiment_config(preset_).to_json(); }

 private:
  fs::path data_dir_;
  nlohmann::json preset_;
  int seeds_;
  std::optional<tensorio::DatasetManifest> manifest_;
  trainer::SliceSet test_;
  std::map<std::string, RunResult> results_;
};

double mean(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x;
  return v.empty() ? 0.0 : s / v.size();
}

std::string list(const std::vector<double>& v) {
  std::ostringstream os;
  for (std::size_t i = 0; i < v.size(); ++i) os << (i ? ", " : "") << fmt("%.2f", v[i]);
  return os.str();
}

Outcome criterion8(Experiments& ex) {
  auto m = ex.dsc("mcsc"), b = ex.dsc("baseline"), l = ex.dsc("labeled-only");
  const double mm = mean(m), mb = mean(b), ml = mean(l);
  const double secs = ex.total_seconds({"mcsc", "baseline", "labeled-only"});
  Outcome o;
  const bool order = mm > mb && mb > ml;
  const bool margins = mm - ml >= 5.0 && mm - mb >= 1.0;
  const bool runtime = secs <= 1800.0;
  o.pass = order && margins && runtime;
  o.detail = fmt("mean test DSC mcsc %.2f > baseline %.2f > labeled-only %.2f: %s; mcsc-labeled-only %.2f (>= 5), "
                 "mcsc-baseline %.2f (>= 1); %d seeds in %.0f s (<= 1800)",
                 mm, mb, ml, order ? "yes" : "no", mm - ml, mm - mb, ex.seeds(), secs);
  o.data = {{"mcsc", m}, {"baseline", b}, {"labeled_only", l}, {"seconds", secs}};
  return o;
}

Outcome criterion9(Experiments& ex) {
  const double full = mean(ex.dsc("mcsc"));
  Outcome o;
  o.pass = true;
  std::ostringstream detail;
  detail << fmt("full %.2f", full);
  for (const auto* v : {"no-cross", "no-balance", "single-scale"}) {
    auto d = ex.dsc(v);
    const double mv = mean(d);
    const bool ok = mv <= full + 0.5;
    o.pass = o.pass && ok;
    detail << fmt("; %s %.2f (%s)", v, mv, ok ? "<= full+0.5" : "ABOVE full+0.5");
    o.data[v] = d;
  }
  o.data["mcsc"] = ex.dsc("mcsc");
  o.detail = detail.str();
  return o;
}

Outcome criterion10(Experiments& ex) {
  auto m = ex.separation("mcsc"), b = ex.separation("baseline");
  int seeds_larger = 0;
  for (std::size_t i = 0; i < m.size(); ++i) seeds_larger += m[i] > b[i];
  Outcome o;
  o.pass = mean(m) > mean(b) && seeds_larger == static_cast<int>(m.size());
  o.detail = fmt("mean inter-class centroid distance (full-resolution CNN embeddings, test slices) mcsc [%s] vs "
                 "baseline [%s]; larger on %d/%zu seeds",
                 list(m).c_str(), list(b).c_str(), seeds_larger, m.size());
  o.data = {{"mcsc", m}, {"baseline", b}};
  return o;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Acceptance suite"};
  std::string workdir = (fs::temp_directory_path() / "mcsc_acceptance").string();
  std::vector<int> only;
  int seeds = 3;
  std::string preset_path;
  app.add_option("--workdir", workdir, "Scratch directory for the generated dataset and the report");
  app.add_option("--only", only, "Run only these criteria")->delimiter(',');
  app.add_option("--seeds", seeds, "Seeds for the desk experiments")->capture_default_str();
  app.add_option("--preset", preset_path, "JSON overrides for the desk experiment TrainConfig");
  CLI11_PARSE(app, argc, argv);

  nlohmann::json preset;
  if (!preset_path.empty()) preset = nlohmann::json::parse(std::ifstream(preset_path));

  const fs::path work = workdir;
  fs::create_directories(work);
  const auto data_dir = work / "data";
  bool have_data = false;
  auto ensure_data = [&] {
    if (have_data) return;
    fs::remove_all(data_dir);
    synthdata::generate_dataset(synthdata::SynthConfig{}, data_dir, synthdata::SplitFractions{});
    have_data = true;
  };

  Experiments ex(data_dir, preset, seeds);
  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria{
      {"oracle equivalence of the balanced contrastive loss", criterion1},
      {"gradient checks (contrastive, dice)", criterion2},
      {"balance property (duplication, permutation)", criterion3},
      {"stop-gradient between branches",
       [&] {
         ensure_data();
         return criterion4(data_dir);
       }},
      {"cps weight schedule", criterion5},
      {"patch sampling exhaustiveness", criterion6},
      {"metrics vs oracle", criterion7},
      {"end-to-end ordering mcsc > baseline > labeled-only",
       [&] {
         ensure_data();
         return criterion8(ex);
       }},
      {"ablation directions",
       [&] {
         ensure_data();
         return criterion9(ex);
       }},
      {"embedding separation",
       [&] {
         ensure_data();
         return criterion10(ex);
       }},
  };

  nlohmann::ordered_json report;
  report["experiment_config"] = ex.config_json();
  report["seeds"] = seeds;
  int failed = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const int id = static_cast<int>(i) + 1;
    if (!only.empty() && std::find(only.begin(), only.end(), id) == only.end()) continue;
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o.pass = false;
      o.detail = std::string("exception: ") + e.what();
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    std::printf("CRITERION %2d %s  %s: %s [%.1f s]\n", id, o.pass ? "PASS" : "FAIL", criteria[i].first.c_str(),
                o.detail.c_str(), secs);
    std::fflush(stdout);
    failed += !o.pass;
    report["criteria"][std::to_string(id)] = {
        {"name", criteria[i].first}, {"pass", o.pass}, {"detail", o.detail}, {"seconds", secs}, {"data", o.data}};
  }
  std::ofstream(work / "acceptance_report.json") << report.dump(2) << '\n';
  std::printf("%d criteria failed; report: %s\n", failed, (work / "acceptance_report.json").c_str());
  return failed == 0 ? 0 : 1;
}
