#include "mcsc/synthdata.hpp"

#include "mcsc/random.hpp"

#include <algorithm>
#include <cstdio>
#include <cmath>
#include <numbers>
#include <stdexcept>
#include <string>

namespace mcsc::synthdata {

namespace fs = std::filesystem;

void SynthConfig::validate() const {
  if (num_classes < 2) throw std::invalid_argument("num_classes must be >= 2");
  if (num_classes > 4) throw std::invalid_argument("the generator draws at most 4 classes");
  if (height < 32 || width < 32) throw std::invalid_argument("image size must be at least 32x32");
  if (n_cases <= 0 || slices_per_case <= 0) throw std::invalid_argument("n_cases and slices_per_case must be positive");
  if (class3_presence_prob < 0.0 || class3_presence_prob > 1.0) {
    throw std::invalid_argument("class3_presence_prob must lie in [0, 1]");
  }
  if (noise_std < 0.0 || bias_field_strength < 0.0) throw std::invalid_argument("noise and bias must be non-negative");
}

std::mt19937_64 case_rng(std::uint64_t seed, int case_index) {
  return derive_rng(seed, 0x1000u + static_cast<std::uint64_t>(case_index));
}

namespace {

// Latent anatomy of one slice, in pixel units.
struct SliceGeometry {
  double cy, cx;
  double disk_r;
  double ring_r;            // outer radius of the ring
  double crescent_cy, crescent_cx, crescent_r;
};

bool fits(const SliceGeometry& g, int h, int w) {
  const double margin = 2.0;
  auto inside = [&](double cy, double cx, double r) {
    return cy - r >= margin && cy + r <= h - 1 - margin && cx - r >= margin && cx + r <= w - 1 - margin;
  };
  return inside(g.cy, g.cx, g.ring_r) && inside(g.crescent_cy, g.crescent_cx, g.crescent_r);
}

}  // namespace

CaseData generate_case(const SynthConfig& config, std::mt19937_64& rng) {
  config.validate();
  const int h = config.height, w = config.width, slices = config.slices_per_case;
  const double scale = std::min(h, w);

  // Start and end geometry of the case; slices interpolate linearly plus jitter.
  struct Endpoints {
    double cy0, cx0, cy1, cx1, disk0, disk1, thickness, angle0, angle1, cres_scale, cres_offset;
  } e{};
  std::vector<SliceGeometry> geometry(slices);
  const bool crescent = config.num_classes > 3 && bernoulli(rng, config.class3_presence_prob);
  for (int attempt = 0;; ++attempt) {
    if (attempt > 1000) throw std::runtime_error("synthdata: could not place structures inside the image");
    e.cy0 = uniform(rng, 0.38, 0.62) * h;
    e.cx0 = uniform(rng, 0.38, 0.62) * w;
    e.cy1 = e.cy0 + uniform(rng, -0.06, 0.06) * h;
    e.cx1 = e.cx0 + uniform(rng, -0.06, 0.06) * w;
    e.disk0 = uniform(rng, 0.085, 0.125) * scale;
    e.disk1 = e.disk0 * uniform(rng, 0.8, 1.0);
    e.thickness = uniform(rng, 0.035, 0.055) * scale;
    e.angle0 = uniform(rng, 0.0, 2.0 * std::numbers::pi);
    e.angle1 = e.angle0 + uniform(rng, -0.3, 0.3);
    e.cres_scale = uniform(rng, 1.05, 1.35);
    e.cres_offset = uniform(rng, 0.55, 0.8);
    bool ok = true;
    for (int s = 0; s < slices && ok; ++s) {
      const double t = slices > 1 ? static_cast<double>(s) / (slices - 1) : 0.0;
      auto& g = geometry[s];
      g.cy = e.cy0 + t * (e.cy1 - e.cy0) + normal(rng, 0.0, 0.3);
      g.cx = e.cx0 + t * (e.cx1 - e.cx0) + normal(rng, 0.0, 0.3);
      g.disk_r = std::max(2.0, e.disk0 + t * (e.disk1 - e.disk0) + normal(rng, 0.0, 0.15));
      g.ring_r = g.disk_r + e.thickness;
      const double angle = e.angle0 + t * (e.angle1 - e.angle0);
      g.crescent_r = g.ring_r * e.cres_scale;
      const double offset = g.ring_r * (1.0 + e.cres_offset) - g.crescent_r * 0.5;
      g.crescent_cy = g.cy + offset * std::sin(angle);
      g.crescent_cx = g.cx + offset * std::cos(angle);
      SliceGeometry ring_only = g;
      ring_only.crescent_cy = g.cy;
      ring_only.crescent_cx = g.cx;
      ring_only.crescent_r = g.ring_r;
      ok = fits(crescent ? g : ring_only, h, w);
    }
    if (ok) break;
  }

  // Case-level intensity profile; the crescent is about as bright as the disk.
  double means[4];
  means[0] = uniform(rng, 0.08, 0.3);
  means[1] = uniform(rng, 0.6, 0.9);
  means[2] = uniform(rng, 0.32, 0.48);
  means[3] = std::clamp(means[1] + uniform(rng, -0.12, 0.08), 0.0, 1.0);
  const double drift[4] = {uniform(rng, -0.03, 0.03), uniform(rng, -0.05, 0.05), uniform(rng, -0.04, 0.04),
                           uniform(rng, -0.05, 0.05)};

  CaseData out;
  out.has_crescent = crescent;
  out.images = torch::empty({slices, h, w}, torch::kFloat32);
  out.labels = torch::empty({slices, h, w}, torch::kUInt8);
  out.class_means = torch::empty({slices, config.num_classes}, torch::kFloat32);
  auto img = out.images.accessor<float, 3>();
  auto lab = out.labels.accessor<std::uint8_t, 3>();
  auto cm = out.class_means.accessor<float, 2>();

  for (int s = 0; s < slices; ++s) {
    const auto& g = geometry[s];
    const double t = slices > 1 ? static_cast<double>(s) / (slices - 1) : 0.0;
    float slice_means[4];
    for (int c = 0; c < 4; ++c) slice_means[c] = static_cast<float>(std::clamp(means[c] + t * drift[c], 0.0, 1.0));
    for (int c = 0; c < config.num_classes; ++c) cm[s][c] = slice_means[c];

    // Smooth multiplicative bias: a random low-order polynomial over [-1, 1]^2.
    const double a = uniform(rng, -1.0, 1.0), b = uniform(rng, -1.0, 1.0), c2 = uniform(rng, -1.0, 1.0);
    const double d2 = uniform(rng, -1.0, 1.0);
    for (int y = 0; y < h; ++y) {
      const double v = 2.0 * y / (h - 1) - 1.0;
      for (int x = 0; x < w; ++x) {
        const double u = 2.0 * x / (w - 1) - 1.0;
        const double dy = y - g.cy, dx = x - g.cx;
        const double r = std::sqrt(dy * dy + dx * dx);
        int cls = 0;
        if (r < g.disk_r) {
          cls = 1;
        } else if (r < g.ring_r) {
          cls = 2;
        } else if (crescent) {
          const double cy = y - g.crescent_cy, cx = x - g.crescent_cx;
          // One pixel of background separates the crescent from the ring.
          if (std::sqrt(cy * cy + cx * cx) < g.crescent_r && r >= g.ring_r + 1.0) cls = 3;
        }
        cls = std::min(cls, config.num_classes - 1);
        lab[s][y][x] = static_cast<std::uint8_t>(cls);
        double value = slice_means[cls];
        if (config.bias_field_strength > 0.0) {
          const double field = 1.0 + config.bias_field_strength * 0.5 * (a * u + b * v + c2 * u * v + d2 * (u * u - v * v));
          value *= std::max(field, 0.0);
        }
        if (config.noise_std > 0.0) value += normal(rng, 0.0, config.noise_std);
        img[s][y][x] = static_cast<float>(std::clamp(value, 0.0, 1.0));
      }
    }
  }
  return out;
}

std::array<int, 4> split_counts(int n_cases, const SplitFractions& f) {
  const double fr[4] = {f.labeled_train, f.unlabeled_train, f.val, f.test};
  double sum = 0.0;
  for (double v : fr) {
    if (v < 0.0) throw std::invalid_argument("split fractions must be non-negative");
    sum += v;
  }
  if (std::abs(sum - 1.0) > 1e-6) {
    throw std::invalid_argument("split fractions must sum to 1 (got " + std::to_string(sum) + ")");
  }
  std::array<int, 4> counts{};
  double remainder[4];
  int assigned = 0;
  for (int i = 0; i < 4; ++i) {
    const double exact = fr[i] * n_cases;
    counts[i] = static_cast<int>(std::floor(exact + 1e-9));
    remainder[i] = exact - counts[i];
    assigned += counts[i];
  }
  while (assigned < n_cases) {
    int best = 0;
    for (int i = 1; i < 4; ++i) {
      if (remainder[i] > remainder[best] + 1e-12) best = i;
    }
    ++counts[best];
    remainder[best] = -1.0;
    ++assigned;
  }
  for (int i = 0; i < 4; ++i) {
    if (counts[i] == 0) {
      throw std::invalid_argument("n_cases=" + std::to_string(n_cases) + " is too small to populate split " +
                                  tensorio::to_string(static_cast<tensorio::Split>(i)));
    }
  }
  return counts;
}

tensorio::DatasetManifest generate_dataset(const SynthConfig& config, const fs::path& out_dir,
                                           const SplitFractions& fractions, DatasetSummary* summary) {
  config.validate();
  const auto counts = split_counts(config.n_cases, fractions);
  fs::create_directories(out_dir / "images");
  fs::create_directories(out_dir / "labels");

  tensorio::DatasetManifest m;
  m.num_classes = config.num_classes;
  m.height = config.height;
  m.width = config.width;
  m.root = out_dir;

  std::vector<double> pixels(config.num_classes, 0.0);
  int split = 0, used = 0;
  for (int i = 0; i < config.n_cases; ++i) {
    while (used == counts[split]) {
      ++split;
      used = 0;
    }
    ++used;
    char id[32];
    std::snprintf(id, sizeof(id), "case_%03d", i);
    auto rng = case_rng(config.seed, i);
    const auto data = generate_case(config, rng);

    tensorio::CaseEntry entry;
    entry.case_id = id;
    fs::create_directories(out_dir / "images" / id);
    fs::create_directories(out_dir / "labels" / id);
    for (int s = 0; s < config.slices_per_case; ++s) {
      char name[32];
      std::snprintf(name, sizeof(name), "slice_%02d.mcst", s);
      const std::string image_rel = std::string("images/") + id + "/" + name;
      const std::string label_rel = std::string("labels/") + id + "/" + name;
      tensorio::write_tensor(out_dir / image_rel, data.images[s], tensorio::DType::Float32);
      tensorio::write_tensor(out_dir / label_rel, data.labels[s], tensorio::DType::UInt8);
      entry.slices.push_back({s, image_rel, label_rel});
    }
    auto hist = torch::bincount(data.labels.flatten().to(torch::kInt64), {}, config.num_classes).to(torch::kFloat64);
    for (int c = 0; c < config.num_classes; ++c) pixels[c] += hist[c].item<double>();
    m.splits.emplace(entry.case_id, static_cast<tensorio::Split>(split));
    m.cases.push_back(std::move(entry));
  }
  tensorio::save_manifest(m, out_dir / "manifest.json");
  tensorio::validate_manifest(m);
  if (summary) {
    double total = 0.0;
    for (double p : pixels) total += p;
    summary->class_fraction.clear();
    for (double p : pixels) summary->class_fraction.push_back(p / total);
  }
  return m;
}

}  // namespace mcsc::synthdata
