#include "helpers.hpp"
#include "mcsc/metrics.hpp"
#include "mcsc/synthdata.hpp"

#include "doctest_torch.hpp"

#include <fstream>
#include <iterator>

using namespace mcsc::synthdata;
namespace fs = std::filesystem;

namespace {

std::vector<char> slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

}  // namespace

TEST_CASE("generated case shapes and label validity") {
  SynthConfig c;
  auto rng = case_rng(0, 0);
  auto data = generate_case(c, rng);
  CHECK(data.images.sizes() == torch::IntArrayRef({8, 64, 64}));
  CHECK((data.labels.scalar_type() == torch::kUInt8));
  CHECK(data.images.min().item<float>() >= 0.0f);
  CHECK(data.images.max().item<float>() <= 1.0f);
  CHECK(data.labels.max().item<int>() < c.num_classes);
}

TEST_CASE("ring strictly surrounds the disk") {
  SynthConfig c;
  for (int idx = 0; idx < 10; ++idx) {
    auto rng = case_rng(3, idx);
    auto lab = generate_case(c, rng).labels.to(torch::kInt64);
    auto padded = torch::constant_pad_nd(lab, {1, 1, 1, 1}, 0);
    const auto H = lab.size(1), W = lab.size(2);
    auto disk = lab.eq(1);
    for (auto [dy, dx] : std::vector<std::pair<int, int>>{{0, 1}, {2, 1}, {1, 0}, {1, 2}}) {
      auto nb = padded.slice(1, dy, dy + H).slice(2, dx, dx + W);
      auto ok = nb.eq(1) | nb.eq(2);
      CHECK((disk & ~ok).sum().item<std::int64_t>() == 0);
    }
  }
}

TEST_CASE("noise-free images equal the class means") {
  SynthConfig c;
  c.noise_std = 0.0;
  c.bias_field_strength = 0.0;
  auto rng = case_rng(1, 0);
  auto data = generate_case(c, rng);
  for (std::int64_t s = 0; s < data.images.size(0); ++s) {
    for (int k = 0; k < c.num_classes; ++k) {
      auto mask = data.labels[s].eq(k);
      if (!mask.any().item<bool>()) continue;
      auto vals = data.images[s].masked_select(mask);
      CHECK(vals.max().item<float>() == doctest::Approx(data.class_means[s][k].item<float>()).epsilon(1e-6));
      CHECK(vals.min().item<float>() == doctest::Approx(data.class_means[s][k].item<float>()).epsilon(1e-6));
    }
  }
}

TEST_CASE("class 3 absent when its presence probability is zero") {
  SynthConfig c;
  c.class3_presence_prob = 0.0;
  for (int idx = 0; idx < 10; ++idx) {
    auto rng = case_rng(0, idx);
    CHECK(generate_case(c, rng).labels.eq(3).sum().item<std::int64_t>() == 0);
  }
}

TEST_CASE("config validation") {
  SynthConfig c;
  c.height = 16;
  CHECK_THROWS(c.validate());
  c = {};
  c.num_classes = 1;
  CHECK_THROWS(c.validate());
  c = {};
  c.class3_presence_prob = 1.5;
  CHECK_THROWS(c.validate());
}

TEST_CASE("split counts") {
  CHECK(split_counts(20, {}) == std::array<int, 4>{1, 13, 3, 3});
  CHECK(split_counts(10, {0.1, 0.5, 0.2, 0.2}) == std::array<int, 4>{1, 5, 2, 2});
  CHECK_THROWS(split_counts(4, {1.0, 0.0, 0.0, 0.0}));
  CHECK_THROWS(split_counts(3, {}));
}

TEST_CASE("default dataset: determinism, splits and imbalance") {
  auto a = test_helpers::temp_dir("synth_a");
  auto b = test_helpers::temp_dir("synth_b");
  SynthConfig c;
  DatasetSummary summary;
  auto m = generate_dataset(c, a, {}, &summary);
  generate_dataset(c, b, {}, nullptr);
  CHECK_NOTHROW(mcsc::tensorio::load_manifest(a / "manifest.json"));
  CHECK(m.cases_in(mcsc::tensorio::Split::LabeledTrain).size() == 1);
  CHECK(m.cases_in(mcsc::tensorio::Split::UnlabeledTrain).size() == 13);
  CHECK(m.cases_in(mcsc::tensorio::Split::Val).size() == 3);
  CHECK(m.cases_in(mcsc::tensorio::Split::Test).size() == 3);
  CHECK(slurp(a / "manifest.json") == slurp(b / "manifest.json"));
  for (const auto& entry : fs::recursive_directory_iterator(a)) {
    if (!entry.is_regular_file()) continue;
    CHECK(slurp(entry.path()) == slurp(b / fs::relative(entry.path(), a)));
  }

  // Per-slice background fraction of the seed-0 default dataset, frozen.
  double lo = 1.0, hi = 0.0, sum = 0.0;
  int n = 0;
  std::vector<double> consecutive, cross;
  std::vector<torch::Tensor> first_slices;
  for (const auto& cs : m.cases) {
    torch::Tensor prev;
    for (const auto& s : cs.slices) {
      auto lab = mcsc::tensorio::read_tensor(m.resolve(*s.label));
      const double bg = lab.eq(0).to(torch::kFloat64).mean().item<double>();
      lo = std::min(lo, bg);
      hi = std::max(hi, bg);
      sum += bg;
      ++n;
      if (prev.defined()) consecutive.push_back(mcsc::metrics::dsc(prev.gt(0), lab.gt(0)));
      else first_slices.push_back(lab);
      prev = lab;
    }
  }
  CHECK(lo >= 0.80);
  CHECK(hi <= 0.97);
  CHECK(lo == doctest::Approx(0.815185546875).epsilon(1e-12));
  CHECK(hi == doctest::Approx(0.956298828125).epsilon(1e-12));
  CHECK(sum / n == doctest::Approx(0.9000762939453125).epsilon(1e-12));
  CHECK(sum / n > 0.75);
  CHECK(summary.class_fraction[0] == doctest::Approx(sum / n).epsilon(1e-9));

  for (std::size_t i = 0; i + 1 < first_slices.size(); ++i) {
    cross.push_back(mcsc::metrics::dsc(first_slices[i].gt(0), first_slices[i + 1].gt(0)));
  }
  auto mean = [](const std::vector<double>& v) {
    double s = 0;
    for (double x : v) s += x;
    return s / v.size();
  };
  CHECK(mean(consecutive) > mean(cross));
  fs::remove_all(a);
  fs::remove_all(b);
}
