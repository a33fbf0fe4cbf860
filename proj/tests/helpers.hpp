#pragma once

#include "mcsc/losses.hpp"
#include "mcsc_ref/oracles.hpp"

#include <torch/torch.h>

#include <unistd.h>

#include <filesystem>
#include <random>
#include <string>
#include <vector>

namespace test_helpers {

inline mcsc_ref::Matrix to_matrix(const torch::Tensor& t) {
  auto c = t.to(torch::kFloat64).contiguous();
  mcsc_ref::Matrix m(c.size(0), std::vector<double>(c.size(1)));
  auto a = c.accessor<double, 2>();
  for (std::int64_t i = 0; i < c.size(0); ++i)
    for (std::int64_t j = 0; j < c.size(1); ++j) m[i][j] = a[i][j];
  return m;
}

inline std::vector<int> to_ints(const torch::Tensor& t) {
  auto c = t.to(torch::kInt64).contiguous();
  std::vector<int> out(c.numel());
  for (std::int64_t i = 0; i < c.numel(); ++i) out[i] = static_cast<int>(c.data_ptr<std::int64_t>()[i]);
  return out;
}

// Random unit-norm anchor set; labels drawn from `classes` values, every class
// forced to appear at least twice when `paired`.
inline mcsc::losses::AnchorSet random_anchor_set(std::mt19937_64& rng, std::int64_t L, std::int64_t d, int classes,
                                                 torch::Dtype dtype = torch::kFloat64, bool paired = true) {
  auto gen_seed = static_cast<std::uint64_t>(rng());
  torch::manual_seed(gen_seed);
  mcsc::losses::AnchorSet s;
  auto e = torch::randn({L, d}, torch::TensorOptions().dtype(torch::kFloat64));
  s.embeddings = torch::nn::functional::normalize(e, torch::nn::functional::NormalizeFuncOptions().dim(1)).to(dtype);
  auto labels = torch::randint(0, classes, {L}, torch::kInt64);
  if (paired && L >= 2 * classes) {
    for (int c = 0; c < classes; ++c) {
      labels[2 * c] = c;
      labels[2 * c + 1] = c;
    }
    labels = labels.index({torch::randperm(L, torch::kInt64)});
  }
  s.labels = labels;
  s.valid = torch::ones({L}, torch::kBool);
  return s;
}

inline std::filesystem::path temp_dir(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("mcsc_test_" + name + "_" + std::to_string(::getpid()));
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p;
}

inline double rel_err(double a, double b) { return std::abs(a - b) / std::max(1.0, std::max(std::abs(a), std::abs(b))); }

}  // namespace test_helpers
