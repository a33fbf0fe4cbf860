#pragma once

#include "mcsc/config.hpp"
#include "mcsc/synthdata.hpp"

#include <filesystem>

namespace test_helpers {

inline mcsc::TrainConfig tiny_train_config() {
  mcsc::TrainConfig c;
  auto& m = c.model;
  m.image_h = m.image_w = 32;
  m.cnn_base_channels = 8;
  m.attn_embed_dim = 16;
  m.attn_heads = 2;
  m.attn_blocks = 2;
  m.tap_scales = {{32, 32}, {8, 8}, {4, 4}};
  m.proj_hidden = 16;
  m.proj_out = 8;
  c.patch_sizes = {8, 4, 2};
  c.batch_size = 4;
  c.iterations = 6;
  c.validate_every = 3;
  return c;
}

inline mcsc::tensorio::DatasetManifest tiny_dataset(const std::filesystem::path& dir, std::uint64_t seed = 0) {
  mcsc::synthdata::SynthConfig s;
  s.seed = seed;
  s.n_cases = 8;
  s.slices_per_case = 2;
  s.height = s.width = 32;
  return mcsc::synthdata::generate_dataset(s, dir, {0.25, 0.25, 0.25, 0.25});
}

}  // namespace test_helpers
