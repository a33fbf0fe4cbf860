#pragma once

#include <torch/torch.h>

#include <json.hpp>

#include <filesystem>
#include <string>
#include <utility>
#include <vector>

namespace mcsc::models {

using Scale = std::pair<std::int64_t, std::int64_t>;  // (h, w) of a feature map

struct ModelConfig {
  int num_classes = 4;
  int in_channels = 1;
  std::int64_t image_h = 64;
  std::int64_t image_w = 64;
  int cnn_base_channels = 16;
  int cnn_depth = 4;
  int attn_embed_dim = 64;
  int attn_heads = 4;
  int attn_blocks = 4;
  int attn_patch = 4;
  std::vector<Scale> tap_scales{{64, 64}, {16, 16}, {8, 8}};
  int proj_hidden = 256;
  int proj_out = 128;
  bool proj_nonlinearity = true;
  bool normalize_embeddings = true;

  // Throws std::invalid_argument when the image size or taps cannot be produced.
  void validate() const;

  // Decoder stage sizes, coarsest first (the bottleneck counts as the first stage).
  std::vector<Scale> cnn_stage_sizes() const;
  std::vector<Scale> attn_stage_sizes() const;
  std::vector<int> cnn_stage_channels() const;
  std::vector<int> attn_stage_channels() const;
  int cnn_tap_channels(std::size_t tap) const;
  int attn_tap_channels(std::size_t tap) const;
  std::size_t tap_index(const Scale& scale) const;

  nlohmann::json to_json() const;
  static ModelConfig from_json(const nlohmann::json& j);
};

struct BranchOutput {
  torch::Tensor logits;                 // B x C x H x W
  std::vector<torch::Tensor> features;  // one per tap scale, B x c_s x h_s x w_s
};

class ConvBlockImpl : public torch::nn::Module {
 public:
  ConvBlockImpl(int in_ch, int out_ch);
  torch::Tensor forward(torch::Tensor x);

 private:
  torch::nn::Conv2d conv1_{nullptr}, conv2_{nullptr};
  torch::nn::GroupNorm norm1_{nullptr}, norm2_{nullptr};
};
TORCH_MODULE(ConvBlock);

// U-Net: `cnn_depth` encoder stages that double the channels and halve the
// resolution, mirrored by a decoder with skip connections.
class CnnUNetImpl : public torch::nn::Module {
 public:
  explicit CnnUNetImpl(const ModelConfig& config);
  BranchOutput forward(const torch::Tensor& images);
  torch::nn::Conv2d& classifier() { return head_; }

 private:
  ModelConfig config_;
  std::vector<std::size_t> tap_stage_;  // decoder stage feeding each tap
  torch::nn::ModuleList encoder_, up_, decoder_;
  torch::nn::Conv2d head_{nullptr};
};
TORCH_MODULE(CnnUNet);

class TransformerBlockImpl : public torch::nn::Module {
 public:
  TransformerBlockImpl(int dim, int heads);
  // tokens: B x N x dim
  torch::Tensor forward(const torch::Tensor& tokens);

 private:
  torch::nn::LayerNorm norm1_{nullptr}, norm2_{nullptr};
  torch::nn::MultiheadAttention attn_{nullptr};
  torch::nn::Linear fc1_{nullptr}, fc2_{nullptr};
};
TORCH_MODULE(TransformerBlock);

// ViT-style U-shaped network: patch embedding and global self-attention at
// 1/p resolution, a patch-merging stage with attention at 1/2p, then a
// convolutional upsampling decoder back to full resolution.
class AttnUNetImpl : public torch::nn::Module {
 public:
  explicit AttnUNetImpl(const ModelConfig& config);
  BranchOutput forward(const torch::Tensor& images);
  torch::nn::Conv2d& classifier() { return head_; }

 private:
  torch::Tensor run_blocks(torch::nn::ModuleList& blocks, torch::Tensor x);

  ModelConfig config_;
  std::vector<std::size_t> tap_stage_;
  torch::nn::Conv2d embed_{nullptr}, merge_{nullptr};
  torch::Tensor pos_embed_;
  torch::nn::ModuleList stage1_, stage2_;
  torch::nn::ModuleList up_, decoder_;
  torch::nn::Conv2d head_{nullptr};
};
TORCH_MODULE(AttnUNet);

enum class Branch { Cnn = 0, Attn = 1 };

// Per tap scale: one first layer per branch and one second layer that both
// branches use.
class ProjectorBankImpl : public torch::nn::Module {
 public:
  explicit ProjectorBankImpl(const ModelConfig& config);

  // features: B x c_s x h_s x w_s -> B x proj_out x h_s x w_s
  torch::Tensor project(const torch::Tensor& features, std::size_t tap, Branch branch);

  torch::nn::Conv2d& first(std::size_t tap, Branch branch);
  torch::nn::Conv2d& shared(std::size_t tap) { return shared_.at(tap); }
  std::size_t scales() const { return shared_.size(); }

 private:
  ModelConfig config_;
  std::vector<torch::nn::Conv2d> first_cnn_, first_attn_, shared_;
};
TORCH_MODULE(ProjectorBank);

class DualModelImpl : public torch::nn::Module {
 public:
  explicit DualModelImpl(const ModelConfig& config);

  BranchOutput forward_cnn(const torch::Tensor& images) { return cnn->forward(images); }
  BranchOutput forward_attn(const torch::Tensor& images) { return attn->forward(images); }

  // Embeddings for a tap given by its (h, w); throws when it is not a tap scale.
  torch::Tensor project(const torch::Tensor& features, const Scale& scale, Branch branch);

  // Optimizer groups. The shared projector layers belong to the CNN group.
  std::vector<torch::Tensor> cnn_parameters();
  std::vector<torch::Tensor> attn_parameters();
  std::vector<torch::Tensor> shared_projector_parameters();

  const ModelConfig& config() const { return config_; }

  CnnUNet cnn{nullptr};
  AttnUNet attn{nullptr};
  ProjectorBank projectors{nullptr};

 private:
  ModelConfig config_;
};
TORCH_MODULE(DualModel);

// Builds the model with a fixed seed for parameter initialisation.
DualModel make_model(const ModelConfig& config, std::uint64_t seed);

// Checkpoint directory: index.json (model config plus name -> file -> shape)
// and one TensorFile per named parameter under params/.
void save_checkpoint(DualModel& model, const std::filesystem::path& dir, const nlohmann::json& extra = {});

enum class LoadScope { Full, CnnOnly };

// CnnOnly requires only the CNN parameters to be present; anything else listed
// in the index is loaded when its file exists.
DualModel load_checkpoint(const std::filesystem::path& dir, LoadScope scope = LoadScope::Full);

nlohmann::json read_checkpoint_index(const std::filesystem::path& dir);

}  // namespace mcsc::models
