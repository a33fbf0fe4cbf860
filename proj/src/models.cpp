#include "mcsc/models.hpp"

#include "mcsc/tensorio.hpp"

#include <fstream>
#include <numeric>
#include <set>
#include <stdexcept>
#include <string>

namespace mcsc::models {

namespace fs = std::filesystem;
namespace F = torch::nn::functional;
namespace nn = torch::nn;

namespace {

bool is_power_of_two(std::int64_t v) { return v > 0 && (v & (v - 1)) == 0; }

std::string scale_str(const Scale& s) { return std::to_string(s.first) + "x" + std::to_string(s.second); }

int log2_int(std::int64_t v) {
  int k = 0;
  while ((std::int64_t{1} << k) < v) ++k;
  return k;
}

}  // namespace

// ---------------------------------------------------------------------------
// ModelConfig

std::vector<Scale> ModelConfig::cnn_stage_sizes() const {
  std::vector<Scale> out;
  for (int k = 0; k < cnn_depth; ++k) {
    const auto f = std::int64_t{1} << (cnn_depth - 1 - k);
    out.emplace_back(image_h / f, image_w / f);
  }
  return out;
}

std::vector<int> ModelConfig::cnn_stage_channels() const {
  std::vector<int> out;
  for (int k = 0; k < cnn_depth; ++k) out.push_back(cnn_base_channels << (cnn_depth - 1 - k));
  return out;
}

std::vector<Scale> ModelConfig::attn_stage_sizes() const {
  std::vector<Scale> out;
  const std::int64_t coarse = 2 * attn_patch;
  out.emplace_back(image_h / coarse, image_w / coarse);
  for (std::int64_t f = attn_patch; f >= 1; f /= 2) out.emplace_back(image_h / f, image_w / f);
  return out;
}

std::vector<int> ModelConfig::attn_stage_channels() const {
  std::vector<int> out{2 * attn_embed_dim, attn_embed_dim};
  const int finer = log2_int(attn_patch);
  int ch = attn_embed_dim;
  for (int k = 0; k < finer; ++k) {
    ch = std::max(8, ch / 2);
    out.push_back(ch);
  }
  return out;
}

std::size_t ModelConfig::tap_index(const Scale& scale) const {
  for (std::size_t i = 0; i < tap_scales.size(); ++i) {
    if (tap_scales[i] == scale) return i;
  }
  throw std::invalid_argument("scale " + scale_str(scale) + " is not a configured tap scale");
}

namespace {
std::size_t stage_of(const std::vector<Scale>& sizes, const Scale& s) {
  for (std::size_t k = 0; k < sizes.size(); ++k) {
    if (sizes[k] == s) return k;
  }
  return sizes.size();
}
}  // namespace

int ModelConfig::cnn_tap_channels(std::size_t tap) const {
  return cnn_stage_channels().at(stage_of(cnn_stage_sizes(), tap_scales.at(tap)));
}

int ModelConfig::attn_tap_channels(std::size_t tap) const {
  return attn_stage_channels().at(stage_of(attn_stage_sizes(), tap_scales.at(tap)));
}

void ModelConfig::validate() const {
  if (num_classes < 2) throw std::invalid_argument("num_classes must be >= 2");
  if (in_channels < 1) throw std::invalid_argument("in_channels must be >= 1");
  if (cnn_depth < 1 || cnn_base_channels < 1) throw std::invalid_argument("cnn_depth and cnn_base_channels must be >= 1");
  const auto cnn_div = std::int64_t{1} << (cnn_depth - 1);
  if (image_h % cnn_div != 0 || image_w % cnn_div != 0) {
    throw std::invalid_argument("image size " + scale_str({image_h, image_w}) + " is not divisible by 2^(cnn_depth-1) = " +
                                std::to_string(cnn_div));
  }
  if (!is_power_of_two(attn_patch)) throw std::invalid_argument("attn_patch must be a power of two");
  if (image_h % (2 * attn_patch) != 0 || image_w % (2 * attn_patch) != 0) {
    throw std::invalid_argument("image size must be divisible by 2 * attn_patch");
  }
  if (attn_embed_dim < 1 || attn_heads < 1 || attn_embed_dim % attn_heads != 0) {
    throw std::invalid_argument("attn_embed_dim must be a positive multiple of attn_heads");
  }
  if (attn_blocks < 0) throw std::invalid_argument("attn_blocks must be >= 0");
  if (proj_hidden < 1 || proj_out < 1) throw std::invalid_argument("projector widths must be positive");
  if (tap_scales.empty()) throw std::invalid_argument("at least one tap scale is required");
  const auto cnn_sizes = cnn_stage_sizes();
  const auto attn_sizes = attn_stage_sizes();
  std::set<Scale> seen;
  for (const auto& s : tap_scales) {
    if (!seen.insert(s).second) throw std::invalid_argument("duplicate tap scale " + scale_str(s));
    if (stage_of(cnn_sizes, s) == cnn_sizes.size()) {
      throw std::invalid_argument("tap scale " + scale_str(s) + " is not produced by the CNN branch");
    }
    if (stage_of(attn_sizes, s) == attn_sizes.size()) {
      throw std::invalid_argument("tap scale " + scale_str(s) + " is not produced by the attention branch");
    }
  }
}

nlohmann::json ModelConfig::to_json() const {
  nlohmann::json taps = nlohmann::json::array();
  for (const auto& [h, w] : tap_scales) taps.push_back({h, w});
  return {{"num_classes", num_classes},
          {"in_channels", in_channels},
          {"image_size", {image_h, image_w}},
          {"cnn_base_channels", cnn_base_channels},
          {"cnn_depth", cnn_depth},
          {"attn_embed_dim", attn_embed_dim},
          {"attn_heads", attn_heads},
          {"attn_blocks", attn_blocks},
          {"attn_patch", attn_patch},
          {"tap_scales", taps},
          {"proj_hidden", proj_hidden},
          {"proj_out", proj_out},
          {"proj_nonlinearity", proj_nonlinearity},
          {"normalize_embeddings", normalize_embeddings}};
}

ModelConfig ModelConfig::from_json(const nlohmann::json& j) {
  ModelConfig c;
  c.num_classes = j.value("num_classes", c.num_classes);
  c.in_channels = j.value("in_channels", c.in_channels);
  if (j.contains("image_size")) {
    c.image_h = j.at("image_size").at(0).get<std::int64_t>();
    c.image_w = j.at("image_size").at(1).get<std::int64_t>();
  }
  c.cnn_base_channels = j.value("cnn_base_channels", c.cnn_base_channels);
  c.cnn_depth = j.value("cnn_depth", c.cnn_depth);
  c.attn_embed_dim = j.value("attn_embed_dim", c.attn_embed_dim);
  c.attn_heads = j.value("attn_heads", c.attn_heads);
  c.attn_blocks = j.value("attn_blocks", c.attn_blocks);
  c.attn_patch = j.value("attn_patch", c.attn_patch);
  if (j.contains("tap_scales")) {
    c.tap_scales.clear();
    for (const auto& t : j.at("tap_scales")) c.tap_scales.emplace_back(t.at(0).get<std::int64_t>(), t.at(1).get<std::int64_t>());
  }
  c.proj_hidden = j.value("proj_hidden", c.proj_hidden);
  c.proj_out = j.value("proj_out", c.proj_out);
  c.proj_nonlinearity = j.value("proj_nonlinearity", c.proj_nonlinearity);
  c.normalize_embeddings = j.value("normalize_embeddings", c.normalize_embeddings);
  return c;
}

// ---------------------------------------------------------------------------
// Building blocks

ConvBlockImpl::ConvBlockImpl(int in_ch, int out_ch) {
  const int groups = std::gcd(out_ch, 8);
  conv1_ = register_module("conv1", nn::Conv2d(nn::Conv2dOptions(in_ch, out_ch, 3).padding(1)));
  norm1_ = register_module("norm1", nn::GroupNorm(nn::GroupNormOptions(groups, out_ch)));
  conv2_ = register_module("conv2", nn::Conv2d(nn::Conv2dOptions(out_ch, out_ch, 3).padding(1)));
  norm2_ = register_module("norm2", nn::GroupNorm(nn::GroupNormOptions(groups, out_ch)));
}

torch::Tensor ConvBlockImpl::forward(torch::Tensor x) {
  x = torch::relu(norm1_(conv1_(x)));
  return torch::relu(norm2_(conv2_(x)));
}

CnnUNetImpl::CnnUNetImpl(const ModelConfig& config) : config_(config) {
  config_.validate();
  const int depth = config_.cnn_depth;
  std::vector<int> ch(depth);
  for (int i = 0; i < depth; ++i) ch[i] = config_.cnn_base_channels << i;

  encoder_ = register_module("encoder", nn::ModuleList());
  up_ = register_module("up", nn::ModuleList());
  decoder_ = register_module("decoder", nn::ModuleList());
  for (int i = 0; i < depth; ++i) encoder_->push_back(ConvBlock(i == 0 ? config_.in_channels : ch[i - 1], ch[i]));
  for (int j = depth - 2; j >= 0; --j) {
    up_->push_back(nn::ConvTranspose2d(nn::ConvTranspose2dOptions(ch[j + 1], ch[j], 2).stride(2)));
    decoder_->push_back(ConvBlock(2 * ch[j], ch[j]));
  }
  head_ = register_module("head", nn::Conv2d(nn::Conv2dOptions(ch[0], config_.num_classes, 1)));

  const auto sizes = config_.cnn_stage_sizes();
  for (const auto& s : config_.tap_scales) tap_stage_.push_back(stage_of(sizes, s));
}

BranchOutput CnnUNetImpl::forward(const torch::Tensor& images) {
  std::vector<torch::Tensor> skips;
  auto x = images;
  for (std::size_t i = 0; i < encoder_->size(); ++i) {
    if (i > 0) x = F::max_pool2d(x, F::MaxPool2dFuncOptions(2));
    x = encoder_[i]->as<ConvBlock>()->forward(x);
    skips.push_back(x);
  }
  std::vector<torch::Tensor> stages{x};
  for (std::size_t k = 0; k < up_->size(); ++k) {
    const auto level = skips.size() - 2 - k;
    x = up_[k]->as<nn::ConvTranspose2d>()->forward(x);
    x = decoder_[k]->as<ConvBlock>()->forward(torch::cat({x, skips[level]}, 1));
    stages.push_back(x);
  }
  BranchOutput out;
  out.logits = head_(x);
  for (auto stage : tap_stage_) out.features.push_back(stages[stage]);
  return out;
}

TransformerBlockImpl::TransformerBlockImpl(int dim, int heads) {
  norm1_ = register_module("norm1", nn::LayerNorm(nn::LayerNormOptions({dim})));
  attn_ = register_module("attn", nn::MultiheadAttention(nn::MultiheadAttentionOptions(dim, heads)));
  norm2_ = register_module("norm2", nn::LayerNorm(nn::LayerNormOptions({dim})));
  fc1_ = register_module("fc1", nn::Linear(dim, 2 * dim));
  fc2_ = register_module("fc2", nn::Linear(2 * dim, dim));
}

torch::Tensor TransformerBlockImpl::forward(const torch::Tensor& tokens) {
  // MultiheadAttention is sequence-first.
  auto h = norm1_(tokens).transpose(0, 1);
  auto attended = std::get<0>(attn_->forward(h, h, h, {}, /*need_weights=*/false)).transpose(0, 1);
  auto x = tokens + attended;
  return x + fc2_(F::gelu(fc1_(norm2_(x))));
}

AttnUNetImpl::AttnUNetImpl(const ModelConfig& config) : config_(config) {
  config_.validate();
  const int dim = config_.attn_embed_dim;
  const auto grid_h = config_.image_h / config_.attn_patch;
  const auto grid_w = config_.image_w / config_.attn_patch;
  embed_ = register_module(
      "embed", nn::Conv2d(nn::Conv2dOptions(config_.in_channels, dim, config_.attn_patch).stride(config_.attn_patch)));
  pos_embed_ = register_parameter("pos_embed", torch::randn({1, dim, grid_h, grid_w}) * 0.02);
  stage1_ = register_module("stage1", nn::ModuleList());
  stage2_ = register_module("stage2", nn::ModuleList());
  const int first = (config_.attn_blocks + 1) / 2;
  for (int i = 0; i < first; ++i) stage1_->push_back(TransformerBlock(dim, config_.attn_heads));
  merge_ = register_module("merge", nn::Conv2d(nn::Conv2dOptions(dim, 2 * dim, 2).stride(2)));
  for (int i = first; i < config_.attn_blocks; ++i) stage2_->push_back(TransformerBlock(2 * dim, config_.attn_heads));

  const auto ch = config_.attn_stage_channels();
  up_ = register_module("up", nn::ModuleList());
  decoder_ = register_module("decoder", nn::ModuleList());
  for (std::size_t k = 1; k < ch.size(); ++k) {
    up_->push_back(nn::ConvTranspose2d(nn::ConvTranspose2dOptions(ch[k - 1], ch[k], 2).stride(2)));
    // The first decoder stage merges the 1/p token map; finer stages see the
    // pooled input image instead of an encoder skip.
    const int skip = k == 1 ? dim : config_.in_channels;
    decoder_->push_back(ConvBlock(ch[k] + skip, ch[k]));
  }
  head_ = register_module("head", nn::Conv2d(nn::Conv2dOptions(ch.back(), config_.num_classes, 1)));

  const auto sizes = config_.attn_stage_sizes();
  for (const auto& s : config_.tap_scales) tap_stage_.push_back(stage_of(sizes, s));
}

torch::Tensor AttnUNetImpl::run_blocks(nn::ModuleList& blocks, torch::Tensor x) {
  if (blocks->size() == 0) return x;
  const auto b = x.size(0), c = x.size(1), h = x.size(2), w = x.size(3);
  auto tokens = x.flatten(2).transpose(1, 2);  // B x N x C
  for (const auto& m : *blocks) tokens = m->as<TransformerBlock>()->forward(tokens);
  return tokens.transpose(1, 2).reshape({b, c, h, w});
}

BranchOutput AttnUNetImpl::forward(const torch::Tensor& images) {
  auto fine = run_blocks(stage1_, embed_(images) + pos_embed_);
  auto coarse = run_blocks(stage2_, merge_(fine));
  std::vector<torch::Tensor> stages{coarse};
  auto x = coarse;
  for (std::size_t k = 0; k < up_->size(); ++k) {
    x = up_[k]->as<nn::ConvTranspose2d>()->forward(x);
    torch::Tensor skip;
    if (k == 0) {
      skip = fine;
    } else {
      const auto factor = images.size(2) / x.size(2);
      skip = factor > 1 ? F::avg_pool2d(images, F::AvgPool2dFuncOptions(factor)) : images;
    }
    x = decoder_[k]->as<ConvBlock>()->forward(torch::cat({x, skip}, 1));
    stages.push_back(x);
  }
  BranchOutput out;
  out.logits = head_(x);
  for (auto stage : tap_stage_) out.features.push_back(stages[stage]);
  return out;
}

// ---------------------------------------------------------------------------
// Projectors

ProjectorBankImpl::ProjectorBankImpl(const ModelConfig& config) : config_(config) {
  for (std::size_t t = 0; t < config_.tap_scales.size(); ++t) {
    const auto tag = "s" + std::to_string(t);
    first_cnn_.push_back(register_module(
        tag + "_cnn", nn::Conv2d(nn::Conv2dOptions(config_.cnn_tap_channels(t), config_.proj_hidden, 1))));
    first_attn_.push_back(register_module(
        tag + "_attn", nn::Conv2d(nn::Conv2dOptions(config_.attn_tap_channels(t), config_.proj_hidden, 1))));
    shared_.push_back(
        register_module(tag + "_shared", nn::Conv2d(nn::Conv2dOptions(config_.proj_hidden, config_.proj_out, 1))));
  }
}

nn::Conv2d& ProjectorBankImpl::first(std::size_t tap, Branch branch) {
  return branch == Branch::Cnn ? first_cnn_.at(tap) : first_attn_.at(tap);
}

torch::Tensor ProjectorBankImpl::project(const torch::Tensor& features, std::size_t tap, Branch branch) {
  if (tap >= shared_.size()) throw std::invalid_argument("projector: no such tap");
  auto h = first(tap, branch)->forward(features);
  if (config_.proj_nonlinearity) h = torch::relu(h);
  auto z = shared_[tap]->forward(h);
  if (config_.normalize_embeddings) z = F::normalize(z, F::NormalizeFuncOptions().dim(1).eps(1e-12));
  return z;
}

DualModelImpl::DualModelImpl(const ModelConfig& config) : config_(config) {
  config_.validate();
  cnn = register_module("cnn", CnnUNet(config_));
  attn = register_module("attn", AttnUNet(config_));
  projectors = register_module("proj", ProjectorBank(config_));
}

torch::Tensor DualModelImpl::project(const torch::Tensor& features, const Scale& scale, Branch branch) {
  return projectors->project(features, config_.tap_index(scale), branch);
}

std::vector<torch::Tensor> DualModelImpl::cnn_parameters() {
  auto out = cnn->parameters();
  for (std::size_t t = 0; t < projectors->scales(); ++t) {
    for (auto& p : projectors->first(t, Branch::Cnn)->parameters()) out.push_back(p);
    for (auto& p : projectors->shared(t)->parameters()) out.push_back(p);
  }
  return out;
}

std::vector<torch::Tensor> DualModelImpl::attn_parameters() {
  auto out = attn->parameters();
  for (std::size_t t = 0; t < projectors->scales(); ++t) {
    for (auto& p : projectors->first(t, Branch::Attn)->parameters()) out.push_back(p);
  }
  return out;
}

std::vector<torch::Tensor> DualModelImpl::shared_projector_parameters() {
  std::vector<torch::Tensor> out;
  for (std::size_t t = 0; t < projectors->scales(); ++t) {
    for (auto& p : projectors->shared(t)->parameters()) out.push_back(p);
  }
  return out;
}

DualModel make_model(const ModelConfig& config, std::uint64_t seed) {
  // Each part gets its own seed so that, for example, changing the attention
  // depth leaves the CNN initialisation untouched.
  config.validate();
  torch::manual_seed(seed * 3 + 0);
  auto cnn = CnnUNet(config);
  torch::manual_seed(seed * 3 + 1);
  auto attn = AttnUNet(config);
  torch::manual_seed(seed * 3 + 2);
  auto proj = ProjectorBank(config);

  DualModel model(config);
  torch::NoGradGuard guard;
  auto copy_into = [](torch::nn::Module& dst, torch::nn::Module& src) {
    auto s = src.named_parameters();
    for (auto& item : dst.named_parameters()) item.value().copy_(s[item.key()]);
  };
  copy_into(*model->cnn, *cnn);
  copy_into(*model->attn, *attn);
  copy_into(*model->projectors, *proj);
  return model;
}

// ---------------------------------------------------------------------------
// Checkpoints

void save_checkpoint(DualModel& model, const fs::path& dir, const nlohmann::json& extra) {
  fs::create_directories(dir / "params");
  nlohmann::ordered_json index;
  index["format"] = "mcsc-checkpoint-1";
  index["model_config"] = model->config().to_json();
  if (!extra.is_null()) index["extra"] = extra;
  auto params = nlohmann::ordered_json::array();
  for (const auto& item : model->named_parameters()) {
    const auto file = "params/" + item.key() + ".mcst";
    tensorio::write_tensor(dir / file, item.value(), tensorio::DType::Float32);
    params.push_back({{"name", item.key()}, {"file", file}, {"shape", item.value().sizes().vec()}});
  }
  index["parameters"] = params;
  std::ofstream out(dir / "index.json", std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write checkpoint index in " + dir.string());
  out << index.dump(2) << '\n';
}

nlohmann::json read_checkpoint_index(const fs::path& dir) {
  std::ifstream in(dir / "index.json");
  if (!in) throw std::runtime_error("checkpoint index not found: " + (dir / "index.json").string());
  return nlohmann::json::parse(in);
}

DualModel load_checkpoint(const fs::path& dir, LoadScope scope) {
  const auto index = read_checkpoint_index(dir);
  const auto config = ModelConfig::from_json(index.at("model_config"));
  auto model = make_model(config, 0);

  std::map<std::string, nlohmann::json> entries;
  for (const auto& e : index.at("parameters")) entries[e.at("name").get<std::string>()] = e;

  torch::NoGradGuard guard;
  for (auto& item : model->named_parameters()) {
    const auto& name = item.key();
    const bool required = scope == LoadScope::Full || name.rfind("cnn.", 0) == 0;
    auto it = entries.find(name);
    const bool present = it != entries.end() && fs::exists(dir / it->second.at("file").get<std::string>());
    if (!present) {
      if (required) throw std::runtime_error("checkpoint is missing parameter " + name);
      continue;
    }
    auto t = tensorio::read_tensor(dir / it->second.at("file").get<std::string>());
    if (t.sizes() != item.value().sizes()) throw std::runtime_error("shape mismatch for parameter " + name);
    item.value().copy_(t);
  }
  return model;
}

}  // namespace mcsc::models
