#pragma once

#include "mcsc/config.hpp"
#include "mcsc/losses.hpp"
#include "mcsc/metrics.hpp"
#include "mcsc/models.hpp"
#include "mcsc/sampling.hpp"
#include "mcsc/tensorio.hpp"

#include <torch/torch.h>

#include <filesystem>
#include <optional>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace mcsc::trainer {

// The first `labeled` rows of `images` carry ground truth in `labels`.
struct Batch {
  torch::Tensor images;  // B x 1 x H x W
  torch::Tensor labels;  // labeled x H x W, int64
  std::int64_t labeled = 0;

  std::int64_t size() const { return images.size(0); }
  std::int64_t unlabeled() const { return size() - labeled; }
};

// Loss tensors of one step with their autograd graph intact.
struct StepLosses {
  torch::Tensor sup_cnn, sup_attn;
  torch::Tensor cps_cnn, cps_attn;   // zero when the batch has no unlabeled half
  torch::Tensor cl;                  // zero when contrastive learning is off
  std::vector<torch::Tensor> cl_per_scale;
  torch::Tensor total_cnn, total_attn;
  // Single objective whose gradient equals d total_cnn for CNN parameters and
  // d total_attn for attention parameters; the contrastive term appears once.
  torch::Tensor objective;
  double w_cps = 0.0;
  double w_cl = 0.0;
  std::int64_t degenerate_groups = 0;
  sampling::FusedLabels supervision;  // empty when contrastive learning is off
};

struct StepLog {
  std::int64_t t = 0;
  double sup_cnn = 0, sup_attn = 0, cps_cnn = 0, cps_attn = 0, cl = 0;
  std::vector<double> cl_per_scale;
  double loss_cnn = 0, loss_attn = 0;
  double w_cps = 0, w_cl = 0;
  double lr_cnn = 0, lr_attn = 0;

  nlohmann::ordered_json to_json() const;
};

struct ValidationLog {
  std::int64_t t = 0;
  metrics::EvalReport report;
};

struct RunRecord {
  std::vector<StepLog> steps;
  std::vector<ValidationLog> validations;
  std::int64_t best_iteration = -1;
  double best_val_dsc = -1.0;
  std::filesystem::path best_checkpoint;

  // One JSON object per line: {"type":"step",...} and {"type":"val",...},
  // then a final {"type":"summary",...}.
  void write_jsonl(const std::filesystem::path& path) const;
};

class TrainingError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Loads every slice of the given split into memory: images S x 1 x H x W float32, labels S x H x W int64.
struct SliceSet {
  torch::Tensor images;
  torch::Tensor labels;  // undefined when labels are not read
  std::vector<std::string> case_ids;
  std::vector<int> slice_index;
};

SliceSet load_split(const tensorio::DatasetManifest& manifest, tensorio::Split split, bool with_labels);

class Trainer {
 public:
  // Requires non-empty labeled_train and val splits.
  Trainer(const tensorio::DatasetManifest& manifest, TrainConfig config);
  // Builds directly from in-memory data (used by tests).
  Trainer(SliceSet labeled, SliceSet unlabeled, SliceSet val, int num_classes, TrainConfig config);

  // Next batch from the shuffled pools with augmentation applied.
  Batch next_batch();

  StepLosses compute_losses(const Batch& batch, std::int64_t t);
  StepLog train_step(const Batch& batch, std::int64_t t);

  RunRecord run();

  // Mean foreground DSC of the CNN branch on the given slices.
  metrics::EvalReport evaluate(const SliceSet& slices);

  models::DualModel& model() { return model_; }
  const TrainConfig& config() const { return config_; }
  torch::optim::AdamW& cnn_optimizer() { return *cnn_opt_; }
  torch::optim::AdamW& attn_optimizer() { return *attn_opt_; }
  const SliceSet& val_set() const { return val_; }

  // Parameters of the best validation checkpoint, copied into a fresh model.
  models::DualModel best_model() const;

 private:
  void build();
  torch::Tensor take(const SliceSet& pool, std::vector<std::int64_t>& order, std::size_t& cursor, std::int64_t count,
                     torch::Tensor* labels_out);
  void dump_nonfinite(const Batch& batch, const StepLosses& losses, std::int64_t t) const;

  TrainConfig config_;
  int num_classes_ = 0;
  SliceSet labeled_, unlabeled_, val_;
  models::DualModel model_{nullptr};
  std::unique_ptr<torch::optim::AdamW> cnn_opt_, attn_opt_;
  std::mt19937_64 order_rng_, augment_rng_, patch_rng_;
  std::vector<std::int64_t> labeled_order_, unlabeled_order_;
  std::size_t labeled_cursor_ = 0, unlabeled_cursor_ = 0;
  std::vector<torch::Tensor> best_params_;
};

// Argmax of the CNN branch's softmax; the attention branch is never run.
torch::Tensor infer(models::DualModel& model, const torch::Tensor& images, std::int64_t chunk = 16);

// Evaluates CNN predictions on a split, grouped per case.
metrics::EvalReport evaluate_split(models::DualModel& model, const SliceSet& slices, int num_classes);

struct EmbeddingExport {
  torch::Tensor embeddings;  // (h*w) x d
  torch::Tensor labels;      // (h*w), ground truth downsampled to the tap scale
};

// CNN-branch projected embeddings of one slice at one tap scale.
EmbeddingExport export_embeddings(models::DualModel& model, const torch::Tensor& image, const torch::Tensor& label,
                                  const models::Scale& scale);

// Mean Euclidean distance between the centroids of the classes present.
double mean_centroid_distance(const torch::Tensor& embeddings, const torch::Tensor& labels);

}  // namespace mcsc::trainer
