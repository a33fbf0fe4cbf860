#include "mcsc/trainer.hpp"

#include "mcsc/random.hpp"
#include "mcsc/schedule.hpp"

#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

namespace mcsc::trainer {

namespace fs = std::filesystem;
using models::Branch;

namespace {

double scalar(const torch::Tensor& t) { return t.defined() ? t.detach().item<double>() : 0.0; }

void shuffle(std::vector<std::int64_t>& v, std::mt19937_64& rng) {
  for (std::size_t i = v.size(); i > 1; --i) std::swap(v[i - 1], v[sampling::uniform_index(rng, i)]);
}

void set_lr(torch::optim::AdamW& opt, double lr) {
  for (auto& group : opt.param_groups()) static_cast<torch::optim::AdamWOptions&>(group.options()).lr(lr);
}

}  // namespace

nlohmann::ordered_json StepLog::to_json() const {
  nlohmann::ordered_json j;
  j["type"] = "step";
  j["t"] = t;
  j["sup_cnn"] = sup_cnn;
  j["sup_attn"] = sup_attn;
  j["cps_cnn"] = cps_cnn;
  j["cps_attn"] = cps_attn;
  j["cl"] = cl;
  j["cl_per_scale"] = cl_per_scale;
  j["loss_cnn"] = loss_cnn;
  j["loss_attn"] = loss_attn;
  j["w_cps"] = w_cps;
  j["w_cl"] = w_cl;
  j["lr_cnn"] = lr_cnn;
  j["lr_attn"] = lr_attn;
  return j;
}

void RunRecord::write_jsonl(const fs::path& path) const {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write run record: " + path.string());
  std::size_t v = 0;
  for (const auto& s : steps) {
    out << s.to_json().dump() << '\n';
    while (v < validations.size() && validations[v].t == s.t + 1) {
      nlohmann::ordered_json j;
      j["type"] = "val";
      j["t"] = validations[v].t;
      j["report"] = validations[v].report.to_json();
      out << j.dump() << '\n';
      ++v;
    }
  }
  nlohmann::ordered_json summary;
  summary["type"] = "summary";
  summary["iterations"] = steps.size();
  summary["best_iteration"] = best_iteration;
  summary["best_val_dsc"] = best_val_dsc;
  summary["best_checkpoint"] = best_checkpoint.string();
  out << summary.dump() << '\n';
}

SliceSet load_split(const tensorio::DatasetManifest& manifest, tensorio::Split split, bool with_labels) {
  SliceSet out;
  std::vector<torch::Tensor> images, labels;
  for (const auto* c : manifest.cases_in(split)) {
    for (const auto& s : c->slices) {
      auto img = tensorio::read_tensor(manifest.resolve(s.image)).to(torch::kFloat32);
      if (img.dim() != 2 || img.size(0) != manifest.height || img.size(1) != manifest.width) {
        throw std::runtime_error("image " + s.image + " does not match the manifest image size");
      }
      images.push_back(img.unsqueeze(0));
      if (with_labels) {
        if (!s.label) throw std::runtime_error("slice without label in split " + tensorio::to_string(split));
        labels.push_back(tensorio::read_tensor(manifest.resolve(*s.label)).to(torch::kInt64));
      }
      out.case_ids.push_back(c->case_id);
      out.slice_index.push_back(s.slice_index);
    }
  }
  if (!images.empty()) out.images = torch::stack(images);
  if (with_labels && !labels.empty()) out.labels = torch::stack(labels);
  return out;
}

Trainer::Trainer(const tensorio::DatasetManifest& manifest, TrainConfig config) : config_(std::move(config)) {
  num_classes_ = manifest.num_classes;
  labeled_ = load_split(manifest, tensorio::Split::LabeledTrain, true);
  if (config_.ablations.use_unlabeled) unlabeled_ = load_split(manifest, tensorio::Split::UnlabeledTrain, false);
  val_ = load_split(manifest, tensorio::Split::Val, true);
  build();
}

Trainer::Trainer(SliceSet labeled, SliceSet unlabeled, SliceSet val, int num_classes, TrainConfig config)
    : config_(std::move(config)),
      num_classes_(num_classes),
      labeled_(std::move(labeled)),
      unlabeled_(std::move(unlabeled)),
      val_(std::move(val)) {
  build();
}

void Trainer::build() {
  config_.validate();
  if (config_.model.num_classes != num_classes_) {
    throw std::invalid_argument("model num_classes does not match the dataset");
  }
  if (!labeled_.images.defined() || labeled_.images.size(0) == 0) throw std::invalid_argument("empty labeled_train split");
  if (!val_.images.defined() || val_.images.size(0) == 0) throw std::invalid_argument("empty val split");
  if (config_.ablations.use_unlabeled && (!unlabeled_.images.defined() || unlabeled_.images.size(0) == 0)) {
    throw std::invalid_argument("empty unlabeled_train split");
  }
  if (labeled_.images.size(2) != config_.model.image_h || labeled_.images.size(3) != config_.model.image_w) {
    throw std::invalid_argument("dataset image size does not match the model configuration");
  }

  model_ = models::make_model(config_.model, config_.seed);
  cnn_opt_ = std::make_unique<torch::optim::AdamW>(
      model_->cnn_parameters(), torch::optim::AdamWOptions(config_.lr0_cnn).weight_decay(config_.weight_decay));
  attn_opt_ = std::make_unique<torch::optim::AdamW>(
      model_->attn_parameters(), torch::optim::AdamWOptions(config_.lr0_attn).weight_decay(config_.weight_decay));

  order_rng_ = derive_rng(config_.seed, 1);
  augment_rng_ = derive_rng(config_.seed, 2);
  patch_rng_ = derive_rng(config_.seed, 3);
  labeled_order_.resize(labeled_.images.size(0));
  std::iota(labeled_order_.begin(), labeled_order_.end(), 0);
  shuffle(labeled_order_, order_rng_);
  if (unlabeled_.images.defined()) {
    unlabeled_order_.resize(unlabeled_.images.size(0));
    std::iota(unlabeled_order_.begin(), unlabeled_order_.end(), 0);
    shuffle(unlabeled_order_, order_rng_);
  }
}

torch::Tensor Trainer::take(const SliceSet& pool, std::vector<std::int64_t>& order, std::size_t& cursor,
                            std::int64_t count, torch::Tensor* labels_out) {
  std::vector<torch::Tensor> images, labels;
  const auto h = pool.images.size(2), w = pool.images.size(3);
  for (std::int64_t i = 0; i < count; ++i) {
    if (cursor == order.size()) {
      shuffle(order, order_rng_);
      cursor = 0;
    }
    const auto idx = order[cursor++];
    auto img = pool.images[idx];  // 1 x H x W
    torch::Tensor lab = labels_out ? pool.labels[idx] : torch::Tensor();

    if (config_.augment_flip) {
      if (bernoulli(augment_rng_, 0.5)) {
        img = img.flip({2});
        if (lab.defined()) lab = lab.flip({1});
      }
      if (bernoulli(augment_rng_, 0.5)) {
        img = img.flip({1});
        if (lab.defined()) lab = lab.flip({0});
      }
    }
    if (config_.augment_rot90 && h == w) {
      const auto k = static_cast<std::int64_t>(sampling::uniform_index(augment_rng_, 4));
      if (k > 0) {
        img = torch::rot90(img, k, {1, 2});
        if (lab.defined()) lab = torch::rot90(lab, k, {0, 1});
      }
    }
    if (config_.augment_shift > 0) {
      const auto s = config_.augment_shift;
      const auto dy = static_cast<std::int64_t>(sampling::uniform_index(augment_rng_, 2 * s + 1));
      const auto dx = static_cast<std::int64_t>(sampling::uniform_index(augment_rng_, 2 * s + 1));
      img = torch::constant_pad_nd(img, {s, s, s, s}, 0).slice(1, dy, dy + h).slice(2, dx, dx + w);
      if (lab.defined()) lab = torch::constant_pad_nd(lab, {s, s, s, s}, 0).slice(0, dy, dy + h).slice(1, dx, dx + w);
    }
    images.push_back(img.contiguous());
    if (lab.defined()) labels.push_back(lab.contiguous());
  }
  if (labels_out) *labels_out = torch::stack(labels);
  return torch::stack(images);
}

Batch Trainer::next_batch() {
  const auto half = config_.batch_size / 2;
  Batch b;
  torch::Tensor labels;
  auto labeled = take(labeled_, labeled_order_, labeled_cursor_, half, &labels);
  b.labels = labels;
  b.labeled = half;
  if (config_.ablations.use_unlabeled) {
    auto unlabeled = take(unlabeled_, unlabeled_order_, unlabeled_cursor_, half, nullptr);
    b.images = torch::cat({labeled, unlabeled}, 0);
  } else {
    b.images = labeled;
  }
  return b;
}

StepLosses Trainer::compute_losses(const Batch& batch, std::int64_t t) {
  const auto nl = batch.labeled;
  const auto nu = batch.unlabeled();
  auto out_c = model_->forward_cnn(batch.images);
  auto out_a = model_->forward_attn(batch.images);
  auto zero = torch::zeros({}, out_c.logits.options());

  StepLosses L;
  L.sup_cnn = nl > 0 ? losses::supervised_loss(out_c.logits.slice(0, 0, nl), batch.labels, config_.supervised) : zero;
  L.sup_attn = nl > 0 ? losses::supervised_loss(out_a.logits.slice(0, 0, nl), batch.labels, config_.supervised) : zero;

  auto probs_c = torch::softmax(out_c.logits, 1);
  auto probs_a = torch::softmax(out_a.logits, 1);
  // Pseudo labels are constants: argmax of detached probabilities.
  auto pseudo_c = probs_c.detach().argmax(1);
  auto pseudo_a = probs_a.detach().argmax(1);
  if (nu > 0) {
    L.cps_cnn = losses::cps_loss(probs_c.slice(0, nl), pseudo_a.slice(0, nl));
    L.cps_attn = losses::cps_loss(probs_a.slice(0, nl), pseudo_c.slice(0, nl));
  } else {
    L.cps_cnn = zero;
    L.cps_attn = zero;
  }
  L.w_cps = schedule::cps_weight(t, config_.iterations);

  const bool contrast = config_.ablations.enable_cl;
  L.w_cl = contrast ? config_.w_cl : 0.0;
  if (contrast) {
    std::vector<bool> is_labeled(batch.size(), false);
    for (std::int64_t i = 0; i < nl; ++i) is_labeled[i] = true;
    torch::Tensor gt;
    if (nl > 0) {
      gt = torch::zeros({batch.size(), batch.images.size(2), batch.images.size(3)}, torch::kInt64);
      gt.slice(0, 0, nl).copy_(batch.labels);
    }
    L.supervision = sampling::fuse_labels(is_labeled, gt, pseudo_c, pseudo_a, config_.ablations.enable_cross_labels);

    std::vector<losses::AnchorBatch> groups;
    for (auto tap : config_.contrastive_taps()) {
      const auto [h, w] = config_.model.tap_scales[tap];
      auto emb_c = model_->projectors->project(out_c.features[tap], tap, Branch::Cnn);
      auto emb_a = model_->projectors->project(out_a.features[tap], tap, Branch::Attn);
      auto lab_c = sampling::downsample_labels(L.supervision.for_cnn.labels, h, w);
      auto lab_a = sampling::downsample_labels(L.supervision.for_attn.labels, h, w);
      auto plan = sampling::partition_patches(2 * batch.size(), h, w, config_.patch_sizes[tap], patch_rng_,
                                              config_.random_grid_offset);
      groups.push_back(sampling::build_anchor_batch(emb_c, emb_a, lab_c, lab_a, plan));
    }
    auto ms = losses::multiscale_contrastive_loss(groups, config_.tau, config_.contrastive_options());
    L.cl = ms.total;
    L.cl_per_scale = ms.per_scale;
    L.degenerate_groups = ms.degenerate_groups;
  } else {
    L.cl = zero;
  }

  L.total_cnn = L.sup_cnn + L.w_cps * L.cps_cnn + L.w_cl * L.cl;
  L.total_attn = L.sup_attn + L.w_cps * L.cps_attn + L.w_cl * L.cl;
  L.objective = L.sup_cnn + L.sup_attn + L.w_cps * (L.cps_cnn + L.cps_attn) + L.w_cl * L.cl;
  return L;
}

void Trainer::dump_nonfinite(const Batch& batch, const StepLosses& L, std::int64_t t) const {
  if (config_.out_dir.empty()) return;
  const auto dir = fs::path(config_.out_dir) / ("nonfinite_t" + std::to_string(t));
  fs::create_directories(dir);
  auto images = batch.images.detach();
  tensorio::write_tensor(dir / "images.mcst", torch::nan_to_num(images, 0.0, 0.0, 0.0), tensorio::DType::Float32);
  if (batch.labels.defined()) tensorio::write_tensor(dir / "labels.mcst", batch.labels, tensorio::DType::UInt8);
  auto value = [](const torch::Tensor& v) -> nlohmann::json {
    if (!v.defined()) return nullptr;
    const double x = v.detach().item<double>();
    return std::isfinite(x) ? nlohmann::json(x) : nlohmann::json(std::to_string(x));
  };
  nlohmann::json j{{"t", t},
                   {"sup_cnn", value(L.sup_cnn)},
                   {"sup_attn", value(L.sup_attn)},
                   {"cps_cnn", value(L.cps_cnn)},
                   {"cps_attn", value(L.cps_attn)},
                   {"cl", value(L.cl)}};
  std::ofstream(dir / "losses.json") << j.dump(2) << '\n';
}

StepLog Trainer::train_step(const Batch& batch, std::int64_t t) {
  StepLosses L;
  try {
    L = compute_losses(batch, t);
  } catch (const std::domain_error& e) {
    dump_nonfinite(batch, L, t);
    throw TrainingError("non-finite values at iteration " + std::to_string(t) + ": " + e.what());
  }

  StepLog log;
  log.t = t;
  log.sup_cnn = scalar(L.sup_cnn);
  log.sup_attn = scalar(L.sup_attn);
  log.cps_cnn = scalar(L.cps_cnn);
  log.cps_attn = scalar(L.cps_attn);
  log.cl = scalar(L.cl);
  for (const auto& s : L.cl_per_scale) log.cl_per_scale.push_back(scalar(s));
  log.loss_cnn = scalar(L.total_cnn);
  log.loss_attn = scalar(L.total_attn);
  log.w_cps = L.w_cps;
  log.w_cl = L.w_cl;
  for (double v : {log.sup_cnn, log.sup_attn, log.cps_cnn, log.cps_attn, log.cl}) {
    if (!std::isfinite(v)) {
      dump_nonfinite(batch, L, t);
      std::ostringstream msg;
      msg << "non-finite loss at iteration " << t << ": sup_cnn=" << log.sup_cnn << " sup_attn=" << log.sup_attn
          << " cps_cnn=" << log.cps_cnn << " cps_attn=" << log.cps_attn << " cl=" << log.cl;
      throw TrainingError(msg.str());
    }
  }

  log.lr_cnn = schedule::poly_lr(t, config_.iterations, config_.lr0_cnn, config_.poly_power);
  log.lr_attn = schedule::poly_lr(t, config_.iterations, config_.lr0_attn, config_.poly_power);
  set_lr(*cnn_opt_, log.lr_cnn);
  set_lr(*attn_opt_, log.lr_attn);
  cnn_opt_->zero_grad();
  attn_opt_->zero_grad();
  L.objective.backward();
  cnn_opt_->step();
  attn_opt_->step();
  return log;
}

metrics::EvalReport Trainer::evaluate(const SliceSet& slices) { return evaluate_split(model_, slices, num_classes_); }

models::DualModel Trainer::best_model() const {
  if (best_params_.empty()) throw std::logic_error("no validation has run yet");
  auto m = models::make_model(config_.model, config_.seed);
  torch::NoGradGuard guard;
  auto params = m->parameters();
  for (std::size_t i = 0; i < params.size(); ++i) params[i].copy_(best_params_[i]);
  return m;
}

RunRecord Trainer::run() {
  RunRecord rec;
  const bool to_disk = !config_.out_dir.empty();
  const fs::path out = config_.out_dir;
  if (to_disk) {
    fs::create_directories(out);
    std::ofstream(out / "config.json") << config_.to_json().dump(2) << '\n';
  }
  for (std::int64_t t = 0; t < config_.iterations; ++t) {
    auto batch = next_batch();
    rec.steps.push_back(train_step(batch, t));
    const bool last = t + 1 == config_.iterations;
    if ((t + 1) % config_.validate_every == 0 || last) {
      auto report = evaluate(val_);
      rec.validations.push_back({t + 1, report});
      if (report.mean_dsc > rec.best_val_dsc) {
        rec.best_val_dsc = report.mean_dsc;
        rec.best_iteration = t + 1;
        best_params_.clear();
        for (const auto& p : model_->parameters()) best_params_.push_back(p.detach().clone());
        if (to_disk) {
          rec.best_checkpoint = out / "checkpoints" / "best";
          models::save_checkpoint(model_, rec.best_checkpoint,
                                  {{"iteration", t + 1}, {"val_mean_dsc", report.mean_dsc}});
        }
      }
    }
  }
  if (to_disk) {
    models::save_checkpoint(model_, out / "checkpoints" / "last", {{"iteration", config_.iterations}});
    rec.write_jsonl(out / "run_record.jsonl");
  }
  return rec;
}

torch::Tensor infer(models::DualModel& model, const torch::Tensor& images, std::int64_t chunk) {
  torch::NoGradGuard guard;
  std::vector<torch::Tensor> out;
  for (std::int64_t i = 0; i < images.size(0); i += chunk) {
    auto x = images.slice(0, i, std::min(images.size(0), i + chunk));
    out.push_back(torch::softmax(model->forward_cnn(x).logits, 1).argmax(1));
  }
  return torch::cat(out, 0);
}

metrics::EvalReport evaluate_split(models::DualModel& model, const SliceSet& slices, int num_classes) {
  auto pred = infer(model, slices.images);
  std::vector<metrics::CasePrediction> cases;
  std::size_t start = 0;
  const auto n = slices.case_ids.size();
  for (std::size_t i = 1; i <= n; ++i) {
    if (i == n || slices.case_ids[i] != slices.case_ids[start]) {
      const auto a = static_cast<std::int64_t>(start), b = static_cast<std::int64_t>(i);
      cases.push_back({slices.case_ids[start], pred.slice(0, a, b), slices.labels.slice(0, a, b)});
      start = i;
    }
  }
  return metrics::evaluate(cases, num_classes);
}

EmbeddingExport export_embeddings(models::DualModel& model, const torch::Tensor& image, const torch::Tensor& label,
                                  const models::Scale& scale) {
  torch::NoGradGuard guard;
  const auto h = image.size(-2), w = image.size(-1);
  auto out = model->forward_cnn(image.reshape({1, 1, h, w}).to(torch::kFloat32));
  const auto tap = model->config().tap_index(scale);
  auto z = model->project(out.features[tap], scale, Branch::Cnn);  // 1 x d x h_s x w_s
  EmbeddingExport e;
  e.embeddings = z.squeeze(0).permute({1, 2, 0}).reshape({scale.first * scale.second, z.size(1)}).contiguous();
  if (label.defined()) {
    e.labels = sampling::downsample_labels(label.reshape({1, h, w}).to(torch::kInt64), scale.first, scale.second)
                   .reshape({scale.first * scale.second});
  }
  return e;
}

double mean_centroid_distance(const torch::Tensor& embeddings, const torch::Tensor& labels) {
  auto lab = labels.to(torch::kInt64);
  auto classes = std::get<0>(torch::_unique(lab));
  std::vector<torch::Tensor> centroids;
  for (std::int64_t i = 0; i < classes.size(0); ++i) {
    auto mask = lab.eq(classes[i]);
    centroids.push_back(embeddings.index({mask}).to(torch::kFloat64).mean(0));
  }
  if (centroids.size() < 2) return 0.0;
  double sum = 0.0;
  int pairs = 0;
  for (std::size_t a = 0; a < centroids.size(); ++a) {
    for (std::size_t b = a + 1; b < centroids.size(); ++b) {
      sum += (centroids[a] - centroids[b]).norm().item<double>();
      ++pairs;
    }
  }
  return sum / pairs;
}

}  // namespace mcsc::trainer
