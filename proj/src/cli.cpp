#include "mcsc/cli.hpp"

#include "mcsc/config.hpp"
#include "mcsc/models.hpp"
#include "mcsc/synthdata.hpp"
#include "mcsc/tensorio.hpp"
#include "mcsc/trainer.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace mcsc::cli {

namespace fs = std::filesystem;

namespace {

class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct GenDataArgs {
  std::string out;
  std::uint64_t seed = 0;
  int cases = 20;
  int slices = 8;
  int size = 64;
  synthdata::SplitFractions fractions;
};

struct TrainArgs {
  std::string config;
  std::string manifest;
  std::optional<std::int64_t> iterations;
  std::optional<std::uint64_t> seed;
  std::vector<std::string> ablate;
  std::string out;
};

struct EvalArgs {
  std::string checkpoint;
  std::string manifest;
  std::string split = "test";
  std::string out;
};

struct ExportArgs {
  std::string checkpoint;
  std::string manifest;
  std::string slice;
  int scale = 0;
  std::string out;
};

void gen_data(const GenDataArgs& a) {
  const auto& f = a.fractions;
  const double sum = f.labeled_train + f.unlabeled_train + f.val + f.test;
  if (std::abs(sum - 1.0) > 1e-6) throw UsageError("split fractions must sum to 1 (got " + std::to_string(sum) + ")");
  for (double v : {f.labeled_train, f.unlabeled_train, f.val, f.test}) {
    if (v < 0) throw UsageError("split fractions must be non-negative");
  }
  synthdata::SynthConfig config;
  config.seed = a.seed;
  config.n_cases = a.cases;
  config.slices_per_case = a.slices;
  config.height = a.size;
  config.width = a.size;
  try {
    config.validate();
  } catch (const std::invalid_argument& e) {
    throw UsageError(e.what());
  }
  synthdata::DatasetSummary summary;
  auto manifest = synthdata::generate_dataset(config, a.out, f, &summary);
  std::printf("wrote %zu cases to %s\n", manifest.cases.size(), a.out.c_str());
  for (std::size_t c = 0; c < summary.class_fraction.size(); ++c) {
    std::printf("class %zu pixel fraction %.4f\n", c, summary.class_fraction[c]);
  }
}

fs::path manifest_file(const std::string& path) {
  fs::path p = path;
  return fs::is_directory(p) ? p / "manifest.json" : p;
}

void train(const TrainArgs& a) {
  TrainConfig config;
  nlohmann::json j;
  if (!a.config.empty()) {
    std::ifstream in(a.config);
    if (!in) throw std::runtime_error("cannot open config " + a.config);
    j = nlohmann::json::parse(in);
    config = TrainConfig::from_json(j);
  }
  std::string manifest = a.manifest;
  if (manifest.empty() && j.contains("manifest")) manifest = j["manifest"].get<std::string>();
  if (manifest.empty()) throw UsageError("--manifest is required (or a \"manifest\" key in the config)");
  if (a.iterations) config.iterations = *a.iterations;
  if (a.seed) config.seed = *a.seed;
  if (!a.out.empty()) config.out_dir = a.out;
  try {
    for (const auto& token : a.ablate) apply_ablation(config, token);
    config.validate();
  } catch (const std::invalid_argument& e) {
    throw UsageError(e.what());
  }
  auto m = tensorio::load_manifest(manifest_file(manifest));
  config.model.num_classes = m.num_classes;
  config.model.image_h = m.height;
  config.model.image_w = m.width;
  trainer::Trainer t(m, config);
  auto record = t.run();
  const auto& last = record.steps.back();
  std::printf("iterations %lld  loss_cnn %.4f  loss_attn %.4f\n", static_cast<long long>(last.t + 1), last.loss_cnn,
              last.loss_attn);
  std::printf("best val mean DSC %.4f at iteration %lld\n", record.best_val_dsc,
              static_cast<long long>(record.best_iteration));
  if (!config.out_dir.empty()) std::printf("run record: %s\n", (fs::path(config.out_dir) / "run_record.jsonl").c_str());
}

void print_report(const metrics::EvalReport& r) {
  std::printf("%-8s %10s %10s\n", "class", "DSC(%)", "HD95");
  for (std::size_t c = 0; c < r.class_dsc.size(); ++c) {
    if (r.class_hd95[c]) {
      std::printf("%-8zu %10.2f %10.3f\n", c + 1, 100.0 * r.class_dsc[c], *r.class_hd95[c]);
    } else {
      std::printf("%-8zu %10.2f %10s\n", c + 1, 100.0 * r.class_dsc[c], "n/a");
    }
  }
  if (r.mean_hd95) {
    std::printf("%-8s %10.2f %10.3f\n", "mean", 100.0 * r.mean_dsc, *r.mean_hd95);
  } else {
    std::printf("%-8s %10.2f %10s\n", "mean", 100.0 * r.mean_dsc, "n/a");
  }
}

void evaluate(const EvalArgs& a) {
  tensorio::Split split;
  try {
    split = tensorio::split_from_string(a.split);
  } catch (const std::exception& e) {
    throw UsageError(e.what());
  }
  if (!fs::exists(a.checkpoint)) throw std::runtime_error("checkpoint not found: " + a.checkpoint);
  auto model = models::load_checkpoint(a.checkpoint, models::LoadScope::CnnOnly);
  auto m = tensorio::load_manifest(manifest_file(a.manifest));
  auto slices = trainer::load_split(m, split, true);
  if (!slices.images.defined()) throw std::runtime_error("split " + a.split + " is empty");
  auto report = trainer::evaluate_split(model, slices, m.num_classes);
  print_report(report);
  if (!a.out.empty()) {
    std::ofstream out(a.out);
    if (!out) throw std::runtime_error("cannot write " + a.out);
    out << report.to_json().dump(2) << '\n';
  }
}

void export_embeddings(const ExportArgs& a) {
  const auto colon = a.slice.rfind(':');
  if (colon == std::string::npos) throw UsageError("--slice expects CASE:IDX");
  const auto case_id = a.slice.substr(0, colon);
  int index = 0;
  try {
    index = std::stoi(a.slice.substr(colon + 1));
  } catch (const std::exception&) {
    throw UsageError("--slice expects CASE:IDX");
  }
  if (!fs::exists(a.checkpoint)) throw std::runtime_error("checkpoint not found: " + a.checkpoint);
  auto model = models::load_checkpoint(a.checkpoint, models::LoadScope::CnnOnly);
  auto m = tensorio::load_manifest(manifest_file(a.manifest));
  const auto& entry = m.find_case(case_id);
  const tensorio::SliceEntry* slice = nullptr;
  for (const auto& s : entry.slices) {
    if (s.slice_index == index) slice = &s;
  }
  if (!slice) throw std::runtime_error("case " + case_id + " has no slice " + std::to_string(index));
  if (!slice->label) throw std::runtime_error("slice " + a.slice + " has no label");

  const auto& taps = model->config().tap_scales;
  const int height = a.scale > 0 ? a.scale : static_cast<int>(taps.front().first);
  std::optional<models::Scale> scale;
  for (const auto& s : taps) {
    if (s.first == height) scale = s;
  }
  if (!scale) throw UsageError("--scale " + std::to_string(height) + " is not a tap scale of this model");

  auto image = tensorio::read_tensor(m.resolve(slice->image));
  auto label = tensorio::read_tensor(m.resolve(*slice->label));
  auto e = trainer::export_embeddings(model, image, label, *scale);
  fs::create_directories(a.out);
  tensorio::write_tensor(fs::path(a.out) / "embeddings.mcst", e.embeddings, tensorio::DType::Float32);
  tensorio::write_tensor(fs::path(a.out) / "labels.mcst", e.labels, tensorio::DType::UInt8);
  std::printf("wrote %lld x %lld embeddings to %s\n", static_cast<long long>(e.embeddings.size(0)),
              static_cast<long long>(e.embeddings.size(1)), a.out.c_str());
}

}  // namespace

int run(int argc, char** argv) {
  CLI::App app{"Semi-supervised segmentation with co-trained CNN and attention U-Nets"};
  app.require_subcommand(1);

  GenDataArgs gen;
  auto* gen_cmd = app.add_subcommand("gen-data", "Generate the synthetic dataset and its manifest");
  gen_cmd->add_option("--out", gen.out, "Output directory")->required();
  gen_cmd->add_option("--seed", gen.seed, "Generator seed")->capture_default_str();
  gen_cmd->add_option("--cases", gen.cases, "Number of cases")->capture_default_str();
  gen_cmd->add_option("--slices", gen.slices, "Slices per case")->capture_default_str();
  gen_cmd->add_option("--size", gen.size, "Image height and width")->capture_default_str();
  gen_cmd->add_option("--labeled-frac", gen.fractions.labeled_train, "Fraction of labeled training cases")
      ->capture_default_str();
  gen_cmd->add_option("--unlabeled-frac", gen.fractions.unlabeled_train, "Fraction of unlabeled training cases")
      ->capture_default_str();
  gen_cmd->add_option("--val-frac", gen.fractions.val, "Fraction of validation cases")->capture_default_str();
  gen_cmd->add_option("--test-frac", gen.fractions.test, "Fraction of test cases")->capture_default_str();

  TrainArgs tr;
  auto* train_cmd = app.add_subcommand("train", "Co-train both branches");
  train_cmd->add_option("--config", tr.config, "TrainConfig JSON file");
  train_cmd->add_option("--manifest", tr.manifest, "Dataset manifest (file or dataset directory)");
  train_cmd->add_option("--iterations", tr.iterations, "Override the iteration count");
  train_cmd->add_option("--seed", tr.seed, "Override the seed");
  train_cmd->add_option("--ablate", tr.ablate, "cl | cross | balance | labeled-only | scales=<h>[,<h>...] (repeatable)");
  train_cmd->add_option("--out", tr.out, "Output directory for the run record and checkpoints");

  EvalArgs ev;
  auto* eval_cmd = app.add_subcommand("eval", "Evaluate the CNN branch of a checkpoint");
  eval_cmd->add_option("--checkpoint", ev.checkpoint, "Checkpoint directory")->required();
  eval_cmd->add_option("--manifest", ev.manifest, "Dataset manifest (file or dataset directory)")->required();
  eval_cmd->add_option("--split", ev.split, "labeled_train | unlabeled_train | val | test")->capture_default_str();
  eval_cmd->add_option("--out", ev.out, "Report JSON path");

  ExportArgs ex;
  auto* export_cmd = app.add_subcommand("export-embeddings", "Write per-pixel CNN embeddings and labels of one slice");
  export_cmd->add_option("--checkpoint", ex.checkpoint, "Checkpoint directory")->required();
  export_cmd->add_option("--manifest", ex.manifest, "Dataset manifest (file or dataset directory)")->required();
  export_cmd->add_option("--slice", ex.slice, "CASE:IDX")->required();
  export_cmd->add_option("--scale", ex.scale, "Tap scale height (default: full resolution)");
  export_cmd->add_option("--out", ex.out, "Output directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kSuccess : kUsageError;
  }

  try {
    if (*gen_cmd) gen_data(gen);
    if (*train_cmd) train(tr);
    if (*eval_cmd) evaluate(ev);
    if (*export_cmd) export_embeddings(ex);
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kUsageError;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kRuntimeFailure;
  }
  return kSuccess;
}

}  // namespace mcsc::cli
