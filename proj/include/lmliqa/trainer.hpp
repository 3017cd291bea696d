#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "lmliqa/config.hpp"
#include "lmliqa/data.hpp"
#include "lmliqa/metrics.hpp"
#include "lmliqa/model.hpp"
#include "lmliqa/mutual_learning.hpp"

namespace lmliqa {

struct EvalParams {
  int H = 4;
  int crop_size = 32;
  SaliencyParams saliency;
  std::uint64_t seed = 0;
  bool logistic_plcc = false;
  double score_scale = 100.0;
};

EvalParams eval_params_for(const RunConfig& config, std::uint64_t seed);

struct EvalOutcome {
  EvalResult result;
  std::vector<double> predictions;
  std::vector<double> targets;
  double spread = 0.0;
};

// H random crops (seeded per dataset entry) followed by the teacher's
// saliency crop.
std::vector<Image> evaluation_crops(const Model& model, const ModelState& teacher,
                                    const Image& image, std::size_t entry_index,
                                    const EvalParams& params);

// Image score = mean predicted quality over its H + 1 evaluation crops.
EvalOutcome evaluate(const Model& model, const ModelState& state, const ModelState& teacher,
                     const Dataset& dataset, const std::vector<std::size_t>& split,
                     const EvalParams& params);

// Scores supplied per dataset entry (e.g. an oracle stub).
using ImageScorer = std::function<double(std::size_t entry_index)>;
EvalResult evaluate_with(const ImageScorer& scorer, const Dataset& dataset,
                         const std::vector<std::size_t>& split, bool logistic_plcc = false);

// CSV rows: image_id, crop_index, mos, f0..f{D-1} (unit features).
void export_embeddings(const Model& model, const ModelState& state, const ModelState& teacher,
                       const Dataset& dataset, const std::vector<std::size_t>& split,
                       const EvalParams& params, const std::string& path);

struct EpochSummary {
  EpochReport protocol;
  EvalResult test;
  double spread = 0.0;
};

struct SeedReport {
  std::uint64_t seed = 0;
  EvalResult untrained_test;
  double untrained_spread = 0.0;
  EvalResult final_test;
  EvalResult final_train;
  double final_spread = 0.0;
  std::vector<EpochSummary> epochs;
  std::vector<double> spread_trajectory;  // untrained first, then one per epoch
  double wall_seconds = 0.0;
  ModelState student;
  ModelState teacher;
};

struct RunReport {
  std::vector<SeedReport> seeds;
  double mean_test_srcc = 0.0;
};

// Builds the synthetic dataset or loads the manifest, matching image channels
// to the model.
Dataset load_or_build_dataset(const RunConfig& config);

ProtocolConfig protocol_config_for(const RunConfig& config, std::uint64_t seed);

// One seed: split, initialize, run the epoch protocol, evaluate. Writes
// steps.csv, epochs.csv, eval.csv and checkpoints under out_dir when it is
// non-empty.
SeedReport train_seed(const RunConfig& config, const Dataset& dataset, std::uint64_t seed,
                      const std::string& out_dir);

RunReport train(const RunConfig& config, const Dataset& dataset, const std::string& out_dir);
RunReport train(const RunConfig& config, const std::string& out_dir);

// Hybrid loss on a small seeded batch (T images, H random crops plus a
// saliency positive each) through a freshly initialized config.model,
// checked against central differences.
struct GradCheckRequest {
  int T = 2;
  int H = 2;
  double epsilon = 1e-3;
  std::size_t samples = 256;
  std::uint64_t seed = 0;
};
GradCheckResult run_gradient_check(const RunConfig& config, const GradCheckRequest& request);

}  // namespace lmliqa
