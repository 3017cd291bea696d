#pragma once

#include <cstdint>
#include <json.hpp>
#include <string>
#include <vector>

#include "lmliqa/data.hpp"
#include "lmliqa/losses.hpp"
#include "lmliqa/model.hpp"
#include "lmliqa/mutual_learning.hpp"
#include "lmliqa/sampling.hpp"

namespace lmliqa {

struct LossConfig {
  double alpha = 0.5;
  double tau = 0.1;
  bool include_positive_in_denominator = false;
  bool inter_includes_positives = false;
  AnchorReduction anchor_reduction = AnchorReduction::mean;
};

struct SamplingConfig {
  int H = 4;
  int crop_size = 32;
  int M = 2;
  int K_layers = 3;
};

struct AblationConfig {
  PositiveSource positive_source = PositiveSource::saliency;
  bool intra_negatives = true;
  bool mutual_learning = true;
};

struct DataConfig {
  std::string manifest;  // empty: build the synthetic dataset in memory
  SyntheticConfig synthetic;
  double train_ratio = 0.8;
};

struct EvalConfig {
  bool logistic_plcc = false;
  bool per_epoch = true;
};

struct RunConfig {
  ModelConfig model;
  EpochSchedule schedule;
  EmaConfig ema;
  OptimizerConfig optimizer;
  LossConfig loss;
  SamplingConfig sampling;
  AblationConfig ablation;
  DataConfig data;
  EvalConfig eval;
  int batch_size = 8;
  double target_scale = 100.0;  // regression targets are mos / target_scale
  std::vector<std::uint64_t> seeds{0, 1, 2};
  bool checkpoints = true;

  void validate() const;
};

void to_json(nlohmann::json& j, const ModelConfig& c);
void from_json(const nlohmann::json& j, ModelConfig& c);
void to_json(nlohmann::json& j, const RunConfig& c);
void from_json(const nlohmann::json& j, RunConfig& c);

// Overlays `patch` onto the serialized defaults; every key in `patch` must
// already exist there.
RunConfig run_config_from_json(const nlohmann::json& patch);
RunConfig load_run_config(const std::string& path);

// key is dotted (e.g. "loss.tau"); value is parsed as JSON, falling back to
// a plain string.
void apply_override(nlohmann::json& config, const std::string& key, const std::string& value);

}  // namespace lmliqa
