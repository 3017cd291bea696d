#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include "lmliqa/model.hpp"
#include "lmliqa/objective.hpp"
#include "lmliqa/saliency.hpp"
#include "lmliqa/sampling.hpp"

namespace lmliqa {

struct EmaConfig {
  double beta = 0.99;
  bool per_step = false;  // default cadence is once per epoch

  void validate() const;
};

struct EpochSchedule {
  int epochs = 9;
  double lr_initial = 2e-4;
  double lr_decay_factor = 10.0;
  int lr_decay_every = 3;

  // lr_initial / decay_factor^floor(epoch / decay_every)
  double lr_at(int epoch) const;
};

// theta_t <- beta * theta_t + (1 - beta) * theta_s, version incremented.
ModelState ema_update(const ModelState& teacher, const ModelState& student, double beta);

enum class OptimizerKind { sgd, adam };

struct OptimizerConfig {
  OptimizerKind kind = OptimizerKind::sgd;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

class Optimizer {
 public:
  Optimizer() = default;
  explicit Optimizer(OptimizerConfig config) : config_(config) {}

  void step(std::span<double> params, std::span<const double> grad, double lr);

 private:
  OptimizerConfig config_;
  std::vector<double> m_, v_;
  std::uint64_t steps_ = 0;
};

struct ProtocolConfig {
  EpochSchedule schedule;
  EmaConfig ema;
  OptimizerConfig optimizer;
  ObjectiveOptions objective;
  SaliencyParams saliency;
  BatchParams batch;
  int batch_size = 8;
  bool mutual_learning = true;  // false freezes the teacher (beta = 1)
  std::uint64_t seed = 0;
};

struct TrainingSet {
  std::vector<const Image*> images;
  std::vector<double> targets;
};

struct StepRecord {
  int epoch = 0;
  int step = 0;
  double l1 = 0.0;
  double info_nce = 0.0;
  double total = 0.0;
};

struct EpochReport {
  int epoch = 0;
  double lr = 0.0;
  int steps = 0;
  double mean_l1 = 0.0;
  double mean_info_nce = 0.0;
  double mean_total = 0.0;
  double saliency_drift = 0.0;
  std::vector<PixelRect> saliency_rects;
  std::vector<StepRecord> step_records;
};

struct ProtocolState {
  ModelState teacher;
  ModelState student;
  Optimizer optimizer;
  std::vector<PixelRect> previous_rects;
  int global_step = 0;
};

// Starts with the teacher as an exact copy of the student.
ProtocolState make_protocol_state(const ModelState& student, const OptimizerConfig& optimizer);

// One epoch: (1) the frozen teacher precomputes saliency rects for every
// training image, (2) the student takes one gradient step per batch,
// (3) the teacher is EMA-refreshed from the student.
EpochReport run_epoch_protocol(const Model& model, ProtocolState& state, const TrainingSet& data,
                               int epoch, const ProtocolConfig& config);

}  // namespace lmliqa
