#pragma once

#include <span>
#include <vector>

#include "lmliqa/kernels.hpp"
#include "lmliqa/losses.hpp"
#include "lmliqa/model.hpp"
#include "lmliqa/sampling.hpp"

namespace lmliqa {

struct ObjectiveOptions {
  double alpha = 0.5;
  double tau = 0.1;
  ContrastiveOptions contrastive;
};

struct BatchEvaluation {
  LossBreakdown loss;
  EmbeddingBatch embeddings;
  std::vector<double> scores;  // t * H + h, random crops only
};

// Runs every crop of the batch through the student and evaluates the hybrid
// loss. When `grad` is non-empty it receives the parameter gradient of
// loss.total (overwritten).
BatchEvaluation evaluate_batch(const Model& model, const ModelState& state,
                               const CropBatch& batch, const std::vector<double>& targets,
                               const ObjectiveOptions& options, std::span<double> grad,
                               Exec exec = Exec::parallel);

ParamObjective batch_objective(const Model& model, const CropBatch& batch,
                               std::vector<double> targets, ObjectiveOptions options,
                               Exec exec = Exec::parallel);

}  // namespace lmliqa
