#include "lmliqa/objective.hpp"

#include <cmath>

#include "lmliqa/errors.hpp"

namespace lmliqa {

BatchEvaluation evaluate_batch(const Model& model, const ModelState& state,
                               const CropBatch& batch, const std::vector<double>& targets,
                               const ObjectiveOptions& options, std::span<double> grad,
                               Exec exec) {
  const int per_image = batch.H + 1;
  const std::size_t n = batch.pixels.size();
  std::vector<char> with_score(n, 0);
  for (std::size_t i = 0; i < n; ++i) with_score[i] = (static_cast<int>(i) % per_image) < batch.H;

  std::vector<ForwardCache> caches;
  forward_crops(model, state, batch.pixels, with_score, caches, exec);

  BatchEvaluation out;
  out.embeddings.T = batch.T;
  out.embeddings.H = batch.H;
  out.embeddings.tau = options.tau;
  out.embeddings.features.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    out.embeddings.features[i] = unit_normalize(caches[i].class_feature);
  }
  out.scores.resize(static_cast<std::size_t>(batch.T) * batch.H);
  for (int t = 0; t < batch.T; ++t) {
    for (int h = 0; h < batch.H; ++h) {
      out.scores[t * batch.H + h] = caches[t * per_image + h].score;
    }
  }

  const bool want_grad = !grad.empty();
  HybridGradients hg;
  out.loss = hybrid_loss(out.embeddings, out.scores, targets, options.alpha, options.contrastive,
                         want_grad ? &hg : nullptr);
  if (!std::isfinite(out.loss.total)) throw NumericalError("non-finite batch loss");
  if (!want_grad) return out;

  std::vector<std::vector<double>> d_class(n);
  std::vector<double> d_scores(n, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    d_class[i] = unit_normalize_backward(caches[i].class_feature, hg.d_features[i]);
    const int t = static_cast<int>(i) / per_image;
    const int h = static_cast<int>(i) % per_image;
    if (h < batch.H) d_scores[i] = hg.d_scores[t * batch.H + h];
  }
  backward_crops(model, state, caches, d_class, d_scores, grad, exec);
  return out;
}

ParamObjective batch_objective(const Model& model, const CropBatch& batch,
                               std::vector<double> targets, ObjectiveOptions options,
                               Exec exec) {
  return [&model, &batch, targets = std::move(targets), options, exec](
             const ModelState& state, std::span<double> grad) {
    return evaluate_batch(model, state, batch, targets, options, grad, exec).loss.total;
  };
}

}  // namespace lmliqa
