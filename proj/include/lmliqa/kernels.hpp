#pragma once

// Batch-level kernels. Each has a serial reference path and an OpenMP path;
// the parallel path partitions work into a fixed number of chunks reduced in
// index order, so its result does not depend on the thread count.

#include <span>
#include <vector>

#include "lmliqa/image.hpp"
#include "lmliqa/model.hpp"
#include "lmliqa/saliency.hpp"

namespace lmliqa {

enum class Exec { serial, parallel };

inline constexpr int kReductionChunks = 8;

void forward_crops(const Model& model, const ModelState& state, std::span<const Image> crops,
                   const std::vector<char>& with_score, std::vector<ForwardCache>& caches,
                   Exec exec);

// grad (overwritten) = sum over crops of the per-crop parameter gradient.
// d_features[i] may be empty when crop i has no feature gradient.
void backward_crops(const Model& model, const ModelState& state,
                    const std::vector<ForwardCache>& caches,
                    const std::vector<std::vector<double>>& d_features,
                    const std::vector<double>& d_scores, std::span<double> grad, Exec exec);

std::vector<double> predict_crops(const Model& model, const ModelState& state,
                                  std::span<const Image> crops, Exec exec);

std::vector<std::vector<double>> unit_features(const Model& model, const ModelState& state,
                                               std::span<const Image> crops, Exec exec);

std::vector<SaliencyResult> saliency_many(const Model& model, const ModelState& state,
                                          const std::vector<const Image*>& images,
                                          const SaliencyParams& params, Exec exec);

}  // namespace lmliqa
