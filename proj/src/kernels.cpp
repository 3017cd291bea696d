#include "lmliqa/kernels.hpp"

#include <algorithm>
#include <exception>

#include "lmliqa/errors.hpp"

namespace lmliqa {

namespace {

// Runs body(i) for i in [0, n); exceptions from workers are rethrown.
template <typename Body>
void for_each_index(std::size_t n, Exec exec, Body&& body) {
  if (exec == Exec::serial) {
    for (std::size_t i = 0; i < n; ++i) body(i);
    return;
  }
  std::exception_ptr error;
#pragma omp parallel for schedule(dynamic, 1)
  for (std::ptrdiff_t i = 0; i < static_cast<std::ptrdiff_t>(n); ++i) {
    try {
      body(static_cast<std::size_t>(i));
    } catch (...) {
#pragma omp critical(lmliqa_kernel_error)
      if (!error) error = std::current_exception();
    }
  }
  if (error) std::rethrow_exception(error);
}

}  // namespace

void forward_crops(const Model& model, const ModelState& state, std::span<const Image> crops,
                   const std::vector<char>& with_score, std::vector<ForwardCache>& caches,
                   Exec exec) {
  if (with_score.size() != crops.size()) throw ShapeError("with_score must align with crops");
  caches.resize(crops.size());
  for_each_index(crops.size(), exec, [&](std::size_t i) {
    model.forward(state, crops[i], with_score[i] != 0, caches[i]);
  });
}

void backward_crops(const Model& model, const ModelState& state,
                    const std::vector<ForwardCache>& caches,
                    const std::vector<std::vector<double>>& d_features,
                    const std::vector<double>& d_scores, std::span<double> grad, Exec exec) {
  const std::size_t n = caches.size();
  if (d_features.size() != n || d_scores.size() != n) {
    throw ShapeError("backward_crops: gradient lists must align with caches");
  }
  std::fill(grad.begin(), grad.end(), 0.0);
  if (exec == Exec::serial) {
    for (std::size_t i = 0; i < n; ++i) {
      model.backward(state, caches[i], d_features[i], d_scores[i], grad);
    }
    return;
  }

  const std::size_t chunks = std::min<std::size_t>(kReductionChunks, std::max<std::size_t>(n, 1));
  std::vector<std::vector<double>> partial(chunks, std::vector<double>(grad.size(), 0.0));
  for_each_index(chunks, Exec::parallel, [&](std::size_t c) {
    const std::size_t begin = c * n / chunks;
    const std::size_t end = (c + 1) * n / chunks;
    for (std::size_t i = begin; i < end; ++i) {
      model.backward(state, caches[i], d_features[i], d_scores[i], partial[c]);
    }
  });
  for (const auto& p : partial) {
    for (std::size_t j = 0; j < grad.size(); ++j) grad[j] += p[j];
  }
}

std::vector<double> predict_crops(const Model& model, const ModelState& state,
                                  std::span<const Image> crops, Exec exec) {
  std::vector<double> out(crops.size());
  for_each_index(crops.size(), exec,
                 [&](std::size_t i) { out[i] = model.predict_quality(state, crops[i]); });
  return out;
}

std::vector<std::vector<double>> unit_features(const Model& model, const ModelState& state,
                                               std::span<const Image> crops, Exec exec) {
  std::vector<std::vector<double>> out(crops.size());
  for_each_index(crops.size(), exec, [&](std::size_t i) {
    ForwardCache cache;
    model.forward(state, crops[i], false, cache);
    out[i] = unit_normalize(cache.class_feature);
  });
  return out;
}

std::vector<SaliencyResult> saliency_many(const Model& model, const ModelState& state,
                                          const std::vector<const Image*>& images,
                                          const SaliencyParams& params, Exec exec) {
  std::vector<SaliencyResult> out(images.size());
  for_each_index(images.size(), exec, [&](std::size_t i) {
    out[i] = saliency_crop(model, state, *images[i], params);
  });
  return out;
}

}  // namespace lmliqa
