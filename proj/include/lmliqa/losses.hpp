#pragma once

#include <vector>

#include "lmliqa/sampling.hpp"

namespace lmliqa {

// Unit-norm features for T images x (H random crops + positive slot H).
struct EmbeddingBatch {
  int T = 0;
  int H = 0;
  double tau = 0.1;
  std::vector<std::vector<double>> features;  // index t * (H + 1) + h

  const std::vector<double>& at(int t, int h) const { return features[t * (H + 1) + h]; }
  std::vector<double>& at(int t, int h) { return features[t * (H + 1) + h]; }

  void validate() const;
};

enum class AnchorReduction { mean, sum };

struct ContrastiveOptions {
  bool intra_negatives = true;
  bool include_positive_in_denominator = false;
  // Adds the other images' positive-slot crops to the inter-class pool.
  bool inter_includes_positives = false;
  AnchorReduction reduction = AnchorReduction::mean;
};

struct AnchorTerms {
  CropIndex anchor;
  double numerator = 0.0;
  double p_intra = 0.0;
  double p_inter = 0.0;
  double p_positive = 0.0;  // non-zero only when the positive joins the denominator
  double loss = 0.0;
};

struct InfoNceResult {
  double mean = 0.0;                 // over all T*H anchors
  std::vector<double> per_image;     // L_Info^t after the anchor reduction
  std::vector<AnchorTerms> per_anchor;
};

struct LossBreakdown {
  double l1 = 0.0;        // sum over images
  double info_nce = 0.0;  // sum over images
  double total = 0.0;
  double alpha = 0.0;
  std::vector<double> l1_terms;
  std::vector<double> info_terms;
  std::vector<AnchorTerms> per_anchor;
};

double p_intra(const EmbeddingBatch& batch, CropIndex anchor);
double p_inter(const EmbeddingBatch& batch, CropIndex anchor,
               bool include_positives = false);

InfoNceResult info_nce(const EmbeddingBatch& batch, const ContrastiveOptions& options = {});

// Same value as info_nce; also writes d(sum_t L_Info^t)/df for every stored
// feature into `grad` (resized to match batch.features).
InfoNceResult info_nce_backward(const EmbeddingBatch& batch, const ContrastiveOptions& options,
                                std::vector<std::vector<double>>& grad);

// Sum of absolute errors.
double l1_loss(const std::vector<double>& predictions, const std::vector<double>& targets);

LossBreakdown total_loss(const std::vector<double>& l1_terms,
                         const std::vector<double>& info_terms, double alpha);

struct HybridGradients {
  std::vector<std::vector<double>> d_features;  // aligned with EmbeddingBatch::features
  std::vector<double> d_scores;                 // t * H + h
};

// Full objective: per image, L1 over the H random-crop scores against the
// image target plus InfoNCE, combined with alpha and summed over images.
// `scores` is indexed t * H + h.
LossBreakdown hybrid_loss(const EmbeddingBatch& batch, const std::vector<double>& scores,
                          const std::vector<double>& targets, double alpha,
                          const ContrastiveOptions& options, HybridGradients* grads);

}  // namespace lmliqa
