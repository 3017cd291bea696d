#pragma once

#include <vector>

namespace lmliqa {

// A correlation value plus a flag for the undefined (zero-variance) case, in
// which `value` is NaN.
struct Correlation {
  double value = 0.0;
  bool degenerate = false;
};

struct EvalResult {
  double srcc = 0.0;
  double plcc = 0.0;
  int n = 0;
  bool degenerate = false;
};

// Average-tied ranks, 1-based.
std::vector<double> average_ranks(const std::vector<double>& values);

Correlation pearson(const std::vector<double>& x, const std::vector<double>& y);

// Pearson correlation of average-tied ranks. Requires equal lengths >= 3.
Correlation srcc(const std::vector<double>& pred, const std::vector<double>& gt);
Correlation plcc(const std::vector<double>& pred, const std::vector<double>& gt);

// PLCC after fitting the four-parameter logistic
// g(x) = (b1 - b2) / (1 + exp(-(x - b3) / |b4|)) + b2 to (pred, gt).
Correlation plcc_logistic(const std::vector<double>& pred, const std::vector<double>& gt);

EvalResult evaluate_scores(const std::vector<double>& pred, const std::vector<double>& gt,
                           bool logistic = false);

// Mean over images of the mean pairwise cosine distance (1 - cos) between that
// image's crop embeddings. Each image needs at least two crops.
double intra_image_spread(const std::vector<std::vector<std::vector<double>>>& per_image);

}  // namespace lmliqa
