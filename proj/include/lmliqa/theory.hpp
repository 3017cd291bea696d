#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "lmliqa/image.hpp"
#include "lmliqa/kernels.hpp"
#include "lmliqa/model.hpp"

namespace lmliqa {

enum class NoiseDistribution { gaussian, uniform, laplace };

std::string to_string(NoiseDistribution d);
NoiseDistribution noise_distribution_from_string(const std::string& name);

// scale: gaussian std, uniform half-width, laplace b.
struct NoiseModel {
  NoiseDistribution distribution = NoiseDistribution::gaussian;
  double scale = 1.0;
  int draws = 3;  // t draws per trial, t >= 3
  long long trials = 100000;

  void validate() const;
};

// Per trial, t i.i.d. draws: |eps| is averaged over the draws, |eps_g - eps_d|
// over all pairs. Standard errors are across trials.
struct ExpectationReport {
  NoiseModel model;
  double e_abs_eps = 0.0;
  double e_abs_diff = 0.0;
  double e_gap = 0.0;  // E(|eps| - |eps_g - eps_d|)
  double se_abs_eps = 0.0;
  double se_abs_diff = 0.0;
  double se_gap = 0.0;
  double se_bound = 0.0;  // stderr of (|eps_g - eps_d| - 2|eps|)
  // Share of trials where ||eps_1| - |eps_2 - eps_3|| > |eps_1|.
  double pointwise_violation_rate = 0.0;
};

inline constexpr int kMonteCarloShards = 64;

ExpectationReport estimate_expectations(const NoiseModel& model, std::uint64_t seed,
                                        Exec exec = Exec::parallel);

struct BoundVerdict {
  bool pass = false;
  double lhs = 0.0;     // E|eps_g - eps_d|
  double rhs = 0.0;     // 2 E|eps| + 3 se
  double margin = 0.0;  // rhs - lhs
  bool gap_within = false;  // |E gap| <= E|eps| + 3 se_gap
  double gap_margin = 0.0;
};

BoundVerdict check_expectation_bound(const ExpectationReport& report);

std::string theory_csv_header();
std::string theory_csv_row(const ExpectationReport& report, const BoundVerdict& verdict);

// First-order link between score and feature changes: for each step size,
// perturb all parameters along one seeded random unit direction and report
// |delta score| / ||delta class feature||. Reported, not asserted.
struct SensitivityPoint {
  double step = 0.0;
  double d_score = 0.0;
  double d_feature = 0.0;
  double ratio = 0.0;
};

std::vector<SensitivityPoint> score_feature_sensitivity(const Model& model,
                                                        const ModelState& state,
                                                        const Image& crop,
                                                        const std::vector<double>& steps,
                                                        std::uint64_t seed);

}  // namespace lmliqa
