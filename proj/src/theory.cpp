#include "lmliqa/theory.hpp"

#include <cmath>
#include <random>
#include <sstream>

#include "lmliqa/errors.hpp"
#include "lmliqa/sampling.hpp"

namespace lmliqa {

std::string to_string(NoiseDistribution d) {
  switch (d) {
    case NoiseDistribution::gaussian: return "gaussian";
    case NoiseDistribution::uniform: return "uniform";
    case NoiseDistribution::laplace: return "laplace";
  }
  return "unknown";
}

NoiseDistribution noise_distribution_from_string(const std::string& name) {
  if (name == "gaussian") return NoiseDistribution::gaussian;
  if (name == "uniform") return NoiseDistribution::uniform;
  if (name == "laplace") return NoiseDistribution::laplace;
  throw ValidationError("unknown noise distribution '" + name + "'");
}

void NoiseModel::validate() const {
  if (!(scale > 0.0) || !std::isfinite(scale)) throw ValidationError("noise scale must be > 0");
  if (draws < 3) throw ValidationError("draws per trial must be at least 3");
  if (trials < 2) throw ValidationError("trials must be at least 2");
}

namespace {

struct Moments {
  double sum[4] = {};
  double sq[4] = {};
  long long violations = 0;
  long long n = 0;
};

double draw(const NoiseModel& m, std::mt19937_64& rng) {
  switch (m.distribution) {
    case NoiseDistribution::gaussian: {
      std::normal_distribution<double> d(0.0, m.scale);
      return d(rng);
    }
    case NoiseDistribution::uniform: {
      std::uniform_real_distribution<double> d(-m.scale, m.scale);
      return d(rng);
    }
    case NoiseDistribution::laplace: {
      std::uniform_real_distribution<double> d(-0.5, 0.5);
      const double u = d(rng);
      return -m.scale * (u < 0 ? -1.0 : 1.0) * std::log1p(-2.0 * std::abs(u));
    }
  }
  return 0.0;
}

Moments run_shard(const NoiseModel& m, long long begin, long long end, std::uint64_t seed) {
  Moments out;
  std::mt19937_64 rng(seed);
  std::vector<double> eps(m.draws);
  const double pairs = m.draws * (m.draws - 1) / 2.0;
  for (long long trial = begin; trial < end; ++trial) {
    for (double& e : eps) e = draw(m, rng);
    double abs_eps = 0.0;
    for (double e : eps) abs_eps += std::abs(e);
    abs_eps /= m.draws;
    double abs_diff = 0.0;
    for (int i = 0; i < m.draws; ++i) {
      for (int j = i + 1; j < m.draws; ++j) abs_diff += std::abs(eps[i] - eps[j]);
    }
    abs_diff /= pairs;
    const double q[4] = {abs_eps, abs_diff, abs_eps - abs_diff, abs_diff - 2.0 * abs_eps};
    for (int k = 0; k < 4; ++k) {
      out.sum[k] += q[k];
      out.sq[k] += q[k] * q[k];
    }
    if (std::abs(eps[1] - eps[2]) > 2.0 * std::abs(eps[0])) ++out.violations;
    ++out.n;
  }
  return out;
}

}  // namespace

ExpectationReport estimate_expectations(const NoiseModel& model, std::uint64_t seed, Exec exec) {
  model.validate();
  std::vector<Moments> shards(kMonteCarloShards);
  const long long n = model.trials;
  auto run = [&](int s) {
    const long long begin = n * s / kMonteCarloShards;
    const long long end = n * (s + 1) / kMonteCarloShards;
    shards[s] = run_shard(model, begin, end, derive_seed(seed, static_cast<std::uint64_t>(s)));
  };
  if (exec == Exec::serial) {
    for (int s = 0; s < kMonteCarloShards; ++s) run(s);
  } else {
#pragma omp parallel for schedule(static)
    for (int s = 0; s < kMonteCarloShards; ++s) run(s);
  }

  Moments total;
  for (const auto& sh : shards) {
    for (int k = 0; k < 4; ++k) {
      total.sum[k] += sh.sum[k];
      total.sq[k] += sh.sq[k];
    }
    total.violations += sh.violations;
    total.n += sh.n;
  }
  const double nn = static_cast<double>(total.n);
  double mean[4], se[4];
  for (int k = 0; k < 4; ++k) {
    mean[k] = total.sum[k] / nn;
    const double var = std::max(0.0, (total.sq[k] - nn * mean[k] * mean[k]) / (nn - 1.0));
    se[k] = std::sqrt(var / nn);
  }
  ExpectationReport r;
  r.model = model;
  r.e_abs_eps = mean[0];
  r.e_abs_diff = mean[1];
  r.e_gap = mean[2];
  r.se_abs_eps = se[0];
  r.se_abs_diff = se[1];
  r.se_gap = se[2];
  r.se_bound = se[3];
  r.pointwise_violation_rate = static_cast<double>(total.violations) / nn;
  return r;
}

BoundVerdict check_expectation_bound(const ExpectationReport& report) {
  BoundVerdict v;
  v.lhs = report.e_abs_diff;
  v.rhs = 2.0 * report.e_abs_eps + 3.0 * report.se_bound;
  v.margin = v.rhs - v.lhs;
  v.pass = v.lhs <= v.rhs;
  v.gap_margin = report.e_abs_eps + 3.0 * report.se_gap - std::abs(report.e_gap);
  v.gap_within = v.gap_margin >= 0.0;
  return v;
}

std::string theory_csv_header() {
  return "distribution,scale,draws,trials,e_abs_eps,se_abs_eps,e_abs_diff,se_abs_diff,e_gap,"
         "se_gap,bound_lhs,bound_rhs,bound_margin,bound_pass,gap_margin,gap_within,"
         "pointwise_violation_rate";
}

std::string theory_csv_row(const ExpectationReport& r, const BoundVerdict& v) {
  std::ostringstream os;
  os.precision(10);
  os << to_string(r.model.distribution) << ',' << r.model.scale << ',' << r.model.draws << ','
     << r.model.trials << ',' << r.e_abs_eps << ',' << r.se_abs_eps << ',' << r.e_abs_diff << ','
     << r.se_abs_diff << ',' << r.e_gap << ',' << r.se_gap << ',' << v.lhs << ',' << v.rhs << ','
     << v.margin << ',' << (v.pass ? "pass" : "fail") << ',' << v.gap_margin << ','
     << (v.gap_within ? "pass" : "fail") << ',' << r.pointwise_violation_rate;
  return os.str();
}

std::vector<SensitivityPoint> score_feature_sensitivity(const Model& model,
                                                        const ModelState& state,
                                                        const Image& crop,
                                                        const std::vector<double>& steps,
                                                        std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::vector<double> dir(state.param_count());
  double norm = 0.0;
  for (double& v : dir) {
    v = normal(rng);
    norm += v * v;
  }
  norm = std::sqrt(norm);
  for (double& v : dir) v /= norm;

  ForwardCache base;
  model.forward(state, crop, true, base);
  std::vector<SensitivityPoint> out;
  ModelState probe = state;
  for (double step : steps) {
    for (std::size_t i = 0; i < dir.size(); ++i) probe.values[i] = state.values[i] + step * dir[i];
    ForwardCache moved;
    model.forward(probe, crop, true, moved);
    double df = 0.0;
    for (std::size_t i = 0; i < base.class_feature.size(); ++i) {
      const double d = moved.class_feature[i] - base.class_feature[i];
      df += d * d;
    }
    df = std::sqrt(df);
    const double dy = std::abs(moved.score - base.score);
    out.push_back({step, dy, df, df > 0 ? dy / df : 0.0});
  }
  return out;
}

}  // namespace lmliqa
