#include "lmliqa/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <string>

#include "lmliqa/errors.hpp"

namespace lmliqa {

namespace {

void check_pair(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() != b.size()) {
    throw ValidationError("length mismatch: " + std::to_string(a.size()) + " vs " +
                          std::to_string(b.size()));
  }
  if (a.size() < 3) throw ValidationError("correlation needs at least 3 samples");
}

double mean_of(const std::vector<double>& v) {
  return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

}  // namespace

std::vector<double> average_ranks(const std::vector<double>& values) {
  const std::size_t n = values.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return values[a] < values[b]; });
  std::vector<double> ranks(n);
  std::size_t i = 0;
  while (i < n) {
    std::size_t j = i;
    while (j + 1 < n && values[order[j + 1]] == values[order[i]]) ++j;
    const double r = (static_cast<double>(i) + static_cast<double>(j)) / 2.0 + 1.0;
    for (std::size_t k = i; k <= j; ++k) ranks[order[k]] = r;
    i = j + 1;
  }
  return ranks;
}

Correlation pearson(const std::vector<double>& x, const std::vector<double>& y) {
  check_pair(x, y);
  const double mx = mean_of(x);
  const double my = mean_of(y);
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double dx = x[i] - mx;
    const double dy = y[i] - my;
    sxy += dx * dy;
    sxx += dx * dx;
    syy += dy * dy;
  }
  if (!(sxx > 0.0) || !(syy > 0.0)) {
    return {std::numeric_limits<double>::quiet_NaN(), true};
  }
  const double r = sxy / std::sqrt(sxx * syy);
  return {std::clamp(r, -1.0, 1.0), false};
}

Correlation srcc(const std::vector<double>& pred, const std::vector<double>& gt) {
  check_pair(pred, gt);
  return pearson(average_ranks(pred), average_ranks(gt));
}

Correlation plcc(const std::vector<double>& pred, const std::vector<double>& gt) {
  return pearson(pred, gt);
}

Correlation plcc_logistic(const std::vector<double>& pred, const std::vector<double>& gt) {
  check_pair(pred, gt);
  const auto [pmin, pmax] = std::minmax_element(pred.begin(), pred.end());
  const auto [gmin, gmax] = std::minmax_element(gt.begin(), gt.end());
  if (*pmax == *pmin || *gmax == *gmin) return {std::numeric_limits<double>::quiet_NaN(), true};

  // Gauss-Newton with step halving on the squared residual.
  double b[4] = {*gmax, *gmin, mean_of(pred), std::max((*pmax - *pmin) / 4.0, 1e-12)};
  auto model = [](const double* p, double x) {
    return (p[0] - p[1]) / (1.0 + std::exp(-(x - p[2]) / std::abs(p[3]))) + p[1];
  };
  auto sse = [&](const double* p) {
    double s = 0.0;
    for (std::size_t i = 0; i < pred.size(); ++i) {
      const double r = gt[i] - model(p, pred[i]);
      s += r * r;
    }
    return s;
  };
  double current = sse(b);
  for (int iter = 0; iter < 200; ++iter) {
    double jtj[4][4] = {};
    double jtr[4] = {};
    for (std::size_t i = 0; i < pred.size(); ++i) {
      const double scale = std::abs(b[3]);
      const double z = (pred[i] - b[2]) / scale;
      const double s = 1.0 / (1.0 + std::exp(-z));
      const double ds = s * (1.0 - s);
      const double j[4] = {s, 1.0 - s, -(b[0] - b[1]) * ds / scale,
                           -(b[0] - b[1]) * ds * z / scale * (b[3] < 0 ? -1.0 : 1.0)};
      const double r = gt[i] - model(b, pred[i]);
      for (int a = 0; a < 4; ++a) {
        jtr[a] += j[a] * r;
        for (int c = 0; c < 4; ++c) jtj[a][c] += j[a] * j[c];
      }
    }
    // Levenberg damping keeps the 4x4 system solvable.
    for (int a = 0; a < 4; ++a) jtj[a][a] = jtj[a][a] * (1.0 + 1e-6) + 1e-12;
    double m[4][5];
    for (int a = 0; a < 4; ++a) {
      for (int c = 0; c < 4; ++c) m[a][c] = jtj[a][c];
      m[a][4] = jtr[a];
    }
    for (int col = 0; col < 4; ++col) {
      int piv = col;
      for (int r = col + 1; r < 4; ++r) {
        if (std::abs(m[r][col]) > std::abs(m[piv][col])) piv = r;
      }
      std::swap(m[col], m[piv]);
      if (std::abs(m[col][col]) < 1e-300) break;
      for (int r = 0; r < 4; ++r) {
        if (r == col) continue;
        const double f = m[r][col] / m[col][col];
        for (int c = col; c < 5; ++c) m[r][c] -= f * m[col][c];
      }
    }
    double step[4];
    for (int a = 0; a < 4; ++a) step[a] = m[a][4] / m[a][a];
    double t = 1.0;
    bool improved = false;
    for (int halve = 0; halve < 30; ++halve, t *= 0.5) {
      double trial[4];
      for (int a = 0; a < 4; ++a) trial[a] = b[a] + t * step[a];
      if (trial[3] == 0.0) continue;
      const double e = sse(trial);
      if (std::isfinite(e) && e < current) {
        std::copy(trial, trial + 4, b);
        improved = current - e > 1e-15 * (1.0 + current);
        current = e;
        break;
      }
    }
    if (!improved) break;
  }
  std::vector<double> fitted(pred.size());
  for (std::size_t i = 0; i < pred.size(); ++i) fitted[i] = model(b, pred[i]);
  return pearson(fitted, gt);
}

EvalResult evaluate_scores(const std::vector<double>& pred, const std::vector<double>& gt,
                           bool logistic) {
  const auto s = srcc(pred, gt);
  const auto p = logistic ? plcc_logistic(pred, gt) : plcc(pred, gt);
  return {s.value, p.value, static_cast<int>(pred.size()), s.degenerate || p.degenerate};
}

double intra_image_spread(const std::vector<std::vector<std::vector<double>>>& per_image) {
  if (per_image.empty()) throw ValidationError("intra_image_spread needs at least one image");
  double total = 0.0;
  for (const auto& crops : per_image) {
    if (crops.size() < 2) throw ValidationError("intra_image_spread needs >= 2 crops per image");
    double sum = 0.0;
    std::size_t pairs = 0;
    for (std::size_t i = 0; i < crops.size(); ++i) {
      for (std::size_t j = i + 1; j < crops.size(); ++j) {
        double dot = 0.0, ni = 0.0, nj = 0.0;
        for (std::size_t k = 0; k < crops[i].size(); ++k) {
          dot += crops[i][k] * crops[j][k];
          ni += crops[i][k] * crops[i][k];
          nj += crops[j][k] * crops[j][k];
        }
        sum += 1.0 - dot / std::sqrt(ni * nj);
        ++pairs;
      }
    }
    total += sum / static_cast<double>(pairs);
  }
  return total / static_cast<double>(per_image.size());
}

}  // namespace lmliqa
