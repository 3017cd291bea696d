#include <doctest.h>

#include <cmath>
#include <random>

#include "lmliqa/metrics.hpp"
#include "test_util.hpp"

using namespace lmliqa;

namespace {

double cov_pearson(const std::vector<double>& x, const std::vector<double>& y) {
  const double n = static_cast<double>(x.size());
  double mx = 0, my = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    mx += x[i] / n;
    my += y[i] / n;
  }
  double sxy = 0, sxx = 0, syy = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sxy += (x[i] - mx) * (y[i] - my);
    sxx += (x[i] - mx) * (x[i] - mx);
    syy += (y[i] - my) * (y[i] - my);
  }
  return sxy / std::sqrt(sxx * syy);
}

}  // namespace

TEST_CASE("srcc examples") {
  CHECK(srcc({1, 2, 3, 4}, {10, 20, 30, 40}).value == doctest::Approx(1.0).epsilon(1e-15));
  CHECK(srcc({1, 2, 3, 4}, {4, 3, 2, 1}).value == doctest::Approx(-1.0).epsilon(1e-15));
  CHECK(std::fabs(srcc({1, 2, 3, 4}, {1, 3, 2, 4}).value - 0.8) <= 1e-12);
}

TEST_CASE("average ranks with ties") {
  const auto r = average_ranks({10, 20, 20, 5});
  CHECK(r == std::vector<double>{2, 3.5, 3.5, 1});
}

TEST_CASE("plcc examples") {
  const std::vector<double> gt{0.3, 1.1, 2.5, 2.9, 4.0};
  std::vector<double> aff, neg;
  for (double g : gt) {
    aff.push_back(2 * g + 1);
    neg.push_back(-g);
  }
  CHECK(std::fabs(plcc(aff, gt).value - 1.0) <= 1e-12);
  CHECK(std::fabs(plcc(neg, gt).value + 1.0) <= 1e-12);
  const double v = plcc({1, 2, 3}, {1, 2, 4}).value;
  CHECK(std::fabs(v - cov_pearson({1, 2, 3}, {1, 2, 4})) <= 1e-9);
  CHECK(std::fabs(v - 0.9819805060619657) <= 1e-9);
}

TEST_CASE("invariances and symmetry") {
  std::mt19937_64 rng(8);
  std::normal_distribution<double> n(0.0, 1.0);
  std::vector<double> x(40), y(40);
  for (int i = 0; i < 40; ++i) {
    x[i] = n(rng);
    y[i] = x[i] + 0.7 * n(rng);
  }
  const double s = srcc(x, y).value;
  std::vector<double> ex, cube, aff;
  for (double v : x) {
    ex.push_back(std::exp(v));
    cube.push_back(v * v * v);
    aff.push_back(3.5 * v - 2.0);
  }
  CHECK(srcc(ex, y).value == s);
  CHECK(srcc(cube, y).value == s);
  CHECK(srcc(y, x).value == s);
  const double p = plcc(x, y).value;
  CHECK(std::fabs(plcc(aff, y).value - p) <= 1e-12);
  CHECK(std::fabs(plcc(y, x).value - p) <= 1e-12);
  CHECK(std::fabs(p - cov_pearson(x, y)) <= 1e-12);
}

TEST_CASE("degenerate variance is flagged") {
  const auto c = srcc({1, 1, 1, 1}, {1, 2, 3, 4});
  CHECK(c.degenerate);
  CHECK(std::isnan(c.value));
  const auto e = evaluate_scores({2, 2, 2}, {1, 2, 3});
  CHECK(e.degenerate);
}

TEST_CASE("logistic plcc is at least as good on a monotone nonlinearity") {
  std::vector<double> x, y;
  for (int i = 0; i < 30; ++i) {
    x.push_back(i / 3.0 - 5.0);
    y.push_back(1.0 / (1.0 + std::exp(-x.back())));
  }
  const double lin = plcc(x, y).value;
  const double logi = plcc_logistic(x, y).value;
  CHECK(logi >= lin);
  CHECK(logi > 0.999);
}

TEST_CASE("intra_image_spread") {
  const std::vector<double> a{1, 0, 0}, b{0, 1, 0};
  CHECK(intra_image_spread({{a, a, a}, {b, b}}) == 0.0);
  CHECK(std::fabs(intra_image_spread({{a, b}, {b, a}}) - 1.0) <= 1e-15);

  std::mt19937_64 rng(3);
  std::vector<std::vector<std::vector<double>>> per;
  for (int t = 0; t < 4; ++t) {
    per.emplace_back();
    for (int h = 0; h < 5; ++h) per.back().push_back(testutil::random_unit(rng, 7));
  }
  double total = 0.0;
  for (const auto& img : per) {
    double s = 0.0;
    int cnt = 0;
    for (std::size_t i = 0; i < img.size(); ++i) {
      for (std::size_t j = i + 1; j < img.size(); ++j) {
        s += 1.0 - testutil::dot(img[i], img[j]);
        ++cnt;
      }
    }
    total += s / cnt;
  }
  CHECK(std::fabs(intra_image_spread(per) - total / per.size()) <= 1e-12);
}
