#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numeric>

#include "lmliqa/errors.hpp"
#include "lmliqa/losses.hpp"
#include "test_util.hpp"

using namespace lmliqa;
using testutil::dot;

namespace {

EmbeddingBatch identical(int T, int H, double tau) {
  EmbeddingBatch b;
  b.T = T;
  b.H = H;
  b.tau = tau;
  b.features.assign(T * (H + 1), std::vector<double>{1.0, 0.0, 0.0});
  return b;
}

// From-scratch InfoNCE with the positive left out of the denominator and a
// mean over the anchors of each image.
double oracle_info_nce_sum(const EmbeddingBatch& b, bool intra) {
  double total = 0.0;
  for (int t = 0; t < b.T; ++t) {
    double acc = 0.0;
    for (int h = 0; h < b.H; ++h) {
      const auto& f = b.at(t, h);
      double denom = 0.0;
      for (int t2 = 0; t2 < b.T; ++t2) {
        for (int h2 = 0; h2 < b.H; ++h2) {
          if (t2 == t && h2 == h) continue;
          if (t2 == t && !intra) continue;
          denom += std::exp(dot(f, b.at(t2, h2)) / b.tau);
        }
      }
      acc += -std::log(std::exp(dot(f, b.at(t, b.H)) / b.tau) / denom);
    }
    total += acc / b.H;
  }
  return total;
}

}  // namespace

TEST_CASE("p_intra and p_inter closed forms") {
  CHECK(p_intra(identical(2, 1, 1.0), {0, 0}) == 0.0);
  CHECK(p_intra(identical(1, 3, 1.0), {0, 1}) == doctest::Approx(2 * std::exp(1.0)).epsilon(1e-14));
  CHECK(p_inter(identical(1, 3, 1.0), {0, 0}) == 0.0);
  CHECK(p_inter(identical(2, 3, 1.0), {1, 2}) == doctest::Approx(3 * std::exp(1.0)).epsilon(1e-14));
}

TEST_CASE("p_intra and p_inter match loop oracles") {
  const auto b = testutil::random_batch(3, 4, 8, 0.3, 11);
  for (int t = 0; t < b.T; ++t) {
    for (int h = 0; h < b.H; ++h) {
      double intra = 0.0, inter = 0.0;
      for (int t2 = 0; t2 < b.T; ++t2) {
        for (int h2 = 0; h2 < b.H; ++h2) {
          const double e = std::exp(dot(b.at(t, h), b.at(t2, h2)) / b.tau);
          if (t2 == t && h2 != h) intra += e;
          if (t2 != t) inter += e;
        }
      }
      CHECK(std::fabs(p_intra(b, {t, h}) - intra) <= 1e-12 * intra);
      CHECK(std::fabs(p_inter(b, {t, h}) - inter) <= 1e-12 * inter);
    }
  }
}

TEST_CASE("info_nce identical embeddings give log 5") {
  const auto r = info_nce(identical(2, 3, 1.0));
  CHECK(r.mean == doctest::Approx(std::log(5.0)).epsilon(1e-12));
  for (const auto& a : r.per_anchor) CHECK(std::fabs(a.loss - std::log(5.0)) < 1e-12);
}

TEST_CASE("info_nce can be negative without the positive in the denominator") {
  EmbeddingBatch b;
  b.T = 1;
  b.H = 2;
  b.tau = 1.0;
  b.features = {{1, 0}, {0, 1}, {1, 0}};
  const auto r = info_nce(b);
  CHECK(std::fabs(r.per_anchor[0].loss - (-1.0)) <= 1e-12);
}

TEST_CASE("info_nce matches from-scratch recomputation") {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const auto b = testutil::random_batch(2, 3, 6, 0.5, seed);
    const double sum = oracle_info_nce_sum(b, true);
    const auto r = info_nce(b);
    double per_image = std::accumulate(r.per_image.begin(), r.per_image.end(), 0.0);
    CHECK(std::fabs(per_image - sum) <= 1e-10);
    ContrastiveOptions no_intra;
    no_intra.intra_negatives = false;
    const auto r2 = info_nce(b, no_intra);
    CHECK(std::fabs(std::accumulate(r2.per_image.begin(), r2.per_image.end(), 0.0) -
                    oracle_info_nce_sum(b, false)) <= 1e-10);
  }
}

TEST_CASE("per-anchor records are self-consistent") {
  const auto b = testutil::random_batch(3, 3, 5, 0.2, 4);
  for (const auto& a : info_nce(b).per_anchor) {
    CHECK(std::fabs(a.loss + std::log(a.numerator / (a.p_intra + a.p_inter))) <= 1e-12);
  }
}

TEST_CASE("info_nce is permutation invariant") {
  const auto b = testutil::random_batch(3, 4, 6, 0.25, 9);
  const double base = info_nce(b).mean;
  EmbeddingBatch p = b;
  // swap images 0 and 2, and rotate random crops within every image
  for (int h = 0; h <= b.H; ++h) {
    p.at(0, h) = b.at(2, h);
    p.at(2, h) = b.at(0, h);
  }
  EmbeddingBatch q = p;
  for (int t = 0; t < b.T; ++t) {
    for (int h = 0; h < b.H; ++h) q.at(t, h) = p.at(t, (h + 1) % b.H);
  }
  CHECK(std::fabs(info_nce(q).mean - base) <= 1e-12);
}

TEST_CASE("large temperature drives the loss to log of the negative count") {
  const int T = 3, H = 4;
  auto b = testutil::random_batch(T, H, 6, 1e6, 5);
  const double expected = std::log(static_cast<double>(H - 1 + (T - 1) * H));
  for (const auto& a : info_nce(b).per_anchor) CHECK(std::fabs(a.loss - expected) < 1e-4);
}

TEST_CASE("empty denominator is rejected") {
  EmbeddingBatch b;
  b.T = 1;
  b.H = 1;
  b.tau = 1.0;
  b.features = {{1, 0}, {0, 1}};
  CHECK_THROWS_AS(info_nce(b), ValidationError);
}

TEST_CASE("including the positive in the denominator keeps the loss non-negative") {
  const auto b = testutil::random_batch(2, 3, 4, 0.1, 3);
  ContrastiveOptions opts;
  opts.include_positive_in_denominator = true;
  for (const auto& a : info_nce(b, opts).per_anchor) {
    CHECK(a.loss >= 0.0);
    CHECK(a.p_positive == doctest::Approx(a.numerator));
  }
}

TEST_CASE("l1 loss") {
  CHECK(l1_loss({0.2, 0.4}, {0.2, 0.4}) == 0.0);
  CHECK(l1_loss({2, 0}, {1, 3}) == 4.0);
  std::mt19937_64 rng(1);
  std::uniform_real_distribution<double> u(-3, 3);
  std::vector<double> a(50), c(50);
  for (auto& x : a) x = u(rng);
  for (auto& x : c) x = u(rng);
  double s = 0.0;
  for (int i = 0; i < 50; ++i) s += std::fabs(a[i] - c[i]);
  CHECK(l1_loss(a, c) == s);
  CHECK_THROWS_AS(l1_loss({1.0}, {1.0, 2.0}), ValidationError);
}

TEST_CASE("total loss combination") {
  CHECK(total_loss({2, 4}, {1, 3}, 0.0).total == 6.0);
  CHECK(total_loss({2, 4}, {1, 3}, 1.0).total == 4.0);
  CHECK(total_loss({2, 4}, {1, 3}, 0.5).total == 5.0);
  const auto r = total_loss({0.3, 1.7, 2.2}, {0.1, -0.4, 0.9}, 0.37);
  CHECK(std::fabs(r.total - (0.63 * r.l1 + 0.37 * r.info_nce)) <= 1e-12);
  CHECK_THROWS_AS(total_loss({1}, {1}, 1.5), ValidationError);
}

TEST_CASE("hybrid loss gradient matches central differences") {
  const int T = 2, H = 3;
  auto b = testutil::random_batch(T, H, 5, 0.2, 21);
  std::vector<double> scores{0.1, 0.5, 0.9, 0.3, 0.35, 0.7};
  const std::vector<double> targets{0.4, 0.6};
  const double alpha = 0.5;
  HybridGradients g;
  hybrid_loss(b, scores, targets, alpha, {}, &g);

  const double eps = 1e-6;
  double worst = 0.0;
  for (std::size_t i = 0; i < b.features.size(); ++i) {
    for (std::size_t k = 0; k < b.features[i].size(); ++k) {
      auto p = b, m = b;
      p.features[i][k] += eps;
      m.features[i][k] -= eps;
      const double num = (hybrid_loss(p, scores, targets, alpha, {}, nullptr).total -
                          hybrid_loss(m, scores, targets, alpha, {}, nullptr).total) /
                         (2 * eps);
      const double an = g.d_features[i][k];
      const double err = std::fabs(an) < 1e-8 ? std::fabs(an - num)
                                              : std::fabs(an - num) / std::max(std::fabs(an), std::fabs(num));
      worst = std::max(worst, err);
    }
  }
  CHECK(worst <= 1e-6);
  for (int i = 0; i < T * H; ++i) {
    const double r = scores[i] - targets[i / H];
    CHECK(g.d_scores[i] == (1 - alpha) * (r > 0 ? 1.0 : -1.0));
  }
}
