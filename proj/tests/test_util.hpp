#pragma once

#include <cmath>
#include <random>
#include <vector>

#include "lmliqa/image.hpp"
#include "lmliqa/losses.hpp"

namespace testutil {

inline std::vector<double> random_unit(std::mt19937_64& rng, int d) {
  std::normal_distribution<double> n(0.0, 1.0);
  std::vector<double> v(d);
  double s = 0.0;
  for (auto& x : v) {
    x = n(rng);
    s += x * x;
  }
  for (auto& x : v) x /= std::sqrt(s);
  return v;
}

inline lmliqa::EmbeddingBatch random_batch(int T, int H, int d, double tau, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  lmliqa::EmbeddingBatch b;
  b.T = T;
  b.H = H;
  b.tau = tau;
  for (int i = 0; i < T * (H + 1); ++i) b.features.push_back(random_unit(rng, d));
  return b;
}

inline lmliqa::Image random_image(int w, int h, int c, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  lmliqa::Image img(w, h, c);
  for (auto& p : img.pixels) p = u(rng);
  return img;
}

inline double dot(const std::vector<double>& a, const std::vector<double>& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

}  // namespace testutil
