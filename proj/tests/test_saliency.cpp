#include <doctest.h>

#include <cmath>
#include <random>

#include "lmliqa/errors.hpp"
#include "lmliqa/saliency.hpp"
#include "test_util.hpp"

using namespace lmliqa;

namespace {

AttentionStack random_stack(int layers, int tokens, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  AttentionStack s;
  s.tokens = tokens;
  for (int l = 0; l < layers; ++l) {
    std::vector<double> m(tokens * tokens);
    for (int i = 0; i < tokens; ++i) {
      double sum = 0.0;
      for (int j = 0; j < tokens; ++j) sum += (m[i * tokens + j] = u(rng));
      for (int j = 0; j < tokens; ++j) m[i * tokens + j] /= sum;
    }
    s.layers.push_back(m);
  }
  return s;
}

AttentionGrid grid_of(int side, std::vector<double> v) {
  AttentionGrid g;
  g.side = side;
  g.source_layers = 1;
  g.values = std::move(v);
  return g;
}

// Exhaustive enumeration, rows then columns, strict improvement only.
WindowSelection brute_force(const AttentionGrid& g, int m) {
  WindowSelection best{0, 0, m, -INFINITY};
  for (int a = 0; a + m <= g.side; ++a) {
    for (int b = 0; b + m <= g.side; ++b) {
      double s = 0.0;
      for (int i = 0; i < m; ++i) {
        for (int j = 0; j < m; ++j) s += g.at(a + i, b + j);
      }
      if (s > best.score) best = {a, b, m, s};
    }
  }
  return best;
}

}  // namespace

TEST_CASE("class_to_patch edge cases") {
  const int n = 17;
  AttentionStack id;
  id.tokens = n;
  std::vector<double> m(n * n, 0.0);
  for (int i = 0; i < n; ++i) m[i * n + i] = 1.0;
  id.layers = {m};
  for (double v : class_to_patch(id, 0)) CHECK(v == 0.0);

  AttentionStack uni;
  uni.tokens = n;
  uni.layers = {std::vector<double>(n * n, 1.0 / n)};
  for (double v : class_to_patch(uni, 0)) CHECK(v == 1.0 / n);

  const auto s = random_stack(3, n, 4);
  const auto row = class_to_patch(s, 1);
  REQUIRE(row.size() == 16);
  for (int j = 0; j < 16; ++j) CHECK(row[j] == s.layers[1][j + 1]);
}

TEST_CASE("aggregate_last_k") {
  const int n = 17;
  const auto s = random_stack(4, n, 5);
  const auto g1 = aggregate_last_k(s, 1);
  CHECK(g1.side == 4);
  for (int j = 0; j < 16; ++j) CHECK(g1.values[j] == s.layers[3][j + 1]);

  const auto g3 = aggregate_last_k(s, 3);
  for (int j = 0; j < 16; ++j) {
    const double mean = (s.layers[1][j + 1] + s.layers[2][j + 1] + s.layers[3][j + 1]) / 3.0;
    CHECK(std::fabs(g3.values[j] - mean) <= 1e-12);
  }

  AttentionStack two;
  two.tokens = n;
  two.layers = {s.layers[0], s.layers[0]};
  for (auto& v : two.layers[1]) v *= 3.0;
  const auto g2 = aggregate_last_k(two, 2);
  for (int j = 0; j < 16; ++j) CHECK(std::fabs(g2.values[j] - 2 * s.layers[0][j + 1]) <= 1e-15);

  CHECK_THROWS_AS(aggregate_last_k(s, 0), ValidationError);
}

TEST_CASE("aggregate_last_k is linear") {
  const auto a = random_stack(3, 10, 1), b = random_stack(3, 10, 2);
  AttentionStack c = a;
  const double al = 0.3, be = 1.7;
  for (int l = 0; l < 3; ++l) {
    for (std::size_t i = 0; i < c.layers[l].size(); ++i) {
      c.layers[l][i] = al * a.layers[l][i] + be * b.layers[l][i];
    }
  }
  const auto ga = aggregate_last_k(a, 2), gb = aggregate_last_k(b, 2), gc = aggregate_last_k(c, 2);
  for (std::size_t i = 0; i < gc.values.size(); ++i) {
    CHECK(std::fabs(gc.values[i] - (al * ga.values[i] + be * gb.values[i])) <= 1e-12);
  }
}

TEST_CASE("find_window examples") {
  const auto uniform = grid_of(6, std::vector<double>(36, 0.25));
  const auto w = find_window(uniform, 3);
  CHECK(w.a == 0);
  CHECK(w.b == 0);

  std::vector<double> v(36, 0.0);
  v[4 * 6 + 4] = 1.0;
  const auto one = find_window(grid_of(6, v), 2);
  CHECK(one.a == 3);
  CHECK(one.b == 3);
  CHECK(one.score == 1.0);
}

TEST_CASE("find_window agrees with brute force including ties") {
  std::mt19937_64 rng(2024);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::uniform_int_distribution<int> small(0, 2);
  for (int trial = 0; trial < 400; ++trial) {
    const int side = 3 + trial % 5;
    std::vector<double> v(side * side);
    for (auto& x : v) x = trial % 2 ? u(rng) : small(rng) * 0.25;
    const auto g = grid_of(side, v);
    for (int m = 1; m <= side; ++m) {
      const auto got = find_window(g, m);
      const auto want = brute_force(g, m);
      CHECK(got.a == want.a);
      CHECK(got.b == want.b);
      CHECK(got.score == window_sum(g, got.a, got.b, m));
    }
  }
}

TEST_CASE("window_to_pixel_rect") {
  const auto r = window_to_pixel_rect({1, 1, 2, 0.0}, 32, 8, 64, 64, 32);
  CHECK(r.x == 16);
  CHECK(r.y == 16);
  CHECK(r.width == 32);
  CHECK(r.height == 32);

  const auto corner = window_to_pixel_rect({0, 0, 1, 0.0}, 32, 8, 256, 256, 96);
  CHECK(corner.x == 0);
  CHECK(corner.y == 0);

  // centered window on an odd-sized original
  const auto c = window_to_pixel_rect({1, 1, 2, 0.0}, 32, 8, 100, 80, 20);
  CHECK(c.x + c.width / 2 == 50);
  CHECK(c.y + c.height / 2 == 40);

  for (int a = 0; a <= 3; ++a) {
    for (int b = 0; b <= 3; ++b) {
      const auto q = window_to_pixel_rect({a, b, 1, 0.0}, 32, 8, 70, 45, 32);
      CHECK(q.x >= 0);
      CHECK(q.y >= 0);
      CHECK(q.x + q.width <= 70);
      CHECK(q.y + q.height <= 45);
    }
  }
  CHECK_THROWS_AS(window_to_pixel_rect({0, 0, 1, 0.0}, 32, 8, 20, 64, 32), ValidationError);
}

TEST_CASE("saliency_crop on a real model") {
  ModelConfig mc;
  mc.embed_dim = 16;
  mc.num_layers = 2;
  mc.num_heads = 2;
  const Model model(mc);
  const auto state = init_state(mc);
  const auto img = testutil::random_image(64, 48, 3, 3);
  const auto r = saliency_crop(model, state, img, {3, 2, 32});
  CHECK(r.grid.source_layers == 2);
  CHECK(r.grid.side == 4);
  for (double v : r.grid.values) CHECK(v >= 0.0);
  CHECK(r.rect.width == 32);
  CHECK(r.rect.x + 32 <= 64);
  CHECK(r.rect.y + 32 <= 48);
  CHECK(r.window == find_window(r.grid, 2));
}
