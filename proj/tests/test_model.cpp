#include <doctest.h>

#include <cmath>

#include "lmliqa/errors.hpp"
#include "lmliqa/model.hpp"
#include "test_util.hpp"

using namespace lmliqa;

namespace {

using Mat = std::vector<std::vector<double>>;

ModelConfig tiny() {
  ModelConfig c;
  c.embed_dim = 16;
  c.num_layers = 2;
  c.num_heads = 2;
  c.mlp_head_dims = {8, 1};
  c.seed = 77;
  return c;
}

// Straight-line reimplementation that reads parameters by name and keeps every
// intermediate as a row-major matrix of token vectors.
struct Oracle {
  const ModelState& s;
  int d, heads;

  Mat lin(const Mat& x, const std::string& name) const {
    const auto w = s.param(name + ".weight");
    const auto b = s.param(name + ".bias");
    const std::size_t in = x[0].size(), out = b.size();
    Mat y(x.size(), std::vector<double>(out));
    for (std::size_t r = 0; r < x.size(); ++r) {
      for (std::size_t o = 0; o < out; ++o) {
        double acc = b[o];
        for (std::size_t i = 0; i < in; ++i) acc += x[r][i] * w[i * out + o];
        y[r][o] = acc;
      }
    }
    return y;
  }

  Mat ln(const Mat& x, const std::string& name) const {
    const auto g = s.param(name + ".gamma");
    const auto b = s.param(name + ".beta");
    Mat y = x;
    for (auto& row : y) {
      double mu = 0.0, var = 0.0;
      for (double v : row) mu += v;
      mu /= row.size();
      for (double v : row) var += (v - mu) * (v - mu);
      var /= row.size();
      for (std::size_t i = 0; i < row.size(); ++i) {
        row[i] = (row[i] - mu) / std::sqrt(var + 1e-6) * g[i] + b[i];
      }
    }
    return y;
  }

  static double gelu(double x) {
    return 0.5 * x * (1.0 + std::tanh(std::sqrt(2.0 / M_PI) * (x + 0.044715 * x * x * x)));
  }

  // q: [nq x d], k, v: [nk x d]
  Mat attend(const Mat& q, const Mat& k, const Mat& v) const {
    const int dh = d / heads;
    Mat out(q.size(), std::vector<double>(d, 0.0));
    for (int h = 0; h < heads; ++h) {
      for (std::size_t i = 0; i < q.size(); ++i) {
        std::vector<double> logits(k.size());
        double mx = -1e300;
        for (std::size_t j = 0; j < k.size(); ++j) {
          double sdot = 0.0;
          for (int c = 0; c < dh; ++c) sdot += q[i][h * dh + c] * k[j][h * dh + c];
          logits[j] = sdot / std::sqrt(static_cast<double>(dh));
          mx = std::max(mx, logits[j]);
        }
        double z = 0.0;
        for (auto& l : logits) z += (l = std::exp(l - mx));
        for (std::size_t j = 0; j < k.size(); ++j) {
          for (int c = 0; c < dh; ++c) out[i][h * dh + c] += logits[j] / z * v[j][h * dh + c];
        }
      }
    }
    return out;
  }

  static Mat add(Mat a, const Mat& b) {
    for (std::size_t i = 0; i < a.size(); ++i) {
      for (std::size_t j = 0; j < a[i].size(); ++j) a[i][j] += b[i][j];
    }
    return a;
  }

  static Mat cols(const Mat& x, int from, int count) {
    Mat y(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) y[i].assign(x[i].begin() + from, x[i].begin() + from + count);
    return y;
  }

  Mat mlp(const Mat& x, const std::string& pre) const {
    Mat h = lin(x, pre + ".fc1");
    for (auto& r : h) {
      for (auto& v : r) v = gelu(v);
    }
    return lin(h, pre + ".fc2");
  }

  std::pair<std::vector<double>, double> run(const Image& img) const {
    const auto& c = s.config;
    const int ps = c.patch_size, side = c.grid_side();
    Mat patches;
    for (int gy = 0; gy < side; ++gy) {
      for (int gx = 0; gx < side; ++gx) {
        std::vector<double> p;
        for (int y = 0; y < ps; ++y) {
          for (int x = 0; x < ps; ++x) {
            for (int ch = 0; ch < c.channels; ++ch) {
              const double v = img.at(gy * ps + y, gx * ps + x, ch);
              p.push_back((v - c.pixel_mean) / c.pixel_std);
            }
          }
        }
        patches.push_back(p);
      }
    }
    const Mat emb = lin(patches, "patch_embed");
    const auto cls = s.param("cls_token");
    const auto pos = s.param("pos_embed");
    Mat x;
    x.emplace_back(cls.begin(), cls.end());
    for (const auto& e : emb) x.push_back(e);
    for (std::size_t i = 0; i < x.size(); ++i) {
      for (int j = 0; j < d; ++j) x[i][j] += pos[i * d + j];
    }
    for (int l = 0; l < c.num_layers; ++l) {
      const std::string pre = "encoder." + std::to_string(l);
      const Mat qkv = lin(ln(x, pre + ".ln1"), pre + ".attn.qkv");
      const Mat a = attend(cols(qkv, 0, d), cols(qkv, d, d), cols(qkv, 2 * d, d));
      x = add(x, lin(a, pre + ".attn.proj"));
      x = add(x, mlp(ln(x, pre + ".ln2"), pre + ".mlp"));
    }
    const Mat tokens = ln(x, "encoder.norm");

    const auto qp = s.param("decoder.query");
    Mat q{std::vector<double>(qp.begin(), qp.end())};
    for (int l = 0; l < c.decoder_layers; ++l) {
      const std::string pre = "decoder." + std::to_string(l);
      const Mat qq = lin(ln(q, pre + ".ln_q"), pre + ".attn.q");
      const Mat kv = lin(tokens, pre + ".attn.kv");
      q = add(q, lin(attend(qq, cols(kv, 0, d), cols(kv, d, d)), pre + ".attn.proj"));
      q = add(q, mlp(ln(q, pre + ".ln2"), pre + ".mlp"));
    }
    Mat h = ln(q, "decoder.norm");
    for (std::size_t i = 0; i < c.mlp_head_dims.size(); ++i) {
      h = lin(h, "head." + std::to_string(i));
      if (i + 1 < c.mlp_head_dims.size()) {
        for (auto& v : h[0]) v = gelu(v);
      }
    }
    return {tokens[0], h[0][0]};
  }
};

void randomize(ModelState& s, std::uint64_t seed, double scale) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n(0.0, scale);
  for (auto& v : s.values) v += n(rng);
}

}  // namespace

TEST_CASE("forward pass matches the straight-line oracle") {
  const auto cfg = tiny();
  const Model model(cfg);
  ModelState state = init_state(cfg);
  randomize(state, 5, 0.2);  // move gains and biases away from their init values
  for (std::uint64_t seed = 0; seed < 3; ++seed) {
    const auto img = testutil::random_image(32, 32, 3, seed);
    const Oracle oracle{state, cfg.embed_dim, cfg.num_heads};
    const auto [feature, score] = oracle.run(img);
    const auto enc = model.encode(state, img);
    for (int j = 0; j < cfg.embed_dim; ++j) CHECK(std::fabs(enc.class_feature[j] - feature[j]) <= 1e-6);
    CHECK(std::fabs(model.predict_quality(state, img) - score) <= 1e-6);
  }
}

TEST_CASE("encode invariants") {
  const auto cfg = tiny();
  const Model model(cfg);
  const auto state = init_state(cfg);
  const auto img = testutil::random_image(32, 32, 3, 9);
  const auto out = model.encode(state, img);
  double norm = 0.0;
  for (double v : out.unit_feature) norm += v * v;
  CHECK(std::fabs(std::sqrt(norm) - 1.0) <= 1e-6);
  REQUIRE(out.attention.layer_count() == cfg.num_layers);
  CHECK(out.attention.tokens == 17);
  for (int l = 0; l < cfg.num_layers; ++l) {
    for (int i = 0; i < 17; ++i) {
      double row = 0.0;
      for (int j = 0; j < 17; ++j) {
        const double a = out.attention.at(l, i, j);
        CHECK(a >= 0.0);
        CHECK(a <= 1.0);
        row += a;
      }
      CHECK(std::fabs(row - 1.0) <= 1e-6);
    }
  }
  const auto again = model.encode(state, img);
  CHECK(again.class_feature == out.class_feature);
  CHECK(again.attention.layers == out.attention.layers);
  CHECK(model.predict_quality(state, img) == model.predict_quality(state, img));
}

TEST_CASE("zeroed head gives exactly zero") {
  const auto cfg = tiny();
  const Model model(cfg);
  auto state = init_state(cfg);
  for (std::size_t i = 0; i < cfg.mlp_head_dims.size(); ++i) {
    for (auto& v : state.param("head." + std::to_string(i) + ".weight")) v = 0.0;
    for (auto& v : state.param("head." + std::to_string(i) + ".bias")) v = 0.0;
  }
  CHECK(model.predict_quality(state, testutil::random_image(32, 32, 3, 1)) == 0.0);
}

TEST_CASE("initialization") {
  const auto cfg = tiny();
  const auto a = init_state(cfg), b = init_state(cfg);
  CHECK(a.values == b.values);
  require_same_structure(a, b);
  for (const auto& e : a.entries) {
    const auto v = a.param(e.name);
    const bool gain = e.name.ends_with(".gamma");
    const bool zero = e.name.ends_with(".bias") || e.name.ends_with(".beta");
    // truncated at two standard deviations
    const double bound =
        e.name.ends_with(".weight") ? 2.0 / std::sqrt(static_cast<double>(e.shape[0])) : 0.04;
    for (double x : v) {
      CHECK(std::isfinite(x));
      if (gain) CHECK(x == 1.0);
      else if (zero) CHECK(x == 0.0);
      else CHECK(std::fabs(x) <= bound);
    }
  }
  auto flat = cfg;
  flat.init = InitScheme::trunc_normal;
  for (double x : init_state(flat).values) CHECK(std::fabs(x) <= 1.0);
  const auto w = init_state(flat).param("encoder.0.mlp.fc1.weight");
  double sq = 0.0;
  for (double x : w) sq += x * x;
  CHECK(std::sqrt(sq / w.size()) == doctest::Approx(0.02 * 0.88).epsilon(0.1));
  auto other = cfg;
  other.embed_dim = 32;
  CHECK_THROWS_AS(require_same_structure(a, init_state(other)), ShapeError);
}

TEST_CASE("config validation and input checks") {
  ModelConfig bad = tiny();
  bad.image_size = 30;
  CHECK_THROWS_AS(bad.validate(), ValidationError);
  bad = tiny();
  bad.num_heads = 3;
  CHECK_THROWS_AS(bad.validate(), ValidationError);

  const Model model(tiny());
  const auto state = init_state(tiny());
  CHECK_THROWS_AS(model.encode(state, testutil::random_image(16, 32, 3, 0)), ShapeError);
  auto img = testutil::random_image(32, 32, 3, 0);
  img.pixels[5] = NAN;
  CHECK_THROWS_AS(model.encode(state, img), ValidationError);
}

TEST_CASE("grad_check on the squared class-feature norm") {
  const auto cfg = tiny();
  const Model model(cfg);
  // With unit LayerNorm gains the feature norm is pinned near sqrt(D) and the
  // gradients are at roundoff level, so perturb the gains first.
  auto state = init_state(cfg);
  randomize(state, 11, 0.2);
  const auto img = testutil::random_image(32, 32, 3, 2);
  const ParamObjective obj = [&](const ModelState& s, std::span<double> grad) {
    ForwardCache cache;
    model.forward(s, img, false, cache);
    double v = 0.0;
    for (double f : cache.class_feature) v += 0.5 * f * f;
    if (!grad.empty()) {
      std::fill(grad.begin(), grad.end(), 0.0);
      model.backward(s, cache, cache.class_feature, 0.0, grad);
    }
    return v;
  };
  const auto r = grad_check(state, obj, 1e-3, 400, 1);
  CHECK(r.checked == 400);
  CHECK(r.max_relative_error <= 1e-4);
}

TEST_CASE("grad_check on the score") {
  const auto cfg = tiny();
  const Model model(cfg);
  auto state = init_state(cfg);
  randomize(state, 3, 0.1);
  const auto img = testutil::random_image(32, 32, 3, 6);
  const ParamObjective obj = [&](const ModelState& s, std::span<double> grad) {
    ForwardCache cache;
    model.forward(s, img, true, cache);
    if (!grad.empty()) {
      std::fill(grad.begin(), grad.end(), 0.0);
      model.backward(s, cache, {}, 1.0, grad);
    }
    return cache.score;
  };
  CHECK(grad_check(state, obj, 1e-3, 400, 2).max_relative_error <= 1e-4);
}

TEST_CASE("grad_check on a constant loss") {
  const auto state = init_state(tiny());
  const ParamObjective obj = [](const ModelState&, std::span<double> grad) {
    std::fill(grad.begin(), grad.end(), 0.0);
    return 3.0;
  };
  CHECK(grad_check(state, obj, 1e-4).max_relative_error == 0.0);
  CHECK_THROWS_AS(grad_check(state, obj, 1e-2), ValidationError);
}

TEST_CASE("unit normalize backward") {
  const std::vector<double> f{0.3, -1.2, 2.0};
  const std::vector<double> g{1.0, 0.5, -0.25};
  const auto an = unit_normalize_backward(f, g);
  for (int i = 0; i < 3; ++i) {
    auto p = f, m = f;
    p[i] += 1e-6;
    m[i] -= 1e-6;
    const auto up = unit_normalize(p), dn = unit_normalize(m);
    double num = 0.0;
    for (int k = 0; k < 3; ++k) num += g[k] * (up[k] - dn[k]) / 2e-6;
    CHECK(an[i] == doctest::Approx(num).epsilon(1e-7));
  }
}
