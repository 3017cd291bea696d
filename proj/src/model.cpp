#include "lmliqa/model.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "lmliqa/errors.hpp"

namespace lmliqa {

void ModelConfig::validate() const {
  if (image_size <= 0 || patch_size <= 0 || image_size % patch_size != 0) {
    throw ValidationError("image_size (" + std::to_string(image_size) +
                          ") must be a positive multiple of patch_size (" +
                          std::to_string(patch_size) + ")");
  }
  if (channels <= 0) throw ValidationError("channels must be positive");
  if (embed_dim <= 0 || num_heads <= 0 || embed_dim % num_heads != 0) {
    throw ValidationError("embed_dim (" + std::to_string(embed_dim) +
                          ") must be divisible by num_heads (" + std::to_string(num_heads) + ")");
  }
  if (num_layers <= 0) throw ValidationError("num_layers must be positive");
  if (decoder_layers < 0) throw ValidationError("decoder_layers must be non-negative");
  if (mlp_ratio <= 0) throw ValidationError("mlp_ratio must be positive");
  if (!std::isfinite(pixel_mean) || !(pixel_std > 0.0) || !std::isfinite(pixel_std)) {
    throw ValidationError("pixel_mean must be finite and pixel_std positive");
  }
  if (mlp_head_dims.empty() || mlp_head_dims.back() != 1) {
    throw ValidationError("mlp_head_dims must end in 1");
  }
  for (int w : mlp_head_dims) {
    if (w <= 0) throw ValidationError("mlp_head_dims entries must be positive");
  }
}

const ParamEntry& ModelState::entry(const std::string& name) const {
  for (const auto& e : entries) {
    if (e.name == name) return e;
  }
  throw ValidationError("unknown parameter '" + name + "'");
}

std::span<double> ModelState::param(const std::string& name) {
  const auto& e = entry(name);
  return {values.data() + e.offset, e.size};
}

std::span<const double> ModelState::param(const std::string& name) const {
  const auto& e = entry(name);
  return {values.data() + e.offset, e.size};
}

std::vector<ParamEntry> parameter_layout(const ModelConfig& config) {
  config.validate();
  const std::size_t d = config.embed_dim;
  const std::size_t f = config.mlp_hidden();
  const std::size_t p = static_cast<std::size_t>(config.patch_size) * config.patch_size *
                        config.channels;
  const std::size_t n = config.num_tokens();

  std::vector<ParamEntry> out;
  std::size_t offset = 0;
  auto add = [&](std::string name, std::vector<std::size_t> shape) {
    std::size_t size = 1;
    for (auto s : shape) size *= s;
    out.push_back({std::move(name), std::move(shape), offset, size});
    offset += size;
  };

  add("patch_embed.weight", {p, d});
  add("patch_embed.bias", {d});
  add("cls_token", {d});
  add("pos_embed", {n, d});
  for (int l = 0; l < config.num_layers; ++l) {
    const std::string pre = "encoder." + std::to_string(l) + ".";
    add(pre + "ln1.gamma", {d});
    add(pre + "ln1.beta", {d});
    add(pre + "attn.qkv.weight", {d, 3 * d});
    add(pre + "attn.qkv.bias", {3 * d});
    add(pre + "attn.proj.weight", {d, d});
    add(pre + "attn.proj.bias", {d});
    add(pre + "ln2.gamma", {d});
    add(pre + "ln2.beta", {d});
    add(pre + "mlp.fc1.weight", {d, f});
    add(pre + "mlp.fc1.bias", {f});
    add(pre + "mlp.fc2.weight", {f, d});
    add(pre + "mlp.fc2.bias", {d});
  }
  add("encoder.norm.gamma", {d});
  add("encoder.norm.beta", {d});

  add("decoder.query", {d});
  for (int l = 0; l < config.decoder_layers; ++l) {
    const std::string pre = "decoder." + std::to_string(l) + ".";
    add(pre + "ln_q.gamma", {d});
    add(pre + "ln_q.beta", {d});
    add(pre + "attn.q.weight", {d, d});
    add(pre + "attn.q.bias", {d});
    add(pre + "attn.kv.weight", {d, 2 * d});
    add(pre + "attn.kv.bias", {2 * d});
    add(pre + "attn.proj.weight", {d, d});
    add(pre + "attn.proj.bias", {d});
    add(pre + "ln2.gamma", {d});
    add(pre + "ln2.beta", {d});
    add(pre + "mlp.fc1.weight", {d, f});
    add(pre + "mlp.fc1.bias", {f});
    add(pre + "mlp.fc2.weight", {f, d});
    add(pre + "mlp.fc2.bias", {d});
  }
  add("decoder.norm.gamma", {d});
  add("decoder.norm.beta", {d});

  std::size_t in = d;
  for (std::size_t i = 0; i < config.mlp_head_dims.size(); ++i) {
    const std::size_t w = config.mlp_head_dims[i];
    add("head." + std::to_string(i) + ".weight", {in, w});
    add("head." + std::to_string(i) + ".bias", {w});
    in = w;
  }
  return out;
}

namespace {

bool ends_with(const std::string& s, const std::string& suffix) {
  return s.size() >= suffix.size() && s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
}

}  // namespace

ModelState init_state(const ModelConfig& config) {
  ModelState state;
  state.config = config;
  state.entries = parameter_layout(config);
  const auto& last = state.entries.back();
  state.values.assign(last.offset + last.size, 0.0);

  std::mt19937_64 rng(config.seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  auto trunc_normal = [&](double std) {
    for (;;) {
      const double z = normal(rng);
      if (std::abs(z) <= 2.0) return std * z;
    }
  };
  for (const auto& e : state.entries) {
    auto* v = state.values.data() + e.offset;
    if (ends_with(e.name, ".gamma")) {
      std::fill(v, v + e.size, 1.0);
    } else if (ends_with(e.name, ".bias") || ends_with(e.name, ".beta")) {
      std::fill(v, v + e.size, 0.0);
    } else {
      // *.weight entries are [in, out] matrices.
      const bool matrix = ends_with(e.name, ".weight");
      const double std = matrix && config.init == InitScheme::fan_in
                             ? 1.0 / std::sqrt(static_cast<double>(e.shape[0]))
                             : 0.02;
      for (std::size_t i = 0; i < e.size; ++i) v[i] = trunc_normal(std);
    }
  }
  return state;
}

void require_same_structure(const ModelState& a, const ModelState& b) {
  const std::size_t n = std::min(a.entries.size(), b.entries.size());
  for (std::size_t i = 0; i < n; ++i) {
    if (a.entries[i].name != b.entries[i].name || a.entries[i].shape != b.entries[i].shape) {
      throw ShapeError("parameter mismatch at '" + a.entries[i].name + "' vs '" +
                       b.entries[i].name + "'");
    }
  }
  if (a.entries.size() != b.entries.size()) {
    const auto& extra = a.entries.size() > b.entries.size() ? a.entries[n] : b.entries[n];
    throw ShapeError("parameter '" + extra.name + "' present in only one state");
  }
  if (a.values.size() != b.values.size()) throw ShapeError("parameter value counts differ");
}

std::string parameter_name_at(const ModelState& state, std::size_t index) {
  for (const auto& e : state.entries) {
    if (index >= e.offset && index < e.offset + e.size) {
      return e.name + "[" + std::to_string(index - e.offset) + "]";
    }
  }
  return "<out of range>";
}

namespace {

constexpr double kLayerNormEps = 1e-6;
constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)

// y[n x out] = x[n x in] * w[in x out] + b
void linear(const double* x, std::size_t n, std::size_t in, const double* w, const double* b,
            std::size_t out, double* y) {
  for (std::size_t i = 0; i < n; ++i) {
    double* yi = y + i * out;
    std::copy(b, b + out, yi);
    const double* xi = x + i * in;
    for (std::size_t k = 0; k < in; ++k) {
      const double a = xi[k];
      const double* wk = w + k * out;
      for (std::size_t j = 0; j < out; ++j) yi[j] += a * wk[j];
    }
  }
}

// dx += dy * w^T (skipped when dx is null), dw += x^T * dy, db += colsum(dy)
void linear_backward(const double* x, std::size_t n, std::size_t in, const double* w,
                     const double* dy, std::size_t out, double* dx, double* dw, double* db) {
  for (std::size_t i = 0; i < n; ++i) {
    const double* dyi = dy + i * out;
    const double* xi = x + i * in;
    for (std::size_t j = 0; j < out; ++j) db[j] += dyi[j];
    for (std::size_t k = 0; k < in; ++k) {
      const double a = xi[k];
      double* dwk = dw + k * out;
      for (std::size_t j = 0; j < out; ++j) dwk[j] += a * dyi[j];
    }
    if (dx != nullptr) {
      double* dxi = dx + i * in;
      for (std::size_t k = 0; k < in; ++k) {
        const double* wk = w + k * out;
        double s = 0.0;
        for (std::size_t j = 0; j < out; ++j) s += wk[j] * dyi[j];
        dxi[k] += s;
      }
    }
  }
}

void layer_norm(const double* x, std::size_t n, std::size_t d, const double* g, const double* b,
                double* y, LayerNormCache& cache) {
  cache.xhat.resize(n * d);
  cache.rstd.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double* xi = x + i * d;
    double mean = 0.0;
    for (std::size_t j = 0; j < d; ++j) mean += xi[j];
    mean /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) var += (xi[j] - mean) * (xi[j] - mean);
    var /= static_cast<double>(d);
    const double rstd = 1.0 / std::sqrt(var + kLayerNormEps);
    cache.rstd[i] = rstd;
    for (std::size_t j = 0; j < d; ++j) {
      const double xh = (xi[j] - mean) * rstd;
      cache.xhat[i * d + j] = xh;
      y[i * d + j] = g[j] * xh + b[j];
    }
  }
}

void layer_norm_backward(const double* dy, std::size_t n, std::size_t d, const double* g,
                         const LayerNormCache& cache, double* dx, double* dg, double* db) {
  const double inv_d = 1.0 / static_cast<double>(d);
  for (std::size_t i = 0; i < n; ++i) {
    const double* dyi = dy + i * d;
    const double* xh = cache.xhat.data() + i * d;
    double mean_dxh = 0.0;
    double mean_dxh_xh = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
      dg[j] += dyi[j] * xh[j];
      db[j] += dyi[j];
      const double dxh = dyi[j] * g[j];
      mean_dxh += dxh;
      mean_dxh_xh += dxh * xh[j];
    }
    mean_dxh *= inv_d;
    mean_dxh_xh *= inv_d;
    const double rstd = cache.rstd[i];
    for (std::size_t j = 0; j < d; ++j) {
      const double dxh = dyi[j] * g[j];
      dx[i * d + j] += rstd * (dxh - mean_dxh - xh[j] * mean_dxh_xh);
    }
  }
}

double gelu(double x) {
  return 0.5 * x * (1.0 + std::tanh(kGeluC * (x + 0.044715 * x * x * x)));
}

double gelu_grad(double x) {
  const double t = std::tanh(kGeluC * (x + 0.044715 * x * x * x));
  return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * kGeluC * (1.0 + 3.0 * 0.044715 * x * x);
}

void softmax_inplace(double* row, std::size_t n) {
  double m = row[0];
  for (std::size_t j = 1; j < n; ++j) m = std::max(m, row[j]);
  double s = 0.0;
  for (std::size_t j = 0; j < n; ++j) {
    row[j] = std::exp(row[j] - m);
    s += row[j];
  }
  const double inv = 1.0 / s;
  for (std::size_t j = 0; j < n; ++j) row[j] *= inv;
}

// qkv: [n x 3d] laid out as [Q | K | V]; probs: [heads x n x n]; ctx: [n x d]
void self_attention(const double* qkv, std::size_t n, std::size_t d, std::size_t heads,
                    double* probs, double* ctx) {
  const std::size_t dh = d / heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  const std::size_t stride = 3 * d;
  std::fill(ctx, ctx + n * d, 0.0);
  for (std::size_t h = 0; h < heads; ++h) {
    double* p = probs + h * n * n;
    for (std::size_t i = 0; i < n; ++i) {
      const double* qi = qkv + i * stride + h * dh;
      double* pi = p + i * n;
      for (std::size_t j = 0; j < n; ++j) {
        const double* kj = qkv + j * stride + d + h * dh;
        double s = 0.0;
        for (std::size_t c = 0; c < dh; ++c) s += qi[c] * kj[c];
        pi[j] = s * scale;
      }
      softmax_inplace(pi, n);
      double* ci = ctx + i * d + h * dh;
      for (std::size_t j = 0; j < n; ++j) {
        const double a = pi[j];
        const double* vj = qkv + j * stride + 2 * d + h * dh;
        for (std::size_t c = 0; c < dh; ++c) ci[c] += a * vj[c];
      }
    }
  }
}

// dqkv is overwritten.
void self_attention_backward(const double* qkv, const double* probs, const double* dctx,
                             std::size_t n, std::size_t d, std::size_t heads, double* dqkv) {
  const std::size_t dh = d / heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  const std::size_t stride = 3 * d;
  std::fill(dqkv, dqkv + n * stride, 0.0);
  std::vector<double> ds(n);
  for (std::size_t h = 0; h < heads; ++h) {
    const double* p = probs + h * n * n;
    for (std::size_t i = 0; i < n; ++i) {
      const double* pi = p + i * n;
      const double* dci = dctx + i * d + h * dh;
      double dot = 0.0;
      for (std::size_t j = 0; j < n; ++j) {
        const double* vj = qkv + j * stride + 2 * d + h * dh;
        double* dvj = dqkv + j * stride + 2 * d + h * dh;
        double da = 0.0;
        for (std::size_t c = 0; c < dh; ++c) {
          da += dci[c] * vj[c];
          dvj[c] += pi[j] * dci[c];
        }
        ds[j] = da;
        dot += da * pi[j];
      }
      const double* qi = qkv + i * stride + h * dh;
      double* dqi = dqkv + i * stride + h * dh;
      for (std::size_t j = 0; j < n; ++j) {
        const double g = pi[j] * (ds[j] - dot) * scale;
        const double* kj = qkv + j * stride + d + h * dh;
        double* dkj = dqkv + j * stride + d + h * dh;
        for (std::size_t c = 0; c < dh; ++c) {
          dqi[c] += g * kj[c];
          dkj[c] += g * qi[c];
        }
      }
    }
  }
}

// q: [d]; kv: [n x 2d] laid out as [K | V]; probs: [heads x n]; ctx: [d]
void cross_attention(const double* q, const double* kv, std::size_t n, std::size_t d,
                     std::size_t heads, double* probs, double* ctx) {
  const std::size_t dh = d / heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  std::fill(ctx, ctx + d, 0.0);
  for (std::size_t h = 0; h < heads; ++h) {
    double* p = probs + h * n;
    for (std::size_t j = 0; j < n; ++j) {
      const double* kj = kv + j * 2 * d + h * dh;
      double s = 0.0;
      for (std::size_t c = 0; c < dh; ++c) s += q[h * dh + c] * kj[c];
      p[j] = s * scale;
    }
    softmax_inplace(p, n);
    for (std::size_t j = 0; j < n; ++j) {
      const double* vj = kv + j * 2 * d + d + h * dh;
      for (std::size_t c = 0; c < dh; ++c) ctx[h * dh + c] += p[j] * vj[c];
    }
  }
}

// dq and dkv are overwritten.
void cross_attention_backward(const double* q, const double* kv, const double* probs,
                              const double* dctx, std::size_t n, std::size_t d,
                              std::size_t heads, double* dq, double* dkv) {
  const std::size_t dh = d / heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  std::fill(dq, dq + d, 0.0);
  std::fill(dkv, dkv + n * 2 * d, 0.0);
  std::vector<double> ds(n);
  for (std::size_t h = 0; h < heads; ++h) {
    const double* p = probs + h * n;
    const double* dc = dctx + h * dh;
    double dot = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      const double* vj = kv + j * 2 * d + d + h * dh;
      double* dvj = dkv + j * 2 * d + d + h * dh;
      double da = 0.0;
      for (std::size_t c = 0; c < dh; ++c) {
        da += dc[c] * vj[c];
        dvj[c] += p[j] * dc[c];
      }
      ds[j] = da;
      dot += da * p[j];
    }
    for (std::size_t j = 0; j < n; ++j) {
      const double g = p[j] * (ds[j] - dot) * scale;
      const double* kj = kv + j * 2 * d + h * dh;
      double* dkj = dkv + j * 2 * d + h * dh;
      for (std::size_t c = 0; c < dh; ++c) {
        dq[h * dh + c] += g * kj[c];
        dkj[c] += g * q[h * dh + c];
      }
    }
  }
}

}  // namespace

Model::Model(ModelConfig config) : config_(std::move(config)) {
  const auto layout = parameter_layout(config_);
  auto off = [&](const std::string& name) {
    for (const auto& e : layout) {
      if (e.name == name) return e.offset;
    }
    throw ValidationError("layout missing '" + name + "'");
  };
  param_count_ = layout.back().offset + layout.back().size;
  patch_w_ = off("patch_embed.weight");
  patch_b_ = off("patch_embed.bias");
  cls_ = off("cls_token");
  pos_ = off("pos_embed");
  for (int l = 0; l < config_.num_layers; ++l) {
    const std::string pre = "encoder." + std::to_string(l) + ".";
    enc_.push_back({off(pre + "ln1.gamma"), off(pre + "ln1.beta"), off(pre + "attn.qkv.weight"),
                    off(pre + "attn.qkv.bias"), off(pre + "attn.proj.weight"),
                    off(pre + "attn.proj.bias"), off(pre + "ln2.gamma"), off(pre + "ln2.beta"),
                    off(pre + "mlp.fc1.weight"), off(pre + "mlp.fc1.bias"),
                    off(pre + "mlp.fc2.weight"), off(pre + "mlp.fc2.bias")});
  }
  norm_g_ = off("encoder.norm.gamma");
  norm_b_ = off("encoder.norm.beta");
  query_ = off("decoder.query");
  for (int l = 0; l < config_.decoder_layers; ++l) {
    const std::string pre = "decoder." + std::to_string(l) + ".";
    dec_.push_back({off(pre + "ln_q.gamma"), off(pre + "ln_q.beta"), off(pre + "attn.q.weight"),
                    off(pre + "attn.q.bias"), off(pre + "attn.kv.weight"),
                    off(pre + "attn.kv.bias"), off(pre + "attn.proj.weight"),
                    off(pre + "attn.proj.bias"), off(pre + "ln2.gamma"), off(pre + "ln2.beta"),
                    off(pre + "mlp.fc1.weight"), off(pre + "mlp.fc1.bias"),
                    off(pre + "mlp.fc2.weight"), off(pre + "mlp.fc2.bias")});
  }
  dec_norm_g_ = off("decoder.norm.gamma");
  dec_norm_b_ = off("decoder.norm.beta");
  int in = config_.embed_dim;
  for (std::size_t i = 0; i < config_.mlp_head_dims.size(); ++i) {
    const int out = config_.mlp_head_dims[i];
    head_.push_back({off("head." + std::to_string(i) + ".weight"),
                     off("head." + std::to_string(i) + ".bias"), in, out});
    in = out;
  }
}

void Model::check_input(const ModelState& state, const Image& crop) const {
  if (state.values.size() != param_count_ || !(state.config == config_)) {
    throw ShapeError("model state does not match model config (expected " +
                     std::to_string(param_count_) + " parameters, got " +
                     std::to_string(state.values.size()) + ")");
  }
  if (crop.width != config_.image_size || crop.height != config_.image_size ||
      crop.channels != config_.channels) {
    throw ShapeError("crop shape " + std::to_string(crop.width) + "x" +
                     std::to_string(crop.height) + "x" + std::to_string(crop.channels) +
                     " does not match expected " + std::to_string(config_.image_size) + "x" +
                     std::to_string(config_.image_size) + "x" + std::to_string(config_.channels));
  }
  for (double v : crop.pixels) {
    if (!std::isfinite(v)) throw ValidationError("crop contains non-finite pixel values");
  }
}

void Model::forward(const ModelState& state, const Image& crop, bool with_score,
                    ForwardCache& cache) const {
  check_input(state, crop);
  const double* w = state.values.data();
  const std::size_t d = config_.embed_dim;
  const std::size_t f = config_.mlp_hidden();
  const std::size_t heads = config_.num_heads;
  const std::size_t ps = config_.patch_size;
  const std::size_t side = config_.grid_side();
  const std::size_t s = side * side;
  const std::size_t n = s + 1;
  const std::size_t pdim = ps * ps * config_.channels;
  const std::size_t ch = config_.channels;

  const double mean = config_.pixel_mean;
  const double scale = config_.pixel_std;

  // Patches in row-major grid order, each flattened as (py, px, c).
  cache.patches.resize(s * pdim);
  for (std::size_t gy = 0; gy < side; ++gy) {
    for (std::size_t gx = 0; gx < side; ++gx) {
      double* dst = cache.patches.data() + (gy * side + gx) * pdim;
      for (std::size_t py = 0; py < ps; ++py) {
        const double* src =
            crop.pixels.data() + ((gy * ps + py) * config_.image_size + gx * ps) * ch;
        double* row = dst + py * ps * ch;
        for (std::size_t k = 0; k < ps * ch; ++k) row[k] = (src[k] - mean) / scale;
      }
    }
  }

  std::vector<double> x(n * d);
  linear(cache.patches.data(), s, pdim, w + patch_w_, w + patch_b_, d, x.data() + d);
  std::copy(w + cls_, w + cls_ + d, x.begin());
  for (std::size_t i = 0; i < n * d; ++i) x[i] += w[pos_ + i];

  cache.encoder.resize(enc_.size());
  std::vector<double> tmp(n * d);
  for (std::size_t l = 0; l < enc_.size(); ++l) {
    const auto& o = enc_[l];
    auto& c = cache.encoder[l];
    c.x_in = x;
    c.h1.resize(n * d);
    layer_norm(x.data(), n, d, w + o.ln1_g, w + o.ln1_b, c.h1.data(), c.ln1);
    c.qkv.resize(n * 3 * d);
    linear(c.h1.data(), n, d, w + o.qkv_w, w + o.qkv_b, 3 * d, c.qkv.data());
    c.probs.resize(heads * n * n);
    c.ctx.resize(n * d);
    self_attention(c.qkv.data(), n, d, heads, c.probs.data(), c.ctx.data());
    linear(c.ctx.data(), n, d, w + o.proj_w, w + o.proj_b, d, tmp.data());
    for (std::size_t i = 0; i < n * d; ++i) x[i] += tmp[i];
    c.x_mid = x;
    c.h2.resize(n * d);
    layer_norm(x.data(), n, d, w + o.ln2_g, w + o.ln2_b, c.h2.data(), c.ln2);
    c.fc1.resize(n * f);
    linear(c.h2.data(), n, d, w + o.fc1_w, w + o.fc1_b, f, c.fc1.data());
    c.act.resize(n * f);
    for (std::size_t i = 0; i < n * f; ++i) c.act[i] = gelu(c.fc1[i]);
    linear(c.act.data(), n, f, w + o.fc2_w, w + o.fc2_b, d, tmp.data());
    for (std::size_t i = 0; i < n * d; ++i) x[i] += tmp[i];
  }
  cache.x_last = x;
  cache.tokens.resize(n * d);
  layer_norm(x.data(), n, d, w + norm_g_, w + norm_b_, cache.tokens.data(), cache.final_ln);
  cache.class_feature.assign(cache.tokens.begin(), cache.tokens.begin() + d);

  cache.has_score = with_score;
  if (!with_score) return;

  std::vector<double> q(w + query_, w + query_ + d);
  std::vector<double> qtmp(d);
  cache.decoder.resize(dec_.size());
  for (std::size_t l = 0; l < dec_.size(); ++l) {
    const auto& o = dec_[l];
    auto& c = cache.decoder[l];
    c.q_in = q;
    c.hq.resize(d);
    layer_norm(q.data(), 1, d, w + o.lnq_g, w + o.lnq_b, c.hq.data(), c.lnq);
    c.qd.resize(d);
    linear(c.hq.data(), 1, d, w + o.q_w, w + o.q_b, d, c.qd.data());
    c.kv.resize(n * 2 * d);
    linear(cache.tokens.data(), n, d, w + o.kv_w, w + o.kv_b, 2 * d, c.kv.data());
    c.probs.resize(heads * n);
    c.ctx.resize(d);
    cross_attention(c.qd.data(), c.kv.data(), n, d, heads, c.probs.data(), c.ctx.data());
    linear(c.ctx.data(), 1, d, w + o.proj_w, w + o.proj_b, d, qtmp.data());
    for (std::size_t i = 0; i < d; ++i) q[i] += qtmp[i];
    c.q_mid = q;
    c.h2.resize(d);
    layer_norm(q.data(), 1, d, w + o.ln2_g, w + o.ln2_b, c.h2.data(), c.ln2);
    c.fc1.resize(f);
    linear(c.h2.data(), 1, d, w + o.fc1_w, w + o.fc1_b, f, c.fc1.data());
    c.act.resize(f);
    for (std::size_t i = 0; i < f; ++i) c.act[i] = gelu(c.fc1[i]);
    linear(c.act.data(), 1, f, w + o.fc2_w, w + o.fc2_b, d, qtmp.data());
    for (std::size_t i = 0; i < d; ++i) q[i] += qtmp[i];
  }
  cache.q_last = q;
  cache.dec_out.resize(d);
  layer_norm(q.data(), 1, d, w + dec_norm_g_, w + dec_norm_b_, cache.dec_out.data(),
             cache.dec_ln);

  cache.head_in.resize(head_.size());
  cache.head_pre.resize(head_.size());
  std::vector<double> h = cache.dec_out;
  for (std::size_t i = 0; i < head_.size(); ++i) {
    const auto& o = head_[i];
    cache.head_in[i] = h;
    cache.head_pre[i].resize(o.out);
    linear(h.data(), 1, o.in, w + o.w, w + o.b, o.out, cache.head_pre[i].data());
    h = cache.head_pre[i];
    if (i + 1 < head_.size()) {
      for (double& v : h) v = gelu(v);
    }
  }
  cache.score = h[0];
}

void Model::backward(const ModelState& state, const ForwardCache& cache,
                     std::span<const double> d_class_feature, double d_score,
                     std::span<double> grad) const {
  if (grad.size() != param_count_) throw ShapeError("gradient buffer has wrong size");
  const double* w = state.values.data();
  double* g = grad.data();
  const std::size_t d = config_.embed_dim;
  const std::size_t f = config_.mlp_hidden();
  const std::size_t heads = config_.num_heads;
  const std::size_t s = config_.num_patches();
  const std::size_t n = s + 1;
  const std::size_t pdim =
      static_cast<std::size_t>(config_.patch_size) * config_.patch_size * config_.channels;

  // Gradient with respect to the normalized encoder tokens.
  std::vector<double> dtokens(n * d, 0.0);
  if (!d_class_feature.empty()) {
    if (d_class_feature.size() != d) throw ShapeError("class-feature gradient has wrong size");
    for (std::size_t j = 0; j < d; ++j) dtokens[j] += d_class_feature[j];
  }

  if (cache.has_score && d_score != 0.0) {
    std::vector<double> dh{d_score};
    for (std::size_t i = head_.size(); i-- > 0;) {
      const auto& o = head_[i];
      std::vector<double> dpre = dh;
      if (i + 1 < head_.size()) {
        for (int j = 0; j < o.out; ++j) dpre[j] *= gelu_grad(cache.head_pre[i][j]);
      }
      std::vector<double> dx(o.in, 0.0);
      linear_backward(cache.head_in[i].data(), 1, o.in, w + o.w, dpre.data(), o.out, dx.data(),
                      g + o.w, g + o.b);
      dh = std::move(dx);
    }
    std::vector<double> dq(d, 0.0);
    layer_norm_backward(dh.data(), 1, d, w + dec_norm_g_, cache.dec_ln, dq.data(),
                        g + dec_norm_g_, g + dec_norm_b_);

    std::vector<double> dtmp(std::max(d, f));
    std::vector<double> dkv(n * 2 * d);
    std::vector<double> dqd(d);
    for (std::size_t l = dec_.size(); l-- > 0;) {
      const auto& o = dec_[l];
      const auto& c = cache.decoder[l];
      // q = q_mid + fc2(gelu(fc1(ln2(q_mid))))
      std::vector<double> dact(f, 0.0);
      linear_backward(c.act.data(), 1, f, w + o.fc2_w, dq.data(), d, dact.data(), g + o.fc2_w,
                      g + o.fc2_b);
      for (std::size_t i = 0; i < f; ++i) dact[i] *= gelu_grad(c.fc1[i]);
      std::vector<double> dh2(d, 0.0);
      linear_backward(c.h2.data(), 1, d, w + o.fc1_w, dact.data(), f, dh2.data(), g + o.fc1_w,
                      g + o.fc1_b);
      layer_norm_backward(dh2.data(), 1, d, w + o.ln2_g, c.ln2, dq.data(), g + o.ln2_g,
                          g + o.ln2_b);
      // q_mid = q_in + proj(cross_attn(q(ln_q(q_in)), kv(tokens)))
      std::vector<double> dctx(d, 0.0);
      linear_backward(c.ctx.data(), 1, d, w + o.proj_w, dq.data(), d, dctx.data(),
                      g + o.proj_w, g + o.proj_b);
      cross_attention_backward(c.qd.data(), c.kv.data(), c.probs.data(), dctx.data(), n, d,
                               heads, dqd.data(), dkv.data());
      linear_backward(cache.tokens.data(), n, d, w + o.kv_w, dkv.data(), 2 * d, dtokens.data(),
                      g + o.kv_w, g + o.kv_b);
      std::vector<double> dhq(d, 0.0);
      linear_backward(c.hq.data(), 1, d, w + o.q_w, dqd.data(), d, dhq.data(), g + o.q_w,
                      g + o.q_b);
      layer_norm_backward(dhq.data(), 1, d, w + o.lnq_g, c.lnq, dq.data(), g + o.lnq_g,
                          g + o.lnq_b);
    }
    for (std::size_t i = 0; i < d; ++i) g[query_ + i] += dq[i];
  }

  std::vector<double> dx(n * d, 0.0);
  layer_norm_backward(dtokens.data(), n, d, w + norm_g_, cache.final_ln, dx.data(), g + norm_g_,
                      g + norm_b_);

  std::vector<double> dact(n * f);
  std::vector<double> dh(n * d);
  std::vector<double> dctx(n * d);
  std::vector<double> dqkv(n * 3 * d);
  for (std::size_t l = enc_.size(); l-- > 0;) {
    const auto& o = enc_[l];
    const auto& c = cache.encoder[l];
    std::fill(dact.begin(), dact.end(), 0.0);
    linear_backward(c.act.data(), n, f, w + o.fc2_w, dx.data(), d, dact.data(), g + o.fc2_w,
                    g + o.fc2_b);
    for (std::size_t i = 0; i < n * f; ++i) dact[i] *= gelu_grad(c.fc1[i]);
    std::fill(dh.begin(), dh.end(), 0.0);
    linear_backward(c.h2.data(), n, d, w + o.fc1_w, dact.data(), f, dh.data(), g + o.fc1_w,
                    g + o.fc1_b);
    layer_norm_backward(dh.data(), n, d, w + o.ln2_g, c.ln2, dx.data(), g + o.ln2_g,
                        g + o.ln2_b);

    std::fill(dctx.begin(), dctx.end(), 0.0);
    linear_backward(c.ctx.data(), n, d, w + o.proj_w, dx.data(), d, dctx.data(), g + o.proj_w,
                    g + o.proj_b);
    self_attention_backward(c.qkv.data(), c.probs.data(), dctx.data(), n, d, heads,
                            dqkv.data());
    std::fill(dh.begin(), dh.end(), 0.0);
    linear_backward(c.h1.data(), n, d, w + o.qkv_w, dqkv.data(), 3 * d, dh.data(), g + o.qkv_w,
                    g + o.qkv_b);
    layer_norm_backward(dh.data(), n, d, w + o.ln1_g, c.ln1, dx.data(), g + o.ln1_g,
                        g + o.ln1_b);
  }

  for (std::size_t i = 0; i < n * d; ++i) g[pos_ + i] += dx[i];
  for (std::size_t j = 0; j < d; ++j) g[cls_ + j] += dx[j];
  linear_backward(cache.patches.data(), s, pdim, w + patch_w_, dx.data() + d, d, nullptr,
                  g + patch_w_, g + patch_b_);
}

AttentionStack Model::attention_from(const ForwardCache& cache) const {
  const std::size_t n = config_.num_tokens();
  const std::size_t heads = config_.num_heads;
  AttentionStack stack;
  stack.tokens = static_cast<int>(n);
  stack.layers.reserve(cache.encoder.size());
  for (const auto& c : cache.encoder) {
    std::vector<double> avg(n * n, 0.0);
    for (std::size_t h = 0; h < heads; ++h) {
      for (std::size_t i = 0; i < n * n; ++i) avg[i] += c.probs[h * n * n + i];
    }
    for (double& v : avg) v /= static_cast<double>(heads);
    stack.layers.push_back(std::move(avg));
  }
  return stack;
}

std::vector<double> unit_normalize(std::span<const double> v) {
  double sq = 0.0;
  for (double x : v) sq += x * x;
  const double norm = std::sqrt(sq);
  if (!(norm > 0.0) || !std::isfinite(norm)) {
    throw NumericalError("cannot normalize a zero or non-finite feature vector");
  }
  std::vector<double> out(v.begin(), v.end());
  for (double& x : out) x /= norm;
  return out;
}

std::vector<double> unit_normalize_backward(std::span<const double> feature,
                                            std::span<const double> d_unit) {
  double sq = 0.0;
  for (double x : feature) sq += x * x;
  const double norm = std::sqrt(sq);
  double dot = 0.0;
  for (std::size_t i = 0; i < feature.size(); ++i) dot += feature[i] * d_unit[i];
  dot /= norm;
  std::vector<double> out(feature.size());
  for (std::size_t i = 0; i < feature.size(); ++i) {
    out[i] = (d_unit[i] - (feature[i] / norm) * dot) / norm;
  }
  return out;
}

EncodeOutput Model::encode(const ModelState& state, const Image& crop) const {
  ForwardCache cache;
  forward(state, crop, false, cache);
  EncodeOutput out;
  out.class_feature = cache.class_feature;
  out.unit_feature = unit_normalize(cache.class_feature);
  out.attention = attention_from(cache);
  return out;
}

double Model::predict_quality(const ModelState& state, const Image& crop) const {
  ForwardCache cache;
  forward(state, crop, true, cache);
  return cache.score;
}

GradCheckResult grad_check(const ModelState& state, const ParamObjective& objective,
                           double epsilon, std::size_t sample_count, std::uint64_t seed) {
  if (!(epsilon >= 1e-7 && epsilon <= 1e-3)) {
    throw ValidationError("grad_check epsilon must lie in [1e-7, 1e-3]");
  }
  const std::size_t count = state.param_count();
  std::vector<double> analytic(count, 0.0);
  objective(state, analytic);
  for (std::size_t i = 0; i < count; ++i) {
    if (!std::isfinite(analytic[i])) {
      throw NumericalError("non-finite analytic gradient at " + parameter_name_at(state, i));
    }
  }

  std::vector<std::size_t> indices(count);
  std::iota(indices.begin(), indices.end(), std::size_t{0});
  std::mt19937_64 rng(seed);
  std::shuffle(indices.begin(), indices.end(), rng);
  indices.resize(std::min(sample_count, count));
  std::sort(indices.begin(), indices.end());

  GradCheckResult result;
  result.checked = indices.size();
  ModelState probe = state;
  auto at = [&](std::size_t idx, double delta) {
    const double original = probe.values[idx];
    probe.values[idx] = original + delta;
    const double v = objective(probe, {});
    probe.values[idx] = original;
    return v;
  };
  bool first = true;
  for (std::size_t idx : indices) {
    // Fourth-order central stencil: the O(h^2) two-point form is swamped by
    // curvature at small temperatures.
    const double d1 = at(idx, epsilon) - at(idx, -epsilon);
    const double d2 = at(idx, 2.0 * epsilon) - at(idx, -2.0 * epsilon);
    const double numeric = (8.0 * d1 - d2) / (12.0 * epsilon);
    const double a = analytic[idx];
    const double diff = std::abs(a - numeric);
    const double err =
        std::abs(a) < 1e-8 ? diff : diff / std::max(std::abs(a), std::abs(numeric));
    if (first || err > result.max_relative_error) {
      result.max_relative_error = err;
      result.worst_index = idx;
      result.worst_name = parameter_name_at(state, idx);
      first = false;
    }
  }
  return result;
}

}  // namespace lmliqa
