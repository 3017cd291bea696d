#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "lmliqa/image.hpp"

namespace lmliqa {

// fan_in: weight matrices ~ truncated normal with std 1/sqrt(fan_in);
// trunc_normal: every weight matrix at std 0.02. Tokens and position
// embeddings use std 0.02 under both.
enum class InitScheme { fan_in, trunc_normal };

struct ModelConfig {
  int image_size = 32;
  int patch_size = 8;
  int channels = 3;
  int embed_dim = 64;
  int num_layers = 4;
  int num_heads = 4;
  int mlp_ratio = 2;
  int decoder_layers = 1;
  std::vector<int> mlp_head_dims{32, 1};
  // Pixels enter the patch embedding as (x - pixel_mean) / pixel_std.
  double pixel_mean = 0.5;
  double pixel_std = 0.25;
  InitScheme init = InitScheme::fan_in;
  std::uint64_t seed = 0;

  int grid_side() const { return image_size / patch_size; }
  int num_patches() const { return grid_side() * grid_side(); }
  int num_tokens() const { return num_patches() + 1; }
  int head_dim() const { return embed_dim / num_heads; }
  int mlp_hidden() const { return mlp_ratio * embed_dim; }

  void validate() const;
  bool operator==(const ModelConfig&) const = default;
};

struct ParamEntry {
  std::string name;
  std::vector<std::size_t> shape;
  std::size_t offset = 0;
  std::size_t size = 0;

  bool operator==(const ParamEntry&) const = default;
};

// Flat parameter storage. Student and teacher built from the same config
// share `entries` exactly.
struct ModelState {
  ModelConfig config;
  std::vector<ParamEntry> entries;
  std::vector<double> values;
  std::uint64_t version = 0;

  std::size_t param_count() const { return values.size(); }
  const ParamEntry& entry(const std::string& name) const;
  std::span<double> param(const std::string& name);
  std::span<const double> param(const std::string& name) const;
};

std::vector<ParamEntry> parameter_layout(const ModelConfig& config);

// Truncated-normal(0.02) weights and embeddings, zero biases, unit LayerNorm
// gains. Fully determined by config.seed.
ModelState init_state(const ModelConfig& config);

// Throws ShapeError naming the first differing parameter.
void require_same_structure(const ModelState& a, const ModelState& b);

// Head-averaged, row-stochastic (S+1)x(S+1) matrices, one per encoder layer.
struct AttentionStack {
  int tokens = 0;
  std::vector<std::vector<double>> layers;

  int layer_count() const { return static_cast<int>(layers.size()); }
  double at(int layer, int row, int col) const {
    return layers[layer][static_cast<std::size_t>(row) * tokens + col];
  }
};

struct EncodeOutput {
  std::vector<double> class_feature;
  std::vector<double> unit_feature;
  AttentionStack attention;
};

struct LayerNormCache {
  std::vector<double> xhat;
  std::vector<double> rstd;
};

struct EncoderLayerCache {
  std::vector<double> x_in, h1, qkv, probs, ctx, x_mid, h2, fc1, act;
  LayerNormCache ln1, ln2;
};

struct DecoderLayerCache {
  std::vector<double> q_in, hq, qd, kv, probs, ctx, q_mid, h2, fc1, act;
  LayerNormCache lnq, ln2;
};

// Everything the backward pass needs for one crop.
struct ForwardCache {
  std::vector<double> patches;
  std::vector<EncoderLayerCache> encoder;
  std::vector<double> x_last;
  LayerNormCache final_ln;
  std::vector<double> tokens;
  std::vector<double> class_feature;

  bool has_score = false;
  std::vector<DecoderLayerCache> decoder;
  std::vector<double> q_last;
  LayerNormCache dec_ln;
  std::vector<double> dec_out;
  std::vector<std::vector<double>> head_in;
  std::vector<std::vector<double>> head_pre;
  double score = 0.0;
};

// Encoder (class token + patch tokens, pre-LN blocks), one-query transformer
// decoder cross-attending to the encoder tokens, MLP quality head.
class Model {
 public:
  explicit Model(ModelConfig config);

  const ModelConfig& config() const { return config_; }

  EncodeOutput encode(const ModelState& state, const Image& crop) const;
  double predict_quality(const ModelState& state, const Image& crop) const;

  // Fills `cache`; the score branch runs only when `with_score` is set.
  void forward(const ModelState& state, const Image& crop, bool with_score,
               ForwardCache& cache) const;

  // Accumulates into `grad` the parameter gradient of a loss whose partials
  // with respect to the class feature and the score are given.
  void backward(const ModelState& state, const ForwardCache& cache,
                std::span<const double> d_class_feature, double d_score,
                std::span<double> grad) const;

  AttentionStack attention_from(const ForwardCache& cache) const;

 private:
  struct EncoderOffsets {
    std::size_t ln1_g, ln1_b, qkv_w, qkv_b, proj_w, proj_b, ln2_g, ln2_b, fc1_w, fc1_b, fc2_w,
        fc2_b;
  };
  struct DecoderOffsets {
    std::size_t lnq_g, lnq_b, q_w, q_b, kv_w, kv_b, proj_w, proj_b, ln2_g, ln2_b, fc1_w, fc1_b,
        fc2_w, fc2_b;
  };
  struct HeadOffsets {
    std::size_t w, b;
    int in, out;
  };

  void check_input(const ModelState& state, const Image& crop) const;

  ModelConfig config_;
  std::size_t param_count_ = 0;
  std::size_t patch_w_ = 0, patch_b_ = 0, cls_ = 0, pos_ = 0, norm_g_ = 0, norm_b_ = 0;
  std::size_t query_ = 0, dec_norm_g_ = 0, dec_norm_b_ = 0;
  std::vector<EncoderOffsets> enc_;
  std::vector<DecoderOffsets> dec_;
  std::vector<HeadOffsets> head_;
};

// f = F / ||F||.
std::vector<double> unit_normalize(std::span<const double> v);

// Maps dL/df to dL/dF for f = F/||F||.
std::vector<double> unit_normalize_backward(std::span<const double> feature,
                                            std::span<const double> d_unit);

// A scalar objective over model parameters. When `grad` is non-empty it has
// param_count entries and receives the analytic gradient (overwritten).
using ParamObjective = std::function<double(const ModelState& state, std::span<double> grad)>;

struct GradCheckResult {
  double max_relative_error = 0.0;
  std::size_t worst_index = 0;
  std::string worst_name;
  std::size_t checked = 0;
};

// Central finite differences (4th-order stencil, steps +-h and +-2h) over a
// seeded random subset of parameters.
// Relative error is |a-n|/max(|a|,|n|), falling back to |a-n| when
// |a| < 1e-8.
GradCheckResult grad_check(const ModelState& state, const ParamObjective& objective,
                           double epsilon, std::size_t sample_count = 256,
                           std::uint64_t seed = 0);

std::string parameter_name_at(const ModelState& state, std::size_t index);

}  // namespace lmliqa
