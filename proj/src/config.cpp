#include "lmliqa/config.hpp"

#include <fstream>

#include "lmliqa/errors.hpp"

namespace lmliqa {

using nlohmann::json;

void to_json(json& j, const ModelConfig& c) {
  j = json{{"image_size", c.image_size},       {"patch_size", c.patch_size},
           {"channels", c.channels},           {"embed_dim", c.embed_dim},
           {"num_layers", c.num_layers},       {"num_heads", c.num_heads},
           {"mlp_ratio", c.mlp_ratio},         {"decoder_layers", c.decoder_layers},
           {"mlp_head_dims", c.mlp_head_dims}, {"pixel_mean", c.pixel_mean},
           {"pixel_std", c.pixel_std},
           {"init", c.init == InitScheme::fan_in ? "fan_in" : "trunc_normal"},
           {"seed", c.seed}};
}

void from_json(const json& j, ModelConfig& c) {
  j.at("image_size").get_to(c.image_size);
  j.at("patch_size").get_to(c.patch_size);
  j.at("channels").get_to(c.channels);
  j.at("embed_dim").get_to(c.embed_dim);
  j.at("num_layers").get_to(c.num_layers);
  j.at("num_heads").get_to(c.num_heads);
  j.at("mlp_ratio").get_to(c.mlp_ratio);
  j.at("decoder_layers").get_to(c.decoder_layers);
  j.at("mlp_head_dims").get_to(c.mlp_head_dims);
  j.at("pixel_mean").get_to(c.pixel_mean);
  j.at("pixel_std").get_to(c.pixel_std);
  const auto init = j.at("init").get<std::string>();
  if (init == "fan_in") {
    c.init = InitScheme::fan_in;
  } else if (init == "trunc_normal") {
    c.init = InitScheme::trunc_normal;
  } else {
    throw ValidationError("model.init must be 'fan_in' or 'trunc_normal'");
  }
  j.at("seed").get_to(c.seed);
}

namespace {

std::string reduction_name(AnchorReduction r) { return r == AnchorReduction::mean ? "mean" : "sum"; }

AnchorReduction reduction_from(const std::string& s) {
  if (s == "mean") return AnchorReduction::mean;
  if (s == "sum") return AnchorReduction::sum;
  throw ValidationError("loss.anchor_reduction must be 'mean' or 'sum'");
}

std::string positive_name(PositiveSource p) {
  return p == PositiveSource::saliency ? "saliency" : "random";
}

PositiveSource positive_from(const std::string& s) {
  if (s == "saliency") return PositiveSource::saliency;
  if (s == "random") return PositiveSource::random;
  throw ValidationError("ablation.positive_source must be 'saliency' or 'random'");
}

std::string optimizer_name(OptimizerKind k) { return k == OptimizerKind::sgd ? "sgd" : "adam"; }

OptimizerKind optimizer_from(const std::string& s) {
  if (s == "sgd") return OptimizerKind::sgd;
  if (s == "adam") return OptimizerKind::adam;
  throw ValidationError("optimizer.kind must be 'sgd' or 'adam'");
}

void merge_checked(json& base, const json& patch, const std::string& prefix) {
  if (!patch.is_object()) throw ValidationError("config section '" + prefix + "' must be an object");
  for (auto it = patch.begin(); it != patch.end(); ++it) {
    const std::string key = prefix.empty() ? it.key() : prefix + "." + it.key();
    if (!base.contains(it.key())) throw ValidationError("unknown config key '" + key + "'");
    if (base[it.key()].is_object()) {
      merge_checked(base[it.key()], it.value(), key);
    } else {
      base[it.key()] = it.value();
    }
  }
}

}  // namespace

void to_json(json& j, const RunConfig& c) {
  j = json{
      {"model", c.model},
      {"schedule",
       {{"epochs", c.schedule.epochs},
        {"lr_initial", c.schedule.lr_initial},
        {"lr_decay_factor", c.schedule.lr_decay_factor},
        {"lr_decay_every", c.schedule.lr_decay_every}}},
      {"ema", {{"beta", c.ema.beta}, {"per_step", c.ema.per_step}}},
      {"optimizer",
       {{"kind", optimizer_name(c.optimizer.kind)},
        {"beta1", c.optimizer.beta1},
        {"beta2", c.optimizer.beta2},
        {"epsilon", c.optimizer.epsilon}}},
      {"loss",
       {{"alpha", c.loss.alpha},
        {"tau", c.loss.tau},
        {"include_positive_in_denominator", c.loss.include_positive_in_denominator},
        {"inter_includes_positives", c.loss.inter_includes_positives},
        {"anchor_reduction", reduction_name(c.loss.anchor_reduction)}}},
      {"sampling",
       {{"H", c.sampling.H},
        {"crop_size", c.sampling.crop_size},
        {"M", c.sampling.M},
        {"K_layers", c.sampling.K_layers}}},
      {"ablation",
       {{"positive_source", positive_name(c.ablation.positive_source)},
        {"intra_negatives", c.ablation.intra_negatives},
        {"mutual_learning", c.ablation.mutual_learning}}},
      {"data",
       {{"manifest", c.data.manifest},
        {"train_ratio", c.data.train_ratio},
        {"synthetic",
         {{"pristine_count", c.data.synthetic.pristine_count},
          {"image_size", c.data.synthetic.image_size},
          {"channels", c.data.synthetic.channels},
          {"blur_sigmas", c.data.synthetic.levels.blur_sigmas},
          {"noise_sigmas", c.data.synthetic.levels.noise_sigmas},
          {"seed", c.data.synthetic.seed}}}}},
      {"eval", {{"logistic_plcc", c.eval.logistic_plcc}, {"per_epoch", c.eval.per_epoch}}},
      {"batch_size", c.batch_size},
      {"target_scale", c.target_scale},
      {"seeds", c.seeds},
      {"checkpoints", c.checkpoints}};
}

void from_json(const json& j, RunConfig& c) {
  j.at("model").get_to(c.model);
  const auto& s = j.at("schedule");
  s.at("epochs").get_to(c.schedule.epochs);
  s.at("lr_initial").get_to(c.schedule.lr_initial);
  s.at("lr_decay_factor").get_to(c.schedule.lr_decay_factor);
  s.at("lr_decay_every").get_to(c.schedule.lr_decay_every);
  j.at("ema").at("beta").get_to(c.ema.beta);
  j.at("ema").at("per_step").get_to(c.ema.per_step);
  const auto& o = j.at("optimizer");
  c.optimizer.kind = optimizer_from(o.at("kind").get<std::string>());
  o.at("beta1").get_to(c.optimizer.beta1);
  o.at("beta2").get_to(c.optimizer.beta2);
  o.at("epsilon").get_to(c.optimizer.epsilon);
  const auto& l = j.at("loss");
  l.at("alpha").get_to(c.loss.alpha);
  l.at("tau").get_to(c.loss.tau);
  l.at("include_positive_in_denominator").get_to(c.loss.include_positive_in_denominator);
  l.at("inter_includes_positives").get_to(c.loss.inter_includes_positives);
  c.loss.anchor_reduction = reduction_from(l.at("anchor_reduction").get<std::string>());
  const auto& sm = j.at("sampling");
  sm.at("H").get_to(c.sampling.H);
  sm.at("crop_size").get_to(c.sampling.crop_size);
  sm.at("M").get_to(c.sampling.M);
  sm.at("K_layers").get_to(c.sampling.K_layers);
  const auto& a = j.at("ablation");
  c.ablation.positive_source = positive_from(a.at("positive_source").get<std::string>());
  a.at("intra_negatives").get_to(c.ablation.intra_negatives);
  a.at("mutual_learning").get_to(c.ablation.mutual_learning);
  const auto& d = j.at("data");
  d.at("manifest").get_to(c.data.manifest);
  d.at("train_ratio").get_to(c.data.train_ratio);
  const auto& syn = d.at("synthetic");
  syn.at("pristine_count").get_to(c.data.synthetic.pristine_count);
  syn.at("image_size").get_to(c.data.synthetic.image_size);
  syn.at("channels").get_to(c.data.synthetic.channels);
  syn.at("blur_sigmas").get_to(c.data.synthetic.levels.blur_sigmas);
  syn.at("noise_sigmas").get_to(c.data.synthetic.levels.noise_sigmas);
  syn.at("seed").get_to(c.data.synthetic.seed);
  j.at("eval").at("logistic_plcc").get_to(c.eval.logistic_plcc);
  j.at("eval").at("per_epoch").get_to(c.eval.per_epoch);
  j.at("batch_size").get_to(c.batch_size);
  j.at("target_scale").get_to(c.target_scale);
  j.at("seeds").get_to(c.seeds);
  j.at("checkpoints").get_to(c.checkpoints);
}

void RunConfig::validate() const {
  model.validate();
  if (schedule.epochs < 0) throw ValidationError("schedule.epochs must be non-negative");
  if (!(schedule.lr_initial >= 0.0)) throw ValidationError("schedule.lr_initial must be >= 0");
  ema.validate();
  if (!(loss.alpha >= 0.0 && loss.alpha <= 1.0)) throw ValidationError("loss.alpha must lie in [0, 1]");
  if (!(loss.tau > 0.0)) throw ValidationError("loss.tau must be positive");
  if (sampling.H < 1) throw ValidationError("sampling.H must be at least 1");
  if (sampling.crop_size != model.image_size) {
    throw ValidationError("sampling.crop_size must equal model.image_size");
  }
  if (sampling.M < 1 || sampling.M > model.grid_side()) {
    throw ValidationError("sampling.M must lie in [1, grid side]");
  }
  if (sampling.K_layers < 1) throw ValidationError("sampling.K_layers must be positive");
  if (batch_size < 1) throw ValidationError("batch_size must be positive");
  if (!(target_scale > 0.0)) throw ValidationError("target_scale must be positive");
  if (!(data.train_ratio > 0.0 && data.train_ratio < 1.0)) {
    throw ValidationError("data.train_ratio must lie in (0, 1)");
  }
}

RunConfig run_config_from_json(const json& patch) {
  json base = RunConfig{};
  if (!patch.is_null()) merge_checked(base, patch, "");
  RunConfig c;
  try {
    c = base.get<RunConfig>();
  } catch (const json::exception& e) {
    throw ValidationError(std::string("invalid config: ") + e.what());
  }
  return c;
}

RunConfig load_run_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot open config: " + path);
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw ValidationError("config " + path + " is not valid JSON: " + e.what());
  }
  return run_config_from_json(j);
}

void apply_override(json& config, const std::string& key, const std::string& value) {
  json* node = &config;
  std::size_t start = 0;
  for (;;) {
    const auto dot = key.find('.', start);
    const std::string part = key.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
    if (part.empty() || !node->is_object() || !node->contains(part)) {
      throw ValidationError("unknown config key '" + key + "'");
    }
    node = &(*node)[part];
    if (dot == std::string::npos) break;
    start = dot + 1;
  }
  json parsed = json::parse(value, nullptr, false);
  if (parsed.is_discarded()) parsed = value;
  *node = parsed;
}

}  // namespace lmliqa
