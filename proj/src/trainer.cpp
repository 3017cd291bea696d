#include "lmliqa/trainer.hpp"

#include <chrono>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <random>

#include "lmliqa/checkpoint.hpp"
#include "lmliqa/errors.hpp"
#include "lmliqa/kernels.hpp"
#include "lmliqa/objective.hpp"

namespace lmliqa {

namespace fs = std::filesystem;

namespace {

constexpr std::uint64_t kEvalStream = 0xe7a1;
constexpr std::uint64_t kModelStream = 0x11;

Image match_channels(const Image& img, int channels) {
  if (img.channels == channels) return img;
  Image out(img.width, img.height, channels);
  for (int y = 0; y < img.height; ++y) {
    for (int x = 0; x < img.width; ++x) {
      if (img.channels == 1) {
        for (int c = 0; c < channels; ++c) out.at(y, x, c) = img.at(y, x, 0);
      } else if (channels == 1 && img.channels == 3) {
        out.at(y, x, 0) =
            0.299 * img.at(y, x, 0) + 0.587 * img.at(y, x, 1) + 0.114 * img.at(y, x, 2);
      } else {
        throw ValidationError("cannot convert " + std::to_string(img.channels) + " channels to " +
                              std::to_string(channels));
      }
    }
  }
  return out;
}

std::ofstream open_csv(const fs::path& path) {
  std::ofstream out(path);
  if (!out) throw ValidationError("cannot write " + path.string());
  out.precision(17);
  return out;
}

void write_eval_row(std::ofstream& out, const std::string& split, const EvalResult& r,
                    double spread) {
  out << split << ',' << r.n << ',' << r.srcc << ',' << r.plcc << ',' << spread << '\n';
}

}  // namespace

EvalParams eval_params_for(const RunConfig& config, std::uint64_t seed) {
  EvalParams p;
  p.H = config.sampling.H;
  p.crop_size = config.sampling.crop_size;
  p.saliency = {config.sampling.K_layers, config.sampling.M, config.sampling.crop_size};
  p.seed = derive_seed(seed, kEvalStream);
  p.logistic_plcc = config.eval.logistic_plcc;
  p.score_scale = config.target_scale;
  return p;
}

std::vector<Image> evaluation_crops(const Model& model, const ModelState& teacher,
                                    const Image& image, std::size_t entry_index,
                                    const EvalParams& params) {
  std::mt19937_64 rng(derive_seed(params.seed, entry_index));
  const auto recs = random_crops(image, params.H, params.crop_size, rng);
  std::vector<Image> crops;
  crops.reserve(params.H + 1);
  for (const auto& r : recs) crops.push_back(crop(image, r.rect));
  crops.push_back(crop(image, saliency_crop(model, teacher, image, params.saliency).rect));
  return crops;
}

EvalOutcome evaluate(const Model& model, const ModelState& state, const ModelState& teacher,
                     const Dataset& dataset, const std::vector<std::size_t>& split,
                     const EvalParams& params) {
  if (split.empty()) throw ValidationError("evaluation split is empty");
  const std::size_t per_image = static_cast<std::size_t>(params.H) + 1;
  std::vector<Image> crops;
  crops.reserve(split.size() * per_image);
  for (std::size_t idx : split) {
    auto c = evaluation_crops(model, teacher, dataset.images[idx], idx, params);
    for (auto& img : c) crops.push_back(std::move(img));
  }
  std::vector<char> with_score(crops.size(), 1);
  std::vector<ForwardCache> caches;
  forward_crops(model, state, crops, with_score, caches, Exec::parallel);

  EvalOutcome out;
  std::vector<std::vector<std::vector<double>>> per_image_features(split.size());
  for (std::size_t i = 0; i < split.size(); ++i) {
    double sum = 0.0;
    for (std::size_t h = 0; h < per_image; ++h) {
      const auto& cache = caches[i * per_image + h];
      sum += cache.score;
      per_image_features[i].push_back(unit_normalize(cache.class_feature));
    }
    const double score = sum / static_cast<double>(per_image) * params.score_scale;
    if (!std::isfinite(score)) throw NumericalError("non-finite prediction during evaluation");
    out.predictions.push_back(score);
    out.targets.push_back(dataset.manifest.entries[split[i]].mos);
  }
  out.spread = per_image >= 2 ? intra_image_spread(per_image_features) : 0.0;
  if (out.predictions.size() >= 3) {
    out.result = evaluate_scores(out.predictions, out.targets, params.logistic_plcc);
  } else {
    out.result = {std::nan(""), std::nan(""), static_cast<int>(out.predictions.size()), true};
  }
  return out;
}

EvalResult evaluate_with(const ImageScorer& scorer, const Dataset& dataset,
                         const std::vector<std::size_t>& split, bool logistic_plcc) {
  if (split.empty()) throw ValidationError("evaluation split is empty");
  std::vector<double> pred, gt;
  for (std::size_t idx : split) {
    pred.push_back(scorer(idx));
    gt.push_back(dataset.manifest.entries[idx].mos);
  }
  return evaluate_scores(pred, gt, logistic_plcc);
}

void export_embeddings(const Model& model, const ModelState& state, const ModelState& teacher,
                       const Dataset& dataset, const std::vector<std::size_t>& split,
                       const EvalParams& params, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw ValidationError("cannot write " + path);
  out.precision(17);
  out << "image_id,crop_index,mos";
  for (int k = 0; k < model.config().embed_dim; ++k) out << ",f" << k;
  out << '\n';
  for (std::size_t idx : split) {
    const auto crops = evaluation_crops(model, teacher, dataset.images[idx], idx, params);
    const auto feats = unit_features(model, state, crops, Exec::parallel);
    for (std::size_t h = 0; h < feats.size(); ++h) {
      out << idx << ',' << h << ',' << dataset.manifest.entries[idx].mos;
      for (double v : feats[h]) out << ',' << v;
      out << '\n';
    }
  }
  if (!out) throw ValidationError("failed writing " + path);
}

Dataset load_or_build_dataset(const RunConfig& config) {
  Dataset ds = config.data.manifest.empty() ? build_synthetic_dataset(config.data.synthetic)
                                            : load_dataset(config.data.manifest);
  for (auto& img : ds.images) {
    img = match_channels(img, config.model.channels);
    if (img.width < config.sampling.crop_size || img.height < config.sampling.crop_size) {
      throw ValidationError("dataset image smaller than crop size " +
                            std::to_string(config.sampling.crop_size));
    }
  }
  return ds;
}

ProtocolConfig protocol_config_for(const RunConfig& config, std::uint64_t seed) {
  ProtocolConfig p;
  p.schedule = config.schedule;
  p.ema = config.ema;
  p.optimizer = config.optimizer;
  p.objective.alpha = config.loss.alpha;
  p.objective.tau = config.loss.tau;
  p.objective.contrastive.intra_negatives = config.ablation.intra_negatives;
  p.objective.contrastive.include_positive_in_denominator =
      config.loss.include_positive_in_denominator;
  p.objective.contrastive.inter_includes_positives = config.loss.inter_includes_positives;
  p.objective.contrastive.reduction = config.loss.anchor_reduction;
  p.saliency = {config.sampling.K_layers, config.sampling.M, config.sampling.crop_size};
  p.batch.h_count = config.sampling.H;
  p.batch.crop_size = config.sampling.crop_size;
  p.batch.positive = config.ablation.positive_source;
  p.batch_size = config.batch_size;
  p.mutual_learning = config.ablation.mutual_learning;
  p.seed = seed;
  return p;
}

SeedReport train_seed(const RunConfig& config, const Dataset& dataset, std::uint64_t seed,
                      const std::string& out_dir) {
  config.validate();
  const auto start = std::chrono::steady_clock::now();
  const DatasetManifest splits = split(dataset.manifest, config.data.train_ratio, seed);
  if (splits.train.empty() || splits.test.empty()) {
    throw ValidationError("train/test split produced an empty side");
  }

  ModelConfig mc = config.model;
  mc.seed = derive_seed(seed, kModelStream);
  const Model model(mc);
  const ProtocolConfig protocol = protocol_config_for(config, seed);
  ProtocolState state = make_protocol_state(init_state(mc), config.optimizer);

  TrainingSet train_set;
  for (std::size_t idx : splits.train) {
    train_set.images.push_back(&dataset.images[idx]);
    train_set.targets.push_back(dataset.manifest.entries[idx].mos / config.target_scale);
  }
  const EvalParams eval = eval_params_for(config, seed);

  fs::path dir;
  std::ofstream steps_csv, epochs_csv;
  if (!out_dir.empty()) {
    dir = fs::path(out_dir) / ("seed_" + std::to_string(seed));
    fs::create_directories(dir);
    if (config.checkpoints) fs::create_directories(dir / "checkpoints");
    steps_csv = open_csv(dir / "steps.csv");
    steps_csv << "step,epoch,l1,info_nce,total,alpha,tau\n";
    epochs_csv = open_csv(dir / "epochs.csv");
    epochs_csv << "epoch,lr,steps,mean_l1,mean_info_nce,mean_total,saliency_drift,test_srcc,"
                  "test_plcc,spread\n";
  }

  SeedReport report;
  report.seed = seed;
  const auto initial = evaluate(model, state.student, state.teacher, dataset, splits.test, eval);
  report.untrained_test = initial.result;
  report.untrained_spread = initial.spread;
  report.spread_trajectory.push_back(initial.spread);

  for (int epoch = 0; epoch < config.schedule.epochs; ++epoch) {
    EpochSummary summary;
    summary.protocol = run_epoch_protocol(model, state, train_set, epoch, protocol);
    const bool last = epoch + 1 == config.schedule.epochs;
    if (config.eval.per_epoch || last) {
      const auto ev = evaluate(model, state.student, state.teacher, dataset, splits.test, eval);
      summary.test = ev.result;
      summary.spread = ev.spread;
      report.spread_trajectory.push_back(ev.spread);
    }
    if (!out_dir.empty()) {
      for (const auto& s : summary.protocol.step_records) {
        steps_csv << s.step << ',' << s.epoch << ',' << s.l1 << ',' << s.info_nce << ','
                  << s.total << ',' << config.loss.alpha << ',' << config.loss.tau << '\n';
      }
      const auto& p = summary.protocol;
      epochs_csv << epoch << ',' << p.lr << ',' << p.steps << ',' << p.mean_l1 << ','
                 << p.mean_info_nce << ',' << p.mean_total << ',' << p.saliency_drift << ','
                 << summary.test.srcc << ',' << summary.test.plcc << ',' << summary.spread
                 << '\n';
      steps_csv.flush();
      epochs_csv.flush();
      if (config.checkpoints) {
        const std::string tag = "epoch_" + std::to_string(epoch);
        save_checkpoint((dir / "checkpoints" / (tag + "_student.ckpt")).string(), state.student);
        save_checkpoint((dir / "checkpoints" / (tag + "_teacher.ckpt")).string(), state.teacher);
      }
    }
    report.epochs.push_back(std::move(summary));
  }

  const auto final_test = evaluate(model, state.student, state.teacher, dataset, splits.test, eval);
  const auto final_train =
      evaluate(model, state.student, state.teacher, dataset, splits.train, eval);
  report.final_test = final_test.result;
  report.final_train = final_train.result;
  report.final_spread = final_test.spread;
  report.student = state.student;
  report.teacher = state.teacher;
  report.wall_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();

  if (!out_dir.empty()) {
    auto eval_csv = open_csv(dir / "eval.csv");
    eval_csv << "split,n,srcc,plcc,spread\n";
    write_eval_row(eval_csv, "untrained_test", report.untrained_test, report.untrained_spread);
    write_eval_row(eval_csv, "train", final_train.result, final_train.spread);
    write_eval_row(eval_csv, "test", final_test.result, final_test.spread);
    if (config.checkpoints) {
      save_checkpoint((dir / "student.ckpt").string(), state.student);
      save_checkpoint((dir / "teacher.ckpt").string(), state.teacher);
    }
  }
  return report;
}

RunReport train(const RunConfig& config, const Dataset& dataset, const std::string& out_dir) {
  config.validate();
  if (config.seeds.empty()) throw ValidationError("at least one seed is required");
  RunReport report;
  for (auto seed : config.seeds) {
    report.seeds.push_back(train_seed(config, dataset, seed, out_dir));
  }
  double sum = 0.0;
  for (const auto& s : report.seeds) sum += s.final_test.srcc;
  report.mean_test_srcc = sum / static_cast<double>(report.seeds.size());

  if (!out_dir.empty()) {
    auto out = open_csv(fs::path(out_dir) / "summary.csv");
    out << "seed,untrained_test_srcc,test_srcc,test_plcc,train_srcc,train_plcc,spread,"
           "wall_seconds\n";
    for (const auto& s : report.seeds) {
      out << s.seed << ',' << s.untrained_test.srcc << ',' << s.final_test.srcc << ','
          << s.final_test.plcc << ',' << s.final_train.srcc << ',' << s.final_train.plcc << ','
          << s.final_spread << ',' << s.wall_seconds << '\n';
    }
  }
  return report;
}

GradCheckResult run_gradient_check(const RunConfig& config, const GradCheckRequest& request) {
  config.validate();
  if (request.T < 1 || request.H < 1) throw ValidationError("gradcheck needs T >= 1 and H >= 1");
  ModelConfig mc = config.model;
  mc.seed = derive_seed(request.seed, kModelStream);
  const Model model(mc);
  const ModelState state = init_state(mc);

  const int side = config.sampling.crop_size * 2;
  const auto images = generate_pristine(request.T, side, derive_seed(request.seed, 0x6c), mc.channels);
  std::mt19937_64 rng(derive_seed(request.seed, 0x7a));
  std::uniform_real_distribution<double> mos(10.0, 90.0);
  std::vector<double> scores, targets;
  for (int t = 0; t < request.T; ++t) {
    scores.push_back(mos(rng));
    targets.push_back(scores.back() / config.target_scale);
  }
  const ProtocolConfig protocol = protocol_config_for(config, request.seed);
  BatchParams bp = protocol.batch;
  bp.h_count = request.H;
  const CropBatch batch = assemble_batch(images, scores, model, state, protocol.saliency, bp,
                                         derive_seed(request.seed, 0x8b));
  const auto objective = batch_objective(model, batch, targets, protocol.objective);
  return grad_check(state, objective, request.epsilon, request.samples, request.seed);
}

RunReport train(const RunConfig& config, const std::string& out_dir) {
  config.validate();
  return train(config, load_or_build_dataset(config), out_dir);
}

}  // namespace lmliqa
