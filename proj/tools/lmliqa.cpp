#include <CLI11.hpp>
#include <json.hpp>

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include "lmliqa/checkpoint.hpp"
#include "lmliqa/config.hpp"
#include "lmliqa/data.hpp"
#include "lmliqa/errors.hpp"
#include "lmliqa/saliency.hpp"
#include "lmliqa/theory.hpp"
#include "lmliqa/trainer.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace lmliqa;

namespace {

struct Common {
  std::string config_path;
  std::vector<std::string> overrides;
  std::string out_dir = "out";
  std::optional<std::uint64_t> seed;
};

void add_common(CLI::App* cmd, Common& c) {
  cmd->add_option("--config", c.config_path, "JSON run configuration");
  cmd->add_option("--set", c.overrides, "Override as dotted.key=value (repeatable)");
  cmd->add_option("--out", c.out_dir, "Output directory");
  cmd->add_option("--seed", c.seed, "Master seed");
}

RunConfig resolve(const Common& c, json* resolved_out = nullptr) {
  json patch = json::object();
  if (!c.config_path.empty()) {
    std::ifstream in(c.config_path);
    if (!in) throw ValidationError("cannot open config " + c.config_path);
    try {
      patch = json::parse(in);
    } catch (const json::parse_error& e) {
      throw ValidationError("invalid JSON in " + c.config_path + ": " + e.what());
    }
  }
  json full = run_config_from_json(patch);
  for (const auto& kv : c.overrides) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos || eq == 0) throw ValidationError("--set expects key=value: " + kv);
    apply_override(full, kv.substr(0, eq), kv.substr(eq + 1));
  }
  RunConfig config = run_config_from_json(full);
  if (c.seed) {
    config.seeds = {*c.seed};
    config.data.synthetic.seed = *c.seed;
  }
  config.validate();
  if (resolved_out) *resolved_out = json(config);
  return config;
}

void echo_config(const Common& c, const RunConfig& config, const json& invocation = {}) {
  fs::create_directories(c.out_dir);
  std::ofstream out(fs::path(c.out_dir) / "config.resolved.json");
  out << json(config).dump(2) << '\n';
  if (!invocation.is_null()) {
    std::ofstream inv(fs::path(c.out_dir) / "invocation.json");
    inv << invocation.dump(2) << '\n';
  }
}

std::uint64_t first_seed(const RunConfig& config) {
  return config.seeds.empty() ? 0 : config.seeds.front();
}

std::vector<std::size_t> pick_split(const DatasetManifest& m, const std::string& which) {
  if (which == "train") return m.train;
  if (which == "test") return m.test;
  if (which == "all") {
    std::vector<std::size_t> all(m.entries.size());
    for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
    return all;
  }
  throw ValidationError("unknown split '" + which + "' (train, test, all)");
}

void write_pgm_heatmap(const std::string& path, const AttentionGrid& grid) {
  const auto [lo, hi] = std::minmax_element(grid.values.begin(), grid.values.end());
  Image img(grid.side, grid.side, 1);
  const double range = *hi - *lo;
  for (int i = 0; i < grid.side * grid.side; ++i) {
    img.pixels[i] = range > 0 ? (grid.values[i] - *lo) / range : 0.0;
  }
  write_pnm(path, img);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"lmliqa: no-reference image quality training and analysis"};
  app.require_subcommand(1);

  Common gen_c, train_c, eval_c, sal_c, theory_c, grad_c, emb_c;

  auto* gen = app.add_subcommand("gen-data", "Write the synthetic dataset (images + manifest.csv)");
  add_common(gen, gen_c);
  std::string gen_format = "ppm";
  gen->add_option("--format", gen_format, "Image format: ppm (8-bit) or f64 (lossless)")
      ->check(CLI::IsMember({"ppm", "f64"}));

  auto* train_cmd = app.add_subcommand("train", "Train over every configured seed");
  add_common(train_cmd, train_c);

  auto* eval_cmd = app.add_subcommand("eval", "Evaluate a checkpoint on a split");
  add_common(eval_cmd, eval_c);
  std::string eval_student, eval_teacher, eval_split = "test";
  eval_cmd->add_option("--checkpoint", eval_student, "Student checkpoint")->required();
  eval_cmd->add_option("--teacher", eval_teacher, "Teacher checkpoint (defaults to the student)");
  eval_cmd->add_option("--split", eval_split, "train, test or all");

  auto* sal = app.add_subcommand("saliency", "Teacher attention grid and selected window");
  add_common(sal, sal_c);
  std::string sal_image, sal_ckpt;
  bool sal_pgm = false;
  sal->add_option("--image", sal_image, "Input image (.pgm/.ppm/.f64)")->required();
  sal->add_option("--checkpoint", sal_ckpt, "Teacher checkpoint (default: fresh init)");
  sal->add_flag("--pgm", sal_pgm, "Also write heatmap.pgm");

  auto* theory = app.add_subcommand("theory", "Monte Carlo check of the noise expectation bound");
  add_common(theory, theory_c);
  std::string th_dist = "gaussian";
  double th_scale = 1.0;
  long long th_trials = 100000;
  int th_draws = 3;
  theory->add_option("--dist", th_dist, "gaussian, uniform or laplace");
  theory->add_option("--scale", th_scale, "Distribution scale");
  theory->add_option("--trials", th_trials, "Monte Carlo trials");
  theory->add_option("--draws", th_draws, "Draws per trial (>= 3)");

  auto* grad = app.add_subcommand("gradcheck", "Finite-difference check of the hybrid loss gradient");
  add_common(grad, grad_c);
  GradCheckRequest grad_req;
  double grad_tol = 1e-4;
  grad->add_option("--T", grad_req.T, "Images in the batch");
  grad->add_option("--H", grad_req.H, "Random crops per image");
  grad->add_option("--epsilon", grad_req.epsilon, "Finite-difference step");
  grad->add_option("--samples", grad_req.samples, "Parameters checked");
  grad->add_option("--tolerance", grad_tol, "Maximum accepted relative error");

  auto* emb = app.add_subcommand("export-embeddings", "Dump unit features of evaluation crops");
  add_common(emb, emb_c);
  std::string emb_student, emb_teacher, emb_split = "test";
  emb->add_option("--checkpoint", emb_student, "Student checkpoint")->required();
  emb->add_option("--teacher", emb_teacher, "Teacher checkpoint (defaults to the student)");
  emb->add_option("--split", emb_split, "train, test or all");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  try {
    if (gen->parsed()) {
      const RunConfig config = resolve(gen_c);
      echo_config(gen_c, config);
      const Dataset ds = build_synthetic_dataset(config.data.synthetic);
      write_dataset(gen_c.out_dir, ds, gen_format == "f64" ? ".f64" : ".ppm");
      std::cout << "wrote " << ds.images.size() << " images to " << gen_c.out_dir << '\n';
    } else if (train_cmd->parsed()) {
      const RunConfig config = resolve(train_c);
      echo_config(train_c, config);
      const RunReport report = train(config, train_c.out_dir);
      for (const auto& s : report.seeds) {
        std::printf("seed %llu: untrained SRCC %.4f -> test SRCC %.4f PLCC %.4f (%.1f s)\n",
                    static_cast<unsigned long long>(s.seed), s.untrained_test.srcc,
                    s.final_test.srcc, s.final_test.plcc, s.wall_seconds);
      }
      std::printf("mean test SRCC %.4f\n", report.mean_test_srcc);
    } else if (eval_cmd->parsed()) {
      const RunConfig config = resolve(eval_c);
      echo_config(eval_c, config, {{"checkpoint", eval_student}, {"teacher", eval_teacher},
                                   {"split", eval_split}});
      const ModelState student = load_checkpoint(eval_student);
      const ModelState teacher = eval_teacher.empty() ? student : load_checkpoint(eval_teacher);
      require_same_structure(student, teacher);
      RunConfig effective = config;
      effective.model = student.config;
      const Dataset ds = load_or_build_dataset(effective);
      const DatasetManifest m = split(ds.manifest, config.data.train_ratio, first_seed(config));
      const Model model(student.config);
      const auto outcome = evaluate(model, student, teacher, ds, pick_split(m, eval_split),
                                    eval_params_for(config, first_seed(config)));
      std::ofstream out(fs::path(eval_c.out_dir) / "eval.csv");
      out.precision(17);
      out << "split,n,srcc,plcc,spread\n"
          << eval_split << ',' << outcome.result.n << ',' << outcome.result.srcc << ','
          << outcome.result.plcc << ',' << outcome.spread << '\n';
      std::ofstream preds(fs::path(eval_c.out_dir) / "predictions.csv");
      preds.precision(17);
      preds << "prediction,mos\n";
      for (std::size_t i = 0; i < outcome.predictions.size(); ++i) {
        preds << outcome.predictions[i] << ',' << outcome.targets[i] << '\n';
      }
      std::printf("%s: n=%d SRCC %.4f PLCC %.4f\n", eval_split.c_str(), outcome.result.n,
                  outcome.result.srcc, outcome.result.plcc);
    } else if (sal->parsed()) {
      const RunConfig config = resolve(sal_c);
      echo_config(sal_c, config, {{"image", sal_image}, {"checkpoint", sal_ckpt}});
      ModelState teacher;
      if (sal_ckpt.empty()) {
        ModelConfig mc = config.model;
        mc.seed = derive_seed(first_seed(config), 0x11);
        teacher = init_state(mc);
      } else {
        teacher = load_checkpoint(sal_ckpt);
      }
      const Model model(teacher.config);
      const Image image = read_image(sal_image);
      const SaliencyParams params{config.sampling.K_layers, config.sampling.M,
                                  config.sampling.crop_size};
      const SaliencyResult r = saliency_crop(model, teacher, image, params);
      std::ofstream grid_csv(fs::path(sal_c.out_dir) / "grid.csv");
      grid_csv.precision(17);
      for (int a = 0; a < r.grid.side; ++a) {
        for (int b = 0; b < r.grid.side; ++b) {
          grid_csv << (b ? "," : "") << r.grid.values[static_cast<std::size_t>(a) * r.grid.side + b];
        }
        grid_csv << '\n';
      }
      const json window = {{"a", r.window.a},         {"b", r.window.b},
                           {"m", r.window.m},         {"score", r.window.score},
                           {"layers", r.grid.source_layers},
                           {"x", r.rect.x},           {"y", r.rect.y},
                           {"width", r.rect.width},   {"height", r.rect.height}};
      std::ofstream(fs::path(sal_c.out_dir) / "window.json") << window.dump() << '\n';
      if (sal_pgm) write_pgm_heatmap((fs::path(sal_c.out_dir) / "heatmap.pgm").string(), r.grid);
      std::cout << window.dump() << '\n';
    } else if (theory->parsed()) {
      const RunConfig config = resolve(theory_c);
      NoiseModel nm;
      nm.distribution = noise_distribution_from_string(th_dist);
      nm.scale = th_scale;
      nm.trials = th_trials;
      nm.draws = th_draws;
      nm.validate();
      echo_config(theory_c, config, {{"dist", th_dist}, {"scale", th_scale},
                                     {"trials", th_trials}, {"draws", th_draws}});
      const auto seed = first_seed(config);
      const auto report = estimate_expectations(nm, derive_seed(seed, 0x7e));
      const auto verdict = check_expectation_bound(report);
      std::ofstream out(fs::path(theory_c.out_dir) / "theory.csv");
      out << theory_csv_header() << '\n' << theory_csv_row(report, verdict) << '\n';

      ModelConfig mc = config.model;
      mc.seed = derive_seed(seed, 0x11);
      const Model model(mc);
      const auto crops = generate_pristine(1, mc.image_size, derive_seed(seed, 0x5e), mc.channels);
      const auto points = score_feature_sensitivity(model, init_state(mc), crops.front(),
                                                    {1e-4, 1e-3, 1e-2, 1e-1}, seed);
      std::ofstream sens(fs::path(theory_c.out_dir) / "sensitivity.csv");
      sens.precision(17);
      sens << "step,d_score,d_feature,ratio\n";
      for (const auto& p : points) {
        sens << p.step << ',' << p.d_score << ',' << p.d_feature << ',' << p.ratio << '\n';
      }
      std::printf("%s: E|eps-eps'| %.6f <= %.6f : %s\n", th_dist.c_str(), verdict.lhs,
                  verdict.rhs, verdict.pass ? "pass" : "FAIL");
    } else if (grad->parsed()) {
      const RunConfig config = resolve(grad_c);
      echo_config(grad_c, config, {{"T", grad_req.T}, {"H", grad_req.H},
                                   {"epsilon", grad_req.epsilon}, {"samples", grad_req.samples}});
      grad_req.seed = first_seed(config);
      const auto r = run_gradient_check(config, grad_req);
      std::printf("max relative error %.3e at %s (%zu parameters checked)\n",
                  r.max_relative_error, r.worst_name.c_str(), r.checked);
      if (r.max_relative_error > grad_tol) {
        std::fprintf(stderr, "gradient check failed: %.3e > %.3e\n", r.max_relative_error,
                     grad_tol);
        return 2;
      }
    } else if (emb->parsed()) {
      const RunConfig config = resolve(emb_c);
      echo_config(emb_c, config, {{"checkpoint", emb_student}, {"teacher", emb_teacher},
                                  {"split", emb_split}});
      const ModelState student = load_checkpoint(emb_student);
      const ModelState teacher = emb_teacher.empty() ? student : load_checkpoint(emb_teacher);
      require_same_structure(student, teacher);
      RunConfig effective = config;
      effective.model = student.config;
      const Dataset ds = load_or_build_dataset(effective);
      const DatasetManifest m = split(ds.manifest, config.data.train_ratio, first_seed(config));
      const Model model(student.config);
      const auto path = (fs::path(emb_c.out_dir) / "embeddings.csv").string();
      export_embeddings(model, student, teacher, ds, pick_split(m, emb_split),
                        eval_params_for(config, first_seed(config)), path);
      std::cout << "wrote " << path << '\n';
    }
  } catch (const ValidationError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  } catch (const nlohmann::json::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  }
  return 0;
}
