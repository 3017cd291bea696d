#include <chrono>
#include <cstdio>
#include <functional>
#include <string>
#include <vector>

#include <omp.h>

#include "lmliqa/data.hpp"
#include "lmliqa/kernels.hpp"
#include "lmliqa/theory.hpp"

using namespace lmliqa;

namespace {

double time_best(const std::function<void()>& fn, int reps) {
  double best = 1e300;
  for (int r = 0; r < reps; ++r) {
    const auto t0 = std::chrono::steady_clock::now();
    fn();
    const double s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    best = std::min(best, s);
  }
  return best;
}

void report(const std::string& name, double serial, double parallel) {
  std::printf("%-22s serial %9.4f s  parallel %9.4f s  speedup %5.2fx\n", name.c_str(), serial,
              parallel, serial / parallel);
}

}  // namespace

int main(int argc, char** argv) {
  const int crops_n = argc > 1 ? std::stoi(argv[1]) : 40;
  const int reps = argc > 2 ? std::stoi(argv[2]) : 3;
  std::printf("threads: %d, crops: %d, reps: %d\n", omp_get_max_threads(), crops_n, reps);

  ModelConfig mc;
  const Model model(mc);
  const ModelState state = init_state(mc);
  const auto crops = generate_pristine(crops_n, mc.image_size, 1, mc.channels);
  const std::vector<char> with_score(crops.size(), 1);

  std::vector<ForwardCache> caches;
  const auto fwd = [&](Exec e) {
    return time_best([&] { forward_crops(model, state, crops, with_score, caches, e); }, reps);
  };
  report("forward_crops", fwd(Exec::serial), fwd(Exec::parallel));

  forward_crops(model, state, crops, with_score, caches, Exec::parallel);
  std::vector<std::vector<double>> d_feat(crops.size(), std::vector<double>(mc.embed_dim, 0.01));
  std::vector<double> d_score(crops.size(), 1.0);
  std::vector<double> grad(state.param_count());
  const auto bwd = [&](Exec e) {
    return time_best([&] { backward_crops(model, state, caches, d_feat, d_score, grad, e); },
                     reps);
  };
  report("backward_crops", bwd(Exec::serial), bwd(Exec::parallel));

  const auto originals = generate_pristine(crops_n, 64, 2, mc.channels);
  std::vector<const Image*> ptrs;
  for (const auto& img : originals) ptrs.push_back(&img);
  const SaliencyParams sp;
  const auto sal = [&](Exec e) {
    return time_best([&] { saliency_many(model, state, ptrs, sp, e); }, reps);
  };
  report("saliency_many", sal(Exec::serial), sal(Exec::parallel));

  NoiseModel nm;
  nm.trials = 200000;
  const auto mc_time = [&](Exec e) {
    return time_best([&] { estimate_expectations(nm, 3, e); }, reps);
  };
  report("estimate_expectations", mc_time(Exec::serial), mc_time(Exec::parallel));
  return 0;
}
