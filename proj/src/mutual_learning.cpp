#include "lmliqa/mutual_learning.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <string>

#include "lmliqa/errors.hpp"
#include "lmliqa/kernels.hpp"

namespace lmliqa {

void EmaConfig::validate() const {
  if (!(beta >= 0.0 && beta <= 1.0)) throw ValidationError("EMA beta must lie in [0, 1]");
}

double EpochSchedule::lr_at(int epoch) const {
  if (lr_decay_every <= 0) return lr_initial;
  return lr_initial / std::pow(lr_decay_factor, epoch / lr_decay_every);
}

ModelState ema_update(const ModelState& teacher, const ModelState& student, double beta) {
  if (!(beta >= 0.0 && beta <= 1.0)) throw ValidationError("EMA beta must lie in [0, 1]");
  require_same_structure(teacher, student);
  ModelState out = teacher;
  for (std::size_t i = 0; i < out.values.size(); ++i) {
    out.values[i] = beta * teacher.values[i] + (1.0 - beta) * student.values[i];
  }
  ++out.version;
  return out;
}

void Optimizer::step(std::span<double> params, std::span<const double> grad, double lr) {
  if (params.size() != grad.size()) throw ShapeError("optimizer: gradient size mismatch");
  if (config_.kind == OptimizerKind::sgd) {
    for (std::size_t i = 0; i < params.size(); ++i) params[i] -= lr * grad[i];
    return;
  }
  if (m_.size() != params.size()) {
    m_.assign(params.size(), 0.0);
    v_.assign(params.size(), 0.0);
    steps_ = 0;
  }
  ++steps_;
  const double b1 = config_.beta1;
  const double b2 = config_.beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(steps_));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(steps_));
  for (std::size_t i = 0; i < params.size(); ++i) {
    m_[i] = b1 * m_[i] + (1.0 - b1) * grad[i];
    v_[i] = b2 * v_[i] + (1.0 - b2) * grad[i] * grad[i];
    params[i] -= lr * (m_[i] / c1) / (std::sqrt(v_[i] / c2) + config_.epsilon);
  }
}

ProtocolState make_protocol_state(const ModelState& student, const OptimizerConfig& optimizer) {
  return {student, student, Optimizer(optimizer), {}, 0};
}

namespace {

double center_drift(const std::vector<PixelRect>& prev, const std::vector<PixelRect>& cur) {
  if (prev.size() != cur.size() || cur.empty()) return 0.0;
  double sum = 0.0;
  for (std::size_t i = 0; i < cur.size(); ++i) {
    sum += std::abs((cur[i].x + cur[i].width / 2.0) - (prev[i].x + prev[i].width / 2.0)) +
           std::abs((cur[i].y + cur[i].height / 2.0) - (prev[i].y + prev[i].height / 2.0));
  }
  return sum / static_cast<double>(cur.size());
}

}  // namespace

EpochReport run_epoch_protocol(const Model& model, ProtocolState& state, const TrainingSet& data,
                               int epoch, const ProtocolConfig& config) {
  if (data.images.empty()) throw ValidationError("training set is empty");
  if (data.images.size() != data.targets.size()) {
    throw ValidationError("training images and targets are not aligned");
  }
  if (config.batch_size < 1) throw ValidationError("batch_size must be positive");
  config.ema.validate();
  require_same_structure(state.teacher, state.student);
  const double beta = config.mutual_learning ? config.ema.beta : 1.0;

  EpochReport report;
  report.epoch = epoch;
  report.lr = config.schedule.lr_at(epoch);

  // (1) saliency rects from the frozen teacher
  if (config.batch.positive == PositiveSource::saliency) {
    const auto results =
        saliency_many(model, state.teacher, data.images, config.saliency, Exec::parallel);
    report.saliency_rects.reserve(results.size());
    for (const auto& r : results) report.saliency_rects.push_back(r.rect);
  } else {
    report.saliency_rects.assign(data.images.size(), PixelRect{});
  }
  report.saliency_drift = center_drift(state.previous_rects, report.saliency_rects);
  state.previous_rects = report.saliency_rects;

  // (2) student updates
  std::vector<std::size_t> order(data.images.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::mt19937_64 shuffle_rng(derive_seed(config.seed, 0x5eed0000ULL + epoch));
  std::shuffle(order.begin(), order.end(), shuffle_rng);

  std::vector<double> grad(state.student.param_count());
  int step = 0;
  for (std::size_t begin = 0; begin < order.size(); begin += config.batch_size) {
    const std::size_t end = std::min(order.size(), begin + config.batch_size);
    if (end - begin < 2 && begin > 0) break;
    std::vector<const Image*> imgs;
    std::vector<double> targets;
    std::vector<PixelRect> rects;
    for (std::size_t i = begin; i < end; ++i) {
      imgs.push_back(data.images[order[i]]);
      targets.push_back(data.targets[order[i]]);
      rects.push_back(report.saliency_rects[order[i]]);
    }
    const std::uint64_t crop_seed =
        derive_seed(config.seed, (static_cast<std::uint64_t>(epoch) << 32) + step);
    const CropBatch batch = assemble_batch_from_rects(imgs, targets, rects, config.batch, crop_seed);

    BatchEvaluation eval;
    try {
      eval = evaluate_batch(model, state.student, batch, targets, config.objective, grad);
    } catch (const NumericalError& e) {
      throw NumericalError("epoch " + std::to_string(epoch) + " step " + std::to_string(step) +
                           ": " + e.what());
    }
    for (double g : grad) {
      if (!std::isfinite(g)) {
        throw NumericalError("epoch " + std::to_string(epoch) + " step " +
                             std::to_string(step) + ": non-finite gradient");
      }
    }
    state.optimizer.step(state.student.values, grad, report.lr);
    ++state.student.version;

    report.step_records.push_back(
        {epoch, state.global_step, eval.loss.l1, eval.loss.info_nce, eval.loss.total});
    report.mean_l1 += eval.loss.l1;
    report.mean_info_nce += eval.loss.info_nce;
    report.mean_total += eval.loss.total;
    ++step;
    ++state.global_step;

    if (config.ema.per_step) state.teacher = ema_update(state.teacher, state.student, beta);
  }
  report.steps = step;
  if (step > 0) {
    report.mean_l1 /= step;
    report.mean_info_nce /= step;
    report.mean_total /= step;
  }

  // (3) teacher refresh
  if (!config.ema.per_step) state.teacher = ema_update(state.teacher, state.student, beta);
  return report;
}

}  // namespace lmliqa
