#include "lmliqa/losses.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "lmliqa/errors.hpp"

namespace lmliqa {

namespace {

double dot(const std::vector<double>& a, const std::vector<double>& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

void check_anchor(const EmbeddingBatch& batch, CropIndex anchor) {
  if (!(batch.tau > 0.0)) throw ValidationError("temperature must be positive");
  if (anchor.t < 0 || anchor.t >= batch.T || anchor.h < 0 || anchor.h >= batch.H) {
    throw ValidationError("anchor (" + std::to_string(anchor.t) + "," +
                          std::to_string(anchor.h) + ") out of range");
  }
}

// Denominator members for one anchor, with a group tag.
enum class Group { intra, inter, positive };
struct Term {
  CropIndex index;
  Group group;
};

std::vector<Term> denominator_terms(const EmbeddingBatch& batch, CropIndex anchor,
                                    const ContrastiveOptions& options) {
  std::vector<Term> terms;
  if (options.intra_negatives) {
    for (int h = 0; h < batch.H; ++h) {
      if (h != anchor.h) terms.push_back({{anchor.t, h}, Group::intra});
    }
  }
  for (int t = 0; t < batch.T; ++t) {
    if (t == anchor.t) continue;
    for (int h = 0; h < batch.H; ++h) terms.push_back({{t, h}, Group::inter});
    if (options.inter_includes_positives) terms.push_back({{t, batch.H}, Group::inter});
  }
  if (options.include_positive_in_denominator) {
    terms.push_back({{anchor.t, batch.H}, Group::positive});
  }
  return terms;
}

InfoNceResult info_nce_impl(const EmbeddingBatch& batch, const ContrastiveOptions& options,
                            std::vector<std::vector<double>>* grad) {
  batch.validate();
  if (batch.H < 1) throw ValidationError("H must be at least 1");
  const double inv_tau = 1.0 / batch.tau;
  const std::size_t dim = batch.features.front().size();
  if (grad != nullptr) {
    grad->assign(batch.features.size(), std::vector<double>(dim, 0.0));
  }

  InfoNceResult out;
  out.per_image.assign(batch.T, 0.0);
  const double weight = options.reduction == AnchorReduction::mean ? 1.0 / batch.H : 1.0;
  double total = 0.0;
  std::vector<double> logits;
  for (int t = 0; t < batch.T; ++t) {
    for (int h = 0; h < batch.H; ++h) {
      const CropIndex anchor{t, h};
      const auto terms = denominator_terms(batch, anchor, options);
      if (terms.empty()) {
        throw ValidationError(
            "InfoNCE denominator is empty (T=1 and H=1, or no negatives enabled)");
      }
      const auto& fa = batch.at(t, h);
      const auto& fp = batch.at(t, batch.H);
      const double pos_logit = dot(fa, fp) * inv_tau;

      logits.resize(terms.size());
      double max_logit = logits.empty() ? 0.0 : -INFINITY;
      for (std::size_t k = 0; k < terms.size(); ++k) {
        logits[k] = dot(fa, batch.at(terms[k].index.t, terms[k].index.h)) * inv_tau;
        max_logit = std::max(max_logit, logits[k]);
      }
      double scaled_sum = 0.0;
      AnchorTerms rec;
      rec.anchor = anchor;
      rec.numerator = std::exp(pos_logit);
      for (std::size_t k = 0; k < terms.size(); ++k) {
        scaled_sum += std::exp(logits[k] - max_logit);
        const double e = std::exp(logits[k]);
        switch (terms[k].group) {
          case Group::intra: rec.p_intra += e; break;
          case Group::inter: rec.p_inter += e; break;
          case Group::positive: rec.p_positive += e; break;
        }
      }
      rec.loss = -pos_logit + max_logit + std::log(scaled_sum);
      out.per_image[t] += weight * rec.loss;
      total += rec.loss;
      out.per_anchor.push_back(rec);

      if (grad != nullptr) {
        auto& ga = (*grad)[t * (batch.H + 1) + h];
        auto& gp = (*grad)[t * (batch.H + 1) + batch.H];
        for (std::size_t i = 0; i < dim; ++i) {
          ga[i] -= weight * inv_tau * fp[i];
          gp[i] -= weight * inv_tau * fa[i];
        }
        for (std::size_t k = 0; k < terms.size(); ++k) {
          const double p = std::exp(logits[k] - max_logit) / scaled_sum;
          const auto idx = terms[k].index;
          const auto& fk = batch.at(idx.t, idx.h);
          auto& gk = (*grad)[idx.t * (batch.H + 1) + idx.h];
          const double c = weight * inv_tau * p;
          for (std::size_t i = 0; i < dim; ++i) {
            ga[i] += c * fk[i];
            gk[i] += c * fa[i];
          }
        }
      }
    }
  }
  out.mean = total / (static_cast<double>(batch.T) * batch.H);
  return out;
}

}  // namespace

void EmbeddingBatch::validate() const {
  if (T < 1 || H < 0) throw ValidationError("invalid batch geometry");
  if (!(tau > 0.0)) throw ValidationError("temperature must be positive");
  if (features.size() != static_cast<std::size_t>(T) * (H + 1)) {
    throw ShapeError("embedding batch holds " + std::to_string(features.size()) +
                     " vectors, expected " + std::to_string(T * (H + 1)));
  }
  const std::size_t dim = features.front().size();
  for (const auto& f : features) {
    if (f.size() != dim) throw ShapeError("embedding dimensions differ");
  }
}

double p_intra(const EmbeddingBatch& batch, CropIndex anchor) {
  check_anchor(batch, anchor);
  const auto& fa = batch.at(anchor.t, anchor.h);
  double s = 0.0;
  for (int h = 0; h < batch.H; ++h) {
    if (h != anchor.h) s += std::exp(dot(fa, batch.at(anchor.t, h)) / batch.tau);
  }
  return s;
}

double p_inter(const EmbeddingBatch& batch, CropIndex anchor, bool include_positives) {
  check_anchor(batch, anchor);
  const auto& fa = batch.at(anchor.t, anchor.h);
  double s = 0.0;
  for (int t = 0; t < batch.T; ++t) {
    if (t == anchor.t) continue;
    const int last = include_positives ? batch.H : batch.H - 1;
    for (int h = 0; h <= last; ++h) s += std::exp(dot(fa, batch.at(t, h)) / batch.tau);
  }
  return s;
}

InfoNceResult info_nce(const EmbeddingBatch& batch, const ContrastiveOptions& options) {
  return info_nce_impl(batch, options, nullptr);
}

InfoNceResult info_nce_backward(const EmbeddingBatch& batch, const ContrastiveOptions& options,
                                std::vector<std::vector<double>>& grad) {
  return info_nce_impl(batch, options, &grad);
}

double l1_loss(const std::vector<double>& predictions, const std::vector<double>& targets) {
  if (predictions.size() != targets.size()) {
    throw ValidationError("l1_loss length mismatch: " + std::to_string(predictions.size()) +
                          " predictions vs " + std::to_string(targets.size()) + " targets");
  }
  double s = 0.0;
  for (std::size_t i = 0; i < predictions.size(); ++i) s += std::abs(predictions[i] - targets[i]);
  return s;
}

LossBreakdown total_loss(const std::vector<double>& l1_terms,
                         const std::vector<double>& info_terms, double alpha) {
  if (!(alpha >= 0.0 && alpha <= 1.0)) throw ValidationError("alpha must lie in [0, 1]");
  if (l1_terms.size() != info_terms.size()) {
    throw ValidationError("per-image L1 and InfoNCE term lists differ in length");
  }
  LossBreakdown out;
  out.alpha = alpha;
  out.l1_terms = l1_terms;
  out.info_terms = info_terms;
  for (std::size_t n = 0; n < l1_terms.size(); ++n) {
    out.l1 += l1_terms[n];
    out.info_nce += info_terms[n];
    out.total += (1.0 - alpha) * l1_terms[n] + alpha * info_terms[n];
  }
  return out;
}

LossBreakdown hybrid_loss(const EmbeddingBatch& batch, const std::vector<double>& scores,
                          const std::vector<double>& targets, double alpha,
                          const ContrastiveOptions& options, HybridGradients* grads) {
  if (scores.size() != static_cast<std::size_t>(batch.T) * batch.H) {
    throw ShapeError("expected " + std::to_string(batch.T * batch.H) + " scores, got " +
                     std::to_string(scores.size()));
  }
  if (targets.size() != static_cast<std::size_t>(batch.T)) {
    throw ShapeError("expected one target per image");
  }
  InfoNceResult info;
  if (grads != nullptr) {
    info = info_nce_backward(batch, options, grads->d_features);
    for (auto& g : grads->d_features) {
      for (double& v : g) v *= alpha;
    }
    grads->d_scores.assign(scores.size(), 0.0);
  } else {
    info = info_nce(batch, options);
  }

  std::vector<double> l1_terms(batch.T);
  for (int t = 0; t < batch.T; ++t) {
    std::vector<double> pred(scores.begin() + t * batch.H, scores.begin() + (t + 1) * batch.H);
    l1_terms[t] = l1_loss(pred, std::vector<double>(batch.H, targets[t]));
    if (grads != nullptr) {
      for (int h = 0; h < batch.H; ++h) {
        const double r = pred[h] - targets[t];
        grads->d_scores[t * batch.H + h] = (1.0 - alpha) * ((r > 0) - (r < 0));
      }
    }
  }
  LossBreakdown out = total_loss(l1_terms, info.per_image, alpha);
  out.per_anchor = std::move(info.per_anchor);
  return out;
}

}  // namespace lmliqa
