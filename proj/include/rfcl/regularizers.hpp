#pragma once

#include <cmath>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "rfcl/error.hpp"
#include "rfcl/fisher.hpp"
#include "rfcl/model.hpp"
#include "rfcl/tape.hpp"
#include "rfcl/tensor.hpp"

namespace rfcl {

enum class HeadMode { softmax, sigmoid };

inline const char* to_string(HeadMode mode) { return mode == HeadMode::softmax ? "softmax" : "sigmoid"; }

/// Half-open range of logit columns.
struct ClassRange {
  std::size_t begin = 0;
  std::size_t end = 0;

  std::size_t size() const { return end - begin; }
  bool contains(std::size_t c) const { return c >= begin && c < end; }
};

struct LossWeights {
  double ewc = 0.0;
  double l2 = 0.0;
  double pred_kd = 0.0;
  double feat_kd = 0.0;

  /// Tuned values for EWC, L2, PredKD and FeatKD respectively.
  static constexpr double kDefaultEwc = 1e1;
  static constexpr double kDefaultL2 = 5e-1;
  static constexpr double kDefaultPredKd = 1.0;
  static constexpr double kDefaultFeatKd = 5.0;

  void validate() const {
    if (!(ewc >= 0.0 && l2 >= 0.0 && pred_kd >= 0.0 && feat_kd >= 0.0)) {
      throw DomainError("loss weights must be nonnegative");
    }
    if (ewc > 0.0 && l2 > 0.0) throw DomainError("EWC and L2 are alternatives; at most one may be active");
  }

  friend bool operator==(const LossWeights&, const LossWeights&) = default;
};

namespace detail {

inline void check_labels(std::span<const std::size_t> labels, std::size_t batch, const ClassRange& scope) {
  if (labels.size() != batch) {
    throw DimensionError("got " + std::to_string(labels.size()) + " labels for a batch of " + std::to_string(batch));
  }
  for (auto y : labels) {
    if (!scope.contains(y)) {
      throw DomainError("label column " + std::to_string(y) + " outside scope [" + std::to_string(scope.begin) +
                        "," + std::to_string(scope.end) + ")");
    }
  }
}

/// -(sum pos*log s(z) + neg*log s(-z)) / sum(pos + neg) over a scoped block.
inline Tensor weighted_bce(Tape& tape, const Tensor& z, std::span<const std::size_t> local_labels, double neg_weight) {
  const std::size_t rows = z.rows(), cols = z.cols();
  std::vector<double> pos(rows * cols, 0.0), neg(rows * cols, neg_weight);
  for (std::size_t r = 0; r < rows; ++r) {
    pos[r * cols + local_labels[r]] = 1.0;
    neg[r * cols + local_labels[r]] = 0.0;
  }
  const double total_weight = static_cast<double>(rows) * (1.0 + neg_weight * static_cast<double>(cols - 1));
  Tensor pos_t({rows, cols}, std::move(pos));
  Tensor neg_t({rows, cols}, std::move(neg));
  Tensor terms = tape.add(tape.mul(tape.log_sigmoid(z), pos_t), tape.mul(tape.log_sigmoid(tape.neg(z)), neg_t));
  return tape.scale(tape.sum(terms), -1.0 / total_weight);
}

inline std::vector<std::size_t> localize(std::span<const std::size_t> labels, const ClassRange& scope) {
  std::vector<std::size_t> out(labels.begin(), labels.end());
  for (auto& y : out) y -= scope.begin;
  return out;
}

}  // namespace detail

// -- classification ---------------------------------------------------------

/// Mean negative log-softmax of the labelled column.
inline Tensor softmax_ce_loss(Tape& tape, const Tensor& logits, std::span<const std::size_t> labels) {
  if (logits.rank() != 2) throw DimensionError("logits must be a matrix");
  detail::check_labels(labels, logits.rows(), ClassRange{0, logits.cols()});
  const std::size_t rows = logits.rows(), cols = logits.cols();
  std::vector<double> onehot(rows * cols, 0.0);
  for (std::size_t r = 0; r < rows; ++r) onehot[r * cols + labels[r]] = 1.0;
  Tensor picked = tape.mul(tape.log_softmax(logits), Tensor({rows, cols}, std::move(onehot)));
  return tape.scale(tape.sum(picked), -1.0 / static_cast<double>(rows));
}

/// Mean binary cross-entropy over batch x scoped columns against one-hot targets.
inline Tensor bce_loss(Tape& tape, const Tensor& logits, std::span<const std::size_t> labels, ClassRange scope) {
  if (scope.size() == 0 || scope.end > logits.cols()) throw DomainError("bce scope is empty or exceeds logit width");
  detail::check_labels(labels, logits.rows(), scope);
  Tensor z = tape.slice_cols(logits, scope.begin, scope.end);
  return detail::weighted_bce(tape, z, detail::localize(labels, scope), 1.0);
}

/// BCE with negative targets weighted 1/(C-1), so each example carries equal
/// positive and negative mass. Normalized by total weight.
inline Tensor balanced_bce_loss(Tape& tape, const Tensor& logits, std::span<const std::size_t> labels,
                                ClassRange scope) {
  if (scope.size() < 2) throw DomainError("balanced bce needs at least two classes in scope");
  if (scope.end > logits.cols()) throw DomainError("bce scope exceeds logit width");
  detail::check_labels(labels, logits.rows(), scope);
  Tensor z = tape.slice_cols(logits, scope.begin, scope.end);
  return detail::weighted_bce(tape, z, detail::localize(labels, scope), 1.0 / static_cast<double>(scope.size() - 1));
}

/// The configured classification loss restricted to `scope`. Labels are
/// absolute logit columns.
inline Tensor classification_loss(Tape& tape, const Tensor& logits, std::span<const std::size_t> labels,
                                  ClassRange scope, HeadMode mode, bool balanced) {
  if (mode == HeadMode::softmax) {
    if (scope.size() == 0 || scope.end > logits.cols()) throw DomainError("softmax scope is empty or exceeds logits");
    detail::check_labels(labels, logits.rows(), scope);
    const auto local = detail::localize(labels, scope);
    return softmax_ce_loss(tape, tape.slice_cols(logits, scope.begin, scope.end), local);
  }
  if (balanced && scope.size() >= 2) return balanced_bce_loss(tape, logits, labels, scope);
  return bce_loss(tape, logits, labels, scope);
}

// -- parameter regularization -----------------------------------------------

namespace detail {

template <class WeightFn>
Tensor anchored_penalty(Tape& tape, const Model& current, const CheckpointModel& anchor, WeightFn&& weights) {
  const auto live = current.named_parameters();
  std::optional<Tensor> total;
  for (const auto& a : anchor.model().named_parameters()) {
    auto it = std::find_if(live.begin(), live.end(), [&](const NamedTensor& p) { return p.name == a.name; });
    if (it == live.end() || it->tensor.shape() != a.tensor.shape()) {
      throw DimensionError("parameter '" + a.name + "' is not congruent between model and anchor");
    }
    Tensor diff = tape.square(tape.sub(it->tensor, a.tensor));
    if (auto w = weights(a.name, a.tensor)) diff = tape.mul(diff, *w);
    Tensor s = tape.sum(diff);
    total = total ? tape.add(*total, s) : s;
  }
  return total ? *total : Tensor::scalar(0.0);
}

}  // namespace detail

/// sum_j (theta_j - anchor_j)^2 over every anchored parameter.
inline Tensor l2_param_loss(Tape& tape, const Model& current, const CheckpointModel& anchor) {
  return detail::anchored_penalty(tape, current, anchor,
                                  [](const std::string&, const Tensor&) { return std::optional<Tensor>{}; });
}

/// sum_j F_jj (theta_j - anchor_j)^2.
inline Tensor ewc_param_loss(Tape& tape, const Model& current, const CheckpointModel& anchor,
                             const FisherDiagonal& fisher) {
  return detail::anchored_penalty(tape, current, anchor, [&](const std::string& name, const Tensor& param) {
    const auto* f = fisher.find(name);
    if (!f) throw DomainError("fisher diagonal has no entry for '" + name + "'");
    if (f->size() != param.size()) throw DimensionError("fisher entry for '" + name + "' has the wrong size");
    return std::optional<Tensor>(Tensor(param.shape(), *f));
  });
}

inline Tensor ewc_param_loss(Tape& tape, const Model& current, const CheckpointModel& anchor) {
  if (!anchor.fisher()) throw DomainError("ewc needs a fisher diagonal attached to the anchor");
  return ewc_param_loss(tape, current, anchor, *anchor.fisher());
}

/// Empirical Fisher diagonal: mean over samples of the squared per-sample
/// gradient of the classification loss, using the ground-truth labels.
inline FisherDiagonal compute_fisher_diagonal(const Model& model, const Tensor& features,
                                              std::span<const std::size_t> labels, ClassRange scope, HeadMode mode,
                                              bool balanced, std::size_t task) {
  if (features.rank() != 2 || features.rows() == 0 || labels.empty()) {
    throw DomainError("fisher computation needs at least one sample");
  }
  if (labels.size() != features.rows()) throw DimensionError("fisher features and labels disagree in count");
  Model work = model.clone(true);
  auto params = work.named_parameters();
  std::vector<std::vector<double>> acc;
  for (const auto& p : params) acc.emplace_back(p.tensor.size(), 0.0);

  const std::size_t n = features.rows(), d = features.cols();
  auto x = features.values();
  for (std::size_t i = 0; i < n; ++i) {
    work.zero_grad();
    Tape tape;
    Tensor row({1, d}, std::vector<double>(x.begin() + i * d, x.begin() + (i + 1) * d));
    auto out = work.forward(tape, row);
    auto loss = classification_loss(tape, out.logits, labels.subspan(i, 1), scope, mode, balanced);
    tape.backward(loss);
    for (std::size_t k = 0; k < params.size(); ++k) {
      auto g = params[k].tensor.grad();
      for (std::size_t j = 0; j < g.size(); ++j) acc[k][j] += g[j] * g[j];
    }
  }
  FisherDiagonal fisher(task);
  for (std::size_t k = 0; k < params.size(); ++k) {
    for (auto& v : acc[k]) v /= static_cast<double>(n);
    fisher.set(params[k].name, std::move(acc[k]));
  }
  return fisher;
}

// -- distillation -----------------------------------------------------------

/// Cross-entropy of the current old-class predictions against the
/// checkpoint's, at temperature `temperature`. Checkpoint logits act as
/// constants.
inline Tensor pred_kd_loss(Tape& tape, const Tensor& current_old, const Tensor& checkpoint_old, HeadMode mode,
                           double temperature = 1.0) {
  if (current_old.shape() != checkpoint_old.shape() || current_old.rank() != 2) {
    throw DimensionError("pred_kd class-range mismatch: " + shape_string(current_old.shape()) + " vs " +
                         shape_string(checkpoint_old.shape()));
  }
  if (!(temperature > 0.0)) throw DomainError("pred_kd temperature must be positive");
  const std::size_t rows = current_old.rows(), cols = current_old.cols();
  Tensor z = temperature == 1.0 ? current_old : tape.scale(current_old, 1.0 / temperature);
  auto t = checkpoint_old.values();
  std::vector<double> target(t.size());

  if (mode == HeadMode::softmax) {
    for (std::size_t r = 0; r < rows; ++r) {
      double m = -INFINITY;
      for (std::size_t c = 0; c < cols; ++c) m = std::max(m, t[r * cols + c] / temperature);
      double s = 0.0;
      for (std::size_t c = 0; c < cols; ++c) s += std::exp(t[r * cols + c] / temperature - m);
      for (std::size_t c = 0; c < cols; ++c) target[r * cols + c] = std::exp(t[r * cols + c] / temperature - m) / s;
    }
    Tensor p({rows, cols}, std::move(target));
    return tape.scale(tape.sum(tape.mul(tape.log_softmax(z), p)), -1.0 / static_cast<double>(rows));
  }

  std::vector<double> complement(t.size());
  for (std::size_t i = 0; i < t.size(); ++i) {
    target[i] = stable_sigmoid(t[i] / temperature);
    complement[i] = stable_sigmoid(-t[i] / temperature);
  }
  Tensor pos({rows, cols}, std::move(target));
  Tensor neg({rows, cols}, std::move(complement));
  Tensor terms = tape.add(tape.mul(tape.log_sigmoid(z), pos), tape.mul(tape.log_sigmoid(tape.neg(z)), neg));
  return tape.scale(tape.sum(terms), -1.0 / static_cast<double>(rows * cols));
}

/// Mean over the batch of the squared feature distance to the checkpoint.
inline Tensor feat_kd_loss(Tape& tape, const Tensor& current, const Tensor& checkpoint) {
  if (current.shape() != checkpoint.shape()) {
    throw DimensionError("feat_kd shape mismatch: " + shape_string(current.shape()) + " vs " +
                         shape_string(checkpoint.shape()));
  }
  Tensor target = checkpoint.clone(false);
  return tape.scale(tape.sum(tape.square(tape.sub(current, target))), 1.0 / static_cast<double>(current.rows()));
}

// -- composition ------------------------------------------------------------

/// Optional knowledge-transfer terms; absent terms contribute nothing.
struct LossTerms {
  std::optional<Tensor> pred_kd;
  std::optional<Tensor> feat_kd;
  std::optional<Tensor> ewc;
  std::optional<Tensor> l2;
};

inline Tensor total_loss(Tape& tape, const Tensor& cls, const LossTerms& terms, const LossWeights& weights) {
  auto check = [](const Tensor& t, const char* name) {
    if (!std::isfinite(t.item())) throw NumericError(std::string("non-finite ") + name + " loss term");
  };
  check(cls, "classification");
  Tensor total = cls;
  auto add = [&](const std::optional<Tensor>& term, double lambda, const char* name) {
    if (!term || lambda == 0.0) return;
    check(*term, name);
    total = tape.add(total, tape.scale(*term, lambda));
  };
  add(terms.pred_kd, weights.pred_kd, "pred_kd");
  add(terms.feat_kd, weights.feat_kd, "feat_kd");
  add(terms.ewc, weights.ewc, "ewc");
  add(terms.l2, weights.l2, "l2");
  return total;
}

}  // namespace rfcl
