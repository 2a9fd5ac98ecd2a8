#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numeric>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "rfcl/adam.hpp"
#include "rfcl/cka.hpp"
#include "rfcl/data.hpp"
#include "rfcl/error.hpp"
#include "rfcl/metrics.hpp"
#include "rfcl/model.hpp"
#include "rfcl/regularizers.hpp"

namespace rfcl {

/// Derives independent 64-bit seeds from a base seed and a stream id.
inline std::uint64_t derive_seed(std::uint64_t base, std::uint64_t stream) {
  std::uint64_t z = base + 0x9E3779B97F4A7C15ULL * (stream + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

/// Which knowledge-transfer terms a method uses and with what weights.
struct MethodSpec {
  std::string name = "Naive";
  bool upper_bound = false;
  HeadMode head_mode = HeadMode::sigmoid;
  bool balanced_bce = false;
  LossWeights weights;
  double temperature = 1.0;
  TapSet featkd_taps{"pen"};
  bool freeze_old_heads = false;

  bool uses_pred_kd() const { return weights.pred_kd > 0.0; }
  bool uses_feat_kd() const { return weights.feat_kd > 0.0; }
  bool uses_ewc() const { return weights.ewc > 0.0; }
  bool uses_l2() const { return weights.l2 > 0.0; }

  /// Method names: "Naive", "UpperBound", or '+'-joined components from
  /// {PredKD, FeatKD, EWC, L2}. Active components get the default weights.
  static MethodSpec from_name(const std::string& name, HeadMode mode) {
    MethodSpec m;
    m.name = name;
    m.head_mode = mode;
    if (name == "Naive") return m;
    if (name == "UpperBound") {
      m.upper_bound = true;
      return m;
    }
    std::set<std::string> seen;
    std::stringstream ss(name);
    std::string part;
    while (std::getline(ss, part, '+')) {
      if (!seen.insert(part).second) throw DomainError("method component '" + part + "' repeated");
      if (part == "PredKD") {
        m.weights.pred_kd = LossWeights::kDefaultPredKd;
      } else if (part == "FeatKD") {
        m.weights.feat_kd = LossWeights::kDefaultFeatKd;
      } else if (part == "EWC") {
        m.weights.ewc = LossWeights::kDefaultEwc;
      } else if (part == "L2") {
        m.weights.l2 = LossWeights::kDefaultL2;
      } else {
        throw DomainError("unknown method component '" + part + "' in '" + name + "'");
      }
    }
    m.weights.validate();
    return m;
  }

  void validate() const {
    weights.validate();
    if (!(temperature > 0.0)) throw DomainError("temperature must be positive");
    if (uses_feat_kd() && featkd_taps.empty()) throw DomainError("FeatKD needs at least one tap");
    if (upper_bound && (weights.pred_kd > 0 || weights.feat_kd > 0 || weights.ewc > 0 || weights.l2 > 0)) {
      throw DomainError("UpperBound takes no knowledge-transfer terms");
    }
  }
};

struct TrainSchedule {
  std::size_t epochs = 40;
  std::size_t batch_size = 64;
  double lr = 1e-3;
  std::vector<std::size_t> lr_decay_epochs{20, 30};
  double lr_decay_factor = 0.1;
  double weight_decay = 2e-4;
  std::uint64_t seed = 0;

  void validate() const {
    if (epochs == 0) throw DomainError("epochs must be positive");
    if (batch_size == 0) throw DomainError("batch_size must be positive");
    if (!(lr >= 0.0)) throw DomainError("lr must be nonnegative");
    if (!(lr_decay_factor > 0.0)) throw DomainError("lr_decay_factor must be positive");
    if (!(weight_decay >= 0.0)) throw DomainError("weight_decay must be nonnegative");
    for (std::size_t i = 0; i < lr_decay_epochs.size(); ++i) {
      if (lr_decay_epochs[i] >= epochs) throw DomainError("lr decay epochs must be below the epoch count");
      if (i && lr_decay_epochs[i] <= lr_decay_epochs[i - 1]) {
        throw DomainError("lr decay epochs must be strictly increasing");
      }
    }
  }

  /// Learning rate for 0-based `epoch`: one decay per milestone reached.
  double lr_at(std::size_t epoch) const {
    double r = lr;
    for (auto e : lr_decay_epochs) {
      if (epoch >= e) r *= lr_decay_factor;
    }
    return r;
  }
};

/// Loss components of one optimizer step.
struct StepRecord {
  std::size_t task = 0;
  std::size_t epoch = 0;
  std::size_t step = 0;
  double lr = 0.0;
  double total = 0.0;
  double cls = 0.0;
  double pred_kd = 0.0;
  double feat_kd = 0.0;
  double ewc = 0.0;
  double l2 = 0.0;
};

/// Per-epoch means of StepRecord.
struct EpochRecord {
  std::size_t task = 0;
  std::size_t epoch = 0;
  double lr = 0.0;
  double total = 0.0;
  double cls = 0.0;
  double pred_kd = 0.0;
  double feat_kd = 0.0;
  double ewc = 0.0;
  double l2 = 0.0;
};

/// Error raised while working on a particular task (1-based in the message).
class TaskError : public Error {
 public:
  TaskError(std::size_t task, const std::string& what)
      : Error("task " + std::to_string(task + 1) + ": " + what), task_(task) {}
  std::size_t task() const { return task_; }

 private:
  std::size_t task_;
};

struct RunState {
  Model model;
  std::optional<CheckpointModel> checkpoint;
  std::size_t task_cursor = 0;
  AccuracyMatrix accuracy;
  Rng rng;
  std::size_t steps = 0;
  std::vector<EpochRecord> epoch_log;
  std::function<void(const StepRecord&)> on_step;
};

namespace detail {

inline Tensor batch_features(const Examples& data, std::span<const std::size_t> rows) {
  std::vector<double> x;
  x.reserve(rows.size() * data.dim);
  for (auto r : rows) {
    auto v = data.row(r);
    x.insert(x.end(), v.begin(), v.end());
  }
  return Tensor({rows.size(), data.dim}, std::move(x));
}

inline std::size_t argmax_range(std::span<const double> row, std::size_t begin, std::size_t end) {
  std::size_t best = begin;
  for (std::size_t c = begin + 1; c < end; ++c) {
    if (row[c] > row[best]) best = c;
  }
  return best;
}

}  // namespace detail

/// Trains the live model on one task's examples. `scope` selects the logit
/// columns of the classification loss; `allowed_classes` is the set of class
/// ids the batches may contain.
inline void train_task(RunState& state, std::size_t task, const Examples& data, const TaskSequence& tasks,
                       ClassRange scope, const std::set<std::size_t>& allowed_classes, const MethodSpec& method,
                       const TrainSchedule& schedule) {
  if (data.size() == 0) throw TaskError(task, "no training examples");
  if (state.model.head().width() < scope.end) throw TaskError(task, "head not expanded for this task");
  const bool transfer = task > 0 && !method.upper_bound;
  if (transfer) {
    if (!state.checkpoint || state.checkpoint->source_task() + 1 != task) {
      throw TaskError(task, "checkpoint must be frozen at the end of the previous task");
    }
    if (method.uses_ewc()) {
      const auto& f = state.checkpoint->fisher();
      if (!f || f->task() + 1 != task) throw TaskError(task, "fisher must come from the previous task");
    }
  }

  std::vector<NamedTensor> trainable;
  for (auto& p : state.model.named_parameters()) {
    if (p.tensor.requires_grad()) trainable.push_back(p);
  }
  Adam adam(std::move(trainable), AdamOptions{.learning_rate = schedule.lr, .weight_decay = schedule.weight_decay});

  const std::size_t old_width = transfer ? state.checkpoint->model().head().width() : 0;
  TapSet taps;
  if (transfer && method.uses_feat_kd()) taps = method.featkd_taps;

  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), 0);
  std::vector<std::size_t> labels;

  for (std::size_t epoch = 0; epoch < schedule.epochs; ++epoch) {
    const double lr = schedule.lr_at(epoch);
    adam.set_learning_rate(lr);
    std::shuffle(order.begin(), order.end(), state.rng);
    EpochRecord sums{task, epoch, lr};
    std::size_t batches = 0;

    for (std::size_t start = 0; start < order.size(); start += schedule.batch_size) {
      const std::size_t stop = std::min(order.size(), start + schedule.batch_size);
      std::span<const std::size_t> rows(order.data() + start, stop - start);
      labels.clear();
      for (auto r : rows) {
        const auto y = data.labels[r];
        if (!allowed_classes.count(y)) {
          throw TaskError(task, "batch contains class " + std::to_string(y) + " from outside the current task");
        }
        labels.push_back(tasks.column(y));
      }
      Tensor x = detail::batch_features(data, rows);

      adam.zero_grad();
      Tape tape;
      auto out = state.model.forward(tape, x, taps);
      Tensor cls = classification_loss(tape, out.logits, labels, scope, method.head_mode, method.balanced_bce);

      LossTerms terms;
      if (transfer && (method.uses_pred_kd() || method.uses_feat_kd())) {
        auto anchor_out = state.checkpoint->forward(x, taps);
        if (method.uses_pred_kd()) {
          terms.pred_kd = pred_kd_loss(tape, tape.slice_cols(out.logits, 0, old_width), anchor_out.logits,
                                       method.head_mode, method.temperature);
        }
        if (method.uses_feat_kd()) {
          for (const auto& tap : method.featkd_taps) {
            Tensor term = feat_kd_loss(tape, out.activations.at(tap), anchor_out.activations.at(tap));
            terms.feat_kd = terms.feat_kd ? tape.add(*terms.feat_kd, term) : term;
          }
        }
      }
      if (transfer && method.uses_ewc()) terms.ewc = ewc_param_loss(tape, state.model, *state.checkpoint);
      if (transfer && method.uses_l2()) terms.l2 = l2_param_loss(tape, state.model, *state.checkpoint);

      Tensor total;
      try {
        total = total_loss(tape, cls, terms, method.weights);
      } catch (const NumericError& e) {
        throw TaskError(task, std::string(e.what()) + " at step " + std::to_string(state.steps));
      }
      tape.backward(total);
      try {
        adam.step();
      } catch (const NumericError& e) {
        throw TaskError(task, std::string(e.what()) + " at step " + std::to_string(state.steps));
      }

      StepRecord rec{task, epoch, state.steps, lr, total.item(), cls.item()};
      if (terms.pred_kd) rec.pred_kd = terms.pred_kd->item();
      if (terms.feat_kd) rec.feat_kd = terms.feat_kd->item();
      if (terms.ewc) rec.ewc = terms.ewc->item();
      if (terms.l2) rec.l2 = terms.l2->item();
      if (state.on_step) state.on_step(rec);
      sums.total += rec.total;
      sums.cls += rec.cls;
      sums.pred_kd += rec.pred_kd;
      sums.feat_kd += rec.feat_kd;
      sums.ewc += rec.ewc;
      sums.l2 += rec.l2;
      ++batches;
      ++state.steps;
    }
    const double b = static_cast<double>(batches);
    sums.total /= b;
    sums.cls /= b;
    sums.pred_kd /= b;
    sums.feat_kd /= b;
    sums.ewc /= b;
    sums.l2 /= b;
    state.epoch_log.push_back(sums);
  }
  state.model.zero_grad();
}

/// Logits for every example of `data`, computed without recording.
inline Tensor predict_logits(const Model& model, const Examples& data) {
  Tape tape = Tape::inference();
  return model.forward(tape, data.as_tensor()).logits;
}

/// Fills row `row` of the accuracy matrix: local accuracy over each task's own
/// columns and global accuracy over the first `visible_tasks` blocks.
inline void evaluate(const Model& model, const TaskSequence& tasks, const std::vector<Examples>& test_by_task,
                     std::size_t row, std::size_t visible_tasks, AccuracyMatrix& matrix) {
  if (test_by_task.size() < row + 1) throw TaskError(row, "missing test split");
  const std::size_t visible = tasks.offset(visible_tasks);
  if (model.head().width() < visible) throw TaskError(row, "model head narrower than the visible classes");
  for (std::size_t n = 0; n <= row; ++n) {
    const auto& test = test_by_task[n];
    if (test.size() == 0) throw TaskError(n, "missing test split");
    Tensor logits = predict_logits(model, test);
    const std::size_t begin = tasks.offset(n), end = tasks.offset(n + 1);
    std::size_t local_hits = 0, global_hits = 0;
    for (std::size_t r = 0; r < test.size(); ++r) {
      std::span<const double> z(logits.values().data() + r * logits.cols(), logits.cols());
      const auto truth = tasks.column(test.labels[r]);
      if (detail::argmax_range(z, begin, end) == truth) ++local_hits;
      if (detail::argmax_range(z, 0, visible) == truth) ++global_hits;
    }
    const double count = static_cast<double>(test.size());
    matrix.set(row, n, static_cast<double>(local_hits) / count, static_cast<double>(global_hits) / count);
  }
}

/// Plain top-1 accuracy over all logit columns with dense labels.
inline double evaluate_accuracy(const Model& model, const Examples& data) {
  Tensor logits = predict_logits(model, data);
  std::size_t hits = 0;
  for (std::size_t r = 0; r < data.size(); ++r) {
    std::span<const double> z(logits.values().data() + r * logits.cols(), logits.cols());
    if (detail::argmax_range(z, 0, logits.cols()) == data.labels[r]) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(data.size());
}

// -- pre-training --------------------------------------------------------------

/// Trains a fresh encoder plus a softmax head on the auxiliary classes.
/// The returned model keeps that head so its auxiliary accuracy can be
/// re-measured; continual runs take only the encoder.
inline Model pretrain_encoder(const AuxiliarySplit& split, const std::vector<std::size_t>& hidden_dims,
                              const TrainSchedule& schedule, std::uint64_t seed) {
  if (split.auxiliary_classes.empty() || split.auxiliary.train.size() == 0) {
    throw DomainError("pre-training needs a non-empty auxiliary split");
  }
  std::vector<std::size_t> overlap;
  std::set_intersection(split.auxiliary_classes.begin(), split.auxiliary_classes.end(),
                        split.continual_classes.begin(), split.continual_classes.end(), std::back_inserter(overlap));
  if (!overlap.empty()) throw DomainError("auxiliary and continual class sets overlap");
  schedule.validate();

  const auto& aux = split.auxiliary;
  std::vector<std::size_t> all(aux.num_classes);
  std::iota(all.begin(), all.end(), 0);
  TaskSequence single({all});

  Rng init(derive_seed(seed, 11));
  RunState state;
  state.model = Model(EncoderSpec{aux.dim, hidden_dims}, init);
  state.model.expand_head(aux.num_classes, init);
  state.rng = Rng(derive_seed(seed, 12));
  MethodSpec method = MethodSpec::from_name("Naive", HeadMode::softmax);
  std::set<std::size_t> allowed(all.begin(), all.end());
  train_task(state, 0, aux.train, single, ClassRange{0, aux.num_classes}, allowed, method, schedule);
  return state.model;
}

// -- full run ------------------------------------------------------------------

struct PretrainOptions {
  bool enabled = false;
  double aux_fraction = 0.5;
  std::optional<Model> encoder;  // supplied encoder; skips auxiliary training
  std::optional<std::size_t> epochs;
};

struct ExperimentSpec {
  SplitSpec split;
  std::vector<std::size_t> hidden_dims{256, 128, 128, 64};
  MethodSpec method;
  TrainSchedule schedule;
  PretrainOptions pretrain;
  std::vector<std::string> cka_taps{"L-4", "L-3", "L-2", "pen", "linear"};
  std::size_t probe_size = 256;
  bool compute_cka = true;
};

struct RunResult {
  RunState state;
  TaskSequence tasks;
  std::vector<CheckpointModel> checkpoints;  // model at the end of each task
  std::optional<Model> pretrained;           // present when pre-trained in this run
  std::optional<double> pretrained_aux_accuracy;
  Examples probe;                            // task-1 holdout used for CKA
  std::optional<CkaTrajectory> cka;
  MetricsReport metrics;
};

namespace detail {

inline std::vector<Examples> split_by_task(const Examples& data, const TaskSequence& tasks) {
  std::vector<Examples> out;
  for (const auto& t : tasks.tasks()) out.push_back(data.with_classes(t));
  return out;
}

}  // namespace detail

/// Runs the class-incremental protocol for one trial seed.
inline RunResult run_experiment(const ExperimentSpec& spec, const Dataset& dataset, std::uint64_t trial_seed,
                                std::function<void(const StepRecord&)> on_step = {}) {
  spec.method.validate();
  spec.schedule.validate();
  dataset.validate();

  RunResult result;
  const Dataset* continual = &dataset;
  std::optional<AuxiliarySplit> aux;
  std::optional<Model> encoder;
  if (spec.pretrain.enabled) {
    if (spec.pretrain.encoder) {
      encoder = *spec.pretrain.encoder;
    } else {
      aux = auxiliary_split(dataset, spec.pretrain.aux_fraction, derive_seed(trial_seed, 3));
      TrainSchedule pre = spec.schedule;
      if (spec.pretrain.epochs) {
        pre.epochs = *spec.pretrain.epochs;
        std::vector<std::size_t> kept;
        for (auto e : pre.lr_decay_epochs) {
          if (e < pre.epochs) kept.push_back(e);
        }
        pre.lr_decay_epochs = kept;
      }
      encoder = pretrain_encoder(*aux, spec.hidden_dims, pre, derive_seed(trial_seed, 4));
      result.pretrained = encoder;
      result.pretrained_aux_accuracy = evaluate_accuracy(*encoder, aux->auxiliary.test);
      continual = &aux->continual;
    }
  }

  SplitSpec split = spec.split;
  split.seed = derive_seed(spec.split.seed, trial_seed);
  result.tasks = make_task_sequence(*continual, split);
  const auto& tasks = result.tasks;
  const std::size_t N = tasks.num_tasks();

  const auto train_by_task = detail::split_by_task(continual->train, tasks);
  const auto test_by_task = detail::split_by_task(continual->test, tasks);
  std::vector<std::size_t> test_counts;
  for (const auto& t : test_by_task) test_counts.push_back(t.size());

  RunState& state = result.state;
  Rng init(derive_seed(trial_seed, 1));
  state.model = Model(EncoderSpec{continual->dim, spec.hidden_dims}, init);
  if (encoder) state.model.load_encoder_from(*encoder);
  state.rng = Rng(derive_seed(trial_seed, 2));
  state.accuracy = AccuracyMatrix(tasks.sizes(), test_counts);
  state.on_step = std::move(on_step);

  const auto& method = spec.method;
  if (method.upper_bound) {
    for (std::size_t n = 0; n < N; ++n) state.model.expand_head(tasks.sizes()[n], init);
    Examples joint;
    joint.dim = continual->dim;
    std::set<std::size_t> allowed;
    for (std::size_t n = 0; n < N; ++n) {
      joint.append(train_by_task[n]);
      allowed.insert(tasks.classes(n).begin(), tasks.classes(n).end());
    }
    train_task(state, 0, joint, tasks, ClassRange{0, tasks.offset(N)}, allowed, method, spec.schedule);
    for (std::size_t i = 0; i < N; ++i) {
      evaluate(state.model, tasks, test_by_task, i, i + 1, state.accuracy);
      result.checkpoints.push_back(freeze_checkpoint(state.model, i));
    }
    state.task_cursor = N;
  } else {
    for (std::size_t n = 0; n < N; ++n) {
      try {
        if (n > 0) {
          state.checkpoint = result.checkpoints.back();
          if (method.uses_ewc()) {
            const auto& prev = train_by_task[n - 1];
            std::vector<std::size_t> cols;
            for (auto y : prev.labels) cols.push_back(tasks.column(y));
            state.checkpoint->attach_fisher(compute_fisher_diagonal(
                state.checkpoint->model(), prev.as_tensor(), cols, ClassRange{tasks.offset(n - 1), tasks.offset(n)},
                method.head_mode, method.balanced_bce, n - 1));
          }
        }
        state.model.expand_head(tasks.sizes()[n], init);
        if (method.freeze_old_heads) {
          for (std::size_t b = 0; b < n; ++b) state.model.set_head_block_trainable(b, false);
        }
        const auto& cls = tasks.classes(n);
        train_task(state, n, train_by_task[n], tasks, ClassRange{tasks.offset(n), tasks.offset(n + 1)},
                   std::set<std::size_t>(cls.begin(), cls.end()), method, spec.schedule);
        evaluate(state.model, tasks, test_by_task, n, n + 1, state.accuracy);
        result.checkpoints.push_back(freeze_checkpoint(state.model, n));
        state.task_cursor = n + 1;
      } catch (const TaskError&) {
        throw;
      } catch (const Error& e) {
        throw TaskError(n, e.what());
      }
    }
  }

  result.metrics = compute_metrics(state.accuracy);

  const auto& first_test = test_by_task.front();
  std::vector<std::size_t> probe_rows(std::min(spec.probe_size, first_test.size()));
  std::iota(probe_rows.begin(), probe_rows.end(), 0);
  result.probe = first_test.subset(probe_rows);
  if (spec.compute_cka && result.probe.size() >= 2) {
    result.cka = cka_trajectory(result.checkpoints, result.probe.as_tensor(), spec.cka_taps, tasks.sizes().front(),
                                &state.accuracy);
  }
  return result;
}

}  // namespace rfcl
