#pragma once

#include <Eigen/Core>

#include <cmath>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "rfcl/error.hpp"
#include "rfcl/metrics.hpp"
#include "rfcl/model.hpp"

namespace rfcl {

/// Features of a fixed probe set at one tap: rows are examples.
struct ActivationMatrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> values;
  std::string tap;
  std::size_t source_task = 0;

  static ActivationMatrix from_tensor(const Tensor& t, std::string tap, std::size_t source_task) {
    ActivationMatrix m;
    m.rows = t.rows();
    m.cols = t.cols();
    m.values.assign(t.values().begin(), t.values().end());
    m.tap = std::move(tap);
    m.source_task = source_task;
    return m;
  }
};

/// Raised when an activation matrix has no variance after centering.
class UndefinedSimilarity : public Error {
 public:
  using Error::Error;
};

namespace detail {

inline RowMatrix centered(const ActivationMatrix& a) {
  if (a.values.size() != a.rows * a.cols) throw DimensionError("activation matrix size mismatch");
  const auto raw = ConstMatrixMap(a.values.data(), static_cast<Eigen::Index>(a.rows), static_cast<Eigen::Index>(a.cols));
  RowMatrix m = raw;
  m.rowwise() -= m.colwise().mean();
  // Relative test: CKA is scale-invariant, so tiny but genuine variation counts.
  const double spread = m.norm();
  if (spread == 0.0 || spread <= 1e-12 * raw.norm()) {
    throw UndefinedSimilarity("activations at tap '" + a.tap + "' have zero variance; CKA is undefined");
  }
  return m;
}

}  // namespace detail

/// Linear CKA: ||Yc^T Xc||_F^2 / (||Xc^T Xc||_F ||Yc^T Yc||_F) with
/// column-centered Xc, Yc.
inline double linear_cka(const ActivationMatrix& x, const ActivationMatrix& y) {
  if (x.rows != y.rows) {
    throw DimensionError("CKA needs equal row counts, got " + std::to_string(x.rows) + " and " + std::to_string(y.rows));
  }
  if (x.rows < 2) throw DimensionError("CKA needs at least two probe examples");
  const auto xc = detail::centered(x);
  const auto yc = detail::centered(y);
  const double cross = (yc.transpose() * xc).squaredNorm();
  const double xx = (xc.transpose() * xc).norm();
  const double yy = (yc.transpose() * yc).norm();
  return cross / (xx * yy);
}

/// Per-tap similarity of each task's checkpoint to the first one on a fixed
/// probe batch. values[tap][n] is empty when CKA was undefined at that point;
/// the reason is kept in errors[tap].
struct CkaTrajectory {
  std::vector<std::string> taps;
  std::map<std::string, std::vector<std::optional<double>>> values;
  std::map<std::string, std::string> errors;
  std::vector<double> accuracy;  // pooled global accuracy after each task; may be empty

  std::size_t num_tasks() const { return values.empty() ? 0 : values.begin()->second.size(); }

  std::string to_csv() const {
    std::ostringstream os;
    os.precision(17);
    os << "task,tap,cka,acc\n";
    for (std::size_t n = 0; n < num_tasks(); ++n) {
      for (const auto& tap : taps) {
        os << (n + 1) << ',' << tap << ',';
        const auto& v = values.at(tap)[n];
        if (v) {
          os << *v;
        } else {
          os << "undefined";
        }
        os << ',';
        if (n < accuracy.size()) os << accuracy[n];
        os << '\n';
      }
    }
    return os.str();
  }
};

/// Activations at `tap` for a probe batch. The "linear" tap is restricted to
/// the first `first_task_width` logit columns.
inline ActivationMatrix probe_activations(const CheckpointModel& ckpt, const Tensor& probe, const std::string& tap,
                                          std::size_t first_task_width, std::size_t task) {
  if (!ckpt.model().has_tap(tap)) {
    throw DimensionError("checkpoint for task " + std::to_string(task + 1) + " has no tap '" + tap + "'");
  }
  auto out = ckpt.forward(probe, {tap});
  Tensor t = out.activations.at(tap);
  if (tap == kLinearTap) {
    if (first_task_width == 0 || first_task_width > t.cols()) throw DimensionError("invalid first-task width");
    Tape tape = Tape::inference();
    t = tape.slice_cols(t, 0, first_task_width);
  }
  return ActivationMatrix::from_tensor(t, tap, task);
}

inline CkaTrajectory cka_trajectory(const std::vector<CheckpointModel>& checkpoints, const Tensor& probe,
                                    const std::vector<std::string>& taps, std::size_t first_task_width,
                                    const AccuracyMatrix* accuracy = nullptr) {
  if (checkpoints.empty()) throw DomainError("CKA trajectory needs at least one checkpoint");
  CkaTrajectory traj;
  traj.taps = taps;
  for (const auto& tap : taps) {
    auto& series = traj.values[tap];
    const auto reference = probe_activations(checkpoints.front(), probe, tap, first_task_width, 0);
    for (std::size_t n = 0; n < checkpoints.size(); ++n) {
      auto current = probe_activations(checkpoints[n], probe, tap, first_task_width, n);
      try {
        series.push_back(linear_cka(reference, current));
      } catch (const UndefinedSimilarity& e) {
        series.push_back(std::nullopt);
        traj.errors[tap] = "task " + std::to_string(n + 1) + ": " + e.what();
      }
    }
  }
  if (accuracy) {
    for (std::size_t n = 0; n < checkpoints.size() && n < accuracy->num_tasks(); ++n) {
      traj.accuracy.push_back(accuracy->pooled_accuracy(n));
    }
  }
  return traj;
}

}  // namespace rfcl
