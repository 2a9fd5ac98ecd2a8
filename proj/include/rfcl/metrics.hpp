#pragma once

#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include "rfcl/error.hpp"

namespace rfcl {

/// Lower-triangular accuracy tables after each task.
///
/// local(i, n)  = A_{i,n}: accuracy on task n's test set with the argmax
///                restricted to task n's classes, after training task i.
/// global(i, n) = R_{i,n}: accuracy on task n's test set with the argmax over
///                every class seen through task i.
/// Indices are 0-based here; row i is filled after training task i.
class AccuracyMatrix {
 public:
  AccuracyMatrix() = default;

  AccuracyMatrix(std::vector<std::size_t> task_sizes, std::vector<std::size_t> test_counts)
      : task_sizes_(std::move(task_sizes)), test_counts_(std::move(test_counts)) {
    if (task_sizes_.empty()) throw DomainError("accuracy matrix needs at least one task");
    if (test_counts_.size() != task_sizes_.size()) throw DomainError("test counts must match task count");
    for (auto s : task_sizes_) {
      if (s == 0) throw DomainError("task sizes must be positive");
    }
    for (auto c : test_counts_) {
      if (c == 0) throw DomainError("every task needs test examples");
    }
    const auto n = task_sizes_.size();
    local_.assign(n, std::vector<std::optional<double>>(n));
    global_.assign(n, std::vector<std::optional<double>>(n));
  }

  std::size_t num_tasks() const { return task_sizes_.size(); }
  const std::vector<std::size_t>& task_sizes() const { return task_sizes_; }
  const std::vector<std::size_t>& test_counts() const { return test_counts_; }

  void set(std::size_t i, std::size_t n, double local, double global) {
    check_index(i, n);
    check_value(local);
    check_value(global);
    local_[i][n] = local;
    global_[i][n] = global;
  }

  double local(std::size_t i, std::size_t n) const { return value(local_, i, n, "A"); }
  double global(std::size_t i, std::size_t n) const { return value(global_, i, n, "R"); }

  bool row_complete(std::size_t i) const {
    if (i >= num_tasks()) return false;
    for (std::size_t n = 0; n <= i; ++n) {
      if (!local_[i][n] || !global_[i][n]) return false;
    }
    return true;
  }

  bool complete() const {
    for (std::size_t i = 0; i < num_tasks(); ++i) {
      if (!row_complete(i)) return false;
    }
    return true;
  }

  /// Test-size weighted global accuracy on tasks 0..i after task i.
  double pooled_accuracy(std::size_t i) const {
    if (!row_complete(i)) throw DomainError("accuracy row " + std::to_string(i + 1) + " is incomplete");
    double num = 0.0, den = 0.0;
    for (std::size_t n = 0; n <= i; ++n) {
      num += static_cast<double>(test_counts_[n]) * global(i, n);
      den += static_cast<double>(test_counts_[n]);
    }
    return num / den;
  }

  friend bool operator==(const AccuracyMatrix&, const AccuracyMatrix&) = default;

 private:
  void check_index(std::size_t i, std::size_t n) const {
    if (i >= num_tasks() || n > i) {
      throw DomainError("accuracy entry (" + std::to_string(i + 1) + "," + std::to_string(n + 1) +
                        ") outside the lower triangle");
    }
  }
  static void check_value(double v) {
    if (!(v >= 0.0 && v <= 1.0)) throw DomainError("accuracy must lie in [0,1], got " + std::to_string(v));
  }
  double value(const std::vector<std::vector<std::optional<double>>>& t, std::size_t i, std::size_t n,
               const char* name) const {
    check_index(i, n);
    if (!t[i][n]) {
      throw DomainError(std::string(name) + "(" + std::to_string(i + 1) + "," + std::to_string(n + 1) + ") is unset");
    }
    return *t[i][n];
  }

  std::vector<std::size_t> task_sizes_;
  std::vector<std::size_t> test_counts_;
  std::vector<std::vector<std::optional<double>>> local_;
  std::vector<std::vector<std::optional<double>>> global_;
};

/// Accuracy over the union of all test sets after the last task.
inline double final_accuracy(const AccuracyMatrix& m) { return m.pooled_accuracy(m.num_tasks() - 1); }

/// Average drop of global accuracy on past tasks, each weighted by its share
/// of the classes seen so far.
inline double global_forgetting(const AccuracyMatrix& m) {
  const std::size_t N = m.num_tasks();
  if (N < 2) throw DomainError("global forgetting is undefined for fewer than two tasks");
  if (!m.complete()) throw DomainError("global forgetting needs a complete accuracy matrix");
  double total = 0.0;
  std::size_t seen = m.task_sizes()[0];
  for (std::size_t i = 1; i < N; ++i) {
    seen += m.task_sizes()[i];
    for (std::size_t n = 0; n < i; ++n) {
      const double share = static_cast<double>(m.task_sizes()[n]) / static_cast<double>(seen);
      total += share * (m.global(n, n) - m.global(i, n));
    }
  }
  return total / static_cast<double>(N - 1);
}

/// Mean drop of local accuracy on each past task between learning it and the
/// end. Positive means forgetting.
inline double local_forgetting(const AccuracyMatrix& m) {
  const std::size_t N = m.num_tasks();
  if (N < 2) throw DomainError("local forgetting is undefined for fewer than two tasks");
  if (!m.complete()) throw DomainError("local forgetting needs a complete accuracy matrix");
  double total = 0.0;
  for (std::size_t n = 0; n + 1 < N; ++n) total += m.local(n, n) - m.local(N - 1, n);
  return total / static_cast<double>(N - 1);
}

struct MetricsReport {
  double final_accuracy = 0.0;
  std::optional<double> global_forgetting;
  std::optional<double> local_forgetting;

  friend bool operator==(const MetricsReport&, const MetricsReport&) = default;
};

inline MetricsReport compute_metrics(const AccuracyMatrix& m) {
  MetricsReport r;
  r.final_accuracy = final_accuracy(m);
  if (m.num_tasks() >= 2) {
    r.global_forgetting = global_forgetting(m);
    r.local_forgetting = local_forgetting(m);
  }
  return r;
}

}  // namespace rfcl
