#pragma once

#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "rfcl/error.hpp"
#include "rfcl/tensor.hpp"

namespace rfcl {

struct AdamOptions {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  double weight_decay = 2e-4;

  void validate() const {
    if (!(learning_rate >= 0.0)) throw DomainError("adam learning_rate must be nonnegative");
    if (!(beta1 > 0.0 && beta1 < 1.0) || !(beta2 > 0.0 && beta2 < 1.0)) {
      throw DomainError("adam betas must lie in (0,1)");
    }
    if (!(epsilon > 0.0)) throw DomainError("adam epsilon must be positive");
    if (!(weight_decay >= 0.0)) throw DomainError("adam weight_decay must be nonnegative");
  }
};

struct NamedTensor {
  std::string name;
  Tensor tensor;
};

/// Bias-corrected Adam. Weight decay enters as an additive lambda*theta term
/// on the gradient before the moment updates.
class Adam {
 public:
  explicit Adam(AdamOptions options = {}) : options_(options) { options_.validate(); }

  Adam(std::vector<NamedTensor> params, AdamOptions options) : Adam(options) {
    for (auto& p : params) add_parameter(std::move(p.name), std::move(p.tensor));
  }

  void add_parameter(std::string name, Tensor tensor) {
    if (!tensor.requires_grad()) {
      throw StateError("parameter '" + name + "' is frozen and cannot be optimized");
    }
    const auto n = tensor.size();
    slots_.push_back(Slot{std::move(name), std::move(tensor), std::vector<double>(n, 0.0),
                          std::vector<double>(n, 0.0)});
  }

  const AdamOptions& options() const { return options_; }
  void set_learning_rate(double lr) { options_.learning_rate = lr; }
  long steps() const { return step_; }
  std::size_t parameter_count() const { return slots_.size(); }

  std::span<const double> first_moment(std::size_t i) const { return slots_.at(i).m; }
  std::span<const double> second_moment(std::size_t i) const { return slots_.at(i).v; }

  /// Applies one update from the gradients currently held by the parameters.
  /// A parameter with no gradient slot is treated as having a zero gradient.
  void step() {
    for (const auto& s : slots_) {
      if (!s.param.has_grad()) continue;
      for (double g : s.param.grad()) {
        if (!std::isfinite(g)) throw NumericError("non-finite gradient in parameter '" + s.name + "'");
      }
    }
    ++step_;
    const double bc1 = 1.0 - std::pow(options_.beta1, static_cast<double>(step_));
    const double bc2 = 1.0 - std::pow(options_.beta2, static_cast<double>(step_));
    const double lr = options_.learning_rate;
    const double wd = options_.weight_decay;
    for (auto& s : slots_) {
      auto theta = s.param.values();
      const bool has = s.param.has_grad();
      auto grad = s.param.grad();
      for (std::size_t i = 0; i < theta.size(); ++i) {
        const double g = (has ? grad[i] : 0.0) + wd * theta[i];
        s.m[i] = options_.beta1 * s.m[i] + (1.0 - options_.beta1) * g;
        s.v[i] = options_.beta2 * s.v[i] + (1.0 - options_.beta2) * g * g;
        const double m_hat = s.m[i] / bc1;
        const double v_hat = s.v[i] / bc2;
        theta[i] -= lr * m_hat / (std::sqrt(v_hat) + options_.epsilon);
      }
    }
  }

  void zero_grad() {
    for (auto& s : slots_) s.param.zero_grad();
  }

 private:
  struct Slot {
    std::string name;
    Tensor param;
    std::vector<double> m;
    std::vector<double> v;
  };

  AdamOptions options_;
  std::vector<Slot> slots_;
  long step_ = 0;
};

}  // namespace rfcl
