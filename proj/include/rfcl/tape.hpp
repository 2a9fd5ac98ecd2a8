#pragma once

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "rfcl/error.hpp"
#include "rfcl/tensor.hpp"

namespace rfcl {

enum class Elementwise { add, sub, mul, relu, sigmoid, log, exp, square, neg, log_sigmoid };
enum class Reduction { sum, mean, max, argmax };

inline const char* to_string(Elementwise kind) {
  switch (kind) {
    case Elementwise::add: return "add";
    case Elementwise::sub: return "sub";
    case Elementwise::mul: return "mul";
    case Elementwise::relu: return "relu";
    case Elementwise::sigmoid: return "sigmoid";
    case Elementwise::log: return "log";
    case Elementwise::exp: return "exp";
    case Elementwise::square: return "square";
    case Elementwise::neg: return "neg";
    case Elementwise::log_sigmoid: return "log_sigmoid";
  }
  return "?";
}

inline bool is_binary(Elementwise kind) {
  return kind == Elementwise::add || kind == Elementwise::sub || kind == Elementwise::mul;
}

/// Logistic function evaluated without overflow for any finite input.
inline double stable_sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

/// log(sigmoid(x)) without exponentiating a large positive argument.
inline double stable_log_sigmoid(double x) {
  if (x >= 0.0) return -std::log1p(std::exp(-x));
  return x - std::log1p(std::exp(x));
}

namespace detail {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatrixMap = Eigen::Map<RowMatrix>;
using ConstMatrixMap = Eigen::Map<const RowMatrix>;

inline ConstMatrixMap as_matrix(const Tensor& t) {
  return ConstMatrixMap(t.values().data(), static_cast<Eigen::Index>(t.rows()),
                        static_cast<Eigen::Index>(t.cols()));
}

inline MatrixMap as_matrix(Tensor& t) {
  return MatrixMap(t.values().data(), static_cast<Eigen::Index>(t.rows()),
                   static_cast<Eigen::Index>(t.cols()));
}

inline MatrixMap grad_matrix(const Tensor& t) {
  auto g = t.mutable_grad();
  return MatrixMap(g.data(), static_cast<Eigen::Index>(t.rows()), static_cast<Eigen::Index>(t.cols()));
}

}  // namespace detail

/// Records differentiable operations in execution order and replays them in
/// reverse to accumulate gradients.
///
/// An operation is recorded only when one of its inputs requires a gradient,
/// so forward passes over frozen parameters leave the tape empty. A tape
/// supports exactly one backward pass.
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;
  Tape(Tape&&) = default;
  Tape& operator=(Tape&&) = default;

  /// A tape that never records; every output is gradient-free.
  static Tape inference() {
    Tape t;
    t.recording_ = false;
    return t;
  }

  std::size_t size() const { return records_.size(); }
  bool consumed() const { return consumed_; }

  void set_check_finite(bool on) { check_finite_ = on; }
  bool check_finite() const { return check_finite_; }

  // -- linear algebra -------------------------------------------------------

  Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
      throw DimensionError("matmul shape mismatch: " + shape_string(a.shape()) + " x " +
                           shape_string(b.shape()));
    }
    Tensor out = Tensor::zeros({a.dim(0), b.dim(1)});
    detail::as_matrix(out).noalias() = detail::as_matrix(a) * detail::as_matrix(b);
    finish(out, "matmul");
    record(out, {a, b}, [a, b, out]() mutable {
      auto g = detail::ConstMatrixMap(out.grad().data(), out.rows(), out.cols());
      if (a.requires_grad()) detail::grad_matrix(a).noalias() += g * detail::as_matrix(b).transpose();
      if (b.requires_grad()) detail::grad_matrix(b).noalias() += detail::as_matrix(a).transpose() * g;
    });
    return out;
  }

  // -- elementwise ----------------------------------------------------------

  /// Unary kinds ignore `b`. Binary kinds accept an equal-shaped `b` or a
  /// rank-1 bias vector broadcast over the last axis of `a`.
  Tensor elementwise(Elementwise kind, const Tensor& a, const std::optional<Tensor>& b = std::nullopt) {
    if (is_binary(kind)) {
      if (!b) throw DimensionError(std::string("elementwise ") + to_string(kind) + " needs two operands");
      return binary(kind, a, *b);
    }
    return unary(kind, a);
  }

  Tensor add(const Tensor& a, const Tensor& b) { return binary(Elementwise::add, a, b); }
  Tensor sub(const Tensor& a, const Tensor& b) { return binary(Elementwise::sub, a, b); }
  Tensor mul(const Tensor& a, const Tensor& b) { return binary(Elementwise::mul, a, b); }
  Tensor relu(const Tensor& a) { return unary(Elementwise::relu, a); }
  Tensor sigmoid(const Tensor& a) { return unary(Elementwise::sigmoid, a); }
  Tensor log(const Tensor& a) { return unary(Elementwise::log, a); }
  Tensor exp(const Tensor& a) { return unary(Elementwise::exp, a); }
  Tensor square(const Tensor& a) { return unary(Elementwise::square, a); }
  Tensor neg(const Tensor& a) { return unary(Elementwise::neg, a); }
  Tensor log_sigmoid(const Tensor& a) { return unary(Elementwise::log_sigmoid, a); }

  /// Multiplication by a constant.
  Tensor scale(const Tensor& a, double factor) {
    Tensor out = Tensor::zeros(a.shape());
    auto x = a.values();
    auto y = out.values();
    for (std::size_t i = 0; i < x.size(); ++i) y[i] = x[i] * factor;
    finish(out, "scale");
    record(out, {a}, [a, out, factor]() mutable {
      auto g = out.grad();
      auto ga = a.mutable_grad();
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += factor * g[i];
    });
    return out;
  }

  // -- reductions -----------------------------------------------------------

  /// Reduces over `axis`, or over everything (giving shape [1]) when absent.
  /// max routes its gradient to the lowest-index maximizer; argmax is
  /// forward-only and returns indices stored as doubles.
  Tensor reduce(Reduction kind, const Tensor& a, std::optional<std::size_t> axis = std::nullopt) {
    std::size_t outer = 1, extent = a.size(), inner = 1;
    Shape out_shape{1};
    if (axis) {
      if (*axis >= a.rank()) {
        throw DimensionError("reduction axis " + std::to_string(*axis) + " out of range for rank " +
                             std::to_string(a.rank()));
      }
      const auto& s = a.shape();
      outer = 1;
      for (std::size_t i = 0; i < *axis; ++i) outer *= s[i];
      extent = s[*axis];
      inner = 1;
      for (std::size_t i = *axis + 1; i < s.size(); ++i) inner *= s[i];
      out_shape.clear();
      for (std::size_t i = 0; i < s.size(); ++i) {
        if (i != *axis) out_shape.push_back(s[i]);
      }
      if (out_shape.empty()) out_shape.push_back(1);
    }

    Tensor out = Tensor::zeros(out_shape);
    auto x = a.values();
    auto y = out.values();
    std::vector<std::size_t> winners;
    if (kind == Reduction::max || kind == Reduction::argmax) winners.resize(outer * inner);

    for (std::size_t o = 0; o < outer; ++o) {
      for (std::size_t in = 0; in < inner; ++in) {
        const std::size_t base = o * extent * inner + in;
        const std::size_t slot = o * inner + in;
        switch (kind) {
          case Reduction::sum:
          case Reduction::mean: {
            double acc = 0.0;
            for (std::size_t k = 0; k < extent; ++k) acc += x[base + k * inner];
            y[slot] = kind == Reduction::mean ? acc / static_cast<double>(extent) : acc;
            break;
          }
          case Reduction::max:
          case Reduction::argmax: {
            std::size_t best = 0;
            for (std::size_t k = 1; k < extent; ++k) {
              if (x[base + k * inner] > x[base + best * inner]) best = k;
            }
            winners[slot] = best;
            y[slot] = kind == Reduction::max ? x[base + best * inner] : static_cast<double>(best);
            break;
          }
        }
      }
    }
    if (kind == Reduction::argmax) return out;
    finish(out, "reduce");

    record(out, {a}, [a, out, kind, outer, extent, inner, winners = std::move(winners)]() mutable {
      auto g = out.grad();
      auto ga = a.mutable_grad();
      for (std::size_t o = 0; o < outer; ++o) {
        for (std::size_t in = 0; in < inner; ++in) {
          const std::size_t base = o * extent * inner + in;
          const std::size_t slot = o * inner + in;
          if (kind == Reduction::max) {
            ga[base + winners[slot] * inner] += g[slot];
            continue;
          }
          const double d = kind == Reduction::mean ? g[slot] / static_cast<double>(extent) : g[slot];
          for (std::size_t k = 0; k < extent; ++k) ga[base + k * inner] += d;
        }
      }
    });
    return out;
  }

  Tensor sum(const Tensor& a, std::optional<std::size_t> axis = std::nullopt) {
    return reduce(Reduction::sum, a, axis);
  }
  Tensor mean(const Tensor& a, std::optional<std::size_t> axis = std::nullopt) {
    return reduce(Reduction::mean, a, axis);
  }
  Tensor max(const Tensor& a, std::optional<std::size_t> axis = std::nullopt) {
    return reduce(Reduction::max, a, axis);
  }
  Tensor argmax(const Tensor& a, std::optional<std::size_t> axis = std::nullopt) {
    return reduce(Reduction::argmax, a, axis);
  }

  // -- row-structured ops ---------------------------------------------------

  /// log-softmax over the last axis via log-sum-exp.
  Tensor log_softmax(const Tensor& a) {
    const std::size_t rows = a.rows(), cols = a.cols();
    Tensor out = Tensor::zeros(a.shape());
    auto x = a.values();
    auto y = out.values();
    for (std::size_t r = 0; r < rows; ++r) {
      const double* xr = x.data() + r * cols;
      double m = *std::max_element(xr, xr + cols);
      double s = 0.0;
      for (std::size_t c = 0; c < cols; ++c) s += std::exp(xr[c] - m);
      const double lse = m + std::log(s);
      for (std::size_t c = 0; c < cols; ++c) y[r * cols + c] = xr[c] - lse;
    }
    finish(out, "log_softmax");
    record(out, {a}, [a, out, rows, cols]() mutable {
      auto g = out.grad();
      auto y = out.values();
      auto ga = a.mutable_grad();
      for (std::size_t r = 0; r < rows; ++r) {
        double gs = 0.0;
        for (std::size_t c = 0; c < cols; ++c) gs += g[r * cols + c];
        for (std::size_t c = 0; c < cols; ++c) {
          const std::size_t i = r * cols + c;
          ga[i] += g[i] - std::exp(y[i]) * gs;
        }
      }
    });
    return out;
  }

  /// Columns [begin, end) of a matrix.
  Tensor slice_cols(const Tensor& a, std::size_t begin, std::size_t end) {
    if (a.rank() != 2 || begin >= end || end > a.cols()) {
      throw DimensionError("slice_cols [" + std::to_string(begin) + "," + std::to_string(end) +
                           ") invalid for " + shape_string(a.shape()));
    }
    const std::size_t rows = a.rows(), cols = a.cols(), width = end - begin;
    Tensor out = Tensor::zeros({rows, width});
    auto x = a.values();
    auto y = out.values();
    for (std::size_t r = 0; r < rows; ++r) {
      std::copy_n(x.data() + r * cols + begin, width, y.data() + r * width);
    }
    record(out, {a}, [a, out, rows, cols, begin, width]() mutable {
      auto g = out.grad();
      auto ga = a.mutable_grad();
      for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t c = 0; c < width; ++c) ga[r * cols + begin + c] += g[r * width + c];
      }
    });
    return out;
  }

  /// Horizontal concatenation of matrices with equal row counts.
  Tensor concat_cols(const std::vector<Tensor>& parts) {
    if (parts.empty()) throw DimensionError("concat_cols of nothing");
    const std::size_t rows = parts.front().rows();
    std::size_t width = 0;
    for (const auto& p : parts) {
      if (p.rank() != 2 || p.rows() != rows) {
        throw DimensionError("concat_cols row mismatch at " + shape_string(p.shape()));
      }
      width += p.cols();
    }
    if (parts.size() == 1) return parts.front();
    Tensor out = Tensor::zeros({rows, width});
    auto y = out.values();
    std::size_t offset = 0;
    for (const auto& p : parts) {
      auto x = p.values();
      const std::size_t pc = p.cols();
      for (std::size_t r = 0; r < rows; ++r) {
        std::copy_n(x.data() + r * pc, pc, y.data() + r * width + offset);
      }
      offset += pc;
    }
    record(out, parts, [parts, out, rows, width]() mutable {
      auto g = out.grad();
      std::size_t offset = 0;
      for (auto& p : parts) {
        const std::size_t pc = p.cols();
        if (p.requires_grad()) {
          auto gp = p.mutable_grad();
          for (std::size_t r = 0; r < rows; ++r) {
            for (std::size_t c = 0; c < pc; ++c) gp[r * pc + c] += g[r * width + offset + c];
          }
        }
        offset += pc;
      }
    });
    return out;
  }

  // -- backward -------------------------------------------------------------

  /// Seeds d(loss)/d(loss) = 1 and replays the tape in reverse. Gradients of
  /// leaf tensors accumulate into whatever their slots already hold.
  void backward(const Tensor& loss) {
    if (consumed_) throw StateError("backward called twice on the same tape");
    if (loss.size() != 1) {
      throw DimensionError("backward needs a scalar loss, got " + shape_string(loss.shape()));
    }
    consumed_ = true;
    if (!loss.requires_grad()) return;
    Tensor seed = loss;
    seed.ensure_grad();
    seed.mutable_grad()[0] += 1.0;
    for (auto it = records_.rbegin(); it != records_.rend(); ++it) {
      if (!it->output.has_grad()) continue;
      it->propagate();
    }
  }

 private:
  struct Record {
    Tensor output;
    std::function<void()> propagate;
  };

  Tensor unary(Elementwise kind, const Tensor& a) {
    Tensor out = Tensor::zeros(a.shape());
    auto x = a.values();
    auto y = out.values();
    for (std::size_t i = 0; i < x.size(); ++i) {
      const double v = x[i];
      switch (kind) {
        case Elementwise::relu: y[i] = v > 0.0 ? v : 0.0; break;
        case Elementwise::sigmoid: y[i] = stable_sigmoid(v); break;
        case Elementwise::log:
          if (!(v > 0.0)) throw DomainError("log of nonpositive value " + std::to_string(v));
          y[i] = std::log(v);
          break;
        case Elementwise::exp: y[i] = std::exp(v); break;
        case Elementwise::square: y[i] = v * v; break;
        case Elementwise::neg: y[i] = -v; break;
        case Elementwise::log_sigmoid: y[i] = stable_log_sigmoid(v); break;
        default: throw DomainError(std::string("not a unary kind: ") + to_string(kind));
      }
    }
    finish(out, to_string(kind));
    record(out, {a}, [a, out, kind]() mutable {
      auto g = out.grad();
      auto x = a.values();
      auto y = out.values();
      auto ga = a.mutable_grad();
      for (std::size_t i = 0; i < g.size(); ++i) {
        double d = 0.0;
        switch (kind) {
          case Elementwise::relu: d = x[i] > 0.0 ? 1.0 : 0.0; break;
          case Elementwise::sigmoid: d = y[i] * (1.0 - y[i]); break;
          case Elementwise::log: d = 1.0 / x[i]; break;
          case Elementwise::exp: d = y[i]; break;
          case Elementwise::square: d = 2.0 * x[i]; break;
          case Elementwise::neg: d = -1.0; break;
          case Elementwise::log_sigmoid: d = stable_sigmoid(-x[i]); break;
          default: break;
        }
        ga[i] += d * g[i];
      }
    });
    return out;
  }

  Tensor binary(Elementwise kind, const Tensor& a, const Tensor& b) {
    const bool same = a.shape() == b.shape();
    const bool bias = !same && b.rank() == 1 && b.size() == a.cols();
    if (!same && !bias) {
      throw DimensionError(std::string("elementwise ") + to_string(kind) + " shape mismatch: " +
                           shape_string(a.shape()) + " vs " + shape_string(b.shape()));
    }
    const std::size_t cols = a.cols();
    Tensor out = Tensor::zeros(a.shape());
    auto x = a.values();
    auto z = b.values();
    auto y = out.values();
    for (std::size_t i = 0; i < x.size(); ++i) {
      const double bv = z[same ? i : i % cols];
      switch (kind) {
        case Elementwise::add: y[i] = x[i] + bv; break;
        case Elementwise::sub: y[i] = x[i] - bv; break;
        case Elementwise::mul: y[i] = x[i] * bv; break;
        default: break;
      }
    }
    finish(out, to_string(kind));
    record(out, {a, b}, [a, b, out, kind, same, cols]() mutable {
      auto g = out.grad();
      auto x = a.values();
      auto z = b.values();
      if (a.requires_grad()) {
        auto ga = a.mutable_grad();
        for (std::size_t i = 0; i < g.size(); ++i) {
          ga[i] += kind == Elementwise::mul ? g[i] * z[same ? i : i % cols] : g[i];
        }
      }
      if (b.requires_grad()) {
        auto gb = b.mutable_grad();
        for (std::size_t i = 0; i < g.size(); ++i) {
          const std::size_t j = same ? i : i % cols;
          switch (kind) {
            case Elementwise::add: gb[j] += g[i]; break;
            case Elementwise::sub: gb[j] -= g[i]; break;
            case Elementwise::mul: gb[j] += g[i] * x[i]; break;
            default: break;
          }
        }
      }
    });
    return out;
  }

  void finish(const Tensor& out, const char* op) const {
    if (!check_finite_) return;
    for (double v : out.values()) {
      if (!std::isfinite(v)) throw NumericError(std::string("non-finite value produced by ") + op);
    }
  }

  void record(Tensor& out, const std::vector<Tensor>& inputs, std::function<void()> propagate) {
    if (!recording_) return;
    const bool any = std::any_of(inputs.begin(), inputs.end(), [](const Tensor& t) { return t.requires_grad(); });
    if (!any) return;
    if (consumed_) throw StateError("recording on a tape that already ran backward");
    out.set_requires_grad(true);
    records_.push_back(Record{out, std::move(propagate)});
  }

  std::vector<Record> records_;
  bool recording_ = true;
  bool consumed_ = false;
#ifdef NDEBUG
  bool check_finite_ = false;
#else
  bool check_finite_ = true;
#endif
};

}  // namespace rfcl
