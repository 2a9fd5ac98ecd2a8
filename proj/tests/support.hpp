#pragma once

// Independent reference implementations used as test oracles. Nothing here
// calls into the engine's math; it only reads tensors and parameters.

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <vector>

#include "rfcl/cka.hpp"
#include "rfcl/model.hpp"
#include "rfcl/tensor.hpp"

namespace rfcl::testing {

inline Tensor random_tensor(const Shape& shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0,
                            bool requires_grad = false) {
  std::uniform_real_distribution<double> u(lo, hi);
  std::vector<double> v(shape_size(shape));
  for (auto& x : v) x = u(rng);
  return Tensor(shape, std::move(v), requires_grad);
}

inline std::vector<double> naive_matmul(const std::vector<double>& a, const std::vector<double>& b, std::size_t m,
                                        std::size_t k, std::size_t n) {
  std::vector<double> c(m * n, 0.0);
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      double s = 0.0;
      for (std::size_t p = 0; p < k; ++p) s += a[i * k + p] * b[p * n + j];
      c[i * n + j] = s;
    }
  }
  return c;
}

/// Per-layer pre-activations and post-ReLU outputs computed with plain loops.
struct LoopForward {
  std::vector<std::vector<double>> pre;   // encoder pre-activations
  std::vector<std::vector<double>> post;  // encoder outputs
  std::vector<double> logits;
};

inline LoopForward loop_forward(const Model& model, const std::vector<double>& x, std::size_t batch) {
  LoopForward out;
  std::vector<double> h = x;
  std::size_t width = model.spec().input_dim;
  auto affine = [&](const Linear& l, const std::vector<double>& in, std::size_t in_w) {
    const std::size_t out_w = l.out_dim();
    std::vector<double> z(batch * out_w);
    for (std::size_t r = 0; r < batch; ++r) {
      for (std::size_t j = 0; j < out_w; ++j) {
        double s = l.bias[j];
        for (std::size_t p = 0; p < in_w; ++p) s += in[r * in_w + p] * l.weight.at(p, j);
        z[r * out_w + j] = s;
      }
    }
    return z;
  };
  for (const auto& layer : model.layers()) {
    auto z = affine(layer, h, width);
    out.pre.push_back(z);
    for (auto& v : z) v = v > 0.0 ? v : 0.0;
    out.post.push_back(z);
    h = std::move(z);
    width = layer.out_dim();
  }
  const std::size_t total = model.head().width();
  out.logits.assign(batch * total, 0.0);
  std::size_t col = 0;
  for (const auto& block : model.head().blocks()) {
    const auto z = affine(block, h, width);
    const std::size_t w = block.out_dim();
    for (std::size_t r = 0; r < batch; ++r) {
      for (std::size_t j = 0; j < w; ++j) out.logits[r * total + col + j] = z[r * w + j];
    }
    col += w;
  }
  return out;
}

inline double min_abs_preactivation(const Model& model, const std::vector<double>& x, std::size_t batch) {
  double m = INFINITY;
  for (const auto& z : loop_forward(model, x, batch).pre) {
    for (double v : z) m = std::min(m, std::abs(v));
  }
  return m;
}

/// Relative error |a-b| / max(|a|, |b|, floor).
inline double relative_error(double a, double b, double floor = 1e-6) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), floor});
}

/// Largest relative error between analytic gradients (already stored on the
/// parameters) and central differences of `loss` with step h.
inline double max_fd_error(const std::vector<Tensor>& params, const std::function<double()>& loss, double h = 1e-5) {
  double worst = 0.0;
  for (const auto& p : params) {
    const auto analytic = p.grad_or_zeros();
    Tensor handle = p;
    auto v = handle.values();
    for (std::size_t i = 0; i < v.size(); ++i) {
      const double saved = v[i];
      v[i] = saved + h;
      const double up = loss();
      v[i] = saved - h;
      const double down = loss();
      v[i] = saved;
      worst = std::max(worst, relative_error(analytic[i], (up - down) / (2.0 * h)));
    }
  }
  return worst;
}

/// Global forgetting as a literal double sum over 1-based indices.
inline double oracle_global_forgetting(const std::vector<std::size_t>& sizes,
                                       const std::vector<std::vector<double>>& R) {
  const std::size_t N = sizes.size();
  double outer = 0;
  for (std::size_t i = 2; i <= N; ++i) {
    double seen = 0;
    for (std::size_t k = 1; k <= i; ++k) seen += static_cast<double>(sizes[k - 1]);
    for (std::size_t n = 1; n <= i - 1; ++n) {
      outer += (static_cast<double>(sizes[n - 1]) / seen) * (R[n - 1][n - 1] - R[i - 1][n - 1]);
    }
  }
  return outer / static_cast<double>(N - 1);
}

/// Local forgetting, negated so that a drop is positive.
inline double oracle_local_forgetting(const std::vector<std::vector<double>>& A) {
  const std::size_t N = A.size();
  double s = 0;
  for (std::size_t n = 1; n <= N - 1; ++n) s += A[N - 1][n - 1] - A[n - 1][n - 1];
  return -s / static_cast<double>(N - 1);
}

/// tr(K H L H) with explicit Gram matrices and H = I - 11^T/n.
inline double oracle_hsic(const ActivationMatrix& x, const ActivationMatrix& y) {
  const std::size_t n = x.rows;
  auto gram = [n](const ActivationMatrix& a) {
    std::vector<double> k(n * n, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j < n; ++j) {
        for (std::size_t c = 0; c < a.cols; ++c) k[i * n + j] += a.values[i * a.cols + c] * a.values[j * a.cols + c];
      }
    }
    return k;
  };
  const auto k = gram(x);
  const auto l = gram(y);
  const double inv = 1.0 / static_cast<double>(n);
  std::vector<double> kc(n * n);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      double s = 0;
      for (std::size_t a = 0; a < n; ++a) {
        for (std::size_t b = 0; b < n; ++b) s += ((i == a) - inv) * k[a * n + b] * ((b == j) - inv);
      }
      kc[i * n + j] = s;
    }
  }
  double tr = 0;
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) tr += kc[i * n + j] * l[j * n + i];
  }
  return tr;
}

inline double oracle_linear_cka(const ActivationMatrix& x, const ActivationMatrix& y) {
  return oracle_hsic(x, y) / std::sqrt(oracle_hsic(x, x) * oracle_hsic(y, y));
}

inline ActivationMatrix random_activations(std::size_t rows, std::size_t cols, std::mt19937_64& rng) {
  std::normal_distribution<double> n(0, 1);
  ActivationMatrix a;
  a.rows = rows;
  a.cols = cols;
  a.values.resize(rows * cols);
  for (auto& v : a.values) v = n(rng);
  a.tap = "t";
  return a;
}

/// Right-multiplies an activation matrix by a square or rectangular matrix.
inline ActivationMatrix right_multiply(const ActivationMatrix& a, const std::vector<double>& q, std::size_t q_cols) {
  ActivationMatrix out = a;
  out.cols = q_cols;
  out.values.assign(a.rows * q_cols, 0.0);
  for (std::size_t r = 0; r < a.rows; ++r) {
    for (std::size_t c = 0; c < q_cols; ++c) {
      for (std::size_t k = 0; k < a.cols; ++k) out.values[r * q_cols + c] += a.values[r * a.cols + k] * q[k * q_cols + c];
    }
  }
  return out;
}

/// Random orthogonal matrix from Gram-Schmidt on Gaussian columns, row-major.
inline std::vector<double> random_orthogonal(std::size_t n, std::mt19937_64& rng) {
  std::normal_distribution<double> d(0, 1);
  std::vector<std::vector<double>> cols(n, std::vector<double>(n));
  for (std::size_t j = 0; j < n; ++j) {
    for (auto& v : cols[j]) v = d(rng);
    for (int pass = 0; pass < 2; ++pass) {
      for (std::size_t k = 0; k < j; ++k) {
        double dot = 0;
        for (std::size_t i = 0; i < n; ++i) dot += cols[j][i] * cols[k][i];
        for (std::size_t i = 0; i < n; ++i) cols[j][i] -= dot * cols[k][i];
      }
    }
    double norm = 0;
    for (double v : cols[j]) norm += v * v;
    norm = std::sqrt(norm);
    for (auto& v : cols[j]) v /= norm;
  }
  std::vector<double> q(n * n);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) q[i * n + j] = cols[j][i];
  }
  return q;
}

}  // namespace rfcl::testing
