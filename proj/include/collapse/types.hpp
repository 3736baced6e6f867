#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>

namespace collapse {

using Index = Eigen::Index;

template <typename Scalar>
using Matrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;

template <typename Scalar>
using Vector = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

/// Thrown when matrix shapes disagree with the declared dimensions.
struct ShapeError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

/// Thrown when hyperparameters put the model in the regime where the only
/// minimizer is (0, 0) and no collapse geometry exists (c = sqrt(lh*lw) >= 1).
struct DegenerateModel : std::domain_error {
  using std::domain_error::domain_error;
};

/// Thrown when a statistic is undefined for the given features, e.g. a metric
/// that divides by tr(Sigma_B) when all class means coincide.
struct DegenerateStats : std::domain_error {
  using std::domain_error::domain_error;
};

/// Thrown by the flow integrator when step halving cannot restore the
/// monotone-decrease acceptance test. Signals integrator failure.
struct StepCollapse : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Thrown when an iterative solve must be trusted downstream but did not
/// reach its tolerance (e.g. a layer inside a stacked solve).
struct NoConvergence : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Problem dimensions: K classes, n samples per class, feature dimension d.
/// Features live in a d x (K*n) matrix with column k*n + i holding sample i
/// of class k (0-based). That column grouping is a structural contract; no
/// metadata tracks it.
struct Dims {
  Index K{0};
  Index n{0};
  Index d{0};

  Index samples() const { return K * n; }
  Index feature_size() const { return d * K * n; }

  friend bool operator==(const Dims& a, const Dims& b) {
    return a.K == b.K && a.n == b.n && a.d == b.d;
  }
};

/// Basic structural validity. Model-level requirements (K >= 2, d >= K) are
/// enforced by the operations that need them, since several structural
/// helpers and metrics are well defined without them.
inline void validate(const Dims& dims) {
  if (dims.K < 1 || dims.n < 1 || dims.d < 1)
    throw std::invalid_argument("dims: K, n, d must all be positive");
}

/// Hyperparameters of the regularized factorization model. c is derived on
/// demand and never stored.
template <typename Scalar>
struct ModelParams {
  Dims dims;
  Scalar lambda_w{1};
  Scalar lambda_h{0};
  Scalar beta{1};

  Scalar c() const { return std::sqrt(lambda_w * lambda_h); }

  friend bool operator==(const ModelParams& a, const ModelParams& b) {
    return a.dims == b.dims && a.lambda_w == b.lambda_w &&
           a.lambda_h == b.lambda_h && a.beta == b.beta;
  }
};

template <typename Scalar>
void validate(const ModelParams<Scalar>& p) {
  validate(p.dims);
  if (!(p.lambda_w > Scalar(0)))
    throw std::invalid_argument("params: lambda_w must be positive");
  if (!(p.lambda_h >= Scalar(0)))
    throw std::invalid_argument("params: lambda_h must be nonnegative");
  if (!(p.beta > Scalar(0)))
    throw std::invalid_argument("params: beta must be positive");
}

template <typename Scalar>
void check_feature_shape(const Matrix<Scalar>& h, const Dims& dims) {
  if (h.rows() != dims.d || h.cols() != dims.samples())
    throw ShapeError("feature matrix must be d x (K*n), got " +
                     std::to_string(h.rows()) + " x " +
                     std::to_string(h.cols()));
}

template <typename Scalar>
void check_weight_shape(const Matrix<Scalar>& w, const Dims& dims) {
  if (w.rows() != dims.K || w.cols() != dims.d)
    throw ShapeError("weight matrix must be K x d, got " +
                     std::to_string(w.rows()) + " x " +
                     std::to_string(w.cols()));
}

/// Standard-Gaussian matrix drawn in column-major order so a given generator
/// state always yields the same matrix.
template <typename Scalar>
Matrix<Scalar> gaussian(Index rows, Index cols, std::mt19937_64& rng) {
  std::normal_distribution<double> normal;
  Matrix<Scalar> m(rows, cols);
  for (Index j = 0; j < cols; ++j)
    for (Index i = 0; i < rows; ++i) m(i, j) = Scalar(normal(rng));
  return m;
}

/// Seeded feature-shaped Gaussian; the single entry point all random starts
/// and random inputs derive from.
template <typename Scalar>
Matrix<Scalar> seeded_features(const Dims& dims, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  return gaussian<Scalar>(dims.d, dims.samples(), rng);
}

}  // namespace collapse
