#pragma once

#include <cmath>
#include <vector>

#include "collapse/types.hpp"

namespace collapse {

/// Y = I_K kron 1_n^T, the K x (K*n) one-hot label matrix.
template <typename Scalar>
Matrix<Scalar> build_label_matrix(const Dims& dims) {
  validate(dims);
  Matrix<Scalar> y = Matrix<Scalar>::Zero(dims.K, dims.samples());
  for (Index k = 0; k < dims.K; ++k)
    y.row(k).segment(k * dims.n, dims.n).setOnes();
  return y;
}

/// 1/(2Kn) ||WH - Y||_F^2 + lw/(2K) ||W||_F^2 + lh/(2Kn) ||H||_F^2.
template <typename Scalar>
Scalar objective_plain(const Matrix<Scalar>& w, const Matrix<Scalar>& h,
                       const ModelParams<Scalar>& p) {
  check_weight_shape(w, p.dims);
  check_feature_shape(h, p.dims);
  const Scalar kn = Scalar(p.dims.K) * Scalar(p.dims.n);
  const Matrix<Scalar> fit = w * h - build_label_matrix<Scalar>(p.dims);
  return fit.squaredNorm() / (2 * kn) +
         p.lambda_w * w.squaredNorm() / (2 * Scalar(p.dims.K)) +
         p.lambda_h * h.squaredNorm() / (2 * kn);
}

/// Plain objective plus the vicinity term beta/(2Kn) ||H - H0||_F^2.
/// With H0 = 0 this is the plain objective with lh replaced by lh + beta.
template <typename Scalar>
Scalar objective_prox(const Matrix<Scalar>& w, const Matrix<Scalar>& h,
                      const Matrix<Scalar>& h0, const ModelParams<Scalar>& p) {
  check_feature_shape(h0, p.dims);
  const Scalar kn = Scalar(p.dims.K) * Scalar(p.dims.n);
  return objective_plain(w, h, p) + p.beta * (h - h0).squaredNorm() / (2 * kn);
}

/// Per-class means and the covariance split of a feature matrix.
/// sigma_t_tilde = sigma_w + sigma_b_tilde holds by construction.
template <typename Scalar>
struct ClassStats {
  Index K{0};
  Index n{0};
  Matrix<Scalar> class_means;               // d x K
  Vector<Scalar> global_mean;               // d
  Matrix<Scalar> sigma_w;                   // within-class, d x d
  Matrix<Scalar> sigma_b;                   // between-class (centered), d x d
  Matrix<Scalar> sigma_t_tilde;             // (1/Kn) H H^T, d x d
  Matrix<Scalar> sigma_b_tilde;             // (1/K) Hbar Hbar^T, d x d
  std::vector<Matrix<Scalar>> class_covs;   // per-class within covariances
};

template <typename Scalar>
ClassStats<Scalar> class_statistics(const Matrix<Scalar>& h, const Dims& dims) {
  check_feature_shape(h, dims);
  const Index K = dims.K, n = dims.n, d = dims.d;
  const Scalar kn = Scalar(K) * Scalar(n);

  ClassStats<Scalar> s;
  s.K = K;
  s.n = n;
  s.class_means.resize(d, K);
  s.class_covs.reserve(static_cast<std::size_t>(K));
  s.sigma_w = Matrix<Scalar>::Zero(d, d);
  for (Index k = 0; k < K; ++k) {
    const auto block = h.middleCols(k * n, n);
    s.class_means.col(k) = block.rowwise().mean();
    const Matrix<Scalar> dev = block.colwise() - s.class_means.col(k);
    Matrix<Scalar> cov = dev * dev.transpose() / Scalar(n);
    s.sigma_w += cov;
    s.class_covs.push_back(std::move(cov));
  }
  s.sigma_w /= Scalar(K);
  s.global_mean = s.class_means.rowwise().mean();
  const Matrix<Scalar> centered = s.class_means.colwise() - s.global_mean;
  s.sigma_b = centered * centered.transpose() / Scalar(K);
  s.sigma_t_tilde = h * h.transpose() / kn;
  s.sigma_b_tilde = s.class_means * s.class_means.transpose() / Scalar(K);
  return s;
}

/// Ridge-optimal classifier for fixed features:
/// W*(H) = Y H^T (H H^T + n*lw*I)^(-1), computed by an SPD solve.
template <typename Scalar>
Matrix<Scalar> optimal_weights(const Matrix<Scalar>& h,
                               const ModelParams<Scalar>& p) {
  check_feature_shape(h, p.dims);
  if (!(p.lambda_w > Scalar(0)))
    throw std::invalid_argument("optimal_weights: lambda_w must be positive");
  const Index d = p.dims.d, K = p.dims.K, n = p.dims.n;
  // Y H^T has column k equal to the class-k column sum of H.
  Matrix<Scalar> yht(d, K);
  for (Index k = 0; k < K; ++k)
    yht.col(k) = h.middleCols(k * n, n).rowwise().sum();
  Matrix<Scalar> gram = h * h.transpose();
  gram.diagonal().array() += Scalar(n) * p.lambda_w;
  return gram.llt().solve(yht).transpose();
}

/// Analytic global minimizer of the plain objective for c < 1:
/// H* = sqrt(rho) R kron 1_n^T, W* = sqrt(lh/lw) sqrt(rho) R^T,
/// rho = (1 - c) sqrt(lw/lh), R any d x K matrix with orthonormal columns.
template <typename Scalar>
struct CollapsedMinimizer {
  Matrix<Scalar> W_star;  // K x d
  Matrix<Scalar> H_star;  // d x (K*n)
  Matrix<Scalar> R;       // d x K, orthonormal columns
  Scalar rho{0};
};

/// R is the orthonormalization of a seeded Gaussian d x K matrix, with each
/// column sign-fixed so its largest-magnitude entry is positive. Same seed,
/// same R, bit for bit.
template <typename Scalar>
CollapsedMinimizer<Scalar> collapsed_minimizer(const ModelParams<Scalar>& p,
                                               std::uint64_t seed) {
  validate(p);
  const Index d = p.dims.d, K = p.dims.K, n = p.dims.n;
  if (K < 2)
    throw std::invalid_argument("collapsed_minimizer: needs K >= 2 classes");
  if (d < K)
    throw std::invalid_argument("collapsed_minimizer: needs d >= K");
  if (!(p.lambda_h > Scalar(0)))
    throw std::invalid_argument(
        "collapsed_minimizer: lambda_h must be positive");
  const Scalar c = p.c();
  if (!(c < Scalar(1)))
    throw DegenerateModel(
        "collapsed_minimizer: c = sqrt(lh*lw) >= 1, the only minimizer is "
        "(0, 0) and no collapse geometry exists");

  std::mt19937_64 rng(seed);
  const Matrix<Scalar> g = gaussian<Scalar>(d, K, rng);
  Eigen::HouseholderQR<Matrix<Scalar>> qr(g);
  Matrix<Scalar> r = qr.householderQ() * Matrix<Scalar>::Identity(d, K);
  for (Index k = 0; k < K; ++k) {
    Index imax = 0;
    r.col(k).cwiseAbs().maxCoeff(&imax);
    if (r(imax, k) < Scalar(0)) r.col(k) = -r.col(k);
  }

  CollapsedMinimizer<Scalar> m;
  m.rho = (Scalar(1) - c) * std::sqrt(p.lambda_w / p.lambda_h);
  m.R = r;
  const Scalar sr = std::sqrt(m.rho);
  m.H_star.resize(d, K * n);
  for (Index k = 0; k < K; ++k)
    m.H_star.middleCols(k * n, n).colwise() = (sr * r.col(k)).eval();
  m.W_star = std::sqrt(p.lambda_h / p.lambda_w) * sr * r.transpose();
  return m;
}

/// Diagnostics of the collapse-structure test. rho_hat is the least-squares
/// fit of the centered class-mean Gram to rho (I - 11^T/K), i.e.
/// tr(Gram) / (K - 1); equivalently the mean Gram diagonal rescaled by
/// K/(K-1), since that target matrix has diagonal rho (1 - 1/K).
template <typename Scalar>
struct CollapseDiagnostics {
  bool collapsed{false};
  bool within_class_ok{false};
  bool gram_ok{false};
  Scalar rho_hat{0};
  Scalar max_within_dev{0};  // worst ||h_ki - mean_k|| / (1 + ||mean_k||)
  Scalar max_gram_dev{0};    // worst |Gram - rho_hat target| / (1 + rho_hat)
};

/// True iff (a) every column sits on its class mean within
/// tol * (1 + ||mean||) and (b) the centered class-mean Gram equals
/// rho_hat (I - 11^T/K) entrywise within tol * (1 + rho_hat), rho_hat > 0.
template <typename Scalar>
CollapseDiagnostics<Scalar> collapse_diagnostics(const Matrix<Scalar>& h,
                                                 const Dims& dims,
                                                 Scalar tol = Scalar(1e-8)) {
  if (!(tol > Scalar(0)))
    throw std::invalid_argument("collapse_diagnostics: tol must be positive");
  if (dims.K < 2)
    throw std::invalid_argument("collapse_diagnostics: needs K >= 2 classes");
  const ClassStats<Scalar> s = class_statistics(h, dims);
  const Index K = dims.K, n = dims.n;

  CollapseDiagnostics<Scalar> diag;
  for (Index k = 0; k < K; ++k) {
    const Scalar scale = Scalar(1) + s.class_means.col(k).norm();
    for (Index i = 0; i < n; ++i) {
      const Scalar dev =
          (h.col(k * n + i) - s.class_means.col(k)).norm() / scale;
      diag.max_within_dev = std::max(diag.max_within_dev, dev);
    }
  }
  diag.within_class_ok = diag.max_within_dev <= tol;

  const Matrix<Scalar> centered = s.class_means.colwise() - s.global_mean;
  const Matrix<Scalar> gram = centered.transpose() * centered;
  diag.rho_hat = gram.trace() / Scalar(K - 1);
  Matrix<Scalar> target =
      Matrix<Scalar>::Constant(K, K, -diag.rho_hat / Scalar(K));
  target.diagonal().array() += diag.rho_hat;
  diag.max_gram_dev =
      (gram - target).cwiseAbs().maxCoeff() / (Scalar(1) + diag.rho_hat);
  diag.gram_ok = diag.rho_hat > Scalar(0) && diag.max_gram_dev <= tol;

  diag.collapsed = diag.within_class_ok && diag.gram_ok;
  return diag;
}

template <typename Scalar>
bool is_collapsed(const Matrix<Scalar>& h, const Dims& dims,
                  Scalar tol = Scalar(1e-8)) {
  return collapse_diagnostics(h, dims, tol).collapsed;
}

}  // namespace collapse
