#pragma once

#include <optional>

#include "collapse/types.hpp"
#include "collapse/ufm.hpp"

namespace collapse {

/// Moore-Penrose pseudoinverse via SVD, truncating singular values below
/// tol * sigma_max. Throws DegenerateStats when the matrix is exactly zero.
template <typename Scalar>
Matrix<Scalar> pseudo_inverse(const Matrix<Scalar>& m,
                              Scalar tol = Scalar(1e-10)) {
  if (!(tol > Scalar(0)))
    throw std::invalid_argument("pseudo_inverse: tol must be positive");
  Eigen::JacobiSVD<Matrix<Scalar>> svd(
      m, Eigen::ComputeThinU | Eigen::ComputeThinV);
  const auto& sv = svd.singularValues();
  const Scalar smax = sv.size() > 0 ? sv(0) : Scalar(0);
  if (!(smax > Scalar(0)))
    throw DegenerateStats("pseudo_inverse: zero matrix has no usable range");
  Vector<Scalar> inv = Vector<Scalar>::Zero(sv.size());
  for (Index i = 0; i < sv.size(); ++i)
    if (sv(i) > tol * smax) inv(i) = Scalar(1) / sv(i);
  return svd.matrixV() * inv.asDiagonal() * svd.matrixU().transpose();
}

/// tr(Sigma_W) / tr(Sigma_B). The variational collapse measure that the
/// monotone flow results speak about.
template <typename Scalar>
Scalar nc1_tilde(const ClassStats<Scalar>& stats) {
  const Scalar tr_b = stats.sigma_b.trace();
  if (!(tr_b > Scalar(0)))
    throw DegenerateStats("nc1_tilde: tr(Sigma_B) = 0, all class means "
                          "coincide");
  return stats.sigma_w.trace() / tr_b;
}

/// (1/K) tr(Sigma_W pinv(Sigma_B)), the Fisher-style collapse measure.
template <typename Scalar>
Scalar nc1_fisher(const ClassStats<Scalar>& stats,
                  Scalar pinv_tol = Scalar(1e-10)) {
  if (!(stats.sigma_b.cwiseAbs().maxCoeff() > Scalar(0)))
    throw DegenerateStats("nc1_fisher: Sigma_B = 0");
  const Matrix<Scalar> pinv = pseudo_inverse(stats.sigma_b, pinv_tol);
  return (stats.sigma_w * pinv).trace() / Scalar(stats.K);
}

/// Per-class split of nc1_fisher: entry k is (1/K) tr(Cov_k pinv(Sigma_B))
/// with Cov_k the within covariance of class k. Its mean is nc1_fisher
/// exactly because Sigma_W is the mean of the Cov_k.
template <typename Scalar>
Vector<Scalar> nc1_per_class(const ClassStats<Scalar>& stats,
                             Scalar pinv_tol = Scalar(1e-10)) {
  if (!(stats.sigma_b.cwiseAbs().maxCoeff() > Scalar(0)))
    throw DegenerateStats("nc1_per_class: Sigma_B = 0");
  const Matrix<Scalar> pinv = pseudo_inverse(stats.sigma_b, pinv_tol);
  Vector<Scalar> out(stats.K);
  for (Index k = 0; k < stats.K; ++k)
    out(k) = (stats.class_covs[static_cast<std::size_t>(k)] * pinv).trace() /
             Scalar(stats.K);
  return out;
}

namespace detail {

/// Frobenius distance between M normalized to unit Frobenius norm and the
/// unit-norm centered identity (1/sqrt(K-1)) (I - 11^T/K).
template <typename Scalar>
Scalar etf_distance(const Matrix<Scalar>& m, Index K, const char* who) {
  if (K < 2)
    throw std::invalid_argument(std::string(who) + ": needs K >= 2 classes");
  const Scalar nrm = m.norm();
  if (!(nrm > Scalar(0))) throw DegenerateStats(std::string(who) + ": zero matrix");
  Matrix<Scalar> target = Matrix<Scalar>::Constant(K, K, Scalar(-1) / Scalar(K));
  target.diagonal().array() += Scalar(1);
  target /= std::sqrt(Scalar(K - 1));
  return (m / nrm - target).norm();
}

}  // namespace detail

/// Distance of the centered class-mean Gram from the simplex
/// equiangular-tight-frame Gram, both at unit Frobenius norm.
template <typename Scalar>
Scalar nc2(const ClassStats<Scalar>& stats) {
  const Matrix<Scalar> centered =
      stats.class_means.colwise() - stats.global_mean;
  const Matrix<Scalar> gram = centered.transpose() * centered;
  return detail::etf_distance(gram, stats.K, "nc2");
}

/// Distance of W (Hbar - global 1^T), normalized, from the unit-norm simplex
/// frame. Measures classifier/mean-feature alignment.
template <typename Scalar>
Scalar nc3(const Matrix<Scalar>& w, const ClassStats<Scalar>& stats) {
  if (w.cols() != stats.class_means.rows() || w.rows() != stats.K)
    throw ShapeError("nc3: W must be K x d matching the statistics");
  const Matrix<Scalar> centered =
      stats.class_means.colwise() - stats.global_mean;
  const Matrix<Scalar> m = w * centered;
  return detail::etf_distance(m, stats.K, "nc3");
}

/// One row of a verification table: every collapse metric at one point of a
/// trajectory or sweep. nc3 stays empty when no classifier is in play.
template <typename Scalar>
struct MetricReport {
  long step{0};
  Scalar t{0};
  Scalar nc1_tilde{0};
  Scalar nc1_fisher{0};
  Vector<Scalar> nc1_per_class;
  Scalar nc2{0};
  std::optional<Scalar> nc3;
  Scalar tr_sw{0};
  Scalar tr_sb{0};
};

template <typename Scalar>
MetricReport<Scalar> compute_metrics(const ClassStats<Scalar>& stats,
                                     Scalar pinv_tol = Scalar(1e-10)) {
  MetricReport<Scalar> r;
  r.nc1_tilde = nc1_tilde(stats);
  r.nc1_fisher = nc1_fisher(stats, pinv_tol);
  r.nc1_per_class = nc1_per_class(stats, pinv_tol);
  r.nc2 = nc2(stats);
  r.tr_sw = stats.sigma_w.trace();
  r.tr_sb = stats.sigma_b.trace();
  return r;
}

template <typename Scalar>
MetricReport<Scalar> compute_metrics(const ClassStats<Scalar>& stats,
                                     const Matrix<Scalar>& w,
                                     Scalar pinv_tol = Scalar(1e-10)) {
  MetricReport<Scalar> r = compute_metrics(stats, pinv_tol);
  r.nc3 = nc3(w, stats);
  return r;
}

}  // namespace collapse
