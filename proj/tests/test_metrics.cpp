#include <cmath>

#include "collapse/metrics.hpp"
#include "collapse/ufm.hpp"
#include "doctest.h"

using namespace collapse;
using Mat = Matrix<double>;
using Vec = Vector<double>;

namespace {

ModelParams<double> reference_params() {
  ModelParams<double> p;
  p.dims = {4, 10, 10};
  p.lambda_w = 2.0;
  p.lambda_h = 0.125;
  p.beta = 100.0;
  return p;
}

ClassStats<double> hand_stats() {
  Mat h(1, 4);
  h << 1, 3, -1, -3;
  return class_statistics(h, Dims{2, 2, 1});
}

// Simplex frame target used by nc2/nc3: (I - 11^T/K) / sqrt(K-1).
Mat etf_target(Index K) {
  Mat t = Mat::Identity(K, K) - Mat::Constant(K, K, 1.0 / double(K));
  return t / std::sqrt(double(K - 1));
}

}  // namespace

TEST_CASE("pseudo inverse matches SVD oracle and truncates rank") {
  Mat a(3, 3);
  a << 2, 0, 0, 0, 1e-14, 0, 0, 0, 0;  // rank 1 after relative truncation
  const Mat pinv = pseudo_inverse(a, 1e-10);
  Mat expect = Mat::Zero(3, 3);
  expect(0, 0) = 0.5;
  CHECK((pinv - expect).norm() < 1e-12);

  // Moore-Penrose identities on a random low-rank matrix.
  const Mat b = seeded_features<double>(Dims{2, 1, 4}, 3) *
                seeded_features<double>(Dims{2, 1, 4}, 4).transpose() / 4.0;
  const Mat bp = pseudo_inverse(Mat(b.transpose() * b));
  const Mat g = b.transpose() * b;
  CHECK((g * bp * g - g).norm() < 1e-12);
  CHECK((bp * g * bp - bp).norm() < 1e-12);

  CHECK_THROWS_AS(pseudo_inverse(Mat(Mat::Zero(2, 2))), DegenerateStats);
}

TEST_CASE("nc1 variants reproduce the hand example") {
  const auto s = hand_stats();
  CHECK(nc1_tilde(s) == doctest::Approx(0.25).epsilon(1e-14));
  CHECK(nc1_fisher(s) == doctest::Approx(0.125).epsilon(1e-14));
  const Vec per = nc1_per_class(s);
  REQUIRE(per.size() == 2);
  CHECK(per(0) == doctest::Approx(0.125).epsilon(1e-14));
  CHECK(per(1) == doctest::Approx(0.125).epsilon(1e-14));
}

TEST_CASE("nc1 is zero exactly at collapse") {
  const auto m = collapsed_minimizer(reference_params(), 0);
  const auto s = class_statistics(m.H_star, Dims{4, 10, 10});
  CHECK(nc1_tilde(s) < 1e-28);
  CHECK(nc1_fisher(s) < 1e-28);
  CHECK(nc1_per_class(s).maxCoeff() < 1e-28);
}

TEST_CASE("degenerate statistics are errors, not NaNs") {
  const Dims dims{2, 2, 3};
  const auto zero = class_statistics(Mat(Mat::Zero(3, 4)), dims);
  CHECK_THROWS_AS(nc1_tilde(zero), DegenerateStats);
  CHECK_THROWS_AS(nc1_fisher(zero), DegenerateStats);
  CHECK_THROWS_AS(nc1_per_class(zero), DegenerateStats);
  CHECK_THROWS_AS(nc2(zero), DegenerateStats);

  // Distinct per-class spread but coincident means: Sigma_B = 0.
  Mat h(3, 4);
  h.setZero();
  h(0, 0) = 1;
  h(0, 1) = -1;
  h(1, 2) = 2;
  h(1, 3) = -2;
  const auto coincident = class_statistics(h, dims);
  CHECK(coincident.sigma_b.norm() < 1e-15);
  CHECK_THROWS_AS(nc1_tilde(coincident), DegenerateStats);
  CHECK_THROWS_AS(nc1_fisher(coincident), DegenerateStats);
}

TEST_CASE("nc1_fisher equals the mean of the per-class split") {
  const Dims dims{3, 5, 6};
  for (std::uint64_t seed : {1ull, 2ull, 3ull}) {
    const auto s = class_statistics(seeded_features<double>(dims, seed), dims);
    CHECK(nc1_per_class(s).mean() ==
          doctest::Approx(nc1_fisher(s)).epsilon(1e-12));
  }
}

TEST_CASE("nc1_fisher handles rank-deficient Sigma_B like a brute-force pinv") {
  // K=2 means span a single direction, so Sigma_B has rank 1 in d=3.
  const Dims dims{2, 3, 3};
  const Mat h = seeded_features<double>(dims, 17);
  const auto s = class_statistics(h, dims);

  Eigen::JacobiSVD<Mat> svd(s.sigma_b,
                            Eigen::ComputeFullU | Eigen::ComputeFullV);
  const auto& sv = svd.singularValues();
  Mat inv_s = Mat::Zero(3, 3);
  for (Index i = 0; i < 3; ++i)
    if (sv(i) > 1e-10 * sv(0)) inv_s(i, i) = 1.0 / sv(i);
  const Mat brute = svd.matrixV() * inv_s * svd.matrixU().transpose();
  CHECK(std::abs(nc1_fisher(s) - (s.sigma_w * brute).trace() / 2.0) < 1e-13);
}

TEST_CASE("targeted noise shows up in the right per-class entry") {
  ModelParams<double> p = reference_params();
  const auto m = collapsed_minimizer(p, 5);
  Mat h = m.H_star;
  std::mt19937_64 rng(99);
  h.middleCols(0, p.dims.n) += 0.05 * gaussian<double>(p.dims.d, p.dims.n, rng);
  const Vec per = nc1_per_class(class_statistics(h, p.dims));
  for (Index k = 1; k < p.dims.K; ++k) CHECK(per(0) > per(k));
}

TEST_CASE("nc2 hand cases") {
  // Collapsed means: centered Gram proportional to I - 11^T/K.
  const auto m = collapsed_minimizer(reference_params(), 3);
  const auto s = class_statistics(m.H_star, Dims{4, 10, 10});
  CHECK(nc2(s) < 1e-12);

  // Two identical means give a zero centered Gram: degenerate input, not a
  // sqrt(2) distance (the uncentered 2x2 computation has no centered analog).
  Mat h(2, 2);
  h << 1, 1, 0, 0;
  const auto identical = class_statistics(h, Dims{2, 1, 2});
  CHECK_THROWS_AS(nc2(identical), DegenerateStats);
}

TEST_CASE("nc2 equals a brute-force evaluation on random means") {
  const Dims dims{4, 3, 6};
  const Mat h = seeded_features<double>(dims, 23);
  const auto s = class_statistics(h, dims);
  const Mat centered = s.class_means.colwise() - s.global_mean;
  const Mat gram = centered.transpose() * centered;
  const Mat diff = gram / gram.norm() - etf_target(dims.K);
  CHECK(nc2(s) == doctest::Approx(diff.norm()).epsilon(1e-12));
}

TEST_CASE("nc3 vanishes at the collapsed pair and matches brute force") {
  ModelParams<double> p = reference_params();
  const auto m = collapsed_minimizer(p, 4);
  const auto s = class_statistics(m.H_star, p.dims);
  CHECK(nc3(m.W_star, s) < 1e-12);

  const Mat w = seeded_features<double>(Dims{p.dims.d, 1, p.dims.K}, 31);
  const Mat centered = s.class_means.colwise() - s.global_mean;
  const Mat prod = w * centered;
  const Mat diff = prod / prod.norm() - etf_target(p.dims.K);
  CHECK(nc3(w, s) == doctest::Approx(diff.norm()).epsilon(1e-12));

  // Scale invariance in W.
  CHECK(nc3(Mat(5.0 * w), s) == doctest::Approx(nc3(w, s)).epsilon(1e-12));
}

TEST_CASE("nc1 metrics are invariant to translation and rotation") {
  const Dims dims{3, 4, 5};
  const Mat h = seeded_features<double>(dims, 8);
  const auto s = class_statistics(h, dims);

  Mat shifted = h;
  shifted.colwise() += Eigen::VectorXd::Constant(dims.d, 2.5);
  const auto s_shift = class_statistics(shifted, dims);
  CHECK(nc1_tilde(s_shift) == doctest::Approx(nc1_tilde(s)).epsilon(1e-10));
  CHECK(nc1_fisher(s_shift) == doctest::Approx(nc1_fisher(s)).epsilon(1e-10));

  std::mt19937_64 rng(12);
  Eigen::HouseholderQR<Mat> qr(gaussian<double>(dims.d, dims.d, rng));
  const Mat u = qr.householderQ() * Mat::Identity(dims.d, dims.d);
  const auto s_rot = class_statistics(Mat(u * h), dims);
  CHECK(nc1_tilde(s_rot) == doctest::Approx(nc1_tilde(s)).epsilon(1e-10));
  CHECK(nc1_fisher(s_rot) == doctest::Approx(nc1_fisher(s)).epsilon(1e-10));
}

TEST_CASE("nc2 and nc3 are invariant to positive rescaling") {
  const Dims dims{3, 4, 5};
  const Mat h = seeded_features<double>(dims, 14);
  const Mat w = seeded_features<double>(Dims{dims.d, 1, dims.K}, 15);
  const auto s = class_statistics(h, dims);
  const auto s2 = class_statistics(Mat(3.0 * h), dims);
  CHECK(nc2(s2) == doctest::Approx(nc2(s)).epsilon(1e-12));
  CHECK(nc3(w, s2) == doctest::Approx(nc3(w, s)).epsilon(1e-12));
}

TEST_CASE("compute_metrics bundles the fields consistently") {
  ModelParams<double> p = reference_params();
  const Mat h = seeded_features<double>(p.dims, 2);
  const auto s = class_statistics(h, p.dims);
  const auto with_w = compute_metrics(s, optimal_weights(h, p));
  const auto without_w = compute_metrics(s);
  CHECK(with_w.nc1_tilde == doctest::Approx(nc1_tilde(s)));
  CHECK(with_w.tr_sw == doctest::Approx(s.sigma_w.trace()));
  CHECK(with_w.tr_sb == doctest::Approx(s.sigma_b.trace()));
  CHECK(with_w.nc3.has_value());
  CHECK_FALSE(without_w.nc3.has_value());
}
