#include <cmath>
#include <random>

#include <Eigen/Dense>
#include <unsupported/Eigen/KroneckerProduct>

#include "collapse/perturbation.hpp"
#include "collapse/prox.hpp"
#include "collapse/ufm.hpp"
#include "doctest.h"

using collapse::analytic_block_spectrum;
using collapse::commutation_matrix;
using collapse::compare_block_spectrum;
using collapse::delta_w_response;
using collapse::Dims;
using collapse::exact_response;
using collapse::extract_block;
using collapse::hessian_blocks;
using collapse::Index;
using collapse::ModelParams;
using collapse::neumann_response;
using collapse::numeric_block_spectrum;
using collapse::ResponseKind;
using Mat = collapse::Matrix<double>;
using Vec = collapse::Vector<double>;

namespace {

ModelParams<double> reference_params() {
  ModelParams<double> p;
  p.dims = Dims{4, 10, 10};
  p.lambda_w = 2.0;
  p.lambda_h = 0.125;
  p.beta = 100.0;
  return p;
}

ModelParams<double> tiny_params(double beta = 1e3) {
  ModelParams<double> p;
  p.dims = Dims{2, 2, 3};
  p.lambda_w = 1.5;
  p.lambda_h = 0.25;
  p.beta = beta;
  return p;
}

struct Base {
  Mat w;
  Mat h;
};

Base random_base(const ModelParams<double>& p, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  Base b;
  b.h = collapse::gaussian<double>(p.dims.d, p.dims.samples(), rng);
  b.w = collapse::gaussian<double>(p.dims.K, p.dims.d, rng);
  return b;
}

// Gradients of the vicinity objective at anchor H0 = 0; the Hessian does
// not depend on the anchor, so zero keeps the expressions short.
Mat grad_w(const Mat& w, const Mat& h, const ModelParams<double>& p) {
  const double kn = static_cast<double>(p.dims.samples());
  const Mat y = collapse::build_label_matrix<double>(p.dims);
  return Mat((w * h - y) * h.transpose() / kn + (p.lambda_w / p.dims.K) * w);
}

Mat grad_h(const Mat& w, const Mat& h, const ModelParams<double>& p) {
  const double kn = static_cast<double>(p.dims.samples());
  const Mat y = collapse::build_label_matrix<double>(p.dims);
  return Mat(w.transpose() * (w * h - y) / kn +
             ((p.lambda_h + p.beta) / kn) * h);
}

// Schur complement of the weight block, straight from the stored blocks.
Mat schur_response(const collapse::HessianBlocks<double>& b,
                   const ModelParams<double>& p) {
  const double kn = static_cast<double>(p.dims.samples());
  const Mat s =
      b.hh - b.wh * b.ww.llt().solve(Mat(b.wh.transpose()));
  return Mat((p.beta / kn) * s.llt().solve(Mat::Identity(s.rows(), s.cols())));
}

}  // namespace

TEST_CASE("hessian blocks at the origin") {
  const auto p = tiny_params(50.0);
  const Index d = p.dims.d, K = p.dims.K;
  const double kn = static_cast<double>(p.dims.samples());
  const Mat w0 = Mat::Zero(K, d);
  const Mat h0 = Mat::Zero(d, p.dims.samples());
  const auto b = hessian_blocks(w0, h0, p);

  REQUIRE(b.hh.rows() == d * p.dims.samples());
  REQUIRE(b.ww.rows() == K * d);
  REQUIRE(b.wh.rows() == d * p.dims.samples());
  REQUIRE(b.wh.cols() == K * d);

  const Mat hh_expected =
      ((p.lambda_h + p.beta) / kn) *
      Mat::Identity(b.hh.rows(), b.hh.cols());
  const Mat ww_expected =
      (p.lambda_w / K) * Mat::Identity(b.ww.rows(), b.ww.cols());
  CHECK((b.hh - hh_expected).norm() == 0.0);
  CHECK((b.ww - ww_expected).norm() == 0.0);

  // E column i*K+k is vec(e_i e_k^T (WH - Y)); here WH - Y = -Y.
  const Mat y = collapse::build_label_matrix<double>(p.dims);
  for (Index i = 0; i < d; ++i)
    for (Index k = 0; k < K; ++k) {
      Mat outer = Mat::Zero(d, p.dims.samples());
      outer.row(i) = -y.row(k);
      const Vec expect = outer.reshaped();
      CHECK((b.e.col(i * K + k) - expect).norm() == 0.0);
    }
  CHECK((b.wh - b.e / kn).norm() == 0.0);  // kron(H, W) vanishes at zero
}

TEST_CASE("hessian blocks match finite differences") {
  const auto p = tiny_params(30.0);
  const auto base = random_base(p, 61);
  const auto b = hessian_blocks(base.w, base.h, p);
  const double s = 1e-6;

  // Both gradients are at most quadratic in each variable, so central
  // differences are exact up to roundoff.
  for (Index j = 0; j < b.hh.cols(); ++j) {
    Mat hp = base.h, hm = base.h;
    hp.reshaped()[j] += s;
    hm.reshaped()[j] -= s;
    const Vec col =
        Vec((grad_h(base.w, hp, p) - grad_h(base.w, hm, p)).reshaped()) /
        (2 * s);
    CHECK((b.hh.col(j) - col).norm() <= 1e-9 * (1 + col.norm()));
  }
  for (Index j = 0; j < b.ww.cols(); ++j) {
    Mat wp = base.w, wm = base.w;
    wp.reshaped()[j] += s;
    wm.reshaped()[j] -= s;
    const Vec col =
        Vec((grad_w(wp, base.h, p) - grad_w(wm, base.h, p)).reshaped()) /
        (2 * s);
    CHECK((b.ww.col(j) - col).norm() <= 1e-9 * (1 + col.norm()));
  }
  // Mixed block: response of the feature gradient to weight entries.
  for (Index j = 0; j < b.wh.cols(); ++j) {
    Mat wp = base.w, wm = base.w;
    wp.reshaped()[j] += s;
    wm.reshaped()[j] -= s;
    const Vec col =
        Vec((grad_h(wp, base.h, p) - grad_h(wm, base.h, p)).reshaped()) /
        (2 * s);
    CHECK((b.wh.col(j) - col).norm() <= 1e-8 * (1 + col.norm()));
  }
}

TEST_CASE("cross term columns carry residual rows at any base") {
  const auto p = tiny_params(40.0);
  const auto base = random_base(p, 67);
  const auto b = hessian_blocks(base.w, base.h, p);
  const Mat y = collapse::build_label_matrix<double>(p.dims);
  const Mat r = base.w * base.h - y;
  for (Index i = 0; i < p.dims.d; ++i)
    for (Index k = 0; k < p.dims.K; ++k) {
      Mat outer = Mat::Zero(p.dims.d, p.dims.samples());
      outer.row(i) = r.row(k);
      CHECK((b.e.col(i * p.dims.K + k) - Vec(outer.reshaped())).norm() ==
            0.0);
    }
}

TEST_CASE("residual cross norm at the collapsed base") {
  const auto p = reference_params();
  const auto m = collapse::collapsed_minimizer(p, 71);
  const auto b = hessian_blocks(m.W_star, m.H_star, p);
  // WH - Y = -cY, so every column has norm c sqrt(n).
  const double c = p.c();
  const double expect = c * std::sqrt(static_cast<double>(p.dims.n));
  for (Index j = 0; j < b.e.cols(); ++j)
    CHECK(b.e.col(j).norm() == doctest::Approx(expect).epsilon(1e-10));
  CHECK(b.e.norm() ==
        doctest::Approx(c * std::sqrt(static_cast<double>(
                                p.dims.d * p.dims.samples())))
            .epsilon(1e-10));
}

TEST_CASE("exact response equals the Schur complement inverse") {
  for (auto seed : {73u, 79u}) {
    const auto p = tiny_params(500.0);
    const auto base = random_base(p, seed);
    const auto blocks = hessian_blocks(base.w, base.h, p);
    const auto op = exact_response(blocks, p);
    const Mat oracle = schur_response(blocks, p);
    CHECK((op.matrix() - oracle).norm() <= 1e-11 * oracle.norm());
  }
  // Same identity at the collapsed base of the reference configuration.
  const auto p = reference_params();
  const auto m = collapse::collapsed_minimizer(p, 83);
  const auto blocks = hessian_blocks(m.W_star, m.H_star, p);
  const auto op = exact_response(blocks, p);
  const Mat oracle = schur_response(blocks, p);
  CHECK((op.matrix() - oracle).norm() <= 1e-11 * oracle.norm());
}

TEST_CASE("exact response is symmetric positive definite") {
  const auto p = reference_params();
  const auto m = collapse::collapsed_minimizer(p, 89);
  const auto op = exact_response(m.W_star, m.H_star, p);
  const Mat& f = op.matrix();
  CHECK((f - f.transpose()).norm() <= 1e-13 * f.norm());
  Eigen::SelfAdjointEigenSolver<Mat> es(f);
  CHECK(es.eigenvalues().minCoeff() > 0.0);
  CHECK(es.eigenvalues().maxCoeff() <= 1.0 + 2 * p.lambda_h / p.beta);
  CHECK(op.kind == ResponseKind::exact_schur);
  CHECK(op.collapsed_base);
  CHECK(!op.beta_warning);
  CHECK(op.base_h0.size() == 0);
}

TEST_CASE("applies agree with the dense matrices") {
  const auto p = tiny_params(800.0);
  const auto base = random_base(p, 97);
  const auto ex = exact_response(base.w, base.h, p);
  const auto ne = neumann_response(base.w, base.h, p);
  std::mt19937_64 rng(101);
  for (int trial = 0; trial < 5; ++trial) {
    const Vec v = Vec::NullaryExpr(ex.size(), [&](Eigen::Index) {
      return std::normal_distribution<double>()(rng);
    });
    const Vec via_ex = ex.apply_vec(v);
    const Vec via_ne = ne.apply_vec(v);
    CHECK((via_ex - ex.matrix() * v).norm() <= 1e-12 * via_ex.norm());
    CHECK((via_ne - ne.matrix() * v).norm() <= 1e-12 * via_ne.norm());
  }
  // Matrix-shaped wrapper is the same map.
  const Mat dh0 = collapse::seeded_features<double>(p.dims, 103);
  const Mat moved = ex.apply(dh0);
  CHECK((Vec(moved.reshaped()) - ex.matrix() * Vec(dh0.reshaped())).norm() <=
        1e-12 * moved.norm());
  CHECK((ex.apply(Mat(Mat::Zero(p.dims.d, p.dims.samples())))).norm() == 0.0);
  CHECK((ne.apply(Mat(Mat::Zero(p.dims.d, p.dims.samples())))).norm() == 0.0);

  Vec bad = Vec::Zero(ex.size() + 1);
  CHECK_THROWS_AS(ex.apply_vec(bad), collapse::ShapeError);
}

TEST_CASE("neumann response matches its defining expansion") {
  const auto p = tiny_params(600.0);
  const auto base = random_base(p, 107);
  const auto blocks = hessian_blocks(base.w, base.h, p);
  const auto op = neumann_response(base.w, base.h, p);
  const double kn = static_cast<double>(p.dims.samples());
  const Index cols = p.dims.samples();

  const Mat bmat = blocks.e.transpose() +
                   Mat(Eigen::kroneckerProduct(base.h, base.w));
  const Mat aw = kn * blocks.ww;
  Mat f = Eigen::kroneckerProduct(Mat::Identity(cols, cols),
                                  Mat(base.w.transpose() * base.w));
  f /= -p.beta;
  f += bmat.transpose() * aw.llt().solve(bmat) / p.beta;
  f.diagonal().array() += 1.0 - p.lambda_h / p.beta;

  CHECK((op.matrix() - f).norm() <= 1e-13 * f.norm());
  CHECK(op.kind == ResponseKind::neumann);
  // The expansion is symmetric term by term.
  CHECK((op.matrix() - op.matrix().transpose()).norm() <=
        1e-12 * op.matrix().norm());
}

TEST_CASE("neumann deviation from identity scales exactly with 1/beta") {
  const auto p1 = reference_params();
  auto p2 = p1;
  p2.beta = 2 * p1.beta;
  const auto m = collapse::collapsed_minimizer(p1, 109);
  const Mat f1 = neumann_response(m.W_star, m.H_star, p1).matrix();
  const Mat f2 = neumann_response(m.W_star, m.H_star, p2).matrix();
  const Mat id = Mat::Identity(f1.rows(), f1.cols());
  const double r = (f2 - id).norm() / (f1 - id).norm();
  CHECK(r == doctest::Approx(0.5).epsilon(1e-12));
}

TEST_CASE("neumann error against the exact response shrinks at rate beta^(-2)") {
  const auto p1 = tiny_params(500.0);
  auto p2 = p1;
  p2.beta = 4 * p1.beta;
  const auto base = random_base(p1, 113);
  const double e1 = (exact_response(base.w, base.h, p1).matrix() -
                     neumann_response(base.w, base.h, p1).matrix())
                        .norm();
  const double e2 = (exact_response(base.w, base.h, p2).matrix() -
                     neumann_response(base.w, base.h, p2).matrix())
                        .norm();
  CHECK(e1 / e2 > 16.0 / 1.4);
  CHECK(e1 / e2 < 16.0 * 1.4);
}

TEST_CASE("block extraction tiles the full operator") {
  const auto p = tiny_params(700.0);
  const auto base = random_base(p, 127);
  auto op = exact_response(base.w, base.h, p);
  const Mat full = op.matrix();
  const Index dn = p.dims.d * p.dims.n;

  Mat tiled(full.rows(), full.cols());
  for (Index k = 1; k <= p.dims.K; ++k)
    for (Index kt = 1; kt <= p.dims.K; ++kt)
      tiled.block((k - 1) * dn, (kt - 1) * dn, dn, dn) =
          extract_block(op, k, kt);
  CHECK(tiled == full);

  CHECK_THROWS_AS(extract_block(op, 0, 1), std::out_of_range);
  CHECK_THROWS_AS(extract_block(op, 1, p.dims.K + 1), std::out_of_range);

  // Apply-only form reproduces the same blocks through solves.
  op.dense.reset();
  CHECK_THROWS_AS(op.matrix(), std::logic_error);
  for (Index k = 1; k <= p.dims.K; ++k)
    for (Index kt = 1; kt <= p.dims.K; ++kt) {
      const Mat via_solves = extract_block(op, k, kt);
      const Mat slice = full.block((k - 1) * dn, (kt - 1) * dn, dn, dn);
      CHECK((via_solves - slice).norm() <= 1e-12 * (1 + slice.norm()));
    }
}

TEST_CASE("collapsed-base diagonal blocks are symmetric, off-diagonal rank one") {
  const auto p = reference_params();
  const auto m = collapse::collapsed_minimizer(p, 131);
  const auto op = neumann_response(m.W_star, m.H_star, p);
  REQUIRE(op.collapsed_base);

  const Mat diag = extract_block(op, 2, 2);
  CHECK((diag - diag.transpose()).norm() <= 1e-12 * diag.norm());

  const Mat off = extract_block(op, 1, 3);
  Eigen::JacobiSVD<Mat> svd(off);
  const auto& sv = svd.singularValues();
  CHECK(sv[0] == doctest::Approx(2 * p.lambda_h * (1 - p.c()) / p.beta)
                     .epsilon(1e-10));
  CHECK(sv[1] <= 1e-10 * sv[0]);
}

TEST_CASE("reference configuration spectrum") {
  const auto p = reference_params();  // c = 1/2, sqrt(lh/lw) = 1/4
  const auto diag = analytic_block_spectrum(p, 1, 1);
  REQUIRE(diag.singular_values.size() ==
          static_cast<std::size_t>(p.dims.d * p.dims.n));
  CHECK(diag.singular_values.front() == doctest::Approx(1.0).epsilon(1e-15));
  CHECK(diag.singular_values.back() ==
        doctest::Approx(0.9975).epsilon(1e-15));
  // Off the simplex frame, lambda + mu/beta = 1 exactly: one unit entry
  // per complement direction.
  std::size_t units = 0;
  for (double s : diag.singular_values)
    if (std::abs(s - 1.0) <= 1e-14) ++units;
  CHECK(units == static_cast<std::size_t>(p.dims.d - p.dims.K));

  const auto off = analytic_block_spectrum(p, 1, 2);
  CHECK(off.singular_values.front() ==
        doctest::Approx(0.00125).epsilon(1e-15));
  CHECK(off.singular_values[1] == 0.0);
  REQUIRE(diag.analytic.has_value());
  CHECK(diag.analytic->lambda.size() == static_cast<std::size_t>(p.dims.d));
  // mu for the own-class frame direction vanishes at c = 1/2.
  CHECK(diag.analytic->mu[0] == doctest::Approx(0.0).epsilon(1e-15));
}

TEST_CASE("numeric spectra match the closed form at a collapsed base") {
  ModelParams<double> p;
  p.dims = Dims{3, 2, 5};
  p.lambda_w = 2.0;
  p.lambda_h = 0.125;
  p.beta = 200.0;
  const auto m = collapse::collapsed_minimizer(p, 137);
  const auto op = neumann_response(m.W_star, m.H_star, p);
  REQUIRE(op.collapsed_base);
  for (Index k = 1; k <= p.dims.K; ++k)
    for (Index kt = 1; kt <= p.dims.K; ++kt) {
      const auto cmp = compare_block_spectrum(op, k, kt);
      CHECK(cmp.max_abs_err <= 1e-10);
    }

  // The reference configuration, spot checked at two block positions.
  const auto pp = reference_params();
  const auto mp = collapse::collapsed_minimizer(pp, 139);
  const auto opp = neumann_response(mp.W_star, mp.H_star, pp);
  CHECK(compare_block_spectrum(opp, 1, 1).max_abs_err <= 1e-10);
  CHECK(compare_block_spectrum(opp, 1, 2).max_abs_err <= 1e-10);

  // Exact responses differ from the closed form only at order beta^(-2).
  const auto ope = exact_response(mp.W_star, mp.H_star, pp);
  const double err = compare_block_spectrum(ope, 1, 1).max_abs_err;
  CHECK(err > 1e-8);
  CHECK(err <= 10.0 / (pp.beta * pp.beta));
}

TEST_CASE("spectrum comparison refuses non-collapsed bases") {
  ModelParams<double> p;
  p.dims = Dims{3, 2, 5};
  p.lambda_w = 2.0;
  p.lambda_h = 0.125;
  p.beta = 200.0;
  const auto base = random_base(p, 149);
  const auto op = neumann_response(base.w, base.h, p);
  REQUIRE(!op.collapsed_base);
  CHECK_THROWS_AS(compare_block_spectrum(op, 1, 1), std::invalid_argument);
}

TEST_CASE("analytic spectrum preconditions") {
  auto p = reference_params();
  CHECK_THROWS_AS(analytic_block_spectrum(p, 0, 1), std::out_of_range);
  CHECK_THROWS_AS(analytic_block_spectrum(p, 1, 5), std::out_of_range);

  auto flat = p;
  flat.dims = Dims{4, 10, 4};  // d = K: no orthogonal complement
  CHECK_THROWS_AS(analytic_block_spectrum(flat, 1, 1), std::invalid_argument);

  auto single = p;
  single.dims = Dims{4, 1, 10};  // n = 1: the lambda families are empty
  CHECK_THROWS_AS(analytic_block_spectrum(single, 1, 1),
                  std::invalid_argument);

  auto unregularized = p;
  unregularized.lambda_h = 0.0;
  CHECK_THROWS_AS(analytic_block_spectrum(unregularized, 1, 1),
                  std::invalid_argument);

  auto degenerate = p;
  degenerate.lambda_h = 0.6;  // lh * lw >= 1
  CHECK_THROWS_AS(analytic_block_spectrum(degenerate, 1, 1),
                  std::invalid_argument);
}

TEST_CASE("spectral floor falls as lambda_h grows") {
  ModelParams<double> p;
  p.dims = Dims{3, 2, 5};
  p.lambda_w = std::sqrt(2.0);
  p.beta = 100.0;
  double prev = 2.0;
  for (double lh : {0.1, 0.3, 0.5, 0.7}) {
    p.lambda_h = lh;
    const auto spec = analytic_block_spectrum(p, 2, 2);
    const double floor = spec.singular_values.back();
    CHECK(floor ==
          doctest::Approx(1 - std::sqrt(lh / p.lambda_w) / p.beta)
              .epsilon(1e-15));
    CHECK(floor < prev);
    prev = floor;

    // Off-diagonal coupling stays an order 1/beta factor below the floor.
    const auto off = analytic_block_spectrum(p, 1, 2);
    CHECK(off.singular_values.front() / floor <=
          2 * p.lambda_h * (1 - p.c()) / p.beta /
              (1 - std::sqrt(lh / p.lambda_w) / p.beta) * (1 + 1e-12));
  }
}

TEST_CASE("full response spectrum stays in the unit band") {
  const auto p = reference_params();
  const auto m = collapse::collapsed_minimizer(p, 151);
  const auto op = neumann_response(m.W_star, m.H_star, p);
  // The exact response sits inside (0, 1]; the first-order form may poke
  // above by its own O(beta^(-2)) truncation, nothing more.
  Eigen::JacobiSVD<Mat> svd(op.matrix());
  CHECK(svd.singularValues().minCoeff() > 0.99);
  CHECK(svd.singularValues().maxCoeff() <= 1.0 + 10.0 / (p.beta * p.beta));

  const auto exact = exact_response(m.W_star, m.H_star, p);
  Eigen::JacobiSVD<Mat> svd_exact(exact.matrix());
  CHECK(svd_exact.singularValues().maxCoeff() <= 1.0 + 1e-12);
  CHECK(svd_exact.singularValues().minCoeff() > 0.99);
}

TEST_CASE("response predicts the moved vicinity solution") {
  ModelParams<double> p;
  p.dims = Dims{2, 2, 3};
  p.lambda_w = 2.0;
  p.lambda_h = 0.25;
  p.beta = 1e3;

  collapse::SolveConfig<double> cfg;
  cfg.grad_tol = 1e-12;
  const Mat h0 = collapse::seeded_features<double>(p.dims, 157);
  const auto sol = collapse::solve_prox(h0, p, cfg);
  REQUIRE(sol.converged);

  const auto op = exact_response(sol.W_star, sol.H_star, p);
  std::mt19937_64 rng(163);
  Mat delta = collapse::gaussian<double>(p.dims.d, p.dims.samples(), rng);
  delta *= 1e-4 / delta.norm();

  const auto moved = collapse::solve_prox(Mat(h0 + delta), p, cfg);
  REQUIRE(moved.converged);
  const Mat dh_true = moved.H_star - sol.H_star;
  const Mat dh_pred = op.apply(delta);
  CHECK((dh_pred - dh_true).norm() <= 1e-2 * dh_true.norm());

  // First-order form lands close as well at this beta.
  const auto ne = neumann_response(sol.W_star, sol.H_star, p);
  CHECK((ne.apply(delta) - dh_true).norm() <= 2e-2 * dh_true.norm());

  // Weight response against the same paired solves.
  const auto blocks = hessian_blocks(sol.W_star, sol.H_star, p);
  const auto dw_map = delta_w_response(blocks, op, p);
  const Mat dw_true = moved.W_star - sol.W_star;
  const Mat dw_pred = dw_map.apply(delta);
  CHECK((dw_pred - dw_true).norm() <= 1e-2 * dw_true.norm());
}

TEST_CASE("weight response equals the chain rule through the profile map") {
  const auto p = tiny_params(900.0);
  const auto base = random_base(p, 167);
  const auto blocks = hessian_blocks(base.w, base.h, p);
  // The composed map differentiates W*(H) = Y H^T (H H^T + n lw I)^{-1}
  // along the feature response; base_w must be that profile value.
  const Mat w_prof = collapse::optimal_weights(base.h, p);
  const auto blocks_prof = hessian_blocks(w_prof, base.h, p);
  const auto op = exact_response(blocks_prof, p);
  const auto dw_map = delta_w_response(blocks_prof, op, p);

  std::mt19937_64 rng(173);
  Mat delta = collapse::gaussian<double>(p.dims.d, p.dims.samples(), rng);
  delta *= 1e-3 / delta.norm();
  const Mat dh = op.apply(delta);
  const double s = 1e-5;
  const Mat fd = (collapse::optimal_weights(Mat(base.h + s * dh), p) -
                  collapse::optimal_weights(Mat(base.h - s * dh), p)) /
                 (2 * s);
  const Mat pred = dw_map.apply(delta);
  CHECK((pred - fd).norm() <= 1e-4 * (1e-12 + fd.norm()));

  CHECK(dw_map.apply(Mat(Mat::Zero(p.dims.d, p.dims.samples()))).norm() ==
        0.0);
  CHECK((dw_map.matrix() * Vec(delta.reshaped()) - Vec(pred.reshaped()))
            .norm() <= 1e-12 * pred.norm());

  // Guards: kind and base-point provenance.
  const auto ne = neumann_response(w_prof, base.h, p);
  CHECK_THROWS_AS(delta_w_response(blocks_prof, ne, p),
                  std::invalid_argument);
  CHECK_THROWS_AS(delta_w_response(blocks, op, p), std::invalid_argument);
  auto other = p;
  other.beta = 2 * p.beta;
  CHECK_THROWS_AS(delta_w_response(blocks_prof, op, other),
                  std::invalid_argument);
}

TEST_CASE("degenerate base points are refused") {
  ModelParams<double> p;
  p.dims = Dims{2, 2, 3};
  p.lambda_w = 1e-8;
  p.lambda_h = 1e-8;
  p.beta = 1e-4;
  const Mat w0 = Mat::Zero(p.dims.K, p.dims.d);
  const Mat h0 = Mat::Zero(p.dims.d, p.dims.samples());
  CHECK_THROWS_AS(exact_response(w0, h0, p), collapse::DegenerateModel);
}

TEST_CASE("blocks overload rejects mismatched params") {
  const auto p = tiny_params(500.0);
  const auto base = random_base(p, 179);
  const auto blocks = hessian_blocks(base.w, base.h, p);
  auto other = p;
  other.lambda_h = p.lambda_h * 2;
  CHECK_THROWS_AS(exact_response(blocks, other), std::invalid_argument);
}

TEST_CASE("beta margin warning") {
  auto p = tiny_params(10.0);  // beta < 50 max(1, lh)
  const auto base = random_base(p, 181);
  CHECK(neumann_response(base.w, base.h, p).beta_warning);
  p.beta = 1e3;
  CHECK(!neumann_response(base.w, base.h, p).beta_warning);
}

TEST_CASE("commutation matrix identities") {
  CHECK(commutation_matrix<double>(1, 1) == Mat::Identity(1, 1));
  CHECK_THROWS_AS(commutation_matrix<double>(0, 2), std::invalid_argument);

  const Index d = 2, K = 3;
  const Mat m = commutation_matrix<double>(d, K);
  CHECK((m.transpose() * m - Mat::Identity(d * K, d * K)).norm() == 0.0);

  std::mt19937_64 rng(191);
  for (int trial = 0; trial < 20; ++trial) {
    const Mat a = collapse::gaussian<double>(d, K, rng);
    const Vec lhs = m * Vec(a.reshaped());
    const Vec rhs = Mat(a.transpose()).reshaped();
    CHECK((lhs - rhs).norm() == 0.0);
  }

  const Mat x1 = collapse::gaussian<double>(d, d, rng);
  const Mat x2 = collapse::gaussian<double>(K, K, rng);
  const Mat lhs =
      m.transpose() * Mat(Eigen::kroneckerProduct(x1, x2)) * m;
  const Mat rhs = Eigen::kroneckerProduct(x2, x1);
  CHECK((lhs - rhs).norm() <= 1e-14 * rhs.norm());

  const Vec x = Vec(collapse::gaussian<double>(d, 1, rng));
  const Vec y = Vec(collapse::gaussian<double>(K, 1, rng));
  // vec((x y^T)^T): the commutation swaps the kron factor order.
  const Vec swapped = m * Vec(Eigen::kroneckerProduct(y, x));
  CHECK((swapped - Vec(Eigen::kroneckerProduct(x, y))).norm() == 0.0);
}
