#pragma once

#include <utility>
#include <vector>

#include "collapse/central_path.hpp"
#include "collapse/metrics.hpp"
#include "collapse/types.hpp"
#include "collapse/ufm.hpp"

namespace collapse {

/// Gradient descent settings for the vicinity solve. The default tolerance
/// is deliberately tight: downstream response-operator tests measure effects
/// of order beta^(-2) and need solutions well below that.
template <typename Scalar>
struct SolveConfig {
  Scalar grad_tol{1e-10};
  long max_iters{10000};
  Scalar armijo_shrink{0.5};
  Scalar armijo_c1{1e-4};
  enum class Init { from_h0, from_collapsed, custom };
  Init init{Init::from_h0};
  Matrix<Scalar> custom_init;      // used when init == custom
  std::uint64_t collapsed_seed{0}; // used when init == from_collapsed
};

template <typename Scalar>
struct ProxSolution {
  Matrix<Scalar> H_star;
  Matrix<Scalar> W_star;
  Scalar residual{0};   // ||H* - H0 + (Kn/beta) grad L(H*)||_F
  long iters{0};
  Scalar objective{0};  // full vicinity objective at (W*, H*)
  Scalar grad_norm{0};  // ||grad phi(H*)||_F at termination
  bool converged{false};
};

/// Minimizes phi(H) = L(H) + beta/(2Kn) ||H - H0||_F^2 by gradient descent
/// with Armijo backtracking. The sufficient-decrease test carries a small
/// floating-point slack; without it the test turns unresolvable once the
/// true decrease per step drops below rounding in phi, and the line search
/// would stall at tolerances this tight. Non-convergence is flagged on the
/// returned solution, not thrown.
template <typename Scalar>
ProxSolution<Scalar> solve_prox(const Matrix<Scalar>& h0,
                                const ModelParams<Scalar>& p,
                                const SolveConfig<Scalar>& cfg = {}) {
  check_feature_shape(h0, p.dims);
  validate(p);
  if (!(cfg.grad_tol > Scalar(0)))
    throw std::invalid_argument("solve_prox: grad_tol must be positive");
  const Scalar kn = Scalar(p.dims.K) * Scalar(p.dims.n);

  const auto phi = [&](const Matrix<Scalar>& h) -> Scalar {
    return central_loss(h, p) + p.beta * (h - h0).squaredNorm() / (2 * kn);
  };
  const auto grad_phi = [&](const Matrix<Scalar>& h) -> Matrix<Scalar> {
    return central_gradient(h, p) + (p.beta / kn) * (h - h0);
  };

  Matrix<Scalar> h;
  switch (cfg.init) {
    case SolveConfig<Scalar>::Init::from_h0:
      h = h0;
      break;
    case SolveConfig<Scalar>::Init::from_collapsed:
      h = collapsed_minimizer(p, cfg.collapsed_seed).H_star;
      break;
    case SolveConfig<Scalar>::Init::custom:
      check_feature_shape(cfg.custom_init, p.dims);
      h = cfg.custom_init;
      break;
  }

  // grad phi is Lipschitz with constant at most (beta + 10/lw + lh)/(Kn);
  // its reciprocal is the safe base step, 1/beta-scaled for large beta.
  const Scalar base_step =
      kn / (p.beta + Scalar(10) / p.lambda_w + p.lambda_h);
  const Scalar eps = std::numeric_limits<Scalar>::epsilon();

  Scalar f = phi(h);
  Matrix<Scalar> g = grad_phi(h);
  Scalar gnorm = g.norm();
  long it = 0;
  while (gnorm > cfg.grad_tol && it < cfg.max_iters) {
    const Scalar slack = 8 * eps * (Scalar(1) + std::abs(f));
    const Scalar gsq = gnorm * gnorm;
    Scalar step = base_step;
    Matrix<Scalar> h_next;
    Scalar f_next;
    for (;;) {
      h_next = h - step * g;
      f_next = phi(h_next);
      if (f_next <= f - cfg.armijo_c1 * step * gsq + slack) break;
      step *= cfg.armijo_shrink;
      if (step < Scalar(1e-18) * base_step) break;  // cannot shrink further
    }
    h.swap(h_next);
    f = f_next;
    g = grad_phi(h);
    gnorm = g.norm();
    ++it;
  }

  ProxSolution<Scalar> sol;
  sol.H_star = std::move(h);
  sol.W_star = optimal_weights(sol.H_star, p);
  sol.iters = it;
  sol.grad_norm = gnorm;
  sol.converged = gnorm <= cfg.grad_tol;
  sol.residual =
      (sol.H_star - h0 + (kn / p.beta) * central_gradient(sol.H_star, p))
          .norm();
  sol.objective = objective_prox(sol.W_star, sol.H_star, h0, p);
  return sol;
}

/// Stationarity report for a finished solve: the backward-Euler identity
/// beta (H* - H0) + Kn grad L(H*) = 0 in absolute and relative form. The
/// relative form divides by Kn (1 + ||grad L(H*)||), the natural scale of
/// the identity's terms.
template <typename Scalar>
struct ImplicitStepReport {
  Scalar abs_residual{0};
  Scalar rel_residual{0};
};

template <typename Scalar>
ImplicitStepReport<Scalar> implicit_step_check(
    const Matrix<Scalar>& h0, const ModelParams<Scalar>& p,
    const ProxSolution<Scalar>& sol) {
  check_feature_shape(h0, p.dims);
  const Scalar kn = Scalar(p.dims.K) * Scalar(p.dims.n);
  const Matrix<Scalar> grad = central_gradient(sol.H_star, p);
  ImplicitStepReport<Scalar> rep;
  rep.abs_residual = (p.beta * (sol.H_star - h0) + kn * grad).norm();
  rep.rel_residual = rep.abs_residual / (kn * (Scalar(1) + grad.norm()));
  return rep;
}

/// Empirical check of the two Lipschitz bounds behind the stability of the
/// vicinity solve: the map H0 -> H* is (1 - 11 lh/beta)^(-1)-Lipschitz and
/// grad L is (11 lh/(Kn))-Lipschitz, both valid for beta > 11 lh and
/// lw*lh < 1. Violations are counted, not thrown; they falsify the build.
template <typename Scalar>
struct LipschitzReport {
  long num_pairs{0};
  Scalar map_bound{0};
  Scalar max_map_ratio{0};
  long map_violations{0};
  Scalar grad_bound{0};
  Scalar max_grad_ratio{0};
  long grad_violations{0};
};

template <typename Scalar>
LipschitzReport<Scalar> lipschitz_map_check(
    const std::vector<std::pair<Matrix<Scalar>, Matrix<Scalar>>>& pairs,
    const ModelParams<Scalar>& p, const SolveConfig<Scalar>& cfg = {}) {
  if (!(p.beta > 11 * p.lambda_h))
    throw std::invalid_argument("lipschitz_map_check: needs beta > 11 lh");
  if (!(p.lambda_w * p.lambda_h < Scalar(1)))
    throw std::invalid_argument("lipschitz_map_check: needs lw * lh < 1");
  const Scalar kn = Scalar(p.dims.K) * Scalar(p.dims.n);

  LipschitzReport<Scalar> rep;
  rep.num_pairs = static_cast<long>(pairs.size());
  rep.map_bound = Scalar(1) / (Scalar(1) - 11 * p.lambda_h / p.beta);
  rep.grad_bound = 11 * p.lambda_h / kn;
  for (const auto& [a, b] : pairs) {
    const Scalar dist = (a - b).norm();
    if (!(dist > Scalar(0))) continue;
    const Scalar grad_ratio =
        (central_gradient(a, p) - central_gradient(b, p)).norm() / dist;
    rep.max_grad_ratio = std::max(rep.max_grad_ratio, grad_ratio);
    if (grad_ratio > rep.grad_bound) ++rep.grad_violations;

    const Matrix<Scalar> sa = solve_prox(a, p, cfg).H_star;
    const Matrix<Scalar> sb = solve_prox(b, p, cfg).H_star;
    const Scalar map_ratio = (sa - sb).norm() / dist;
    rep.max_map_ratio = std::max(rep.max_map_ratio, map_ratio);
    // 2 grad_tol absorbs the solver error in each endpoint.
    if ((sa - sb).norm() > rep.map_bound * dist + 2 * cfg.grad_tol)
      ++rep.map_violations;
  }
  return rep;
}

/// Repeated vicinity solves, each taking the previous solution as its
/// anchor: H_{l+1} = argmin phi(H; H_l). One solve per synthetic layer;
/// reports metrics for H_0 through H_depth. Row l carries t = l/beta, the
/// implicit-Euler time the stack has advanced.
template <typename Scalar>
std::vector<MetricReport<Scalar>> layerwise_stack(
    const Matrix<Scalar>& h0, const ModelParams<Scalar>& p, long depth,
    const SolveConfig<Scalar>& cfg = {}) {
  check_feature_shape(h0, p.dims);
  if (depth < 0)
    throw std::invalid_argument("layerwise_stack: depth must be >= 0");

  std::vector<MetricReport<Scalar>> reports;
  reports.reserve(static_cast<std::size_t>(depth) + 1);
  const auto report_for = [&](const Matrix<Scalar>& h, long layer) {
    MetricReport<Scalar> r = compute_metrics(
        class_statistics(h, p.dims), optimal_weights(h, p));
    r.step = layer;
    r.t = Scalar(layer) / p.beta;
    return r;
  };

  Matrix<Scalar> h = h0;
  reports.push_back(report_for(h, 0));
  for (long layer = 1; layer <= depth; ++layer) {
    ProxSolution<Scalar> sol = solve_prox(h, p, cfg);
    if (!sol.converged)
      throw NoConvergence("layerwise_stack: layer " + std::to_string(layer) +
                          " stopped at gradient norm " +
                          std::to_string(static_cast<double>(sol.grad_norm)));
    h = std::move(sol.H_star);
    reports.push_back(report_for(h, layer));
  }
  return reports;
}

}  // namespace collapse
