#pragma once

#include <cstdint>
#include <limits>
#include <optional>
#include <vector>

#include "collapse/metrics.hpp"
#include "collapse/types.hpp"
#include "collapse/ufm.hpp"

namespace collapse {

/// Loss along the central path, i.e. the plain objective with the classifier
/// eliminated by its closed form. Evaluated without forming W:
///   L(H) = (1/2K) tr((Sigma_W + lw/K I) A^(-1)) + (lh/2) tr(SigmaT~)
///          - (d - K)/(2K),   A = SigmaT~ + (lw/K) I.
template <typename Scalar>
Scalar central_loss(const Matrix<Scalar>& h, const ModelParams<Scalar>& p) {
  check_feature_shape(h, p.dims);
  if (!(p.lambda_w > Scalar(0)))
    throw std::invalid_argument("central_loss: lambda_w must be positive");
  const Index d = p.dims.d, K = p.dims.K;
  const ClassStats<Scalar> s = class_statistics(h, p.dims);
  const Scalar a = p.lambda_w / Scalar(K);
  Matrix<Scalar> A = s.sigma_t_tilde;
  A.diagonal().array() += a;
  Matrix<Scalar> num = s.sigma_w;
  num.diagonal().array() += a;
  return A.llt().solve(num).trace() / (2 * Scalar(K)) +
         p.lambda_h / 2 * s.sigma_t_tilde.trace() -
         Scalar(d - K) / (2 * Scalar(K));
}

/// Same loss by direct substitution: the plain objective at (W*(H), H).
/// Serves as the independent oracle for the closed form above.
template <typename Scalar>
Scalar central_loss_direct(const Matrix<Scalar>& h,
                           const ModelParams<Scalar>& p) {
  return objective_plain(optimal_weights(h, p), h, p);
}

/// Exact gradient of the central-path loss:
///   grad L = (1/K^2 n) [A^(-1)(H - Hbar kron 1^T)
///            - A^(-1)(Sigma_W + lw/K I) A^(-1) H + lh K H].
template <typename Scalar>
Matrix<Scalar> central_gradient(const Matrix<Scalar>& h,
                                const ModelParams<Scalar>& p) {
  check_feature_shape(h, p.dims);
  if (!(p.lambda_w > Scalar(0)))
    throw std::invalid_argument("central_gradient: lambda_w must be positive");
  const Index K = p.dims.K, n = p.dims.n;
  const ClassStats<Scalar> s = class_statistics(h, p.dims);
  const Scalar a = p.lambda_w / Scalar(K);
  Matrix<Scalar> A = s.sigma_t_tilde;
  A.diagonal().array() += a;
  const auto llt = A.llt();

  Matrix<Scalar> within = h;
  for (Index k = 0; k < K; ++k)
    within.middleCols(k * n, n).colwise() -= s.class_means.col(k);

  Matrix<Scalar> num = s.sigma_w;
  num.diagonal().array() += a;
  const Matrix<Scalar> second = llt.solve(num * llt.solve(h));
  return (llt.solve(within) - second + p.lambda_h * Scalar(K) * h) /
         (Scalar(K) * Scalar(K) * Scalar(n));
}

/// Time derivatives of the covariance matrices along the central-path flow
/// dH/dt = -Kn grad L(H), with C_B = Sigma_B A^(-1) etc.
template <typename Scalar>
struct CovarianceRates {
  Matrix<Scalar> d_sigma_b;
  Matrix<Scalar> d_sigma_w;
  Matrix<Scalar> d_sigma_t;
};

template <typename Scalar>
CovarianceRates<Scalar> covariance_rates(const Matrix<Scalar>& h,
                                         const ModelParams<Scalar>& p) {
  check_feature_shape(h, p.dims);
  const Index d = p.dims.d, K = p.dims.K;
  const ClassStats<Scalar> s = class_statistics(h, p.dims);
  Matrix<Scalar> A = s.sigma_t_tilde;
  A.diagonal().array() += p.lambda_w / Scalar(K);
  const auto llt = A.llt();
  // X A^(-1) for symmetric A is the transpose of A^(-1) X^T.
  const Matrix<Scalar> cb = llt.solve(s.sigma_b).transpose();
  const Matrix<Scalar> cbt = llt.solve(s.sigma_b_tilde).transpose();
  const Matrix<Scalar> cw = llt.solve(s.sigma_w).transpose();
  const Matrix<Scalar> eye = Matrix<Scalar>::Identity(d, d);
  const Scalar two_lh = 2 * p.lambda_h;

  CovarianceRates<Scalar> r;
  const Matrix<Scalar> b_half = cb * (eye - cbt);
  r.d_sigma_b = (b_half + b_half.transpose()) / Scalar(K) - two_lh * s.sigma_b;
  const Matrix<Scalar> w_half = cw * cbt;
  r.d_sigma_w =
      -(w_half + w_half.transpose()) / Scalar(K) - two_lh * s.sigma_w;
  const Matrix<Scalar> t_half = (eye - cbt - cw) * cbt;
  r.d_sigma_t =
      (t_half + t_half.transpose()) / Scalar(K) - two_lh * s.sigma_t_tilde;
  return r;
}

/// Fixed-step RK4 with a monotonicity acceptance test; see flow_integrate.
struct FlowConfig {
  double t_end{5.0};
  double dt{1e-3};
  int max_halvings{20};
  Index record_every{100};
  /// Full H snapshots are kept in samples only while d*K*n stays at or below
  /// this; beyond it samples carry a content hash instead.
  Index snapshot_limit{10000};
};

template <typename Scalar>
struct FlowSample {
  long step{0};
  Scalar t{0};
  MetricReport<Scalar> metrics;
  Scalar loss{0};
  std::optional<Matrix<Scalar>> snapshot;
  std::uint64_t digest{0};
};

template <typename Scalar>
struct FlowTrace {
  std::vector<FlowSample<Scalar>> samples;  // t strictly increasing
  Matrix<Scalar> final_h;
  long total_steps{0};
  long halvings{0};
};

namespace detail {

inline std::uint64_t fnv1a(const unsigned char* bytes, std::size_t size) {
  std::uint64_t h = 1469598103934665603ull;
  for (std::size_t i = 0; i < size; ++i) {
    h ^= bytes[i];
    h *= 1099511628211ull;
  }
  return h;
}

template <typename Scalar>
FlowSample<Scalar> flow_sample(long step, Scalar t, const Matrix<Scalar>& h,
                               const ModelParams<Scalar>& p,
                               Index snapshot_limit) {
  FlowSample<Scalar> sample;
  sample.step = step;
  sample.t = t;
  const ClassStats<Scalar> stats = class_statistics(h, p.dims);
  try {
    sample.metrics = compute_metrics(stats, optimal_weights(h, p));
  } catch (const DegenerateStats&) {
    // Degenerate geometry (e.g. coincident class means) leaves the ratio
    // metrics undefined; record the traces and poison the ratios instead of
    // aborting the integration.
    const Scalar nan = std::numeric_limits<Scalar>::quiet_NaN();
    sample.metrics.nc1_tilde = nan;
    sample.metrics.nc1_fisher = nan;
    sample.metrics.nc1_per_class = Vector<Scalar>::Constant(p.dims.K, nan);
    sample.metrics.nc2 = nan;
    sample.metrics.nc3 = nan;
  }
  sample.metrics.step = step;
  sample.metrics.t = t;
  sample.metrics.tr_sw = stats.sigma_w.trace();
  sample.metrics.tr_sb = stats.sigma_b.trace();
  sample.loss = central_loss(h, p);
  if (p.dims.feature_size() <= snapshot_limit) sample.snapshot = h;
  sample.digest = fnv1a(reinterpret_cast<const unsigned char*>(h.data()),
                        sizeof(Scalar) * static_cast<std::size_t>(h.size()));
  return sample;
}

}  // namespace detail

/// Integrates dH/dt = -Kn grad L(H) with classical RK4 at fixed step cfg.dt.
/// Every step must keep exp(2 lh t) tr(Sigma_W) from growing by more than
/// 1e-9; a violating step is retried at half the step size (the next step
/// resumes at cfg.dt). Throws StepCollapse when cfg.max_halvings retries
/// cannot restore the test. Samples are recorded at step 0, every
/// record_every-th accepted step, and the final step.
template <typename Scalar>
FlowTrace<Scalar> flow_integrate(const Matrix<Scalar>& h0,
                                 const ModelParams<Scalar>& p,
                                 const FlowConfig& cfg = {}) {
  check_feature_shape(h0, p.dims);
  if (!(cfg.dt > 0) || !(cfg.t_end >= 0))
    throw std::invalid_argument("flow_integrate: need dt > 0 and t_end >= 0");
  const Scalar kn = Scalar(p.dims.K) * Scalar(p.dims.n);
  const auto rhs = [&](const Matrix<Scalar>& h) -> Matrix<Scalar> {
    return -kn * central_gradient(h, p);
  };
  const auto decay_value = [&](Scalar t, const Matrix<Scalar>& h) -> Scalar {
    return std::exp(2 * p.lambda_h * t) *
           class_statistics(h, p.dims).sigma_w.trace();
  };

  FlowTrace<Scalar> trace;
  Matrix<Scalar> h = h0;
  Scalar t = 0;
  long step = 0;
  trace.samples.push_back(
      detail::flow_sample(step, t, h, p, cfg.snapshot_limit));
  Scalar monotone_prev = decay_value(t, h);

  const Scalar eps_accept = Scalar(1e-9);
  while (t < Scalar(cfg.t_end) - Scalar(1e-15) * Scalar(cfg.t_end)) {
    Scalar dt = std::min<Scalar>(Scalar(cfg.dt), Scalar(cfg.t_end) - t);
    Matrix<Scalar> h_next;
    Scalar monotone_next = 0;
    int halvings = 0;
    for (;;) {
      const Matrix<Scalar> k1 = rhs(h);
      const Matrix<Scalar> k2 = rhs(h + (dt / 2) * k1);
      const Matrix<Scalar> k3 = rhs(h + (dt / 2) * k2);
      const Matrix<Scalar> k4 = rhs(h + dt * k3);
      h_next = h + (dt / 6) * (k1 + 2 * k2 + 2 * k3 + k4);
      monotone_next = decay_value(t + dt, h_next);
      if (monotone_next <= monotone_prev + eps_accept) break;
      if (++halvings > cfg.max_halvings)
        throw StepCollapse(
            "flow_integrate: exp(2 lh t) tr(Sigma_W) still grows after " +
            std::to_string(cfg.max_halvings) + " halvings at t = " +
            std::to_string(static_cast<double>(t)));
      dt /= 2;
      ++trace.halvings;
    }
    h.swap(h_next);
    t += dt;
    monotone_prev = monotone_next;
    ++step;
    const bool last = !(t < Scalar(cfg.t_end) - Scalar(1e-15) * Scalar(cfg.t_end));
    if ((cfg.record_every > 0 && step % cfg.record_every == 0) || last)
      trace.samples.push_back(
          detail::flow_sample(step, t, h, p, cfg.snapshot_limit));
  }
  trace.final_h = std::move(h);
  trace.total_steps = step;
  return trace;
}

}  // namespace collapse
