#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <optional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <unsupported/Eigen/KroneckerProduct>

#include "collapse/types.hpp"
#include "collapse/ufm.hpp"

namespace collapse {

/// Explicit dnK x dnK response matrices are only materialized up to this
/// size; above it the operator is exposed through apply() with linear
/// solves per application.
inline constexpr Index kDenseResponseLimit = 2000;

namespace detail {

/// E matrix of the mixed second derivative: column i*K + k (zero-based)
/// is vec(e_i e_k^T (WH - Y)), so row band i of each d-row group carries
/// a row of the residual.
template <typename Scalar>
Matrix<Scalar> residual_cross(const Matrix<Scalar>& w, const Matrix<Scalar>& h,
                              const Dims& dims) {
  const Index d = dims.d, K = dims.K;
  const Index cols = h.cols();
  const Matrix<Scalar> r = w * h - build_label_matrix<Scalar>(dims);
  Matrix<Scalar> e = Matrix<Scalar>::Zero(d * cols, K * d);
  for (Index i = 0; i < d; ++i)
    for (Index k = 0; k < K; ++k)
      for (Index c = 0; c < cols; ++c) e(c * d + i, i * K + k) = r(k, c);
  return e;
}

/// Applies (I_{nK} (x) M)^{-1} to each column of x by reshaping it to
/// d x nK and solving against the d x d factor.
template <typename Scalar>
Matrix<Scalar> solve_block_diag(const Eigen::LLT<Matrix<Scalar>>& m_llt,
                                const Matrix<Scalar>& x, Index d) {
  Matrix<Scalar> y(x.rows(), x.cols());
  const Index cols_per = x.rows() / d;
  for (Index j = 0; j < x.cols(); ++j) {
    const Matrix<Scalar> v = x.col(j).reshaped(d, cols_per);
    const Matrix<Scalar> s = m_llt.solve(v);
    y.col(j) = s.reshaped();
  }
  return y;
}

}  // namespace detail

/// Second derivatives of the vicinity objective at (W, H), column-stack
/// vectorization. HH acts on vec(H) perturbations, WW on vec(W), and WH
/// couples them: WH = (1/Kn)(E + (H (x) W)^T).
template <typename Scalar>
struct HessianBlocks {
  Matrix<Scalar> hh;  // dnK x dnK
  Matrix<Scalar> ww;  // Kd x Kd
  Matrix<Scalar> wh;  // dnK x Kd
  Matrix<Scalar> e;   // dnK x Kd
  Matrix<Scalar> base_w;
  Matrix<Scalar> base_h;
  ModelParams<Scalar> params;
};

template <typename Scalar>
HessianBlocks<Scalar> hessian_blocks(const Matrix<Scalar>& w,
                                     const Matrix<Scalar>& h,
                                     const ModelParams<Scalar>& p) {
  check_weight_shape(w, p.dims);
  check_feature_shape(h, p.dims);
  validate(p);
  const Index d = p.dims.d, K = p.dims.K;
  const Index cols = h.cols();
  const Scalar kn = Scalar(p.dims.K) * Scalar(p.dims.n);

  HessianBlocks<Scalar> b;
  b.base_w = w;
  b.base_h = h;
  b.params = p;
  b.hh = Eigen::kroneckerProduct(Matrix<Scalar>::Identity(cols, cols),
                                 Matrix<Scalar>(w.transpose() * w) / kn);
  b.hh.diagonal().array() += (p.lambda_h + p.beta) / kn;
  b.ww = Eigen::kroneckerProduct(Matrix<Scalar>(h * h.transpose()) / kn,
                                 Matrix<Scalar>::Identity(K, K));
  b.ww.diagonal().array() += p.lambda_w / Scalar(K);
  b.e = detail::residual_cross(w, h, p.dims);
  b.wh = (b.e + Eigen::kroneckerProduct(h, w).transpose()) / kn;
  return b;
}

enum class ResponseKind { exact_schur, neumann };

/// Linear map vec(dH0) -> vec(dH*) describing how the vicinity solution
/// moves under anchor perturbations. Either the exact Schur form
/// F = (beta/Kn)(HH - WH WW^{-1} WH^T)^{-1} or its first-order Neumann
/// expansion in 1/beta. The dense matrix is kept only at desk scale;
/// apply() works regardless through factorized solves.
template <typename Scalar>
struct ResponseOperator {
  ResponseKind kind{ResponseKind::exact_schur};
  ModelParams<Scalar> params;
  Matrix<Scalar> base_w;   // K x d
  Matrix<Scalar> base_h;   // d x nK
  Matrix<Scalar> base_h0;  // anchor provenance; empty unless set by caller
  bool collapsed_base{false};
  bool beta_warning{false};  // beta below the safe-expansion heuristic
  std::optional<Matrix<Scalar>> dense;

  // Apply machinery, valid independent of `dense`:
  //   cross = E^T + H (x) W  (equals Kn WH^T),
  //   wtw   = W^T W,
  //   feat  = LLT of W^T W + (lambda_h + beta) I_d,
  //   aw    = LLT of H H^T (x) I_K + n lambda_w I  (equals Kn WW),
  //   cap   = LDLT of aw - cross feat^{-1} cross^T (exact kind only).
  Matrix<Scalar> cross;
  Matrix<Scalar> wtw;
  Eigen::LLT<Matrix<Scalar>> feat;
  Eigen::LLT<Matrix<Scalar>> aw;
  Eigen::LDLT<Matrix<Scalar>> cap;

  Index size() const { return base_h.size(); }

  const Matrix<Scalar>& matrix() const {
    if (!dense)
      throw std::logic_error(
          "ResponseOperator: stored in apply-only form (dnK > dense limit)");
    return *dense;
  }

  Vector<Scalar> apply_vec(const Vector<Scalar>& v) const {
    if (v.size() != size())
      throw ShapeError("ResponseOperator::apply_vec: length mismatch");
    const Index d = params.dims.d;
    if (kind == ResponseKind::exact_schur) {
      // Woodbury: (A_H - B^T A_W^{-1} B)^{-1} =
      //   A_H^{-1} + A_H^{-1} B^T cap^{-1} B A_H^{-1}.
      const Matrix<Scalar> x = detail::solve_block_diag(feat, Matrix<Scalar>(v), d);
      const Vector<Scalar> y = cap.solve(cross * x);
      const Matrix<Scalar> z =
          detail::solve_block_diag(feat, Matrix<Scalar>(cross.transpose() * y), d);
      return params.beta * (x + z);
    }
    const Index cols = v.size() / d;
    const Matrix<Scalar> vm = v.reshaped(d, cols);
    const Matrix<Scalar> coupled = wtw * vm;
    return (Scalar(1) - params.lambda_h / params.beta) * v -
           Vector<Scalar>(coupled.reshaped()) / params.beta +
           cross.transpose() * aw.solve(cross * v) / params.beta;
  }

  Matrix<Scalar> apply(const Matrix<Scalar>& dh0) const {
    check_feature_shape(dh0, params.dims);
    const Vector<Scalar> out = apply_vec(dh0.reshaped());
    return out.reshaped(params.dims.d, dh0.cols());
  }
};

namespace detail {

template <typename Scalar>
ResponseOperator<Scalar> response_common(const Matrix<Scalar>& w,
                                         const Matrix<Scalar>& h,
                                         const ModelParams<Scalar>& p) {
  check_weight_shape(w, p.dims);
  check_feature_shape(h, p.dims);
  validate(p);
  ResponseOperator<Scalar> op;
  op.params = p;
  op.base_w = w;
  op.base_h = h;
  op.collapsed_base = p.dims.K >= 2 && is_collapsed(h, p.dims);
  op.beta_warning = p.beta < 50 * std::max(Scalar(1), p.lambda_h);
  op.wtw = w.transpose() * w;
  op.cross = residual_cross(w, h, p.dims).transpose() +
             Matrix<Scalar>(Eigen::kroneckerProduct(h, w));
  Matrix<Scalar> aw_mat =
      Eigen::kroneckerProduct(Matrix<Scalar>(h * h.transpose()),
                              Matrix<Scalar>::Identity(p.dims.K, p.dims.K));
  aw_mat.diagonal().array() += Scalar(p.dims.n) * p.lambda_w;
  op.aw.compute(aw_mat);
  return op;
}

}  // namespace detail

/// Exact response: F = (beta/Kn)(HH - WH WW^{-1} WH^T)^{-1}, assembled via
/// the Woodbury identity so only d x d and Kd x Kd factorizations are ever
/// formed. Symmetric positive definite whenever the joint Hessian is.
template <typename Scalar>
ResponseOperator<Scalar> exact_response(const Matrix<Scalar>& w,
                                        const Matrix<Scalar>& h,
                                        const ModelParams<Scalar>& p) {
  ResponseOperator<Scalar> op = detail::response_common(w, h, p);
  op.kind = ResponseKind::exact_schur;
  const Index d = p.dims.d;

  Matrix<Scalar> m = op.wtw;
  m.diagonal().array() += p.lambda_h + p.beta;
  op.feat.compute(m);

  // cap = A_W - B A_H^{-1} B^T; positive definite iff the Schur complement
  // in the feature block is (both are Schur complements of the same
  // positive joint Hessian).
  const Matrix<Scalar> u =
      detail::solve_block_diag(op.feat, Matrix<Scalar>(op.cross.transpose()), d);
  Matrix<Scalar> cap_mat = op.aw.reconstructedMatrix() - op.cross * u;
  cap_mat = ((cap_mat + cap_mat.transpose()) / 2).eval();
  op.cap.compute(cap_mat);
  if (!(op.cap.vectorD().minCoeff() > Scalar(0)))
    throw DegenerateModel(
        "exact_response: singular Schur complement at this base point");

  if (op.size() <= kDenseResponseLimit) {
    const Matrix<Scalar> minv =
        op.feat.solve(Matrix<Scalar>::Identity(d, d));
    Matrix<Scalar> f = Eigen::kroneckerProduct(
        Matrix<Scalar>::Identity(h.cols(), h.cols()), minv);
    f += u * op.cap.solve(Matrix<Scalar>(u.transpose()));
    f *= p.beta;
    op.dense = ((f + f.transpose()) / 2).eval();
  }
  return op;
}

template <typename Scalar>
ResponseOperator<Scalar> exact_response(const HessianBlocks<Scalar>& blocks,
                                        const ModelParams<Scalar>& p) {
  if (!(blocks.params == p))
    throw std::invalid_argument("exact_response: params differ from blocks");
  return exact_response(blocks.base_w, blocks.base_h, p);
}

/// First-order Neumann form:
/// F = (1 - lambda_h/beta) I - (1/beta) I_{nK} (x) W^T W + (1/beta) Z with
/// Z = B^T (H H^T (x) I_K + n lambda_w I)^{-1} B,  B = E^T + H (x) W.
/// Valid for beta well above max(1, lambda_h); the operator carries a
/// warning flag when that margin is thin.
template <typename Scalar>
ResponseOperator<Scalar> neumann_response(const Matrix<Scalar>& w,
                                          const Matrix<Scalar>& h,
                                          const ModelParams<Scalar>& p) {
  ResponseOperator<Scalar> op = detail::response_common(w, h, p);
  op.kind = ResponseKind::neumann;
  if (op.size() <= kDenseResponseLimit) {
    Matrix<Scalar> f = Eigen::kroneckerProduct(
        Matrix<Scalar>::Identity(h.cols(), h.cols()), op.wtw);
    f /= -p.beta;
    f += op.cross.transpose() * op.aw.solve(op.cross) / p.beta;
    f.diagonal().array() += Scalar(1) - p.lambda_h / p.beta;
    op.dense = std::move(f);
  }
  return op;
}

/// Composed map vec(dH0) -> vec(dW*) = -WW^{-1} WH^T F vec(dH0); the weight
/// response riding on an exact feature response at the same base point.
template <typename Scalar>
struct DeltaWMap {
  ResponseOperator<Scalar> response;

  Matrix<Scalar> apply(const Matrix<Scalar>& dh0) const {
    const Vector<Scalar> dh = response.apply_vec(dh0.reshaped());
    const Vector<Scalar> dw = -response.aw.solve(response.cross * dh);
    return dw.reshaped(response.base_w.rows(), response.base_w.cols());
  }

  // -WW^{-1} WH^T F as an explicit Kd x dnK matrix; desk scale only.
  Matrix<Scalar> matrix() const {
    return -response.aw.solve(response.cross * response.matrix());
  }
};

template <typename Scalar>
DeltaWMap<Scalar> delta_w_response(const HessianBlocks<Scalar>& blocks,
                                   const ResponseOperator<Scalar>& f,
                                   const ModelParams<Scalar>& p) {
  if (f.kind != ResponseKind::exact_schur)
    throw std::invalid_argument("delta_w_response: needs an exact_schur F");
  if (!(blocks.params == p) || !(f.params == p))
    throw std::invalid_argument("delta_w_response: params mismatch");
  if (blocks.base_w != f.base_w || blocks.base_h != f.base_h)
    throw std::invalid_argument("delta_w_response: base-point mismatch");
  return DeltaWMap<Scalar>{f};
}

/// Class block F_{k,ktilde} = (e_k (x) I_{dn})^T F (e_ktilde (x) I_{dn}),
/// one-based indices. Falls back to columnwise applies when the operator
/// has no dense matrix.
template <typename Scalar>
Matrix<Scalar> extract_block(const ResponseOperator<Scalar>& f, Index k,
                             Index ktilde) {
  const Index K = f.params.dims.K;
  const Index dn = f.params.dims.d * f.params.dims.n;
  if (k < 1 || k > K || ktilde < 1 || ktilde > K)
    throw std::out_of_range("extract_block: class index out of range");
  if (f.dense) return f.dense->block((k - 1) * dn, (ktilde - 1) * dn, dn, dn);
  Matrix<Scalar> out(dn, dn);
  Vector<Scalar> basis = Vector<Scalar>::Zero(f.size());
  for (Index j = 0; j < dn; ++j) {
    basis[(ktilde - 1) * dn + j] = Scalar(1);
    out.col(j) = f.apply_vec(basis).segment((k - 1) * dn, dn);
    basis[(ktilde - 1) * dn + j] = Scalar(0);
  }
  return out;
}

/// Closed-form spectrum of one class block of the Neumann response at a
/// collapsed base point.
template <typename Scalar>
struct BlockSpectrum {
  Index k{1};
  Index ktilde{1};
  std::vector<Scalar> singular_values;  // sorted descending, dn entries
  struct Analytic {
    std::vector<Scalar> lambda;  // d entries, diagonal blocks only
    std::vector<Scalar> mu;      // d entries, diagonal blocks only
    std::string eigvec_basis;
  };
  std::optional<Analytic> analytic;
};

/// Diagonal block eigenvalues come in families lambda_i (multiplicity n-1,
/// directions s_j (x) r_i for j >= 2) plus lambda_i + mu_i/beta (the
/// s_1 (x) r_i direction); indices i <= K live on the simplex frame, the
/// rest on its orthogonal complement and carry eigenvalue exactly 1.
/// Off-diagonal blocks are rank one with singular value 2 lambda_h (1-c)/beta.
template <typename Scalar>
BlockSpectrum<Scalar> analytic_block_spectrum(const ModelParams<Scalar>& p,
                                              Index k, Index ktilde) {
  validate(p);
  const Index K = p.dims.K, n = p.dims.n, d = p.dims.d;
  if (K < 2 || n < 2)
    throw std::invalid_argument("analytic_block_spectrum: needs K,n >= 2");
  if (d <= K)
    throw std::invalid_argument("analytic_block_spectrum: needs d > K");
  if (!(p.lambda_h > Scalar(0)) || !(p.lambda_h * p.lambda_w < Scalar(1)))
    throw std::invalid_argument(
        "analytic_block_spectrum: needs lambda_h > 0 and lambda_h lambda_w < 1");
  if (k < 1 || k > K || ktilde < 1 || ktilde > K)
    throw std::out_of_range("analytic_block_spectrum: class index out of range");

  BlockSpectrum<Scalar> spec;
  spec.k = k;
  spec.ktilde = ktilde;
  const Scalar c = p.c();
  const Scalar rt = std::sqrt(p.lambda_h / p.lambda_w);

  if (k != ktilde) {
    spec.singular_values.assign(static_cast<std::size_t>(d * n), Scalar(0));
    spec.singular_values[0] = 2 * p.lambda_h * (1 - c) / p.beta;
    typename BlockSpectrum<Scalar>::Analytic an;
    an.eigvec_basis =
        "rank one on s_1 (x) span(r_k, r_ktilde); s_1 = 1_n/sqrt(n)";
    spec.analytic = std::move(an);
    return spec;
  }

  typename BlockSpectrum<Scalar>::Analytic an;
  an.lambda.resize(static_cast<std::size_t>(d));
  an.mu.resize(static_cast<std::size_t>(d));
  for (Index i = 0; i < d; ++i) {
    const bool on_frame = i < K;
    an.lambda[static_cast<std::size_t>(i)] =
        on_frame ? Scalar(1) - rt / p.beta : Scalar(1) - p.lambda_h / p.beta;
    if (!on_frame)
      an.mu[static_cast<std::size_t>(i)] = p.lambda_h;
    else if (i == k - 1)
      an.mu[static_cast<std::size_t>(i)] = (2 * c - 1) * (2 * c - 1) * rt;
    else
      an.mu[static_cast<std::size_t>(i)] = (c * c + (1 - c) * (1 - c)) * rt;
  }
  an.eigvec_basis =
      "s_j (x) r_i; s_1 = 1_n/sqrt(n), r_1..r_K simplex frame, "
      "r_(K+1)..r_d its orthogonal complement";

  spec.singular_values.reserve(static_cast<std::size_t>(d * n));
  for (Index i = 0; i < d; ++i) {
    const Scalar lam = an.lambda[static_cast<std::size_t>(i)];
    spec.singular_values.push_back(lam +
                                   an.mu[static_cast<std::size_t>(i)] / p.beta);
    for (Index j = 1; j < n; ++j) spec.singular_values.push_back(lam);
  }
  std::sort(spec.singular_values.begin(), spec.singular_values.end(),
            std::greater<Scalar>());
  spec.analytic = std::move(an);

  // Structural guarantees of the closed form, cheap to re-assert: the
  // orthogonal-complement directions sit at exactly 1 with multiplicity
  // d-K, and the floor is the simplex-frame family.
  const Scalar eps = 16 * std::numeric_limits<Scalar>::epsilon();
  for (Index i = 0; i < d - K; ++i)
    if (std::abs(spec.singular_values[static_cast<std::size_t>(i)] -
                 Scalar(1)) > eps)
      throw std::logic_error("analytic_block_spectrum: top multiplicity broken");
  if (std::abs(spec.singular_values.back() - (Scalar(1) - rt / p.beta)) > eps)
    throw std::logic_error("analytic_block_spectrum: spectral floor broken");
  return spec;
}

/// Numeric counterpart: SVD of the extracted block, no analytic part.
template <typename Scalar>
BlockSpectrum<Scalar> numeric_block_spectrum(const ResponseOperator<Scalar>& f,
                                             Index k, Index ktilde) {
  const Matrix<Scalar> block = extract_block(f, k, ktilde);
  Eigen::JacobiSVD<Matrix<Scalar>> svd(block);
  BlockSpectrum<Scalar> spec;
  spec.k = k;
  spec.ktilde = ktilde;
  const auto& sv = svd.singularValues();
  spec.singular_values.assign(sv.data(), sv.data() + sv.size());
  return spec;
}

template <typename Scalar>
struct SpectrumComparison {
  BlockSpectrum<Scalar> numeric;
  BlockSpectrum<Scalar> analytic;
  Scalar max_abs_err{0};
};

/// Sorted entrywise comparison of numeric vs analytic block spectra. The
/// closed form only describes collapsed base points, so other bases are
/// refused outright.
template <typename Scalar>
SpectrumComparison<Scalar> compare_block_spectrum(
    const ResponseOperator<Scalar>& f, Index k, Index ktilde) {
  if (!f.collapsed_base)
    throw std::invalid_argument(
        "compare_block_spectrum: base point is not collapsed");
  SpectrumComparison<Scalar> cmp;
  cmp.numeric = numeric_block_spectrum(f, k, ktilde);
  cmp.analytic = analytic_block_spectrum(f.params, k, ktilde);
  const std::size_t m = cmp.numeric.singular_values.size();
  if (m != cmp.analytic.singular_values.size())
    throw std::logic_error("compare_block_spectrum: length mismatch");
  for (std::size_t i = 0; i < m; ++i)
    cmp.max_abs_err = std::max(
        cmp.max_abs_err, std::abs(cmp.numeric.singular_values[i] -
                                  cmp.analytic.singular_values[i]));
  return cmp;
}

/// K_{d,K}: permutation with K_{d,K} vec(A) = vec(A^T) for A of size d x K.
/// Satisfies K^T (X1 (x) X2) K = X2 (x) X1 and K (x (x) Y) = Y (x) x.
template <typename Scalar>
Matrix<Scalar> commutation_matrix(Index d, Index K) {
  if (d < 1 || K < 1)
    throw std::invalid_argument("commutation_matrix: dims must be positive");
  Matrix<Scalar> m = Matrix<Scalar>::Zero(d * K, d * K);
  for (Index i = 0; i < d; ++i)
    for (Index k = 0; k < K; ++k) m(i * K + k, k * d + i) = Scalar(1);
  return m;
}

}  // namespace collapse
