#pragma once

#include <optional>
#include <vector>

#include "interfx/core.hpp"
#include "interfx/likelihood.hpp"
#include "interfx/moments.hpp"
#include "interfx/theta.hpp"

namespace interfx {

struct CovarianceEstimate {
  MatrixXd omega_hat;  // K x K inverse-variance matrix
  VectorXd se_beta;    // sqrt(diag(omega_hat^{-1}) / NT)
  enum class Method { trace_form, moment_form } method = Method::trace_form;
};

// GLS factor recovery at the estimated parameters:
// f_t = (Gamma' Sigma^{-1} Gamma)^{-1} Gamma' Sigma^{-1} B zdot_t.
inline MatrixXd estimate_factors(const Theta& theta, const Moments& moments) {
  const int r = theta.n_factors();
  if (r == 0) return MatrixXd(moments.n_periods(), 0);
  BlockCovInv sinv(theta.sigma);
  MatrixXd sg = sinv.apply(theta.gamma);
  MatrixXd gram = theta.gamma.transpose() * sg;
  symmetrize(gram);
  Eigen::SelfAdjointEigenSolver<MatrixXd> es(gram);
  const double hi = es.eigenvalues().maxCoeff();
  int rank = 0;
  for (int j = 0; j < r; ++j)
    if (es.eigenvalues()(j) > 1e-12 * std::max(1.0, hi)) ++rank;
  if (rank < r)
    throw SingularityError("loading Gram matrix has rank " + std::to_string(rank) +
                               " < " + std::to_string(r),
                           es.eigenvalues().minCoeff());
  MatrixXd rhs = moments.z().transpose() * apply_ibt(theta, sg);  // T x r
  Eigen::LLT<MatrixXd> llt(gram);
  return llt.solve(rhs.transpose()).transpose();
}

inline MatrixXd estimate_factors(const Theta& theta, const PanelDataset& data) {
  return estimate_factors(theta, demean_panel(data));
}

namespace detail {

// Trace-form covariance with an explicit projection basis (T x q) and the
// y-equation loading block that enters the annihilator.
inline CovarianceEstimate trace_form_impl(const Theta& theta, const Moments& moments,
                                          const MatrixXd& basis, const MatrixXd& lambda) {
  const int n = theta.n_units(), t = moments.n_periods(), k = theta.n_regressors();
  if (k == 0) return {MatrixXd(0, 0), VectorXd(0), CovarianceEstimate::Method::trace_form};

  // Mddot = See^{-1} - See^{-1} L (L' See^{-1} L)^{-1} L' See^{-1}
  VectorXd see_inv(n);
  for (int i = 0; i < n; ++i) see_inv(i) = 1.0 / theta.sigma.blocks[i].e_var;
  MatrixXd mddot = see_inv.asDiagonal();
  if (lambda.cols() > 0) {
    MatrixXd sl = see_inv.asDiagonal() * lambda;
    MatrixXd core = lambda.transpose() * sl;
    symmetrize(core);
    Eigen::LLT<MatrixXd> llt(core);
    if (llt.info() != Eigen::Success)
      throw SingularityError("Lambda' See^{-1} Lambda singular",
                             Eigen::SelfAdjointEigenSolver<MatrixXd>(core)
                                 .eigenvalues().minCoeff());
    mddot.noalias() -= sl * llt.solve(sl.transpose());
  }

  // Orthonormal basis for the projection span.
  MatrixXd q;
  if (basis.cols() > 0) {
    Eigen::ColPivHouseholderQR<MatrixXd> qr(basis);
    const int rank = static_cast<int>(qr.rank());
    q = qr.householderQ() * MatrixXd::Identity(t, rank);
  }

  std::vector<MatrixXd> xs(k);
  for (int j = 0; j < k; ++j) {
    MatrixXd xj(n, t);
    for (int i = 0; i < n; ++i) xj.row(i) = moments.x_rows(i).row(j);
    if (q.cols() > 0) xj.noalias() -= (xj * q) * q.transpose();
    xs[j] = std::move(xj);
  }

  CovarianceEstimate est;
  est.method = CovarianceEstimate::Method::trace_form;
  est.omega_hat.resize(k, k);
  const double scale = 1.0 / (static_cast<double>(n) * t);
  for (int pcol = 0; pcol < k; ++pcol) {
    MatrixXd mx = mddot * xs[pcol];
    for (int qcol = pcol; qcol < k; ++qcol) {
      est.omega_hat(pcol, qcol) = scale * mx.cwiseProduct(xs[qcol]).sum();
      est.omega_hat(qcol, pcol) = est.omega_hat(pcol, qcol);
    }
  }
  Eigen::LLT<MatrixXd> llt(est.omega_hat);
  if (llt.info() != Eigen::Success)
    throw SingularityError("trace-form covariance not positive definite",
                           Eigen::SelfAdjointEigenSolver<MatrixXd>(est.omega_hat)
                               .eigenvalues().minCoeff());
  est.se_beta = (llt.solve(MatrixXd::Identity(k, k)).diagonal() * scale).cwiseSqrt();
  return est;
}

inline MatrixXd projection_basis(const Moments& moments, const MatrixXd& f_hat,
                                 int n_proj_cols, const MatrixXd* extra) {
  const int t = moments.n_periods();
  const int nf = (n_proj_cols < 0) ? static_cast<int>(f_hat.cols()) : n_proj_cols;
  const int ne = extra ? static_cast<int>(extra->cols()) : 0;
  MatrixXd basis(t, 1 + nf + ne);
  basis.col(0).setOnes();
  if (nf > 0) basis.middleCols(1, nf) = f_hat.leftCols(nf);
  if (ne > 0) basis.rightCols(ne) = *extra;
  return basis;
}

}  // namespace detail

// Trace-form estimator of Omega-bar: (p,q) entry (1/NT) tr[Mddot X_p M(basis) X_q'].
// The projection basis is (1_T, F) for the basic model, (1_T, G) under zero
// restrictions or observed loadings, and (1_T, G, D) with common regressors.
inline CovarianceEstimate covariance_trace_form(const Theta& theta, const Moments& moments,
                                                const MatrixXd& f_hat,
                                                const ModelSpec& spec = ModelSpec::basic(),
                                                const MatrixXd* extra_basis = nullptr) {
  const int r = theta.n_factors();
  const int r1 = (spec.r1 < 0) ? r : spec.r1;
  int proj_cols = (spec.variant == ModelVariant::basic) ? r : r1;
  MatrixXd lambda = theta.lambda();
  if (spec.variant == ModelVariant::zero_restrictions) lambda = lambda.leftCols(r1).eval();
  MatrixXd basis = detail::projection_basis(moments, f_hat, proj_cols, extra_basis);
  return detail::trace_form_impl(theta, moments, basis, lambda);
}

inline CovarianceEstimate covariance_trace_form(const Theta& theta, const PanelDataset& data,
                                                const MatrixXd& f_hat,
                                                const ModelSpec& spec = ModelSpec::basic(),
                                                const MatrixXd* extra_basis = nullptr) {
  return covariance_trace_form(theta, demean_panel(data), f_hat, spec, extra_basis);
}

// Moment-form estimator (basic model): Omega_pq = (1/N) sum_i Sigma_iie^{-1} Sigma_iix^{(p,q)}.
inline CovarianceEstimate covariance_moment_form(const Theta& theta) {
  const int n = theta.n_units(), k = theta.n_regressors();
  CovarianceEstimate est;
  est.method = CovarianceEstimate::Method::moment_form;
  est.omega_hat = MatrixXd::Zero(k, k);
  for (int i = 0; i < n; ++i)
    est.omega_hat += theta.sigma.blocks[i].x_cov / theta.sigma.blocks[i].e_var;
  est.omega_hat /= static_cast<double>(n);
  est.se_beta = VectorXd(k);
  return est;
}

// Moment-form SEs need the sample size; convenience wrapper filling them in.
inline CovarianceEstimate covariance_moment_form(const Theta& theta, int n_periods) {
  CovarianceEstimate est = covariance_moment_form(theta);
  const int k = theta.n_regressors();
  if (k > 0) {
    Eigen::LLT<MatrixXd> llt(est.omega_hat);
    if (llt.info() != Eigen::Success)
      throw SingularityError("moment-form covariance not positive definite",
                             Eigen::SelfAdjointEigenSolver<MatrixXd>(est.omega_hat)
                                 .eigenvalues().minCoeff());
    est.se_beta = (llt.solve(MatrixXd::Identity(k, k)).diagonal() /
                   (static_cast<double>(theta.n_units()) * n_periods))
                      .cwiseSqrt();
  }
  return est;
}

namespace detail {

// Keeps the determined entries of the Sigma_ii FOC: the (0,0) scalar and the
// lower-right K x K block; the e/v cross entries carry the multipliers.
inline double masked_norm(const MatrixXd& m) {
  const int k = static_cast<int>(m.rows()) - 1;
  double v = std::abs(m(0, 0));
  if (k > 0) v = std::max(v, m.bottomRightCorner(k, k).cwiseAbs().maxCoeff());
  return v;
}

struct FocWork {
  MatrixXd focg;   // Gamma' Sigma^{-1} (M_ww - Sigma_zz), r x NP
  MatrixXd v;      // T x r, rows (G Gamma' Sigma^{-1} w_t)'
  MatrixXd wz;     // (I (x) B) zdot, NP x T
  WoodburyOps w;
  FocWork(const Theta& th, const Moments& m) : w(th) {
    wz = apply_ib(th, m.z());
    const int r = th.n_factors();
    if (r > 0) {
      MatrixXd u = wz.transpose() * w.sinv_gamma;  // T x r
      focg = (u.transpose() * wz.transpose()) / m.n_periods();
      focg.noalias() -= (w.gram * th.m_ff) * th.gamma.transpose();
      focg.noalias() -= th.gamma.transpose();
      v.noalias() = u * w.g;
    } else {
      focg = MatrixXd(0, th.stacked_size());
      v = MatrixXd(m.n_periods(), 0);
    }
  }
};

inline double foc_beta(const Theta& th, const Moments& m, const FocWork& fw) {
  const int n = th.n_units(), k = th.n_regressors(), r = th.n_factors();
  if (k == 0) return 0.0;
  const MatrixXd b = th.b_matrix();
  const MatrixXd lambda = th.lambda();
  VectorXd res = VectorXd::Zero(k);
  for (int i = 0; i < n; ++i) {
    const double w_i = fw.w.sinv.inv_e[i];
    // (1/T) sum_t xdot'(ydot - xdot beta) is the x,y block of M_zz B'
    const MatrixXd mb = m.unit_block(i) * b.transpose();
    VectorXd term = mb.block(1, 0, k, 1);
    if (r > 0) {
      const MatrixXd mxv = (m.x_rows(i) * fw.v) / m.n_periods();  // K x r
      term.noalias() -= mxv * lambda.row(i).transpose();
    }
    res += w_i * term;
  }
  return res.cwiseAbs().maxCoeff() / n;
}

inline MatrixXd sigma_foc_block(const Theta& th, const Moments& m, const FocWork& fw,
                                int i, bool with_g_terms) {
  const MatrixXd b = th.b_matrix();
  MatrixXd e_ii = b * m.unit_block(i) * b.transpose() - th.sigma.block(i);
  if (th.n_factors() > 0) {
    const MatrixXd gi = th.gamma_block(i);
    e_ii.noalias() -= gi * th.m_ff * gi.transpose();
    if (with_g_terms) {
      const int p = th.block_size();
      const MatrixXd t2 = gi * (fw.w.g * fw.focg.middleCols(i * p, p));
      e_ii -= t2 + t2.transpose();
    }
  }
  return e_ii;
}

}  // namespace detail

// Maximum FOC residual across the variant's first-order-condition system;
// used as the convergence certificate.
inline double foc_residuals(const Theta& theta, const Moments& moments,
                            const ModelSpec& spec = ModelSpec::basic()) {
  const int n = theta.n_units(), p = theta.block_size(), r = theta.n_factors();
  const int r1 = (spec.r1 < 0) ? r : spec.r1;
  const int r2 = r - r1;
  detail::FocWork fw(theta, moments);

  double res = detail::foc_beta(theta, moments, fw);

  const bool g_terms = spec.variant != ModelVariant::basic;
  for (int i = 0; i < n; ++i)
    res = std::max(res, detail::masked_norm(
                            detail::sigma_foc_block(theta, moments, fw, i, g_terms)));

  if (r == 0) return res;

  switch (spec.variant) {
    case ModelVariant::basic:
      res = std::max(res, max_abs(fw.focg) / n);
      break;
    case ModelVariant::zero_restrictions: {
      const MatrixXd psif = fw.w.sinv.apply(fw.focg.transpose()).transpose();
      MatrixXd ycols(r, n);
      MatrixXd xcols(r, n * (p - 1));
      for (int j = 0; j < n; ++j) {
        ycols.col(j) = psif.col(j * p);
        if (p > 1) xcols.middleCols(j * (p - 1), p - 1) = psif.middleCols(j * p + 1, p - 1);
      }
      if (r1 > 0)
        res = std::max(res, max_abs((fw.w.g.topRows(r1) * ycols).eval()));
      if (p > 1) res = std::max(res, max_abs(xcols) / n);
      if (r2 > 0) {
        const MatrixXd psi = theta.lambda().leftCols(r1);
        const MatrixXd s6 = ycols * psi;  // r x r1
        res = std::max(res, max_abs((fw.w.g.bottomRows(r2) * s6).eval()) / n);
      }
      break;
    }
    case ModelVariant::observed_phi:
    case ModelVariant::phi_and_common: {
      const MatrixXd psif = fw.w.sinv.apply(fw.focg.transpose()).transpose();
      res = std::max(res, max_abs((psif * theta.gamma).eval()) / n);
      if (r2 > 0) {
        MatrixXd ycols(r, n);
        for (int j = 0; j < n; ++j) ycols.col(j) = psif.col(j * p);
        const MatrixXd s5 = ycols * theta.lambda();  // r x r
        res = std::max(res, max_abs((fw.w.g.bottomRows(r2) * s5).eval()) / n);
      }
      break;
    }
  }
  return res;
}

// (1/N) Gamma' Sigma_zz^{-1} (M_ww - Sigma_zz) Sigma_zz^{-1} Gamma: vanishes
// and is symmetric at any stationary point with free M_ff.
inline MatrixXd lagrange_consistency(const Theta& theta, const Moments& moments) {
  const int r = theta.n_factors();
  if (r == 0) return MatrixXd(0, 0);
  WoodburyOps w(theta);
  Eigen::LLT<MatrixXd> mll(theta.m_ff);
  MatrixXd szg = mll.solve(w.a.transpose()).transpose();  // Sigma_zz^{-1} Gamma
  MatrixXd wz = apply_ib(theta, moments.z());
  MatrixXd u = wz.transpose() * szg;  // T x r
  MatrixXd out = (u.transpose() * u) / moments.n_periods();
  MatrixXd gsg = szg.transpose() * theta.gamma;  // Gamma' Sigma_zz^{-1} Gamma
  out.noalias() -= gsg * theta.m_ff * gsg.transpose();
  out.noalias() -= szg.transpose() * theta.sigma.apply(szg);
  return out / theta.n_units();
}

}  // namespace interfx
