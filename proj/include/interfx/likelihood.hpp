#pragma once

#include "interfx/core.hpp"
#include "interfx/moments.hpp"
#include "interfx/theta.hpp"

namespace interfx {

// Factored view of Sigma_zz = Gamma M_ff Gamma' + Sigma_epsilon. Everything is
// built from the blockwise inverse plus the r x r core G = (M_ff^{-1} +
// Gamma' Sigma^{-1} Gamma)^{-1}; Sigma_zz itself is never assembled.
struct WoodburyOps {
  BlockCovInv sinv;
  MatrixXd sinv_gamma;   // Sigma^{-1} Gamma
  MatrixXd gram;         // Gamma' Sigma^{-1} Gamma
  MatrixXd g;            // (M_ff^{-1} + gram)^{-1}
  MatrixXd a;            // Sigma^{-1} Gamma G = Sigma_zz^{-1} Gamma M_ff
  double logdet_core = 0.0;  // log|M_ff^{-1} + gram|
  double logdet_mff = 0.0;

  explicit WoodburyOps(const Theta& th, double singular_tol = 1e-12)
      : sinv(th.sigma) {
    const int r = th.n_factors();
    sinv_gamma = sinv.apply(th.gamma);
    gram.noalias() = th.gamma.transpose() * sinv_gamma;
    symmetrize(gram);
    if (r == 0) {
      g = MatrixXd();
      a = MatrixXd(th.stacked_size(), 0);
      return;
    }
    Eigen::LLT<MatrixXd> mff_llt(th.m_ff);
    if (mff_llt.info() != Eigen::Success)
      throw SingularityError("M_ff not positive definite",
                             Eigen::SelfAdjointEigenSolver<MatrixXd>(th.m_ff)
                                 .eigenvalues().minCoeff());
    logdet_mff = 2.0 * mff_llt.matrixL().toDenseMatrix().diagonal().array().log().sum();
    MatrixXd core = mff_llt.solve(MatrixXd::Identity(r, r)) + gram;
    symmetrize(core);
    Eigen::SelfAdjointEigenSolver<MatrixXd> es(core);
    const double lo = es.eigenvalues().minCoeff(), hi = es.eigenvalues().maxCoeff();
    if (!(lo > singular_tol * std::max(1.0, hi)))
      throw SingularityError("Woodbury core G^{-1} numerically singular", lo);
    logdet_core = es.eigenvalues().array().log().sum();
    g = es.eigenvectors() * es.eigenvalues().cwiseInverse().asDiagonal() *
        es.eigenvectors().transpose();
    a.noalias() = sinv_gamma * g;
  }

  double logdet_sigma_zz() const { return sinv.log_det + logdet_mff + logdet_core; }

  // Sigma_zz^{-1} v = Sigma^{-1} v - Sigma^{-1} Gamma G Gamma' Sigma^{-1} v.
  MatrixXd apply_inverse(const MatrixXd& v) const {
    MatrixXd out = sinv.apply(v);
    if (a.cols() > 0) out.noalias() -= a * (sinv_gamma.transpose() * v);
    return out;
  }
};

// Sigma_zz^{-1} v without forming Sigma_zz; O(N(K+1)r^2 + r^3) per column.
inline MatrixXd sigma_zz_apply_inverse(const Theta& theta, const MatrixXd& v) {
  if (v.rows() != theta.stacked_size())
    throw DataError("vector has wrong row count for Sigma_zz");
  return WoodburyOps(theta).apply_inverse(v);
}

namespace detail {

// tr[(I (x) B) M_zz (I (x) B') Sigma_zz^{-1}] through the factored moments.
inline double trace_term(const Theta& th, const Moments& m, const WoodburyOps& w) {
  const int p = th.block_size();
  const MatrixXd b = th.b_matrix();
  double tr = 0.0;
  for (int i = 0; i < th.n_units(); ++i) {
    const MatrixXd bmb = b * m.unit_block(i) * b.transpose();
    tr += bmb(0, 0) * w.sinv.inv_e[i];
    if (th.n_regressors() > 0)
      tr += (w.sinv.inv_x[i] * bmb.bottomRightCorner(p - 1, p - 1)).trace();
  }
  if (th.n_factors() > 0) {
    MatrixXd u = m.z().transpose() * apply_ibt(th, w.sinv_gamma);  // T x r
    tr -= (1.0 / m.n_periods()) * (u * w.g).cwiseProduct(u).sum();
  }
  return tr;
}

}  // namespace detail

// Objective -(1/2N) ln|Sigma_zz| - (1/2N) tr[(I (x) B) M_zz (I (x) B') Sigma_zz^{-1}];
// the log-determinant goes through the matrix-determinant lemma. det(I (x) B) = 1,
// so no Jacobian term appears.
inline double log_likelihood(const Theta& theta, const Moments& moments) {
  WoodburyOps w(theta);
  const double n = theta.n_units();
  return -0.5 / n * w.logdet_sigma_zz() - 0.5 / n * detail::trace_term(theta, moments, w);
}

}  // namespace interfx
