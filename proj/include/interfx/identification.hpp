#pragma once

#include <string>
#include <utility>
#include <vector>

#include "interfx/block_cov.hpp"
#include "interfx/core.hpp"
#include "interfx/theta.hpp"

namespace interfx {

struct NormalizeResult {
  Theta theta;
  MatrixXd f;  // T x r
  std::vector<std::string> warnings;
};

namespace detail {

// Eigendecomposition with descending eigenvalues; near-ties get a warning.
inline void eig_descending(const MatrixXd& w, MatrixXd& vecs, VectorXd& vals,
                           std::vector<std::string>& warnings, const char* tag) {
  Eigen::SelfAdjointEigenSolver<MatrixXd> es(w);
  const int r = static_cast<int>(w.rows());
  vals = es.eigenvalues().reverse();
  vecs = es.eigenvectors().rowwise().reverse();
  const double scale = std::max(1.0, vals.cwiseAbs().maxCoeff());
  for (int j = 0; j + 1 < r; ++j)
    if (vals(j) - vals(j + 1) < 1e-10 * scale)
      warnings.push_back(std::string(tag) +
                         ": eigenvalue tie at position " + std::to_string(j) +
                         ", deterministic tie-break applied");
}

inline MatrixXd spd_sqrt(const MatrixXd& m) {
  Eigen::SelfAdjointEigenSolver<MatrixXd> es(m);
  return es.eigenvectors() * es.eigenvalues().cwiseMax(0.0).cwiseSqrt().asDiagonal() *
         es.eigenvectors().transpose();
}

// Sign each column of gamma so its largest-magnitude entry is positive.
inline void fix_column_signs(MatrixXd& gamma, MatrixXd& f, int col0, int ncols) {
  for (int j = col0; j < col0 + ncols; ++j) {
    int idx = 0;
    gamma.col(j).cwiseAbs().maxCoeff(&idx);
    if (gamma(idx, j) < 0) {
      gamma.col(j) = -gamma.col(j);
      f.col(j) = -f.col(j);
    }
  }
}

inline MatrixXd demean_rows_of(const MatrixXd& f) {
  return f.rowwise() - f.colwise().mean();
}

}  // namespace detail

// Basic-model identification: mixes (Gamma, m_ff, f) so that m_ff* = I_r,
// factors are mean zero and (1/N) Gamma*' Sigma^{-1} Gamma* is diagonal with
// descending entries. Gamma* f*' equals Gamma f' (for mean-zero f) and the
// likelihood value is unchanged because Gamma* m_ff* Gamma*' = Gamma m_ff Gamma'.
inline NormalizeResult normalize_identification(const Theta& theta, const MatrixXd& f) {
  NormalizeResult out{theta, detail::demean_rows_of(f), {}};
  const int r = theta.n_factors();
  if (r == 0) return out;
  const MatrixXd s_half = detail::spd_sqrt(theta.m_ff);
  BlockCovInv sinv(theta.sigma);
  MatrixXd gram = theta.gamma.transpose() * sinv.apply(theta.gamma) / theta.n_units();
  MatrixXd w = s_half * gram * s_half;
  symmetrize(w);
  MatrixXd vecs;
  VectorXd vals;
  detail::eig_descending(w, vecs, vals, out.warnings, "IB2");
  out.theta.gamma = theta.gamma * s_half * vecs;
  Eigen::LLT<MatrixXd> s_llt(theta.m_ff);
  if (s_llt.info() != Eigen::Success)
    throw SingularityError("m_ff not positive definite in normalization",
                           Eigen::SelfAdjointEigenSolver<MatrixXd>(theta.m_ff)
                               .eigenvalues().minCoeff());
  // f*_t = R' m_ff^{-1/2} (f_t - fbar)
  out.f = s_llt.solve(s_half * out.f.transpose()).transpose() * vecs;
  out.theta.m_ff = MatrixXd::Identity(r, r);
  detail::fix_column_signs(out.theta.gamma, out.f, 0, r);
  return out;
}

// Zero-restrictions identification: block-lower mixing keeps the y-equation
// zeros on the h columns intact; the g and h Gram matrices are diagonalized
// separately.
inline NormalizeResult normalize_identification_zero(const Theta& theta,
                                                     const MatrixXd& f, int r1) {
  const int r = theta.n_factors(), r2 = r - r1;
  NormalizeResult out{theta, detail::demean_rows_of(f), {}};
  if (r == 0) return out;

  Eigen::LLT<MatrixXd> llt(theta.m_ff);
  if (llt.info() != Eigen::Success)
    throw SingularityError("m_ff not positive definite in normalization",
                           Eigen::SelfAdjointEigenSolver<MatrixXd>(theta.m_ff)
                               .eigenvalues().minCoeff());
  MatrixXd a = llt.matrixL();
  MatrixXd gamma1 = theta.gamma * a;
  MatrixXd f1 = a.triangularView<Eigen::Lower>().solve(out.f.transpose()).transpose();

  BlockCovInv sinv(theta.sigma);
  MatrixXd q = MatrixXd::Identity(r, r);
  VectorXd vals;
  MatrixXd vecs;
  if (r1 > 0) {
    MatrixXd gg = gamma1.leftCols(r1).transpose() * sinv.apply(gamma1.leftCols(r1)) /
                  theta.n_units();
    symmetrize(gg);
    detail::eig_descending(gg, vecs, vals, out.warnings, "IZ2 (D1)");
    q.topLeftCorner(r1, r1) = vecs;
  }
  if (r2 > 0) {
    MatrixXd hh = gamma1.rightCols(r2).transpose() * sinv.apply(gamma1.rightCols(r2)) /
                  theta.n_units();
    symmetrize(hh);
    detail::eig_descending(hh, vecs, vals, out.warnings, "IZ2 (D2)");
    q.bottomRightCorner(r2, r2) = vecs;
  }
  out.theta.gamma = gamma1 * q;
  out.f = f1 * q;
  out.theta.m_ff = MatrixXd::Identity(r, r);
  detail::fix_column_signs(out.theta.gamma, out.f, 0, r);
  // scrub drift in the structurally zero block
  const int p = theta.block_size();
  for (int i = 0; i < theta.n_units(); ++i)
    for (int j = r1; j < r; ++j)
      if (std::abs(out.theta.gamma(i * p, j)) < 1e-12) out.theta.gamma(i * p, j) = 0.0;
  return out;
}

// Observed-loadings identification: M_gg = I, M_gh = 0 imposed, M_hh kept
// free; admissible mixings leave the observed Phi block untouched, so only
// the g columns are rotated and signed.
inline NormalizeResult normalize_identification_observed(const Theta& theta,
                                                         const MatrixXd& f, int r1) {
  const int r = theta.n_factors(), r2 = r - r1;
  NormalizeResult out{theta, detail::demean_rows_of(f), {}};
  if (r1 == 0) return out;

  MatrixXd a = MatrixXd::Identity(r, r);
  MatrixXd mhh_new;
  {
    const MatrixXd mgg = theta.m_ff.topLeftCorner(r1, r1);
    Eigen::LLT<MatrixXd> llt(mgg);
    if (llt.info() != Eigen::Success)
      throw SingularityError("M_gg not positive definite in normalization",
                             Eigen::SelfAdjointEigenSolver<MatrixXd>(mgg)
                                 .eigenvalues().minCoeff());
    a.topLeftCorner(r1, r1) = llt.matrixL();
    if (r2 > 0) {
      const MatrixXd mhg = theta.m_ff.bottomLeftCorner(r2, r1);
      a.bottomLeftCorner(r2, r1) =
          llt.matrixU().solve(mhg.transpose()).transpose();  // M_hg A_g^{-T}
      mhh_new = theta.m_ff.bottomRightCorner(r2, r2) -
                mhg * llt.solve(mhg.transpose());
      symmetrize(mhh_new);
    }
  }
  MatrixXd gamma1 = theta.gamma * a;
  MatrixXd f1 = a.partialPivLu().solve(out.f.transpose()).transpose();

  BlockCovInv sinv(theta.sigma);
  MatrixXd gg = gamma1.leftCols(r1).transpose() * sinv.apply(gamma1.leftCols(r1)) /
                theta.n_units();
  symmetrize(gg);
  MatrixXd vecs;
  VectorXd vals;
  detail::eig_descending(gg, vecs, vals, out.warnings, "IO2");
  MatrixXd q = MatrixXd::Identity(r, r);
  q.topLeftCorner(r1, r1) = vecs;

  out.theta.gamma = gamma1 * q;
  out.f = f1 * q;
  out.theta.m_ff = MatrixXd::Identity(r, r);
  if (r2 > 0) out.theta.m_ff.bottomRightCorner(r2, r2) = mhh_new;
  detail::fix_column_signs(out.theta.gamma, out.f, 0, r1);
  return out;
}

}  // namespace interfx
