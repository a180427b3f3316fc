#pragma once

#include "interfx/block_cov.hpp"
#include "interfx/core.hpp"

namespace interfx {

// Full parameter state: beta, stacked loading matrix Gamma (N blocks of
// (K+1) x r, block i = (lambda_i, gamma_ix)'), block-diagonal Sigma_epsilon,
// and the factor second-moment parameter M_ff.
struct Theta {
  VectorXd beta;    // K
  MatrixXd gamma;   // N(K+1) x r
  BlockCov sigma;
  MatrixXd m_ff;    // r x r SPD

  int n_units() const { return sigma.n_units(); }
  int n_regressors() const { return sigma.n_regressors; }
  int n_factors() const { return static_cast<int>(gamma.cols()); }
  int block_size() const { return sigma.block_size(); }
  int stacked_size() const { return n_units() * block_size(); }

  Eigen::Block<const MatrixXd> gamma_block(int i) const {
    return gamma.middleRows(i * block_size(), block_size());
  }
  Eigen::Block<MatrixXd> gamma_block(int i) {
    return gamma.middleRows(i * block_size(), block_size());
  }

  // y-equation loadings, N x r.
  MatrixXd lambda() const {
    const int n = n_units(), p = block_size(), r = n_factors();
    MatrixXd l(n, r);
    for (int i = 0; i < n; ++i) l.row(i) = gamma.row(i * p);
    return l;
  }

  // B = [[1, -beta'], [0, I_K]].
  MatrixXd b_matrix() const {
    const int p = block_size();
    MatrixXd b = MatrixXd::Identity(p, p);
    if (n_regressors() > 0) b.block(0, 1, 1, n_regressors()) = -beta.transpose();
    return b;
  }

  static Theta make(int n, int k, int r) {
    Theta th;
    th.beta = VectorXd::Zero(k);
    th.gamma = MatrixXd::Zero(n * (k + 1), r);
    th.sigma = BlockCov::identity(n, k);
    th.m_ff = MatrixXd::Identity(r, r);
    return th;
  }

  void validate(double eig_floor = 1e-8, double eig_cap = 1e6) const {
    if (gamma.rows() != stacked_size()) throw DataError("gamma has wrong row count");
    if (m_ff.rows() != n_factors() || m_ff.cols() != n_factors())
      throw DataError("m_ff has wrong shape");
    if (!gamma.allFinite() || !beta.allFinite() || !m_ff.allFinite())
      throw DataError("non-finite parameter value");
    if (n_factors() > 0) {
      Eigen::SelfAdjointEigenSolver<MatrixXd> es(m_ff);
      const double lo = es.eigenvalues().minCoeff(), hi = es.eigenvalues().maxCoeff();
      if (lo < eig_floor || hi > eig_cap)
        throw DataError("m_ff eigenvalues outside the admissible interval");
    }
    const double lo = sigma.min_eigenvalue();
    if (!(lo >= eig_floor))
      throw DataError("Sigma_epsilon eigenvalue below the admissible floor");
  }
};

// (I_N (x) B) m, in place: only the y-rows change.
inline void apply_ib_inplace(const Theta& th, MatrixXd& m) {
  const int p = th.block_size(), k = th.n_regressors();
  if (k == 0) return;
  for (int i = 0; i < th.n_units(); ++i)
    m.row(i * p).noalias() -= th.beta.transpose() * m.middleRows(i * p + 1, k);
}

// (I_N (x) B') m, in place: x-rows pick up -beta * y-row.
inline void apply_ibt_inplace(const Theta& th, MatrixXd& m) {
  const int p = th.block_size(), k = th.n_regressors();
  if (k == 0) return;
  for (int i = 0; i < th.n_units(); ++i)
    m.middleRows(i * p + 1, k).noalias() -= th.beta * m.row(i * p);
}

inline MatrixXd apply_ib(const Theta& th, MatrixXd m) {
  apply_ib_inplace(th, m);
  return m;
}

inline MatrixXd apply_ibt(const Theta& th, MatrixXd m) {
  apply_ibt_inplace(th, m);
  return m;
}

}  // namespace interfx
