#pragma once

#include <vector>

#include "interfx/core.hpp"

namespace interfx {

// Per-unit idiosyncratic covariance Sigma_ii = diag(sigma_e, Sigma_x): the
// e/v cross-covariance is identically zero by construction.
struct UnitCov {
  double e_var = 1.0;  // var(e_it)
  MatrixXd x_cov;      // K x K SPD, var(v_itx)
};

struct BlockCov {
  std::vector<UnitCov> blocks;
  int n_regressors = 0;

  int n_units() const { return static_cast<int>(blocks.size()); }
  int block_size() const { return n_regressors + 1; }

  static BlockCov identity(int n, int k) {
    BlockCov s;
    s.n_regressors = k;
    s.blocks.assign(n, UnitCov{1.0, MatrixXd::Identity(k, k)});
    return s;
  }

  // Assembled (K+1) x (K+1) block for unit i.
  MatrixXd block(int i) const {
    const int p = block_size();
    MatrixXd b = MatrixXd::Zero(p, p);
    b(0, 0) = blocks[i].e_var;
    if (n_regressors > 0) b.bottomRightCorner(n_regressors, n_regressors) = blocks[i].x_cov;
    return b;
  }

  double log_det() const {
    double ld = 0.0;
    for (const auto& b : blocks) {
      ld += std::log(b.e_var);
      if (n_regressors > 0) {
        Eigen::LLT<MatrixXd> llt(b.x_cov);
        if (llt.info() != Eigen::Success)
          throw SingularityError("idiosyncratic x-block not positive definite",
                                 Eigen::SelfAdjointEigenSolver<MatrixXd>(b.x_cov)
                                     .eigenvalues().minCoeff());
        ld += 2.0 * llt.matrixL().toDenseMatrix().diagonal().array().log().sum();
      }
    }
    return ld;
  }

  void clamp(double floor, double cap) {
    for (auto& b : blocks) {
      b.e_var = std::min(std::max(b.e_var, floor), cap);
      if (n_regressors > 0) b.x_cov = clamp_spd(b.x_cov, floor, cap);
    }
  }

  // Sigma_epsilon * m, with m having N(K+1) rows.
  MatrixXd apply(const MatrixXd& m) const {
    const int p = block_size();
    MatrixXd out(m.rows(), m.cols());
    for (int i = 0; i < n_units(); ++i) {
      const int r0 = i * p;
      out.row(r0) = blocks[i].e_var * m.row(r0);
      if (n_regressors > 0)
        out.middleRows(r0 + 1, n_regressors).noalias() =
            blocks[i].x_cov * m.middleRows(r0 + 1, n_regressors);
    }
    return out;
  }

  double min_eigenvalue() const {
    double m = std::numeric_limits<double>::infinity();
    for (const auto& b : blocks) {
      m = std::min(m, b.e_var);
      if (n_regressors > 0)
        m = std::min(m, Eigen::SelfAdjointEigenSolver<MatrixXd>(b.x_cov)
                            .eigenvalues().minCoeff());
    }
    return m;
  }
};

// Precomputed blockwise inverse for one sweep over Sigma_epsilon.
struct BlockCovInv {
  std::vector<double> inv_e;
  std::vector<MatrixXd> inv_x;
  int n_regressors = 0;
  double log_det = 0.0;

  explicit BlockCovInv(const BlockCov& s) : n_regressors(s.n_regressors) {
    inv_e.reserve(s.blocks.size());
    inv_x.reserve(s.blocks.size());
    for (const auto& b : s.blocks) {
      if (!(b.e_var > 0.0))
        throw SingularityError("non-positive idiosyncratic y variance", b.e_var);
      inv_e.push_back(1.0 / b.e_var);
      log_det += std::log(b.e_var);
      if (n_regressors > 0) {
        Eigen::LLT<MatrixXd> llt(b.x_cov);
        if (llt.info() != Eigen::Success)
          throw SingularityError("idiosyncratic x-block not positive definite",
                                 Eigen::SelfAdjointEigenSolver<MatrixXd>(b.x_cov)
                                     .eigenvalues().minCoeff());
        log_det += 2.0 * llt.matrixL().toDenseMatrix().diagonal().array().log().sum();
        inv_x.push_back(llt.solve(MatrixXd::Identity(n_regressors, n_regressors)));
      } else {
        inv_x.push_back(MatrixXd());
      }
    }
  }

  int block_size() const { return n_regressors + 1; }

  // Sigma_epsilon^{-1} * m, with m having N(K+1) rows.
  MatrixXd apply(const MatrixXd& m) const {
    const int p = block_size();
    MatrixXd out(m.rows(), m.cols());
    for (size_t i = 0; i < inv_e.size(); ++i) {
      const int r0 = static_cast<int>(i) * p;
      out.row(r0) = inv_e[i] * m.row(r0);
      if (n_regressors > 0)
        out.middleRows(r0 + 1, n_regressors).noalias() =
            inv_x[i] * m.middleRows(r0 + 1, n_regressors);
    }
    return out;
  }
};

}  // namespace interfx
