#pragma once

#include <optional>
#include <string>
#include <vector>

#include "interfx/core.hpp"

namespace interfx {

// Balanced panel: y_it (N x T) and K regressor matrices x_k (each N x T),
// plus optional observed loadings Phi (N x r2) and common regressors D (T x r3).
struct PanelDataset {
  int n_units = 0;       // N
  int n_periods = 0;     // T
  int n_regressors = 0;  // K
  MatrixXd y;
  std::vector<MatrixXd> x;
  std::optional<MatrixXd> phi_observed;
  std::optional<MatrixXd> d_observed;

  RowVectorXd x_row(int i, int t) const {
    RowVectorXd out(n_regressors);
    for (int k = 0; k < n_regressors; ++k) out(k) = x[k](i, t);
    return out;
  }

  void validate() const {
    if (n_units < 2 || n_periods < 2)
      throw DataError("panel requires N >= 2 and T >= 2, got N=" +
                      std::to_string(n_units) + " T=" + std::to_string(n_periods));
    if (y.rows() != n_units || y.cols() != n_periods)
      throw DataError("y has wrong shape");
    if (static_cast<int>(x.size()) != n_regressors)
      throw DataError("regressor count mismatch");
    for (int k = 0; k < n_regressors; ++k)
      if (x[k].rows() != n_units || x[k].cols() != n_periods)
        throw DataError("x" + std::to_string(k + 1) + " has wrong shape");
    check_finite();
    if (phi_observed) {
      if (phi_observed->rows() != n_units)
        throw DataError("phi_observed must have one row per unit");
      require_full_rank(*phi_observed, "phi_observed");
    }
    if (d_observed) {
      if (d_observed->rows() != n_periods)
        throw DataError("d_observed must have one row per period");
      require_full_rank(*d_observed, "d_observed");
    }
  }

  void check_finite() const {
    for (int i = 0; i < n_units; ++i)
      for (int t = 0; t < n_periods; ++t) {
        if (!std::isfinite(y(i, t)))
          throw DataError("non-finite y at unit " + std::to_string(i) +
                          ", period " + std::to_string(t));
        for (int k = 0; k < n_regressors; ++k)
          if (!std::isfinite(x[k](i, t)))
            throw DataError("non-finite x" + std::to_string(k + 1) + " at unit " +
                            std::to_string(i) + ", period " + std::to_string(t));
      }
  }

 private:
  static void require_full_rank(const MatrixXd& m, const std::string& name) {
    if (!m.allFinite()) throw DataError(name + " has non-finite entries");
    if (m.cols() == 0) return;
    Eigen::ColPivHouseholderQR<MatrixXd> qr(m);
    if (qr.rank() < m.cols())
      throw DataError(name + " is rank deficient: rank " +
                      std::to_string(qr.rank()) + " < " + std::to_string(m.cols()) +
                      " columns");
  }
};

}  // namespace interfx
