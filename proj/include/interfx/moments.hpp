#pragma once

#include <optional>
#include <vector>

#include "interfx/core.hpp"
#include "interfx/panel_data.hpp"

namespace interfx {

// Second moments of the demeaned stacked data z_it = (y_it, x_it')'.
// The factored form keeps Zdot (N(K+1) x T) so that every M_zz product is a
// pass over the data; the dense N(K+1) x N(K+1) grid is materialized only
// below the size cap and serves as the brute-force reference.
class Moments {
 public:
  Moments(MatrixXd zdot, int n_units, int n_regressors, int dense_cap = 500)
      : z_(std::move(zdot)), n_(n_units), k_(n_regressors) {
    t_ = static_cast<int>(z_.cols());
    const int p = block_size(), np = stacked_size();
    unit_blocks_.reserve(n_);
    for (int i = 0; i < n_; ++i) {
      MatrixXd b = MatrixXd::Zero(p, p);
      b.selfadjointView<Eigen::Lower>().rankUpdate(z_.middleRows(i * p, p), 1.0 / t_);
      b.triangularView<Eigen::StrictlyUpper>() =
          b.triangularView<Eigen::StrictlyLower>().transpose();
      unit_blocks_.push_back(std::move(b));
    }
    if (np <= dense_cap) {
      MatrixXd d = MatrixXd::Zero(np, np);
      d.selfadjointView<Eigen::Lower>().rankUpdate(z_, 1.0 / t_);
      d.triangularView<Eigen::StrictlyUpper>() =
          d.triangularView<Eigen::StrictlyLower>().transpose();
      dense_ = std::move(d);
    }
  }

  int n_units() const { return n_; }
  int n_periods() const { return t_; }
  int n_regressors() const { return k_; }
  int block_size() const { return k_ + 1; }
  int stacked_size() const { return n_ * block_size(); }

  const MatrixXd& z() const { return z_; }
  // M_zz^{ii}, the own (K+1) x (K+1) moment block of unit i.
  const MatrixXd& unit_block(int i) const { return unit_blocks_[i]; }

  bool has_dense() const { return dense_.has_value(); }
  const MatrixXd& dense() const {
    if (!dense_) throw DataError("dense moment grid above size cap");
    return *dense_;
  }

  Eigen::Block<const MatrixXd> y_rows(int i) const { return z_.middleRows(i * block_size(), 1); }
  Eigen::Block<const MatrixXd> x_rows(int i) const {
    return z_.middleRows(i * block_size() + 1, k_);
  }

 private:
  MatrixXd z_;  // demeaned (or projected) stacked data
  int n_, k_, t_;
  std::vector<MatrixXd> unit_blocks_;
  std::optional<MatrixXd> dense_;
};

// Time-demeaned moments; intercepts drop out exactly.
inline Moments demean_panel(const PanelDataset& data, int dense_cap = 500) {
  if (data.n_periods < 2) throw DataError("demeaning needs T >= 2");
  const int n = data.n_units, t = data.n_periods, k = data.n_regressors, p = k + 1;
  for (int i = 0; i < n; ++i)
    for (int s = 0; s < t; ++s) {
      if (!std::isfinite(data.y(i, s)))
        throw DataError("non-finite y at unit " + std::to_string(i) + ", period " +
                        std::to_string(s));
      for (int j = 0; j < k; ++j)
        if (!std::isfinite(data.x[j](i, s)))
          throw DataError("non-finite x" + std::to_string(j + 1) + " at unit " +
                          std::to_string(i) + ", period " + std::to_string(s));
    }
  MatrixXd z(n * p, t);
  for (int i = 0; i < n; ++i) {
    z.row(i * p) = data.y.row(i);
    for (int j = 0; j < k; ++j) z.row(i * p + 1 + j) = data.x[j].row(i);
  }
  const VectorXd means = z.rowwise().mean();
  z.colwise() -= means;
  return Moments(std::move(z), n, k, dense_cap);
}

}  // namespace interfx
