#pragma once

#include <optional>

#include "interfx/core.hpp"
#include "interfx/moments.hpp"
#include "interfx/panel_data.hpp"

namespace interfx {

struct BaselineResult {
  VectorXd beta_hat;
  enum class Method { wg, iterated_pc } method = Method::wg;
  std::optional<MatrixXd> pc_factors;   // T x r, F'F/T = I
  std::optional<MatrixXd> pc_loadings;  // N x r
  int n_iters = 0;
  bool converged = true;
  std::vector<double> ssr_trace;  // residual sum of squares per iteration
};

namespace detail {

// Demeaned N x T data matrices pulled out of the stacked moments.
inline MatrixXd y_matrix(const Moments& m) {
  MatrixXd y(m.n_units(), m.n_periods());
  for (int i = 0; i < m.n_units(); ++i) y.row(i) = m.y_rows(i);
  return y;
}

inline MatrixXd x_matrix(const Moments& m, int k) {
  MatrixXd x(m.n_units(), m.n_periods());
  for (int i = 0; i < m.n_units(); ++i) x.row(i) = m.x_rows(i).row(k);
  return x;
}

// Principal components of an N x T residual matrix: r factors normalized to
// F'F/T = I, loadings Lambda = R F / T. Works off the smaller Gram matrix.
inline void pc_factors_of(const MatrixXd& resid, int r, MatrixXd& f, MatrixXd& lambda) {
  const int n = static_cast<int>(resid.rows()), t = static_cast<int>(resid.cols());
  if (r == 0) {
    f = MatrixXd(t, 0);
    lambda = MatrixXd(n, 0);
    return;
  }
  if (t <= n) {
    Eigen::SelfAdjointEigenSolver<MatrixXd> es(resid.transpose() * resid);
    f = std::sqrt(static_cast<double>(t)) * es.eigenvectors().rightCols(r).rowwise().reverse();
  } else {
    Eigen::SelfAdjointEigenSolver<MatrixXd> es(resid * resid.transpose());
    MatrixXd lam0 = es.eigenvectors().rightCols(r).rowwise().reverse();
    MatrixXd f0 = resid.transpose() * lam0;
    MatrixXd s = f0.transpose() * f0 / t;
    Eigen::SelfAdjointEigenSolver<MatrixXd> ss(s);
    MatrixXd s_inv_half = ss.eigenvectors() *
                          ss.eigenvalues().cwiseMax(1e-300).cwiseSqrt().cwiseInverse().asDiagonal() *
                          ss.eigenvectors().transpose();
    f = f0 * s_inv_half;
  }
  for (int j = 0; j < r; ++j) {  // deterministic sign
    int idx = 0;
    f.col(j).cwiseAbs().maxCoeff(&idx);
    if (f(idx, j) < 0) f.col(j) = -f.col(j);
  }
  lambda = resid * f / t;
}

inline VectorXd pooled_ols(const Moments& m, const MatrixXd& target) {
  const int k = m.n_regressors();
  MatrixXd xx = MatrixXd::Zero(k, k);
  VectorXd xy = VectorXd::Zero(k);
  for (int i = 0; i < m.n_units(); ++i) {
    const auto xi = m.x_rows(i);
    xx.noalias() += xi * xi.transpose();
    xy.noalias() += xi * target.row(i).transpose();
  }
  Eigen::LLT<MatrixXd> llt(xx);
  if (llt.info() != Eigen::Success)
    throw SingularityError("regressor Gram matrix singular",
                           Eigen::SelfAdjointEigenSolver<MatrixXd>(xx)
                               .eigenvalues().minCoeff());
  return llt.solve(xy);
}

}  // namespace detail

// Within-group estimator: pooled OLS after removing unit means. Inconsistent
// under interactive effects; kept as the comparison baseline and for starts.
inline BaselineResult within_group(const Moments& m) {
  if (m.n_regressors() < 1) throw DataError("within_group requires K >= 1");
  BaselineResult out;
  out.method = BaselineResult::Method::wg;
  out.beta_hat = detail::pooled_ols(m, detail::y_matrix(m));
  out.n_iters = 1;
  return out;
}

inline BaselineResult within_group(const PanelDataset& data) {
  return within_group(demean_panel(data));
}

// Iterated principal components: alternate least squares for beta and a rank-r
// factor fit of the residual. The shared objective ||Y - Xb - Lambda F'||^2
// is non-increasing across iterations.
inline BaselineResult iterated_pc(const Moments& m, int r, int max_iters = 1000,
                                  double tol = 1e-9) {
  if (r >= std::min(m.n_units(), m.n_periods()))
    throw DataError("iterated_pc requires r < min(N, T)");
  BaselineResult out;
  out.method = BaselineResult::Method::iterated_pc;
  const int k = m.n_regressors();
  const MatrixXd y = detail::y_matrix(m);

  if (r == 0) {
    out.beta_hat = k > 0 ? detail::pooled_ols(m, y) : VectorXd(0);
    out.pc_factors = MatrixXd(m.n_periods(), 0);
    out.pc_loadings = MatrixXd(m.n_units(), 0);
    out.n_iters = 1;
    return out;
  }

  std::vector<MatrixXd> xs(k);
  for (int j = 0; j < k; ++j) xs[j] = detail::x_matrix(m, j);

  VectorXd beta = k > 0 ? detail::pooled_ols(m, y) : VectorXd(0);
  MatrixXd f, lambda;
  out.converged = (k == 0);
  for (int it = 1; it <= max_iters; ++it) {
    out.n_iters = it;
    MatrixXd resid = y;
    for (int j = 0; j < k; ++j) resid.noalias() -= beta(j) * xs[j];
    detail::pc_factors_of(resid, r, f, lambda);
    out.ssr_trace.push_back((resid - lambda * f.transpose()).squaredNorm());
    if (k == 0) break;
    VectorXd beta_new = detail::pooled_ols(m, (y - lambda * f.transpose()).eval());
    const double change = (beta_new - beta).cwiseAbs().maxCoeff();
    beta = beta_new;
    if (change < tol) {
      out.converged = true;
      break;
    }
  }
  out.beta_hat = beta;
  out.pc_factors = f;
  out.pc_loadings = lambda;
  return out;
}

inline BaselineResult iterated_pc(const PanelDataset& data, int r, int max_iters = 1000,
                                  double tol = 1e-9) {
  return iterated_pc(demean_panel(data), r, max_iters, tol);
}

}  // namespace interfx
