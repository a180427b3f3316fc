#pragma once

#include <optional>
#include <string>
#include <utility>

#include "interfx/em.hpp"

namespace interfx {

// Which restricted structure to fit, plus its observed pieces.
struct RestrictedSpec {
  ModelVariant variant = ModelVariant::zero_restrictions;
  int r1 = 1;
  int r2 = 0;
  std::optional<MatrixXd> phi;  // N x r2 observed loadings
  std::optional<MatrixXd> d;    // T x r3 common regressors

  static RestrictedSpec zero(int r1, int r2) {
    return {ModelVariant::zero_restrictions, r1, r2, std::nullopt, std::nullopt};
  }
  static RestrictedSpec observed_phi(int r1, MatrixXd phi) {
    RestrictedSpec s{ModelVariant::observed_phi, r1, static_cast<int>(phi.cols()),
                     std::move(phi), std::nullopt};
    return s;
  }
  static RestrictedSpec phi_and_common(int r1, MatrixXd phi, MatrixXd d) {
    RestrictedSpec s{ModelVariant::phi_and_common, r1, static_cast<int>(phi.cols()),
                     std::move(phi), std::move(d)};
    return s;
  }
};

// Replaces demeaning by the projection residual on span(1_T, D): every series
// is orthogonalized against the observed common regressors (the constant
// column absorbs the intercepts; with D = 1_T this is exactly demeaning).
inline PanelDataset concentrate_common_regressors(const PanelDataset& data) {
  if (!data.d_observed) throw DataError("concentration requires d_observed");
  data.validate();
  const MatrixXd& d = *data.d_observed;
  const int t = data.n_periods, r3 = static_cast<int>(d.cols());
  if (t <= r3) throw DataError("concentration requires T > r3");
  {
    MatrixXd dtd = d.transpose() * d;
    Eigen::LLT<MatrixXd> llt(dtd);
    if (llt.info() != Eigen::Success)
      throw SingularityError("D'D singular",
                             Eigen::SelfAdjointEigenSolver<MatrixXd>(dtd)
                                 .eigenvalues().minCoeff());
  }
  MatrixXd basis(t, 1 + r3);
  basis.col(0).setOnes();
  basis.rightCols(r3) = d;
  Eigen::ColPivHouseholderQR<MatrixXd> qr(basis);
  const int rank = static_cast<int>(qr.rank());
  MatrixXd q = qr.householderQ() * MatrixXd::Identity(t, rank);

  PanelDataset out = data;
  out.y -= (out.y * q) * q.transpose();
  for (auto& xk : out.x) xk -= (xk * q) * q.transpose();
  out.d_observed.reset();
  return out;
}

namespace detail {

inline void attach_se(FitResult& out, const Moments& moments, const ModelSpec& spec,
                      const MatrixXd* extra_basis) {
  const int k = out.theta_hat.n_regressors();
  if (k == 0) return;
  try {
    out.se_beta =
        covariance_trace_form(out.theta_hat, moments, out.f_hat, spec, extra_basis)
            .se_beta;
  } catch (const SingularityError& e) {
    out.diagnostics.push_back(std::string("standard errors unavailable: ") + e.what());
    out.se_beta = VectorXd::Constant(k, std::numeric_limits<double>::quiet_NaN());
  }
}

}  // namespace detail

// Zero-restrictions model: the y-equation loadings on the last r2 factor
// columns are pinned at zero throughout EM; exit normalization imposes the
// separate descending diagonalizations for the g and h blocks.
inline FitResult fit_zero_restrictions(const PanelDataset& data, int r1, int r2,
                                       const EmConfig& cfg = EmConfig()) {
  cfg.validate();
  if (r1 < 1) throw DataError("zero-restrictions model requires r1 >= 1");
  if (r2 < 0) throw DataError("r2 must be non-negative");
  if (r2 == 0) return fit_mle(data, r1, cfg);
  data.validate();
  const int r = r1 + r2;
  if (r >= std::min(data.n_units, data.n_periods))
    throw DataError("factor count must satisfy r1 + r2 < min(N, T)");
  const Moments moments = demean_panel(data, cfg.dense_cap);

  FitResult out;
  Theta theta = detail::initial_theta(moments, r, cfg, out.diagnostics);
  const int p = theta.block_size();
  for (int i = 0; i < theta.n_units(); ++i)
    theta.gamma.row(i * p).tail(r2).setZero();

  detail::EmEngine engine(moments, detail::EmModelKind::zero, r1, nullptr, cfg);
  detail::EmRun run = detail::run_em(engine, std::move(theta), cfg);
  out.loglik_trace = std::move(run.loglik_trace);
  out.n_iters = run.n_iters;
  for (auto& m : run.diagnostics) out.diagnostics.push_back(std::move(m));

  MatrixXd f_raw = estimate_factors(run.theta, moments);
  NormalizeResult nr = normalize_identification_zero(run.theta, f_raw, r1);
  out.theta_hat = std::move(nr.theta);
  out.f_hat = std::move(nr.f);
  for (auto& wmsg : nr.warnings) out.diagnostics.push_back(std::move(wmsg));

  {
    Eigen::ColPivHouseholderQR<MatrixXd> qr(out.theta_hat.lambda().leftCols(r1));
    if (qr.rank() < r1)
      out.diagnostics.push_back("identification warning: estimated Psi has rank " +
                                std::to_string(qr.rank()) + " < r1");
  }

  out.foc_residual = foc_residuals(out.theta_hat, moments, ModelSpec::zero(r1));
  out.converged = run.param_converged && out.foc_residual <= cfg.tol_foc;
  if (run.param_converged && out.foc_residual > cfg.tol_foc)
    out.diagnostics.push_back("parameters converged but FOC residual " +
                              std::to_string(out.foc_residual) + " exceeds tol_foc");
  detail::attach_se(out, moments, ModelSpec::zero(r1), nullptr);
  return out;
}

// Observed time-invariant regressors: the Phi block of the y-equation
// loadings is held at its observed value; M_ff runs free and IO1 is imposed
// at the exit normalization.
inline FitResult fit_observed_phi(const PanelDataset& data, int r1,
                                  const EmConfig& cfg = EmConfig()) {
  cfg.validate();
  if (!data.phi_observed)
    throw DataError("observed-loadings model requires phi_observed");
  if (r1 < 0) throw DataError("r1 must be non-negative");
  data.validate();  // includes the Phi full-rank requirement
  const MatrixXd phi = *data.phi_observed;
  const int r2 = static_cast<int>(phi.cols());
  if (r2 == 0) return fit_mle(data, r1, cfg);
  const int r = r1 + r2;
  if (r >= std::min(data.n_units, data.n_periods))
    throw DataError("factor count must satisfy r1 + r2 < min(N, T)");
  const Moments moments = demean_panel(data, cfg.dense_cap);

  FitResult out;
  Theta theta = (cfg.init == EmConfig::Init::iterated_pc)
                    ? detail::init_for_phi(moments, r1, phi, cfg, out.diagnostics)
                    : detail::initial_theta(moments, r, cfg, out.diagnostics);
  const int p = theta.block_size();
  for (int i = 0; i < theta.n_units(); ++i)
    theta.gamma.row(i * p).tail(r2) = phi.row(i);

  detail::EmEngine engine(moments, detail::EmModelKind::phi, r1, &phi, cfg);
  detail::EmRun run = detail::run_em(engine, std::move(theta), cfg);
  out.loglik_trace = std::move(run.loglik_trace);
  out.n_iters = run.n_iters;
  for (auto& m : run.diagnostics) out.diagnostics.push_back(std::move(m));

  MatrixXd f_raw = estimate_factors(run.theta, moments);
  NormalizeResult nr = normalize_identification_observed(run.theta, f_raw, r1);
  out.theta_hat = std::move(nr.theta);
  out.f_hat = std::move(nr.f);
  for (auto& wmsg : nr.warnings) out.diagnostics.push_back(std::move(wmsg));

  out.foc_residual = foc_residuals(out.theta_hat, moments, ModelSpec::phi(r1));
  out.converged = run.param_converged && out.foc_residual <= cfg.tol_foc;
  if (run.param_converged && out.foc_residual > cfg.tol_foc)
    out.diagnostics.push_back("parameters converged but FOC residual " +
                              std::to_string(out.foc_residual) + " exceeds tol_foc");
  detail::attach_se(out, moments, ModelSpec::phi(r1), nullptr);
  return out;
}

// Joint model with observed loadings and common regressors: concentrate D out
// by projection, fit the observed-Phi (or basic) model on the projected data,
// then recover the common-regressor coefficients in closed form.
inline FitResult fit_phi_and_common(const PanelDataset& data, int r1,
                                    const EmConfig& cfg = EmConfig()) {
  if (!data.d_observed) throw DataError("common-regressor model requires d_observed");
  const MatrixXd d = *data.d_observed;
  PanelDataset projected = concentrate_common_regressors(data);
  FitResult out = (projected.phi_observed && projected.phi_observed->cols() > 0)
                      ? fit_observed_phi(projected, r1, cfg)
                      : fit_mle(projected, r1, cfg);

  // Delta = (I (x) B) (sum z d') (sum d d')^{-1} with d augmented by the constant.
  const int n = data.n_units, t = data.n_periods, k = data.n_regressors, p = k + 1;
  MatrixXd zraw(n * p, t);
  for (int i = 0; i < n; ++i) {
    zraw.row(i * p) = data.y.row(i);
    for (int j = 0; j < k; ++j) zraw.row(i * p + 1 + j) = data.x[j].row(i);
  }
  MatrixXd dtil(t, 1 + d.cols());
  dtil.col(0).setOnes();
  dtil.rightCols(d.cols()) = d;
  Eigen::ColPivHouseholderQR<MatrixXd> qr(dtil);
  MatrixXd delta = qr.solve(zraw.transpose()).transpose();  // NP x (1 + r3)
  out.delta_hat = apply_ib(out.theta_hat, std::move(delta));

  const Moments proj_moments = demean_panel(projected, cfg.dense_cap);
  detail::attach_se(out, proj_moments, ModelSpec::phi_common(r1), &d);
  return out;
}

inline FitResult fit_restricted(const PanelDataset& data, const RestrictedSpec& spec,
                                const EmConfig& cfg = EmConfig()) {
  switch (spec.variant) {
    case ModelVariant::zero_restrictions:
      return fit_zero_restrictions(data, spec.r1, spec.r2, cfg);
    case ModelVariant::observed_phi: {
      PanelDataset d = data;
      if (spec.phi) d.phi_observed = spec.phi;
      return fit_observed_phi(d, spec.r1, cfg);
    }
    case ModelVariant::phi_and_common: {
      PanelDataset d = data;
      if (spec.phi) d.phi_observed = spec.phi;
      if (spec.d) d.d_observed = spec.d;
      return fit_phi_and_common(d, spec.r1, cfg);
    }
    case ModelVariant::basic:
    default:
      return fit_mle(data, spec.r1 + spec.r2, cfg);
  }
}

}  // namespace interfx
