#pragma once

#include <random>
#include <vector>

#include "interfx/em.hpp"

namespace interfx {

enum class SplitCriterion { pc_ic, likelihood_ic };

namespace detail {

inline double ic_penalty(int m, int nkbar, int t) {
  const double nk = nkbar, tt = t;
  return m * ((nk + tt) / (nk * tt)) * std::log(std::min(nk, tt));
}

// Fits along m = 0..r_max with warm starts: the previous solution padded by
// one random column.
struct IcPath {
  std::vector<double> ic;
  std::vector<Theta> thetas;
  std::vector<bool> converged;
};

inline IcPath ic_path(const Moments& moments, int r_max, const EmConfig& cfg) {
  IcPath path;
  const int nkbar = moments.stacked_size(), t = moments.n_periods();
  std::mt19937_64 rng(mix_seed(cfg.seed, 0x1cULL));
  std::normal_distribution<double> gauss(0.0, 1.0);
  std::vector<std::string> scratch;
  for (int m = 0; m <= r_max; ++m) {
    Theta theta0 = (m == 0) ? initial_theta(moments, 0, cfg, scratch)
                            : [&] {
                                Theta prev = path.thetas.back();
                                Theta th = prev;
                                th.gamma.conservativeResize(Eigen::NoChange, m);
                                th.m_ff = MatrixXd::Identity(m, m);
                                for (int i = 0; i < th.gamma.rows(); ++i) {
                                  const double sd =
                                      std::sqrt(moments.z().row(i).squaredNorm() / t);
                                  th.gamma(i, m - 1) = 0.1 * sd * gauss(rng);
                                }
                                return th;
                              }();
    EmEngine engine(moments, EmModelKind::basic, m, nullptr, cfg);
    EmRun run = run_em(engine, std::move(theta0), cfg);
    WoodburyOps w(run.theta);
    path.ic.push_back(w.logdet_sigma_zz() / nkbar + ic_penalty(m, nkbar, t));
    path.thetas.push_back(std::move(run.theta));
    path.converged.push_back(run.param_converged);
  }
  return path;
}

// Rank-k principal-components residual variances V(k) from one Gram
// eigendecomposition of the N x T matrix.
inline std::vector<double> pc_residual_variances(const MatrixXd& resid, int k_max) {
  const int n = static_cast<int>(resid.rows()), t = static_cast<int>(resid.cols());
  MatrixXd gram = (t <= n) ? MatrixXd(resid.transpose() * resid)
                           : MatrixXd(resid * resid.transpose());
  Eigen::SelfAdjointEigenSolver<MatrixXd> es(gram);
  VectorXd ev = es.eigenvalues().reverse();  // descending
  const double total = ev.sum();
  std::vector<double> v(k_max + 1);
  double removed = 0.0;
  for (int k = 0; k <= k_max; ++k) {
    if (k > 0) removed += std::max(ev(k - 1), 0.0);
    v[k] = std::max(total - removed, 0.0) / (static_cast<double>(n) * t);
  }
  return v;
}

}  // namespace detail

// IC(m) of the basic model fit with m factors; the log-determinant goes
// through the matrix-determinant lemma.
inline double ic_value(const PanelDataset& data, int m, const EmConfig& cfg = EmConfig()) {
  if (m < 0) throw DataError("factor count must be non-negative");
  const Moments moments = demean_panel(data, cfg.dense_cap);
  std::vector<std::string> scratch;
  Theta theta0 = detail::initial_theta(moments, m, cfg, scratch);
  detail::EmEngine engine(moments, detail::EmModelKind::basic, m, nullptr, cfg);
  detail::EmRun run = detail::run_em(engine, std::move(theta0), cfg);
  WoodburyOps w(run.theta);
  return w.logdet_sigma_zz() / moments.stacked_size() +
         detail::ic_penalty(m, moments.stacked_size(), moments.n_periods());
}

struct SelectionResult {
  int r = 0;
  std::vector<double> ic;           // IC(0..r_max)
  std::vector<bool> fit_converged;
};

inline SelectionResult select_r_path(const PanelDataset& data, int r_max,
                                     const EmConfig& cfg = EmConfig()) {
  if (r_max < 0) throw DataError("r_max must be non-negative");
  if (r_max >= std::min(data.n_units, data.n_periods))
    throw DataError("r_max must satisfy r_max < min(N, T)");
  const Moments moments = demean_panel(data, cfg.dense_cap);
  detail::IcPath path = detail::ic_path(moments, r_max, cfg);
  SelectionResult out;
  out.ic = path.ic;
  out.fit_converged = std::vector<bool>(path.converged.begin(), path.converged.end());
  out.r = 0;
  for (int m = 1; m <= r_max; ++m)
    if (path.ic[m] < path.ic[out.r]) out.r = m;  // ties go to the smaller model
  return out;
}

inline int select_r(const PanelDataset& data, int r_max, const EmConfig& cfg = EmConfig()) {
  return select_r_path(data, r_max, cfg).r;
}

// Number of factors in an N x T matrix by the IC_p2 panel information
// criterion on principal-components residual variances.
inline int pc_ic_select(const MatrixXd& resid, int k_max) {
  const int n = static_cast<int>(resid.rows()), t = static_cast<int>(resid.cols());
  if (k_max >= std::min(n, t)) throw DataError("k_max must be < min(N, T)");
  const std::vector<double> v = detail::pc_residual_variances(resid, k_max);
  const double pen = (static_cast<double>(n) + t) / (static_cast<double>(n) * t) *
                     std::log(std::min(n, t));
  int best = 0;
  double best_ic = std::numeric_limits<double>::infinity();
  for (int k = 0; k <= k_max; ++k) {
    const double ic = std::log(std::max(v[k], 1e-300)) + k * pen;
    if (ic < best_ic) {
      best_ic = ic;
      best = k;
    }
  }
  return best;
}

struct SplitSelection {
  int r1 = 0;
  int r2 = 0;
  int r_total = 0;
  VectorXd beta_at_r;  // basic-model fit at the selected total r
  std::vector<double> ic;
};

// Two-step split: total r by the likelihood IC, then the factor count of the
// y-residual matrix capped at r_hat. The second step defaults to the
// variance-weighted likelihood criterion, which stays reliable under heavy
// cross-sectional heteroscedasticity; the plain IC_p2 is the switch.
inline SplitSelection select_r1_r2(const PanelDataset& data, const EmConfig& cfg = EmConfig(),
                                   int r_max = 4,
                                   SplitCriterion criterion = SplitCriterion::likelihood_ic) {
  const Moments moments = demean_panel(data, cfg.dense_cap);
  detail::IcPath path = detail::ic_path(moments, r_max, cfg);
  SplitSelection out;
  out.ic = path.ic;
  int r_hat = 0;
  for (int m = 1; m <= r_max; ++m)
    if (path.ic[m] < path.ic[r_hat]) r_hat = m;
  out.r_total = r_hat;
  out.beta_at_r = path.thetas[r_hat].beta;

  MatrixXd resid(data.n_units, data.n_periods);
  for (int i = 0; i < data.n_units; ++i) {
    resid.row(i) = moments.y_rows(i);
    for (int j = 0; j < data.n_regressors; ++j)
      resid.row(i) -= out.beta_at_r(j) * moments.x_rows(i).row(j);
  }
  if (criterion == SplitCriterion::likelihood_ic) {
    // likelihood IC of the pure factor model on the residual matrix
    PanelDataset rd;
    rd.n_units = data.n_units;
    rd.n_periods = data.n_periods;
    rd.n_regressors = 0;
    rd.y = resid;
    out.r1 = (r_hat == 0) ? 0 : select_r(rd, r_hat, cfg);
  } else {
    out.r1 = (r_hat == 0) ? 0 : pc_ic_select(resid, r_hat);
  }
  out.r2 = out.r_total - out.r1;
  return out;
}

}  // namespace interfx
