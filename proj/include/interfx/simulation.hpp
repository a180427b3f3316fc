#pragma once

#include <atomic>
#include <map>
#include <random>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include "interfx/baselines.hpp"
#include "interfx/em.hpp"
#include "interfx/model_selection.hpp"
#include "interfx/restricted.hpp"

namespace interfx {

enum class ErrorDist { chisq2_normalized, normal, student_t };

// The four simulation designs share K = 2 regressors and scalar g, h, d.
struct DgpConfig {
  int design = 1;
  int n = 50;
  int t = 75;
  Eigen::Vector2d beta_true{1.0, 2.0};
  ErrorDist error_dist = ErrorDist::chisq2_normalized;
  double t_df = 5.0;
  double u = 0.1;  // heteroscedasticity bound, eta ~ U[u, 1-u]
  std::uint64_t seed = 0;
  double noise_scale = 1.0;  // 0 switches the idiosyncratic errors off

  void validate() const {
    if (design < 1 || design > 4) throw DataError("design must be in {1,2,3,4}");
    if (n < 2 || t < 2) throw DataError("need N >= 2 and T >= 2");
    if (!(u > 0.0 && u < 0.5)) throw DataError("u must lie in (0, 0.5)");
    if (error_dist == ErrorDist::student_t && !(t_df > 2.0))
      throw DataError("student_t needs more than 2 degrees of freedom");
  }
};

struct DgpTruth {
  VectorXd beta;
  MatrixXd loadings;  // N(K+1) x q stacked loading matrix L
  MatrixXd factors;   // T x q draws of (g, h, d)
  VectorXd xi;        // N(K+1) heteroscedasticity levels
  VectorXd mu;        // N(K+1) intercepts
  MatrixXd phi;       // N x r2 (observed in designs 3-4)
  MatrixXd d;         // T x r3 (observed in design 4)
  int r1 = 1, r2 = 0, r3 = 0;
};

namespace detail {

inline double draw_error(ErrorDist dist, double t_df, std::mt19937_64& rng) {
  switch (dist) {
    case ErrorDist::chisq2_normalized: {
      // (chi^2_2 - 2)/2 = Exp(1) - 1, mean zero and unit variance
      std::exponential_distribution<double> ex(1.0);
      return ex(rng) - 1.0;
    }
    case ErrorDist::student_t: {
      std::student_t_distribution<double> td(t_df);
      return td(rng) / std::sqrt(t_df / (t_df - 2.0));
    }
    case ErrorDist::normal:
    default: {
      std::normal_distribution<double> g(0.0, 1.0);
      return g(rng);
    }
  }
}

inline MatrixXd polar_factor(const MatrixXd& m) {
  Eigen::JacobiSVD<MatrixXd> svd(m, Eigen::ComputeFullU | Eigen::ComputeFullV);
  return svd.matrixU() * svd.matrixV().transpose();
}

}  // namespace detail

// Cross-sectional heteroscedasticity: Xi_j = eta_j/(1-eta_j) * ||iota_j||^2
// per stacked row, and one orthonormalized K x K mixing block per unit.
inline std::pair<VectorXd, std::vector<MatrixXd>> gen_heteroscedasticity(
    const MatrixXd& loadings, double u, std::mt19937_64& rng, int k = 2) {
  const int rows = static_cast<int>(loadings.rows());
  const int p = k + 1;
  if (rows % p != 0) throw DataError("loading matrix rows must be a multiple of K+1");
  std::uniform_real_distribution<double> unif(u, 1.0 - u);
  std::normal_distribution<double> gauss(0.0, 1.0);
  VectorXd xi(rows);
  for (int j = 0; j < rows; ++j) {
    const double eta = unif(rng);
    xi(j) = eta / (1.0 - eta) * loadings.row(j).squaredNorm();
  }
  std::vector<MatrixXd> upsilon;
  upsilon.reserve(rows / p);
  for (int i = 0; i < rows / p; ++i) {
    MatrixXd m(k, k);
    do {
      for (int a = 0; a < k; ++a)
        for (int b = 0; b < k; ++b) m(a, b) = gauss(rng);
    } while (k > 0 && Eigen::JacobiSVD<MatrixXd>(m).singularValues().minCoeff() < 1e-12);
    upsilon.push_back(k > 0 ? detail::polar_factor(m) : MatrixXd(0, 0));
  }
  return {xi, upsilon};
}

inline std::pair<VectorXd, std::vector<MatrixXd>> gen_heteroscedasticity(
    const MatrixXd& loadings, double u, std::uint64_t seed, int k = 2) {
  std::mt19937_64 rng(mix_seed(seed, 0x4e7aULL));
  return gen_heteroscedasticity(loadings, u, rng, k);
}

// Draws one panel from the configured design. Returns the observed dataset
// (with Phi and D attached where the design observes them) and the ground truth.
inline std::pair<PanelDataset, DgpTruth> generate_dgp(const DgpConfig& cfg) {
  cfg.validate();
  const int n = cfg.n, t = cfg.t, k = 2, p = k + 1;
  const bool has_h = cfg.design >= 2;
  const bool has_d = cfg.design == 4;
  const bool phi_nonzero = cfg.design >= 3;
  const int q = 1 + (has_h ? 1 : 0) + (has_d ? 1 : 0);

  std::mt19937_64 rng(mix_seed(cfg.seed, 0xd9bULL));
  std::normal_distribution<double> gauss(0.0, 1.0);

  DgpTruth truth;
  truth.beta = cfg.beta_true;
  truth.r1 = 1;
  truth.r2 = has_h ? 1 : 0;
  truth.r3 = has_d ? 1 : 0;
  truth.loadings = MatrixXd::Zero(n * p, q);
  truth.mu = VectorXd::Zero(n * p);
  if (phi_nonzero) truth.phi = MatrixXd(n, 1);

  for (int i = 0; i < n; ++i) {
    const double alpha = gauss(rng);
    const double psi = gauss(rng);
    const double phi = phi_nonzero ? gauss(rng) : 0.0;
    const double kappa = has_d ? gauss(rng) : 0.0;
    truth.mu(i * p) = alpha;
    truth.loadings(i * p, 0) = psi;
    if (has_h) truth.loadings(i * p, 1) = phi;
    if (has_d) truth.loadings(i * p, 2) = kappa;
    if (phi_nonzero) truth.phi(i, 0) = phi;
    for (int j = 0; j < k; ++j) {
      truth.mu(i * p + 1 + j) = gauss(rng);             // mu_ik
      truth.loadings(i * p + 1 + j, 0) = psi + gauss(rng);  // gamma^g
      if (has_h)
        truth.loadings(i * p + 1 + j, 1) = (phi_nonzero ? phi : 0.0) + gauss(rng);
      if (has_d) truth.loadings(i * p + 1 + j, 2) = kappa + gauss(rng);
    }
  }

  truth.factors = MatrixXd(t, q);
  for (int s = 0; s < t; ++s) {
    truth.factors(s, 0) = gauss(rng);
    if (has_h) truth.factors(s, 1) = gauss(rng);
    if (has_d) truth.factors(s, 2) = 1.0 + gauss(rng);
  }
  if (has_d) truth.d = truth.factors.rightCols(1);

  auto [xi, upsilon] = gen_heteroscedasticity(truth.loadings, cfg.u, rng, k);
  truth.xi = xi;
  const VectorXd sd = xi.cwiseSqrt() * cfg.noise_scale;

  PanelDataset data;
  data.n_units = n;
  data.n_periods = t;
  data.n_regressors = k;
  data.y.resize(n, t);
  data.x.assign(k, MatrixXd(n, t));

  VectorXd eps(p);
  for (int s = 0; s < t; ++s) {
    for (int i = 0; i < n; ++i) {
      for (int j = 0; j < p; ++j) eps(j) = detail::draw_error(cfg.error_dist, cfg.t_df, rng);
      const VectorXd vx = upsilon[i] * eps.tail(k);
      RowVectorXd x_it(k);
      for (int j = 0; j < k; ++j) {
        const int row = i * p + 1 + j;
        x_it(j) = truth.mu(row) + truth.loadings.row(row).dot(truth.factors.row(s)) +
                  sd(row) * vx(j);
        data.x[j](i, s) = x_it(j);
      }
      const int yrow = i * p;
      data.y(i, s) = truth.mu(yrow) +
                     truth.loadings.row(yrow).dot(truth.factors.row(s)) +
                     sd(yrow) * eps(0) + x_it.dot(cfg.beta_true);
    }
  }
  if (phi_nonzero) data.phi_observed = truth.phi;
  if (has_d) data.d_observed = truth.d;
  return {std::move(data), std::move(truth)};
}

struct EstimatorSet {
  bool wg = true;
  bool pc = true;
  bool mle = true;
};

struct McCell {
  double bias = 0.0;
  double rmse = 0.0;
};

struct McReport {
  int design = 1;
  int n = 0, t = 0;
  int n_reps = 0;
  int n_failed = 0;
  std::uint64_t seed = 0;
  bool selection = false;
  double pct_r_correct = std::numeric_limits<double>::quiet_NaN();
  // estimator name -> per-coefficient bias/rmse
  std::map<std::string, std::vector<McCell>> cells;
  std::vector<std::string> failures;
};

namespace detail {

struct RepOutcome {
  bool failed = false;
  std::string message;
  bool has_selection = false;
  bool r_correct = false;
  std::map<std::string, Eigen::Vector2d> errors;  // beta_hat - beta_true
};

inline RepOutcome run_one_rep(const DgpConfig& cfg, int rep, const EstimatorSet& est,
                              bool selection, const EmConfig& em_cfg, int r_max) {
  RepOutcome out;
  DgpConfig rep_cfg = cfg;
  rep_cfg.seed = mix_seed(cfg.seed, static_cast<std::uint64_t>(rep));
  try {
    auto [data, truth] = generate_dgp(rep_cfg);
    const int true_total = truth.r1 + truth.r2 + truth.r3;

    int r_total = truth.r1 + truth.r2;   // latent factors after observables split off
    int r1_use = truth.r1;
    bool routed_zero = cfg.design == 2;

    if (selection) {
      out.has_selection = true;
      switch (cfg.design) {
        case 1:
        case 2: {
          SplitSelection ss = select_r1_r2(data, em_cfg, r_max);
          r_total = ss.r_total;
          r1_use = ss.r1;
          routed_zero = ss.r_total > ss.r1;
          out.r_correct = (cfg.design == 1) ? (ss.r_total == 1 && ss.r1 == 1)
                                            : (ss.r1 == 1 && ss.r2 == 1);
          break;
        }
        case 3: {
          const int r_hat = select_r(data, r_max, em_cfg);
          r1_use = std::max(r_hat - truth.r2, 0);
          r_total = r1_use + truth.r2;
          out.r_correct = (r1_use == truth.r1);
          break;
        }
        case 4: {
          PanelDataset projected = concentrate_common_regressors(data);
          const int r_hat = select_r(projected, r_max, em_cfg);
          r1_use = std::max(r_hat - truth.r2, 0);
          r_total = r1_use + truth.r2;
          out.r_correct = (r1_use == truth.r1);
          break;
        }
      }
    }

    if (est.wg) {
      BaselineResult wg = within_group(data);
      out.errors["wg"] = wg.beta_hat - cfg.beta_true;
    }
    if (est.pc) {
      const int r_pc = (cfg.design == 4) ? r_total + truth.r3 : r_total;
      BaselineResult pc = iterated_pc(data, std::max(r_pc, 0));
      out.errors["pc"] = pc.beta_hat - cfg.beta_true;
    }
    if (est.mle) {
      FitResult fit;
      switch (cfg.design) {
        case 1:
        case 2:
          if (routed_zero && r1_use >= 1 && r_total > r1_use)
            fit = fit_zero_restrictions(data, r1_use, r_total - r1_use, em_cfg);
          else
            fit = fit_mle(data, r_total, em_cfg);
          break;
        case 3:
          fit = fit_observed_phi(data, r1_use, em_cfg);
          break;
        case 4:
          fit = fit_phi_and_common(data, r1_use, em_cfg);
          break;
      }
      out.errors["mle"] = fit.theta_hat.beta - cfg.beta_true;
    }
    (void)true_total;
  } catch (const std::exception& e) {
    out.failed = true;
    out.message = std::string("rep ") + std::to_string(rep) + ": " + e.what();
  }
  return out;
}

}  // namespace detail

// Monte Carlo harness: replication j draws its own seed stream from cfg.seed,
// replications run in parallel, and the reduction happens in replication
// order so a fixed seed gives a bitwise-identical report.
inline McReport run_monte_carlo(const DgpConfig& cfg, int n_reps,
                                const EstimatorSet& est = EstimatorSet(),
                                bool selection = false,
                                const EmConfig& em_cfg = EmConfig(), int threads = 0,
                                int r_max = 4) {
  if (n_reps < 1) throw DataError("n_reps must be >= 1");
  cfg.validate();
  if (threads <= 0)
    threads = std::max(1u, std::thread::hardware_concurrency());
  threads = std::min<int>(threads, n_reps);

  std::vector<detail::RepOutcome> outcomes(n_reps);
  std::atomic<int> next{0};
  auto worker = [&] {
    for (;;) {
      const int rep = next.fetch_add(1);
      if (rep >= n_reps) break;
      outcomes[rep] = detail::run_one_rep(cfg, rep, est, selection, em_cfg, r_max);
    }
  };
  if (threads == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    pool.reserve(threads);
    for (int i = 0; i < threads; ++i) pool.emplace_back(worker);
    for (auto& th : pool) th.join();
  }

  McReport report;
  report.design = cfg.design;
  report.n = cfg.n;
  report.t = cfg.t;
  report.n_reps = n_reps;
  report.seed = cfg.seed;
  report.selection = selection;

  std::map<std::string, std::vector<Eigen::Vector2d>> errs;
  int n_correct = 0, n_selected = 0;
  for (const auto& oc : outcomes) {
    if (oc.failed) {
      ++report.n_failed;
      report.failures.push_back(oc.message);
      continue;
    }
    if (oc.has_selection) {
      ++n_selected;
      if (oc.r_correct) ++n_correct;
    }
    for (const auto& [name, err] : oc.errors) errs[name].push_back(err);
  }
  if (n_selected > 0) report.pct_r_correct = 100.0 * n_correct / n_selected;

  for (const auto& [name, v] : errs) {
    std::vector<McCell> cells(2);
    for (int c = 0; c < 2; ++c) {
      double sum = 0.0, sumsq = 0.0;
      for (const auto& e : v) {
        sum += e(c);
        sumsq += e(c) * e(c);
      }
      cells[c].bias = sum / v.size();
      cells[c].rmse = std::sqrt(sumsq / v.size());
    }
    report.cells[name] = std::move(cells);
  }
  return report;
}

}  // namespace interfx
