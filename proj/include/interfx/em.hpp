#pragma once

#include <limits>
#include <optional>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "interfx/baselines.hpp"
#include "interfx/core.hpp"
#include "interfx/identification.hpp"
#include "interfx/inference.hpp"
#include "interfx/likelihood.hpp"
#include "interfx/moments.hpp"
#include "interfx/theta.hpp"

namespace interfx {

struct EmConfig {
  int max_iters = 3000;
  double tol_param = 1e-8;  // max-norm of the parameter change
  double tol_foc = 1e-6;    // FOC residual certifying the exit
  enum class Init { iterated_pc, random, user };
  Init init = Init::iterated_pc;
  std::uint64_t seed = 0;
  std::optional<Theta> init_theta;
  double var_floor = 1e-8;
  double eig_cap = 1e6;
  int dense_cap = 500;

  void validate() const {
    if (max_iters < 1) throw DataError("max_iters must be >= 1");
    if (!(tol_param > 0) || !(tol_foc > 0)) throw DataError("tolerances must be positive");
  }
};

struct FitResult {
  Theta theta_hat;
  MatrixXd f_hat;  // T x r
  std::vector<double> loglik_trace;
  VectorXd se_beta;
  int n_iters = 0;
  bool converged = false;
  double foc_residual = std::numeric_limits<double>::quiet_NaN();
  std::vector<std::string> diagnostics;
  std::optional<MatrixXd> delta_hat;  // common-regressor coefficients, when fitted
};

namespace detail {

enum class EmModelKind { basic, zero, phi };

// Gamma update: rowwise least squares against eff; constrained variants pin
// the y-row entries on the h columns (at zero, or at the observed Phi row).
inline MatrixXd gamma_update(const Theta& th, const MatrixXd& eff, const MatrixXd& ezf,
                             EmModelKind kind, int r1, const MatrixXd* phi) {
  const int r = th.n_factors(), p = th.block_size();
  if (r == 0) return MatrixXd(th.stacked_size(), 0);
  Eigen::LLT<MatrixXd> eff_llt(eff);
  if (eff_llt.info() != Eigen::Success)
    throw SingularityError("E[ff'] matrix singular in the M-step",
                           Eigen::SelfAdjointEigenSolver<MatrixXd>(eff)
                               .eigenvalues().minCoeff());
  MatrixXd gamma = eff_llt.solve(ezf.transpose()).transpose();
  const int r2 = r - r1;
  if (kind == EmModelKind::basic || r2 == 0) return gamma;

  Eigen::LLT<MatrixXd> gg_llt;
  if (r1 > 0) {
    gg_llt.compute(eff.topLeftCorner(r1, r1));
    if (gg_llt.info() != Eigen::Success)
      throw SingularityError("E[gg'] block singular in the constrained M-step",
                             Eigen::SelfAdjointEigenSolver<MatrixXd>(
                                 eff.topLeftCorner(r1, r1)).eigenvalues().minCoeff());
  }
  const MatrixXd eff_gh = eff.topRightCorner(r1, r2);
  for (int i = 0; i < th.n_units(); ++i) {
    const int row = i * p;
    RowVectorXd pin = (kind == EmModelKind::phi) ? RowVectorXd(phi->row(i))
                                                 : RowVectorXd(RowVectorXd::Zero(r2));
    if (r1 > 0) {
      VectorXd rhs = ezf.row(row).head(r1).transpose() - eff_gh * pin.transpose();
      gamma.row(row).head(r1) = gg_llt.solve(rhs).transpose();
    }
    gamma.row(row).tail(r2) = pin;
  }
  return gamma;
}

// Sigma update: block pattern of Dg{ M_ww - G+ ezf' - ezf G+' + G+ eff G+' },
// which collapses to Dg{ M_ww - G+ ezf' } at the unconstrained update.
inline BlockCov sigma_update(const Theta& th, const Moments& m, const MatrixXd& eff,
                             const MatrixXd& ezf, const MatrixXd& gamma_new,
                             double floor, double cap) {
  const int k = th.n_regressors(), p = k + 1, r = th.n_factors();
  const MatrixXd b = th.b_matrix();
  BlockCov sigma = th.sigma;
  for (int i = 0; i < th.n_units(); ++i) {
    MatrixXd s = b * m.unit_block(i) * b.transpose();
    if (r > 0) {
      const MatrixXd gi = gamma_new.middleRows(i * p, p);
      const MatrixXd cross = gi * ezf.middleRows(i * p, p).transpose();
      s -= cross + cross.transpose();
      s.noalias() += gi * eff * gi.transpose();
    }
    sigma.blocks[i].e_var = std::min(std::max(s(0, 0), floor), cap);
    if (k > 0) {
      MatrixXd sx = s.bottomRightCorner(k, k);
      symmetrize(sx);
      sigma.blocks[i].x_cov = clamp_spd(sx, floor, cap);
    }
  }
  return sigma;
}

// Beta update: weighted least squares of (ydot - lambda+' f) on xdot with the
// new e-variances, f taken as E(f_t | Z, theta_k).
inline VectorXd beta_update(const Theta& th, const Moments& m, const MatrixXd& pmat,
                            const MatrixXd& gamma_new, const BlockCov& sigma_new) {
  const int k = th.n_regressors(), p = k + 1, r = th.n_factors(), t = m.n_periods();
  MatrixXd xx = MatrixXd::Zero(k, k);
  VectorXd xy = VectorXd::Zero(k);
  for (int i = 0; i < th.n_units(); ++i) {
    const double wgt = 1.0 / sigma_new.blocks[i].e_var;
    const MatrixXd& mb = m.unit_block(i);
    xx += wgt * mb.bottomRightCorner(k, k);
    VectorXd rhs = mb.block(1, 0, k, 1);
    if (r > 0) {
      const MatrixXd mxf = (m.x_rows(i) * pmat) / t;  // K x r
      rhs.noalias() -= mxf * gamma_new.row(i * p).transpose();
    }
    xy += wgt * rhs;
  }
  Eigen::LLT<MatrixXd> llt(xx);
  if (llt.info() != Eigen::Success)
    throw SingularityError("weighted regressor Gram singular in the beta step",
                           Eigen::SelfAdjointEigenSolver<MatrixXd>(xx)
                               .eigenvalues().minCoeff());
  return llt.solve(xy);
}

struct EmSweep {
  double loglik_before = 0.0;
  double max_change = 0.0;
};

// One engine drives all variants: the basic model is the unconstrained case,
// zero restrictions pin the y-row entries on the h columns at zero, observed
// loadings pin them at Phi and keep M_ff free.
class EmEngine {
 public:
  EmEngine(const Moments& m, EmModelKind kind, int r1, const MatrixXd* phi,
           const EmConfig& cfg)
      : m_(m), kind_(kind), r1_(r1), phi_(phi), cfg_(cfg) {}

  double loglik(const Theta& th) const {
    WoodburyOps w(th);
    const double n = th.n_units();
    return -0.5 / n * w.logdet_sigma_zz() - 0.5 / n * trace_term(th, m_, w);
  }

  ModelSpec model_spec() const {
    switch (kind_) {
      case EmModelKind::zero:
        return ModelSpec::zero(r1_);
      case EmModelKind::phi:
        return ModelSpec::phi(r1_);
      case EmModelKind::basic:
      default:
        return ModelSpec::basic();
    }
  }

  double foc(const Theta& th) const { return foc_residuals(th, m_, model_spec()); }

  EmSweep sweep(Theta& th) const {
    const int n = th.n_units(), r = th.n_factors(), t = m_.n_periods();

    WoodburyOps w(th);
    EmSweep out;
    out.loglik_before =
        -0.5 / n * w.logdet_sigma_zz() - 0.5 / n * trace_term(th, m_, w);

    // E-step: P rows are E(f_t | Z, theta)', eff = G + P'P/T, ezf = (I(x)B) Z P / T.
    MatrixXd eff(0, 0), ezf(th.stacked_size(), 0), pmat(t, 0);
    if (r > 0) {
      pmat.noalias() = m_.z().transpose() * apply_ibt(th, w.a);
      eff = w.g + pmat.transpose() * pmat / t;
      symmetrize(eff);
      ezf = apply_ib(th, (m_.z() * pmat).eval()) / t;
    }

    Theta next = th;
    next.gamma = gamma_update(th, eff, ezf, kind_, r1_, phi_);
    next.sigma = sigma_update(th, m_, eff, ezf, next.gamma, cfg_.var_floor, cfg_.eig_cap);
    if (kind_ == EmModelKind::phi && r > 0) {
      next.m_ff = clamp_spd(eff, cfg_.var_floor, cfg_.eig_cap);
      symmetrize(next.m_ff);
    }
    if (th.n_regressors() > 0)
      next.beta = beta_update(th, m_, pmat, next.gamma, next.sigma);

    out.max_change = param_change(th, next);
    th = std::move(next);
    return out;
  }

 private:
  static double param_change(const Theta& a, const Theta& b) {
    double ch = 0.0;
    if (a.beta.size() > 0) ch = (a.beta - b.beta).cwiseAbs().maxCoeff();
    if (a.gamma.size() > 0) ch = std::max(ch, max_abs(a.gamma - b.gamma));
    if (a.m_ff.size() > 0) ch = std::max(ch, max_abs(a.m_ff - b.m_ff));
    for (int i = 0; i < a.n_units(); ++i) {
      ch = std::max(ch, std::abs(a.sigma.blocks[i].e_var - b.sigma.blocks[i].e_var));
      if (a.n_regressors() > 0)
        ch = std::max(ch, max_abs(a.sigma.blocks[i].x_cov - b.sigma.blocks[i].x_cov));
    }
    return ch;
  }

  const Moments& m_;
  EmModelKind kind_;
  int r1_;
  const MatrixXd* phi_;
  EmConfig cfg_;
};

struct EmRun {
  Theta theta;
  std::vector<double> loglik_trace;
  int n_iters = 0;
  bool param_converged = false;
  std::vector<std::string> diagnostics;
};

inline VectorXd theta_flatten(const Theta& th) {
  const int k = th.n_regressors(), n = th.n_units(), r = th.n_factors();
  VectorXd v(k + th.gamma.size() + n * (1 + k * k) + r * r);
  int at = 0;
  v.segment(at, k) = th.beta;
  at += k;
  v.segment(at, th.gamma.size()) = Eigen::Map<const VectorXd>(th.gamma.data(), th.gamma.size());
  at += th.gamma.size();
  for (int i = 0; i < n; ++i) {
    v(at++) = th.sigma.blocks[i].e_var;
    if (k > 0) {
      v.segment(at, k * k) =
          Eigen::Map<const VectorXd>(th.sigma.blocks[i].x_cov.data(), k * k);
      at += k * k;
    }
  }
  if (r > 0) v.segment(at, r * r) = Eigen::Map<const VectorXd>(th.m_ff.data(), r * r);
  return v;
}

inline void theta_unflatten(const VectorXd& v, Theta& th, double floor, double cap) {
  const int k = th.n_regressors(), n = th.n_units(), r = th.n_factors();
  int at = 0;
  th.beta = v.segment(at, k);
  at += k;
  th.gamma = Eigen::Map<const MatrixXd>(v.data() + at, th.gamma.rows(), th.gamma.cols());
  at += th.gamma.size();
  for (int i = 0; i < n; ++i) {
    th.sigma.blocks[i].e_var = std::min(std::max(v(at++), floor), cap);
    if (k > 0) {
      MatrixXd sx = Eigen::Map<const MatrixXd>(v.data() + at, k, k);
      at += k * k;
      symmetrize(sx);
      th.sigma.blocks[i].x_cov = clamp_spd(sx, floor, cap);
    }
  }
  if (r > 0) {
    MatrixXd mf = Eigen::Map<const MatrixXd>(v.data() + at, r, r);
    symmetrize(mf);
    th.m_ff = clamp_spd(mf, floor, cap);
  }
}

// Safeguarded Aitken extrapolation: when the sweep-to-sweep changes decay at
// a stable geometric ratio, jump by the summed geometric tail; the jump is
// kept only if the likelihood does not fall, so monotonicity and the fixed
// points of the sweep map are untouched.
class EmAccelerator {
 public:
  EmAccelerator(const EmConfig& cfg) : cfg_(cfg) {}

  void observe(const Theta& before, const Theta& after) {
    VectorXd now = theta_flatten(after);
    delta_ = now - theta_flatten(before);
    const double dn = delta_.norm();
    if (prev_norm_ > 0.0 && dn > 0.0)
      ratios_.push_back(dn / prev_norm_);
    else
      ratios_.clear();
    prev_norm_ = dn;
  }

  // In the ascent phase a jump is kept when the likelihood does not fall.
  // Once the objective has reached its floating-point resolution the FOC
  // residual takes over as the acceptance measure: it still contracts
  // geometrically there and is what the exit certificate needs.
  bool maybe_jump(const EmEngine& engine, Theta& theta, bool foc_mode) {
    if (ratios_.size() < 12) return false;
    double lo = 2.0, hi = 0.0;
    for (size_t i = ratios_.size() - 10; i < ratios_.size(); ++i) {
      lo = std::min(lo, ratios_[i]);
      hi = std::max(hi, ratios_[i]);
    }
    if (!(hi < 0.9999 && lo > 0.30 && hi / lo < 1.05)) return false;
    const double rho = hi;
    const double tail = std::min(rho / (1.0 - rho), 1e5);
    Theta cand = theta;
    theta_unflatten(theta_flatten(theta) + tail * delta_, cand, cfg_.var_floor,
                    cfg_.eig_cap);
    try {
      const bool accept = foc_mode
                              ? engine.foc(cand) < 0.7 * engine.foc(theta)
                              : engine.loglik(cand) >= engine.loglik(theta);
      if (accept) {
        theta = std::move(cand);
        reset();
        return true;
      }
    } catch (const SingularityError&) {
    }
    reset();
    return false;
  }

  void reset() {
    ratios_.clear();
    prev_norm_ = -1.0;
  }

 private:
  EmConfig cfg_;
  VectorXd delta_;
  double prev_norm_ = -1.0;
  std::vector<double> ratios_;
};

// Iterates sweeps until the parameter change falls below tol_param AND the
// FOC residual certifies the exit (the stopping rule the exit certificate
// needs; parameter stalls alone can sit well above the stationary point).
inline EmRun run_em(const EmEngine& engine, Theta theta, const EmConfig& cfg) {
  EmRun run;
  run.loglik_trace.reserve(128);
  const double foc_margin = 0.4 * cfg.tol_foc;
  bool certifying = false;
  double best_foc = std::numeric_limits<double>::infinity();
  int stalled = 0;
  EmAccelerator accel(cfg);
  double last_pushed = -std::numeric_limits<double>::infinity();
  bool at_resolution = false;
  for (int it = 1; it <= cfg.max_iters; ++it) {
    Theta backup = theta;
    try {
      EmSweep sw = engine.sweep(theta);
      run.n_iters = it;
      // a computed decrease means the per-sweep gain fell below the
      // floating-point resolution of the objective; from here on record only
      // genuine gains and drive the tail by the FOC residual
      if (sw.loglik_before >= last_pushed) {
        run.loglik_trace.push_back(sw.loglik_before);
        last_pushed = sw.loglik_before;
      } else {
        at_resolution = true;
      }
      accel.observe(backup, theta);
      accel.maybe_jump(engine, theta, at_resolution);
      if (sw.max_change < cfg.tol_param || certifying || at_resolution) {
        certifying = true;
        const double foc = engine.foc(theta);
        if (foc <= foc_margin) {
          run.param_converged = true;
          break;
        }
        // boundary solutions (active variance floors) never certify; stop
        // once the residual has made no real progress for a long stretch
        if (foc < 0.8 * best_foc) {
          best_foc = foc;
          stalled = 0;
        } else if (++stalled > 200) {
          run.diagnostics.push_back(
              "FOC residual stalled at " + std::to_string(foc) +
              "; stopping without a convergence certificate");
          break;
        }
      }
    } catch (const SingularityError& e) {
      theta = std::move(backup);
      run.diagnostics.push_back(std::string("EM aborted at iteration ") +
                                std::to_string(it) + ": " + e.what());
      break;
    }
  }
  try {
    const double ll_final = engine.loglik(theta);
    if (run.loglik_trace.empty() || ll_final >= run.loglik_trace.back())
      run.loglik_trace.push_back(ll_final);
  } catch (const SingularityError&) {
  }
  run.theta = std::move(theta);
  return run;
}

inline Theta init_random(const Moments& m, int r, const EmConfig& cfg) {
  const int n = m.n_units(), k = m.n_regressors(), t = m.n_periods();
  Theta th = Theta::make(n, k, r);
  std::mt19937_64 rng(mix_seed(cfg.seed, 0x5eedULL));
  std::normal_distribution<double> gauss(0.0, 1.0);
  for (int i = 0; i < n * (k + 1); ++i) {
    const double sd = std::sqrt(m.z().row(i).squaredNorm() / t);
    for (int j = 0; j < r; ++j) th.gamma(i, j) = sd * gauss(rng);
  }
  for (int i = 0; i < n; ++i) {
    th.sigma.blocks[i].e_var = std::max(m.unit_block(i)(0, 0), cfg.var_floor);
    if (k > 0)
      th.sigma.blocks[i].x_cov = MatrixXd(m.unit_block(i)
                                              .bottomRightCorner(k, k)
                                              .diagonal()
                                              .cwiseMax(cfg.var_floor)
                                              .asDiagonal());
  }
  if (k > 0) th.beta = within_group(m).beta_hat;
  return th;
}

// Starting values from the iterated PC estimator: loadings by regressing each
// demeaned series on the PC factors, covariance blocks from the residuals.
inline Theta init_from_pc(const Moments& m, int r, const EmConfig& cfg,
                          std::vector<std::string>& diagnostics) {
  const int n = m.n_units(), k = m.n_regressors(), t = m.n_periods();
  BaselineResult pc = iterated_pc(m, r);
  if (!pc.converged) {
    diagnostics.push_back("PC initializer did not converge; falling back to random start");
    return init_random(m, r, cfg);
  }

  Theta th = Theta::make(n, k, r);
  th.beta = k > 0 ? pc.beta_hat : VectorXd(0);
  const MatrixXd& f = *pc.pc_factors;
  for (int i = 0; i < n; ++i) {
    const int row = i * (k + 1);
    if (r > 0) {
      th.gamma.row(row) = pc.pc_loadings->row(i);
      if (k > 0) th.gamma.middleRows(row + 1, k) = (m.x_rows(i) * f) / t;
    }
    RowVectorXd e = m.y_rows(i);
    for (int j = 0; j < k; ++j) e -= th.beta(j) * m.x_rows(i).row(j);
    if (r > 0) e -= th.gamma.row(row) * f.transpose();
    th.sigma.blocks[i].e_var = std::max(e.squaredNorm() / t, cfg.var_floor);
    if (k > 0) {
      MatrixXd v = m.x_rows(i);
      if (r > 0) v -= th.gamma.middleRows(row + 1, k) * f.transpose();
      MatrixXd sx = v * v.transpose() / t;
      symmetrize(sx);
      th.sigma.blocks[i].x_cov = clamp_spd(sx, cfg.var_floor, cfg.eig_cap);
    }
  }
  return th;
}

inline Theta initial_theta(const Moments& m, int r, const EmConfig& cfg,
                           std::vector<std::string>& diagnostics) {
  switch (cfg.init) {
    case EmConfig::Init::user:
      if (!cfg.init_theta) throw DataError("user init requested without init_theta");
      return *cfg.init_theta;
    case EmConfig::Init::random:
      return init_random(m, r, cfg);
    case EmConfig::Init::iterated_pc:
    default:
      return init_from_pc(m, r, cfg, diagnostics);
  }
}

// Start for the observed-loadings variant. The factor span comes from
// principal components of the full stacked data; on that span, the y-equation
// loadings must equal x-loadings times beta plus a rank-r1 part plus the
// pinned Phi direction, which identifies beta through a small alternating
// least-squares problem. The g/h split then follows from per-period
// cross-sectional regressions on Phi.
inline Theta init_for_phi(const Moments& m, int r1, const MatrixXd& phi,
                          const EmConfig& cfg, std::vector<std::string>& diagnostics) {
  const int n = m.n_units(), k = m.n_regressors(), t = m.n_periods();
  const int r2 = static_cast<int>(phi.cols()), r = r1 + r2;
  VectorXd beta = VectorXd::Zero(k);
  if (k > 0) {
    const int rspan = std::min(r, std::min(m.stacked_size(), t) - 1);
    MatrixXd fspan, zload;
    pc_factors_of(m.z(), rspan, fspan, zload);
    MatrixXd cload(n, rspan);
    std::vector<MatrixXd> gxf(k, MatrixXd(n, rspan));
    for (int i = 0; i < n; ++i) {
      cload.row(i) = m.y_rows(i) * fspan / t;
      for (int j = 0; j < k; ++j) gxf[j].row(i) = m.x_rows(i).row(j) * fspan / t;
    }
    // annihilate the observed Phi direction, then alternate the rank-r1 part
    // against the beta least squares
    MatrixXd mphi = MatrixXd::Identity(n, n) -
                    phi * (phi.transpose() * phi).ldlt().solve(phi.transpose());
    MatrixXd mc = mphi * cload;
    std::vector<MatrixXd> mg(k);
    MatrixXd ata = MatrixXd::Zero(k, k);
    for (int j = 0; j < k; ++j) mg[j] = mphi * gxf[j];
    for (int a = 0; a < k; ++a)
      for (int b = 0; b <= a; ++b)
        ata(a, b) = ata(b, a) = mg[a].cwiseProduct(mg[b]).sum();
    Eigen::LDLT<MatrixXd> ata_ldlt(ata);
    const bool well_posed =
        ata_ldlt.info() == Eigen::Success &&
        ata.diagonal().minCoeff() > 1e-12 * std::max(1.0, ata.diagonal().maxCoeff());
    beta = within_group(m).beta_hat;
    if (well_posed) {
      for (int pass = 0; pass < 200; ++pass) {
        MatrixXd e = mc;
        for (int j = 0; j < k; ++j) e -= beta(j) * mg[j];
        MatrixXd low = MatrixXd::Zero(n, rspan);
        if (r1 > 0) {
          Eigen::JacobiSVD<MatrixXd> svd(e, Eigen::ComputeThinU | Eigen::ComputeThinV);
          const int keep = std::min(r1, static_cast<int>(svd.singularValues().size()));
          low = svd.matrixU().leftCols(keep) *
                svd.singularValues().head(keep).asDiagonal() *
                svd.matrixV().leftCols(keep).transpose();
        }
        VectorXd rhs(k);
        for (int j = 0; j < k; ++j) rhs(j) = mg[j].cwiseProduct(mc - low).sum();
        VectorXd beta_new = ata_ldlt.solve(rhs);
        const double change = (beta_new - beta).cwiseAbs().maxCoeff();
        beta = beta_new;
        if (change < 1e-12) break;
      }
      if (!beta.allFinite()) {
        diagnostics.push_back("pinned-structure start failed; using within-group");
        beta = within_group(m).beta_hat;
      }
    }
  }
  MatrixXd resid(n, t);
  for (int i = 0; i < n; ++i) {
    resid.row(i) = m.y_rows(i);
    for (int j = 0; j < k; ++j) resid.row(i) -= beta(j) * m.x_rows(i).row(j);
  }
  Eigen::LDLT<MatrixXd> php(phi.transpose() * phi);
  MatrixXd h = (php.solve(phi.transpose() * resid)).transpose();  // T x r2
  MatrixXd left = resid - phi * h.transpose();
  MatrixXd g, psi;
  pc_factors_of(left, r1, g, psi);

  MatrixXd f(t, r);
  if (r1 > 0) f.leftCols(r1) = g;
  f.rightCols(r2) = h;
  Theta th = Theta::make(n, k, r);
  th.beta = beta;
  MatrixXd ftf = f.transpose() * f / t;
  symmetrize(ftf);
  Eigen::LDLT<MatrixXd> fll(ftf * t);
  for (int i = 0; i < n; ++i) {
    const int row = i * (k + 1);
    if (r1 > 0) th.gamma.row(row).head(r1) = psi.row(i);
    th.gamma.row(row).tail(r2) = phi.row(i);
    for (int j = 0; j < k; ++j)
      th.gamma.row(row + 1 + j) =
          fll.solve(f.transpose() * m.x_rows(i).row(j).transpose()).transpose();
    RowVectorXd e = resid.row(i) - th.gamma.row(row) * f.transpose();
    th.sigma.blocks[i].e_var = std::max(e.squaredNorm() / t, cfg.var_floor);
    if (k > 0) {
      MatrixXd v = m.x_rows(i) - th.gamma.middleRows(row + 1, k) * f.transpose();
      MatrixXd sx = v * v.transpose() / t;
      symmetrize(sx);
      th.sigma.blocks[i].x_cov = clamp_spd(sx, cfg.var_floor, cfg.eig_cap);
    }
  }
  th.m_ff = clamp_spd(ftf, cfg.var_floor, cfg.eig_cap);
  (void)diagnostics;
  return th;
}

}  // namespace detail

// E-step conditional moments at theta_k (Woodbury route):
//   eff = E[(1/T) sum f f' | Z], ezf = E[(1/T) sum (Bz) f' | Z].
inline std::pair<MatrixXd, MatrixXd> e_step(const Theta& theta, const Moments& moments) {
  const int r = theta.n_factors(), t = moments.n_periods();
  if (r == 0) return {MatrixXd(0, 0), MatrixXd(theta.stacked_size(), 0)};
  WoodburyOps w(theta);
  MatrixXd pmat = moments.z().transpose() * apply_ibt(theta, w.a);
  MatrixXd eff = w.g + pmat.transpose() * pmat / t;
  symmetrize(eff);
  MatrixXd ezf = apply_ib(theta, (moments.z() * pmat).eval()) / t;
  return {eff, ezf};
}

// Conditional maximization given the E-step moments: Gamma, then Sigma, then beta.
inline Theta m_step(const Theta& theta, const Moments& moments, const MatrixXd& eff,
                    const MatrixXd& ezf, const EmConfig& cfg = EmConfig()) {
  Theta next = theta;
  next.gamma = detail::gamma_update(theta, eff, ezf, detail::EmModelKind::basic,
                                    theta.n_factors(), nullptr);
  next.sigma = detail::sigma_update(theta, moments, eff, ezf, next.gamma,
                                    cfg.var_floor, cfg.eig_cap);
  if (theta.n_regressors() > 0) {
    MatrixXd pmat(moments.n_periods(), theta.n_factors());
    if (theta.n_factors() > 0) {
      WoodburyOps w(theta);
      pmat.noalias() = moments.z().transpose() * apply_ibt(theta, w.a);
    }
    next.beta = detail::beta_update(theta, moments, pmat, next.gamma, next.sigma);
  }
  return next;
}

// Maximum likelihood fit of the basic model with r factors.
inline FitResult fit_mle(const PanelDataset& data, int r, const EmConfig& cfg = EmConfig()) {
  cfg.validate();
  data.validate();
  if (r < 0 || r >= std::min(data.n_units, data.n_periods))
    throw DataError("factor count must satisfy 0 <= r < min(N, T)");
  const Moments moments = demean_panel(data, cfg.dense_cap);

  FitResult out;
  Theta theta = detail::initial_theta(moments, r, cfg, out.diagnostics);
  detail::EmEngine engine(moments, detail::EmModelKind::basic, r, nullptr, cfg);
  detail::EmRun run = detail::run_em(engine, std::move(theta), cfg);

  out.loglik_trace = std::move(run.loglik_trace);
  out.n_iters = run.n_iters;
  for (auto& d : run.diagnostics) out.diagnostics.push_back(std::move(d));

  MatrixXd f_raw = estimate_factors(run.theta, moments);
  NormalizeResult nr = normalize_identification(run.theta, f_raw);
  out.theta_hat = std::move(nr.theta);
  out.f_hat = std::move(nr.f);
  for (auto& wmsg : nr.warnings) out.diagnostics.push_back(std::move(wmsg));

  out.foc_residual = foc_residuals(out.theta_hat, moments, ModelSpec::basic());
  out.converged = run.param_converged && out.foc_residual <= cfg.tol_foc;
  if (run.param_converged && out.foc_residual > cfg.tol_foc)
    out.diagnostics.push_back("parameters converged but FOC residual " +
                              std::to_string(out.foc_residual) + " exceeds tol_foc");

  if (data.n_regressors > 0) {
    try {
      out.se_beta =
          covariance_trace_form(out.theta_hat, moments, out.f_hat, ModelSpec::basic())
              .se_beta;
    } catch (const SingularityError& e) {
      out.diagnostics.push_back(std::string("standard errors unavailable: ") + e.what());
      out.se_beta = VectorXd::Constant(data.n_regressors,
                                       std::numeric_limits<double>::quiet_NaN());
    }
  }
  return out;
}

}  // namespace interfx
