#include <catch2/catch.hpp>

#include "test_util.hpp"

using namespace interfx;
using namespace testutil;

namespace {

// T x r factor draws with exactly zero column means and sample moment I_r.
MatrixXd orthonormal_factors(int t, int r, std::uint64_t seed) {
  auto rng = rng_for(seed);
  MatrixXd f = gaussian_matrix(t, r, rng);
  f.rowwise() -= f.colwise().mean();
  MatrixXd s = f.transpose() * f / t;
  Eigen::SelfAdjointEigenSolver<MatrixXd> es(s);
  MatrixXd s_inv_half = es.eigenvectors() *
                        es.eigenvalues().cwiseSqrt().cwiseInverse().asDiagonal() *
                        es.eigenvectors().transpose();
  return f * s_inv_half;
}

}  // namespace

TEST_CASE("e-step with zero loadings") {
  Theta th = random_theta(3, 1, 2, 61);
  th.gamma.setZero();
  Moments m = demean_panel(random_panel(3, 1, 20, 62));
  auto [eff, ezf] = e_step(th, m);
  REQUIRE(rel_err(eff, MatrixXd(MatrixXd::Identity(2, 2))) < 1e-12);
  REQUIRE(max_abs(ezf) < 1e-12);
}

TEST_CASE("e-step noiseless limit recovers loadings") {
  const int n = 4, k = 1, t = 40, r = 2;
  auto rng = rng_for(63);
  MatrixXd f = orthonormal_factors(t, r, 64);
  MatrixXd gamma = gaussian_matrix(n * (k + 1), r, rng);
  Moments m(gamma * f.transpose(), n, k);
  Theta th = Theta::make(n, k, r);
  th.gamma = gamma;
  for (double eps : {1e-4, 1e-7}) {
    for (auto& b : th.sigma.blocks) {
      b.e_var = eps;
      b.x_cov = eps * MatrixXd::Identity(k, k);
    }
    auto [eff, ezf] = e_step(th, m);
    REQUIRE(rel_err(eff, MatrixXd(MatrixXd::Identity(r, r))) < 50 * eps);
    REQUIRE(rel_err(ezf, gamma) < 50 * eps);
  }
}

TEST_CASE("e-step matches the dense evaluation") {
  Moments m = demean_panel(random_panel(3, 1, 30, 65));
  for (std::uint64_t s = 0; s < 5; ++s) {
    Theta th = random_theta(3, 1, 1, 660 + s);
    auto [eff, ezf] = e_step(th, m);
    auto [eff_d, ezf_d] = dense_estep(th, m.dense());
    REQUIRE(rel_err(eff, eff_d) < 1e-10);
    REQUIRE(rel_err(ezf, ezf_d) < 1e-10);
  }
}

TEST_CASE("m-step fixed point of the loading update") {
  auto rng = rng_for(67);
  Theta th = random_theta(4, 1, 2, 67);
  Moments m = demean_panel(random_panel(4, 1, 25, 68));
  MatrixXd eff = random_spd(2, rng);
  MatrixXd ezf = th.gamma * eff;
  Theta next = m_step(th, m, eff, ezf);
  REQUIRE(rel_err(next.gamma, th.gamma) < 1e-12);
}

TEST_CASE("m-step with no regressors still updates sigma") {
  Theta th = random_theta(4, 0, 1, 69);
  Moments m = demean_panel(random_panel(4, 0, 25, 70));
  auto [eff, ezf] = e_step(th, m);
  Theta next = m_step(th, m, eff, ezf);
  REQUIRE(next.beta.size() == 0);
  bool changed = false;
  for (int i = 0; i < 4; ++i)
    if (next.sigma.blocks[i].e_var != th.sigma.blocks[i].e_var) changed = true;
  REQUIRE(changed);
}

TEST_CASE("one ECM step never lowers the likelihood") {
  for (std::uint64_t s = 0; s < 10; ++s) {
    Moments m = demean_panel(structured_panel(5, 1, 30, 1, 710 + s));
    Theta th = random_theta(5, 1, 1, 720 + s);
    const double before = log_likelihood(th, m);
    auto [eff, ezf] = e_step(th, m);
    Theta next = m_step(th, m, eff, ezf);
    const double after = log_likelihood(next, m);
    REQUIRE(after >= before - 1e-10);
  }
}

TEST_CASE("normalization is idempotent") {
  Theta th = random_theta(6, 1, 2, 81, false);
  auto frng = rng_for(82);
  MatrixXd f = gaussian_matrix(40, 2, frng);
  NormalizeResult once = normalize_identification(th, f);
  NormalizeResult twice = normalize_identification(once.theta, once.f);
  REQUIRE(rel_err(twice.theta.gamma, once.theta.gamma) < 1e-10);
  REQUIRE(rel_err(twice.f, once.f) < 1e-10);
  // IB2 holds: the weighted Gram is diagonal with descending entries
  BlockCovInv sinv(once.theta.sigma);
  MatrixXd gram =
      once.theta.gamma.transpose() * sinv.apply(once.theta.gamma) / once.theta.n_units();
  for (int a = 0; a < 2; ++a)
    for (int b = 0; b < 2; ++b)
      if (a != b) REQUIRE(std::abs(gram(a, b)) < 1e-10 * gram.cwiseAbs().maxCoeff());
  REQUIRE(gram(0, 0) > gram(1, 1));
  // IB1/IB3 on the factor side for matched m_ff
  Theta matched = th;
  matched.m_ff = (f.rowwise() - f.colwise().mean()).transpose() *
                 (f.rowwise() - f.colwise().mean()) / f.rows();
  NormalizeResult nm = normalize_identification(matched, f);
  MatrixXd sample = nm.f.transpose() * nm.f / nm.f.rows();
  REQUIRE(rel_err(sample, MatrixXd(MatrixXd::Identity(2, 2))) < 1e-10);
  REQUIRE(nm.f.colwise().mean().cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("normalization is invariant to invertible mixing") {
  Theta th = random_theta(6, 1, 2, 83, false);
  auto frng = rng_for(84);
  MatrixXd f = gaussian_matrix(50, 2, frng);
  NormalizeResult base = normalize_identification(th, f);
  auto rng = rng_for(85);
  for (int rep = 0; rep < 30; ++rep) {
    MatrixXd a = gaussian_matrix(2, 2, rng);
    if (std::abs(a.determinant()) < 1e-2) continue;
    Theta rot = th;
    rot.gamma = th.gamma * a;
    MatrixXd ai = a.inverse();
    rot.m_ff = ai * th.m_ff * ai.transpose();
    symmetrize(rot.m_ff);
    NormalizeResult got = normalize_identification(rot, f * ai.transpose());
    REQUIRE(rel_err(got.theta.gamma, base.theta.gamma) < 1e-8);
    REQUIRE(rel_err(got.f, base.f) < 1e-8);
  }
  // product Gamma f' is preserved for mean-zero f
  MatrixXd f0 = f.rowwise() - f.colwise().mean();
  REQUIRE(rel_err(base.theta.gamma * base.f.transpose(),
                  MatrixXd(th.gamma * f0.transpose())) < 1e-10);
}

TEST_CASE("scalar normalization is a hand scaling") {
  Theta th = random_theta(5, 1, 1, 86);
  auto frng = rng_for(87);
  MatrixXd f = gaussian_matrix(30, 1, frng);
  MatrixXd f0 = f.rowwise() - f.colwise().mean();
  const double s = (f0.transpose() * f0 / f.rows())(0, 0);
  th.m_ff(0, 0) = s;
  NormalizeResult nr = normalize_identification(th, f);
  const double sample = (nr.f.transpose() * nr.f / f.rows())(0, 0);
  REQUIRE(sample == Approx(1.0).epsilon(1e-12));
  // gamma scaled by sqrt(s) up to the sign convention
  REQUIRE(rel_err(nr.theta.gamma.cwiseAbs(), MatrixXd((th.gamma * std::sqrt(s)).cwiseAbs())) <
          1e-12);
}

TEST_CASE("fit recovers the coefficients on a simulated design") {
  DgpConfig cfg;
  cfg.design = 1;
  cfg.n = 50;
  cfg.t = 75;
  cfg.seed = 20240801ULL;
  auto [data, truth] = generate_dgp(cfg);
  FitResult fit = fit_mle(data, 1);
  REQUIRE(fit.converged);
  REQUIRE(std::abs(fit.theta_hat.beta(0) - 1.0) < 0.01);
  REQUIRE(std::abs(fit.theta_hat.beta(1) - 2.0) < 0.01);
  // trace is monotone
  for (size_t i = 1; i < fit.loglik_trace.size(); ++i)
    REQUIRE(fit.loglik_trace[i] >= fit.loglik_trace[i - 1] - 1e-10);
  // normalization left the likelihood unchanged
  Moments m = demean_panel(data);
  REQUIRE(std::abs(log_likelihood(fit.theta_hat, m) - fit.loglik_trace.back()) <
          1e-8 * std::abs(fit.loglik_trace.back()));
}

TEST_CASE("r=0 reduces to iterated GLS, and to OLS under equal variances") {
  // orthogonal-by-construction residuals with equal norms: every weighting
  // gives the same beta, so GLS == OLS exactly
  const int n = 5, k = 2, t = 24;
  auto rng = rng_for(88);
  VectorXd beta(2);
  beta << 1.5, -0.5;
  PanelDataset d;
  d.n_units = n;
  d.n_periods = t;
  d.n_regressors = k;
  d.x.assign(k, MatrixXd(n, t));
  d.y.resize(n, t);
  for (int i = 0; i < n; ++i) {
    MatrixXd xi = gaussian_matrix(k, t, rng);
    xi.colwise() -= xi.rowwise().mean().eval();
    VectorXd e = gaussian_matrix(t, 1, rng);
    e.array() -= e.mean();
    // project e off the rows of xi, then rescale to a common norm
    MatrixXd xq = xi.transpose().householderQr().householderQ() *
                  MatrixXd::Identity(t, k);
    e -= xq * (xq.transpose() * e);
    e *= std::sqrt(static_cast<double>(t)) / e.norm();
    for (int j = 0; j < k; ++j) d.x[j].row(i) = xi.row(j);
    d.y.row(i) = (beta.transpose() * xi + e.transpose()).row(0);
  }
  FitResult fit = fit_mle(d, 0);
  REQUIRE(fit.converged);
  Moments m = demean_panel(d);
  BaselineResult ols = within_group(m);
  REQUIRE((fit.theta_hat.beta - ols.beta_hat).cwiseAbs().maxCoeff() < 1e-10);
  REQUIRE((fit.theta_hat.beta - beta).cwiseAbs().maxCoeff() < 1e-10);

  // generic data: r=0 fixed point solves the weighted GLS recursion
  PanelDataset d2 = structured_panel(6, 2, 40, 0, 89);
  FitResult fit2 = fit_mle(d2, 0);
  Moments m2 = demean_panel(d2);
  VectorXd b = within_group(m2).beta_hat;
  for (int it = 0; it < 500; ++it) {
    MatrixXd xx = MatrixXd::Zero(2, 2);
    VectorXd xy = VectorXd::Zero(2);
    for (int i = 0; i < 6; ++i) {
      RowVectorXd resid = m2.y_rows(i);
      for (int j = 0; j < 2; ++j) resid -= b(j) * m2.x_rows(i).row(j);
      const double w = 1.0 / (resid.squaredNorm() / 40);
      xx += w * (m2.x_rows(i) * m2.x_rows(i).transpose());
      xy += w * (m2.x_rows(i) * m2.y_rows(i).transpose());
    }
    b = xx.ldlt().solve(xy);
  }
  REQUIRE((fit2.theta_hat.beta - b).cwiseAbs().maxCoeff() < 1e-8);
}

TEST_CASE("noiseless factor data is reproduced") {
  const int n = 6, k = 1, t = 30, r = 2;
  auto rng = rng_for(90);
  MatrixXd f = orthonormal_factors(t, r, 91);
  MatrixXd gamma = gaussian_matrix(n * (k + 1), r, rng);
  MatrixXd z = gamma * f.transpose();
  PanelDataset d;
  d.n_units = n;
  d.n_periods = t;
  d.n_regressors = k;
  d.y.resize(n, t);
  d.x.assign(k, MatrixXd(n, t));
  for (int i = 0; i < n; ++i) {
    d.y.row(i) = z.row(i * 2);
    d.x[0].row(i) = z.row(i * 2 + 1);
  }
  EmConfig cfg;
  cfg.max_iters = 300;
  FitResult fit = fit_mle(d, r, cfg);
  // at the variance floor the objective sits at the 1e8 conditioning scale,
  // so the monotonicity slack is the floor-regime one
  for (size_t i = 1; i < fit.loglik_trace.size(); ++i)
    REQUIRE(fit.loglik_trace[i] >= fit.loglik_trace[i - 1] - 1e-7);
  // the common component reproduces the data once mapped back through B^{-1}
  // (beta itself is unidentified when v is identically zero)
  MatrixXd recon = fit.theta_hat.gamma * fit.f_hat.transpose();
  for (int i = 0; i < n; ++i)
    recon.row(i * 2) += fit.theta_hat.beta.transpose() * recon.middleRows(i * 2 + 1, k);
  REQUIRE(max_abs(recon - z) < 1e-6);
}

TEST_CASE("unit permutation leaves beta unchanged") {
  PanelDataset d = structured_panel(8, 2, 40, 1, 92);
  EmConfig cfg;
  cfg.tol_param = 1e-12;
  FitResult base = fit_mle(d, 1, cfg);
  // reverse the unit order
  PanelDataset perm = d;
  for (int i = 0; i < 8; ++i) {
    perm.y.row(i) = d.y.row(7 - i);
    for (int j = 0; j < 2; ++j) perm.x[j].row(i) = d.x[j].row(7 - i);
  }
  FitResult fit_p = fit_mle(perm, 1, cfg);
  REQUIRE((base.theta_hat.beta - fit_p.theta_hat.beta).cwiseAbs().maxCoeff() < 1e-10);
}
