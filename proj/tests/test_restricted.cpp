#include <catch2/catch.hpp>

#include "test_util.hpp"

using namespace interfx;
using namespace testutil;

TEST_CASE("zero restrictions with r2=0 is identical to the basic fit") {
  PanelDataset d = structured_panel(8, 2, 40, 1, 401);
  EmConfig cfg;
  FitResult zero = fit_zero_restrictions(d, 1, 0, cfg);
  FitResult base = fit_mle(d, 1, cfg);
  REQUIRE((zero.theta_hat.beta - base.theta_hat.beta).cwiseAbs().maxCoeff() == 0.0);
  REQUIRE(max_abs(zero.theta_hat.gamma - base.theta_hat.gamma) == 0.0);
}

TEST_CASE("zero-restrictions fit on its simulated design") {
  DgpConfig cfg;
  cfg.design = 2;
  cfg.n = 50;
  cfg.t = 75;
  cfg.seed = 402;
  auto [data, truth] = generate_dgp(cfg);
  FitResult fit = fit_zero_restrictions(data, 1, 1);
  REQUIRE(fit.converged);
  REQUIRE(fit.foc_residual <= 1e-6);
  REQUIRE(std::abs(fit.theta_hat.beta(0) - 1.0) < 0.01);
  REQUIRE(std::abs(fit.theta_hat.beta(1) - 2.0) < 0.01);
  // structural zeros hold exactly in the y-rows' h column
  for (int i = 0; i < 50; ++i) REQUIRE(fit.theta_hat.gamma(i * 3, 1) == 0.0);
  // monotone trace
  for (size_t i = 1; i < fit.loglik_trace.size(); ++i)
    REQUIRE(fit.loglik_trace[i] >= fit.loglik_trace[i - 1] - 1e-10);
}

TEST_CASE("zero-restrictions normalization structure") {
  const int n = 12, k = 1, r1 = 1, r2 = 2, r = 3;
  Theta th = random_theta(n, k, r, 440, false);
  const int p = k + 1;
  for (int i = 0; i < n; ++i) th.gamma.row(i * p).tail(r2).setZero();
  auto frng = rng_for(441);
  MatrixXd f = gaussian_matrix(50, r, frng);
  NormalizeResult nr = normalize_identification_zero(th, f, r1);
  // zeros intact, m_ff reset, separate blocks diagonal descending
  for (int i = 0; i < n; ++i) {
    REQUIRE(nr.theta.gamma(i * p, 1) == 0.0);
    REQUIRE(nr.theta.gamma(i * p, 2) == 0.0);
  }
  REQUIRE(rel_err(nr.theta.m_ff, MatrixXd(MatrixXd::Identity(r, r))) < 1e-12);
  BlockCovInv sinv(nr.theta.sigma);
  MatrixXd gram = nr.theta.gamma.transpose() * sinv.apply(nr.theta.gamma) / n;
  REQUIRE(std::abs(gram(1, 2)) < 1e-10 * gram.cwiseAbs().maxCoeff());  // D2 diagonal
  REQUIRE(gram(1, 1) > gram(2, 2));                                    // descending
  // the loading-times-factor product is preserved for mean-zero factors
  MatrixXd f0 = f.rowwise() - f.colwise().mean();
  REQUIRE(rel_err(nr.theta.gamma * nr.f.transpose(), MatrixXd(th.gamma * f0.transpose())) <
          1e-10);
}

TEST_CASE("rank-deficient observed loadings are rejected") {
  PanelDataset d = structured_panel(6, 1, 30, 1, 403);
  d.phi_observed = MatrixXd::Zero(6, 1);
  REQUIRE_THROWS_AS(fit_observed_phi(d, 1), DataError);
}

TEST_CASE("observed loadings with a dead factor reduce to the basic model") {
  DgpConfig cfg;
  cfg.design = 1;
  cfg.n = 50;
  cfg.t = 75;
  cfg.seed = 404;
  auto [data, truth] = generate_dgp(cfg);
  FitResult base = fit_mle(data, 1);
  auto rng = rng_for(405);
  PanelDataset with_phi = data;
  with_phi.phi_observed = gaussian_matrix(50, 1, rng);
  FitResult fit = fit_observed_phi(with_phi, 1);
  REQUIRE((fit.theta_hat.beta - base.theta_hat.beta).cwiseAbs().maxCoeff() < 5e-3);
  REQUIRE(fit.theta_hat.m_ff(1, 1) < 1e-2);  // M_hh collapses toward zero
}

TEST_CASE("observed-loadings fit on its simulated design") {
  DgpConfig cfg;
  cfg.design = 3;
  cfg.n = 100;
  cfg.t = 125;
  cfg.seed = 406;
  auto [data, truth] = generate_dgp(cfg);
  FitResult fit = fit_observed_phi(data, 1);
  REQUIRE(fit.converged);
  REQUIRE(std::abs(fit.theta_hat.beta(0) - 1.0) < 0.01);
  REQUIRE(std::abs(fit.theta_hat.beta(1) - 2.0) < 0.01);
  REQUIRE(fit.se_beta.allFinite());
  // the Phi block is pinned at its observed values
  for (int i = 0; i < 100; ++i)
    REQUIRE(fit.theta_hat.gamma(i * 3, 1) == (*data.phi_observed)(i, 0));
  // IO1 after normalization: M_gg = 1, M_gh = 0, M_hh free
  REQUIRE(fit.theta_hat.m_ff(0, 0) == Approx(1.0));
  REQUIRE(fit.theta_hat.m_ff(0, 1) == Approx(0.0).margin(1e-12));
  // Lagrange consistency at the optimum
  Moments m = demean_panel(data);
  MatrixXd lc = lagrange_consistency(fit.theta_hat, m);
  REQUIRE(max_abs(lc - lc.transpose()) < 1e-8);
  REQUIRE(max_abs(lc) < 1e-6);
}

TEST_CASE("concentration with the constant reduces to demeaning") {
  PanelDataset d = structured_panel(5, 2, 30, 1, 407);
  d.d_observed = MatrixXd::Ones(30, 1);
  PanelDataset proj = concentrate_common_regressors(d);
  Moments mp = demean_panel(proj);
  Moments md = demean_panel(d);
  REQUIRE(max_abs(mp.z() - md.z()) < 1e-12);
  REQUIRE_FALSE(proj.d_observed.has_value());
}

TEST_CASE("series inside the projection span are annihilated") {
  const int t = 24;
  auto rng = rng_for(408);
  MatrixXd dmat = gaussian_matrix(t, 2, rng);
  PanelDataset d;
  d.n_units = 3;
  d.n_periods = t;
  d.n_regressors = 1;
  d.y.resize(3, t);
  d.x.assign(1, MatrixXd(3, t));
  for (int i = 0; i < 3; ++i) {
    VectorXd cy = dmat * gaussian_matrix(2, 1, rng);
    VectorXd cx = dmat * gaussian_matrix(2, 1, rng);
    d.y.row(i) = cy.transpose();
    d.x[0].row(i) = cx.transpose();
  }
  d.d_observed = dmat;
  PanelDataset proj = concentrate_common_regressors(d);
  REQUIRE(max_abs(proj.y) < 1e-12);
  REQUIRE(max_abs(proj.x[0]) < 1e-12);
}

TEST_CASE("concentration matches per-series regression residuals") {
  const int n = 3, t = 30;
  auto rng = rng_for(409);
  PanelDataset d = random_panel(n, 1, t, 410);
  MatrixXd dmat = gaussian_matrix(t, 2, rng);
  d.d_observed = dmat;
  PanelDataset proj = concentrate_common_regressors(d);
  MatrixXd basis(t, 3);
  basis.col(0).setOnes();
  basis.rightCols(2) = dmat;
  for (int i = 0; i < n; ++i) {
    VectorXd y = d.y.row(i).transpose();
    VectorXd resid = y - basis * (basis.transpose() * basis)
                                    .ldlt()
                                    .solve(basis.transpose() * y);
    REQUIRE((proj.y.row(i).transpose() - resid).cwiseAbs().maxCoeff() < 1e-12);
  }
}

TEST_CASE("common-regressor fit nests the basic model at D = ones") {
  PanelDataset d = structured_panel(8, 2, 40, 1, 411);
  PanelDataset with_d = d;
  with_d.d_observed = MatrixXd::Ones(40, 1);
  EmConfig cfg;
  FitResult common = fit_phi_and_common(with_d, 1, cfg);
  FitResult base = fit_mle(d, 1, cfg);
  REQUIRE((common.theta_hat.beta - base.theta_hat.beta).cwiseAbs().maxCoeff() < 1e-8);
  REQUIRE(common.delta_hat.has_value());
}

TEST_CASE("joint fit on the full simulated design") {
  DgpConfig cfg;
  cfg.design = 4;
  cfg.n = 100;
  cfg.t = 125;
  cfg.seed = 412;
  auto [data, truth] = generate_dgp(cfg);
  FitResult fit = fit_phi_and_common(data, 1);
  REQUIRE(fit.converged);
  REQUIRE(std::abs(fit.theta_hat.beta(0) - 1.0) < 0.02);
  REQUIRE(std::abs(fit.theta_hat.beta(1) - 2.0) < 0.02);
  REQUIRE(fit.delta_hat.has_value());
  REQUIRE(fit.se_beta.allFinite());
}

TEST_CASE("noiseless joint design is reproduced exactly") {
  DgpConfig cfg;
  cfg.design = 4;
  cfg.n = 40;
  cfg.t = 60;
  cfg.seed = 413;
  cfg.noise_scale = 0.0;
  auto [data, truth] = generate_dgp(cfg);
  EmConfig em;
  em.max_iters = 400;
  FitResult fit = fit_phi_and_common(data, 1, em);
  REQUIRE((fit.theta_hat.beta - truth.beta).cwiseAbs().maxCoeff() < 1e-6);
  // fitted common-regressor piece plus the factor piece reproduces the
  // transformed data, so the kappa_i d_t contribution is recovered
  const int n = 40, t = 60, p = 3;
  MatrixXd zraw(n * p, t);
  for (int i = 0; i < n; ++i) {
    zraw.row(i * p) = data.y.row(i);
    zraw.row(i * p + 1) = data.x[0].row(i);
    zraw.row(i * p + 2) = data.x[1].row(i);
  }
  MatrixXd target = apply_ib(fit.theta_hat, zraw);
  MatrixXd dtil(t, 2);
  dtil.col(0).setOnes();
  dtil.col(1) = truth.d;
  MatrixXd recon = *fit.delta_hat * dtil.transpose() +
                   fit.theta_hat.gamma * fit.f_hat.transpose();
  REQUIRE(max_abs(recon - target) < 1e-6 * max_abs(target));
}

TEST_CASE("constrained EM sweeps stay monotone from random starts") {
  for (std::uint64_t s = 0; s < 3; ++s) {
    DgpConfig dg;
    dg.design = 2;
    dg.n = 20;
    dg.t = 30;
    dg.seed = 420 + s;
    auto [data, truth] = generate_dgp(dg);
    EmConfig cfg;
    cfg.init = EmConfig::Init::random;
    cfg.seed = 430 + s;
    cfg.max_iters = 200;
    FitResult zf = fit_zero_restrictions(data, 1, 1, cfg);
    for (size_t i = 1; i < zf.loglik_trace.size(); ++i)
      REQUIRE(zf.loglik_trace[i] >= zf.loglik_trace[i - 1] - 1e-10);

    DgpConfig dg3 = dg;
    dg3.design = 3;
    auto [data3, truth3] = generate_dgp(dg3);
    FitResult pf = fit_observed_phi(data3, 1, cfg);
    for (size_t i = 1; i < pf.loglik_trace.size(); ++i)
      REQUIRE(pf.loglik_trace[i] >= pf.loglik_trace[i - 1] - 1e-10);
  }
}
