#include <catch2/catch.hpp>

#include "test_util.hpp"

using namespace interfx;
using namespace testutil;

TEST_CASE("noiseless switch makes the outcome exact") {
  DgpConfig cfg;
  cfg.design = 2;
  cfg.n = 10;
  cfg.t = 20;
  cfg.seed = 501;
  cfg.noise_scale = 0.0;
  auto [data, truth] = generate_dgp(cfg);
  for (int i = 0; i < cfg.n; ++i)
    for (int s = 0; s < cfg.t; ++s) {
      double want = truth.mu(i * 3) +
                    truth.loadings.row(i * 3).dot(truth.factors.row(s)) +
                    data.x[0](i, s) * 1.0 + data.x[1](i, s) * 2.0;
      REQUIRE(data.y(i, s) == Approx(want).margin(1e-12));
    }
}

TEST_CASE("generated error variances match the heteroscedasticity levels") {
  DgpConfig cfg;
  cfg.design = 1;
  cfg.n = 5;
  cfg.t = 10000;
  cfg.seed = 502;
  auto [data, truth] = generate_dgp(cfg);
  // recover e_it = y - alpha - x beta - psi g and compare with Xi
  for (int i = 0; i < cfg.n; ++i) {
    double ss = 0.0;
    for (int s = 0; s < cfg.t; ++s) {
      double e = data.y(i, s) - truth.mu(i * 3) -
                 truth.loadings.row(i * 3).dot(truth.factors.row(s)) -
                 data.x[0](i, s) * 1.0 - data.x[1](i, s) * 2.0;
      ss += e * e;
    }
    const double var = ss / cfg.t;
    if (truth.xi(i * 3) > 1e-12)
      REQUIRE(std::abs(var / truth.xi(i * 3) - 1.0) < 0.05);
  }
}

TEST_CASE("design 4 emits the observables") {
  DgpConfig cfg;
  cfg.design = 4;
  cfg.n = 12;
  cfg.t = 300;
  cfg.seed = 503;
  auto [data, truth] = generate_dgp(cfg);
  REQUIRE(data.phi_observed.has_value());
  REQUIRE(data.phi_observed->rows() == 12);
  REQUIRE(data.phi_observed->cols() == 1);
  REQUIRE(data.d_observed.has_value());
  REQUIRE(data.d_observed->rows() == 300);
  REQUIRE(std::abs(data.d_observed->col(0).mean() - 1.0) < 0.2);
}

TEST_CASE("mixing blocks are orthonormal") {
  auto rng = rng_for(504);
  for (int rep = 0; rep < 100; ++rep) {
    MatrixXd l = gaussian_matrix(6, 2, rng);
    auto [xi, ups] = gen_heteroscedasticity(l, 0.1, rng, 2);
    for (const auto& u : ups)
      REQUIRE(rel_err(u.transpose() * u, MatrixXd(MatrixXd::Identity(2, 2))) < 1e-12);
  }
}

TEST_CASE("zero loading rows carry no noise") {
  auto rng = rng_for(505);
  MatrixXd l = gaussian_matrix(9, 2, rng);
  l.row(4).setZero();
  auto [xi, ups] = gen_heteroscedasticity(l, 0.1, rng, 2);
  REQUIRE(xi(4) == 0.0);
}

TEST_CASE("eta near one half gives a unit multiplier") {
  auto rng = rng_for(506);
  MatrixXd l = gaussian_matrix(30, 2, rng);
  auto [xi, ups] = gen_heteroscedasticity(l, 0.4999999, rng, 2);
  for (int j = 0; j < 30; ++j)
    REQUIRE(xi(j) == Approx(l.row(j).squaredNorm()).epsilon(1e-5));
}

TEST_CASE("error draws have the right first two moments") {
  const int draws = 1000000;
  for (ErrorDist dist :
       {ErrorDist::chisq2_normalized, ErrorDist::normal, ErrorDist::student_t}) {
    auto rng = rng_for(507);
    double sum = 0.0, sumsq = 0.0;
    for (int i = 0; i < draws; ++i) {
      const double e = interfx::detail::draw_error(dist, 7.0, rng);
      sum += e;
      sumsq += e * e;
    }
    const double mean = sum / draws;
    const double var = sumsq / draws - mean * mean;
    REQUIRE(std::abs(mean) < 4.0 / std::sqrt(static_cast<double>(draws)));
    REQUIRE(std::abs(var - 1.0) < 0.05);
  }
}

TEST_CASE("monte carlo reports are deterministic across thread counts") {
  DgpConfig cfg;
  cfg.design = 1;
  cfg.n = 20;
  cfg.t = 30;
  cfg.seed = 508;
  EstimatorSet est;
  est.mle = false;  // keep it quick: wg and pc only
  McReport a = run_monte_carlo(cfg, 8, est, false, EmConfig(), 1);
  McReport b = run_monte_carlo(cfg, 8, est, false, EmConfig(), 2);
  REQUIRE(a.n_failed == b.n_failed);
  for (const auto& [name, cells] : a.cells) {
    REQUIRE(b.cells.count(name) == 1);
    for (int c = 0; c < 2; ++c) {
      REQUIRE(a.cells.at(name)[c].bias == b.cells.at(name)[c].bias);
      REQUIRE(a.cells.at(name)[c].rmse == b.cells.at(name)[c].rmse);
    }
  }
}

TEST_CASE("single-replication accounting holds exactly") {
  DgpConfig cfg;
  cfg.design = 1;
  cfg.n = 20;
  cfg.t = 30;
  cfg.seed = 509;
  EstimatorSet est;
  est.mle = false;
  McReport rep = run_monte_carlo(cfg, 1, est, false, EmConfig(), 1);
  for (const auto& [name, cells] : rep.cells)
    for (int c = 0; c < 2; ++c)
      REQUIRE(cells[c].rmse == Approx(std::abs(cells[c].bias)).margin(1e-15));
}

TEST_CASE("rmse is never below the bias magnitude") {
  DgpConfig cfg;
  cfg.design = 2;
  cfg.n = 20;
  cfg.t = 30;
  cfg.seed = 510;
  EstimatorSet est;
  est.mle = false;
  McReport rep = run_monte_carlo(cfg, 12, est, false, EmConfig(), 2);
  REQUIRE(rep.n_failed == 0);
  for (const auto& [name, cells] : rep.cells)
    for (int c = 0; c < 2; ++c) REQUIRE(cells[c].rmse >= std::abs(cells[c].bias) - 1e-15);
}

TEST_CASE("estimator ordering holds on the observed-regressor designs") {
  for (int design : {3, 4}) {
    DgpConfig cfg;
    cfg.design = design;
    cfg.n = 30;
    cfg.t = 45;
    cfg.seed = 512 + design;
    McReport rep = run_monte_carlo(cfg, 100, EstimatorSet(), false, EmConfig(), 2);
    REQUIRE(rep.n_failed == 0);
    for (int c = 0; c < 2; ++c) {
      REQUIRE(rep.cells.at("mle")[c].rmse < rep.cells.at("pc")[c].rmse);
      REQUIRE(rep.cells.at("pc")[c].rmse < rep.cells.at("wg")[c].rmse);
    }
  }
}

TEST_CASE("failed replications are counted, not dropped silently") {
  // design 4 with T = N = 3 gives the PC baseline r = 3 factors, which is
  // not below min(N, T): every replication throws and must be recorded
  DgpConfig cfg;
  cfg.design = 4;
  cfg.n = 3;
  cfg.t = 3;
  cfg.seed = 511;
  EstimatorSet est;
  est.wg = false;
  est.pc = true;
  est.mle = false;
  McReport rep = run_monte_carlo(cfg, 3, est, false, EmConfig(), 1, 2);
  REQUIRE(rep.n_failed == 3);
  REQUIRE(rep.failures.size() == 3);
  REQUIRE(rep.cells.count("pc") == 0);
}
