// Command-line estimation and simulation for panel models with interactive
// effects. Two subcommands:
//   interfx estimate --panel data.csv --model basic --r auto --out report.txt
//   interfx simulate --design 1 --n 50 --t 75 --reps 200 --out table.txt
// Exit codes: 0 success, 1 input error, 2 fit did not converge.

#include <CLI11.hpp>

#include <cstdlib>
#include <fstream>
#include <iostream>
#include <string>

#include "interfx/interfx.hpp"

using namespace interfx;

namespace {

int default_threads() {
  if (const char* env = std::getenv("INTERFX_THREADS")) {
    const int v = std::atoi(env);
    if (v > 0) return v;
  }
  return 0;  // resolved to hardware concurrency downstream
}

std::ostream& open_output(std::ofstream& file, const std::string& path) {
  if (path.empty()) return std::cout;
  file.open(path);
  if (!file) throw DataError("cannot open output file: " + path);
  return file;
}

struct EstimateArgs {
  std::string panel, model = "basic", r_text = "auto", phi_path, common_path;
  std::string se_method = "trace", out;
  int r1 = -1, r2 = -1, r_max = 4;
  double tol = 1e-8;
  int max_iters = 3000;
  std::uint64_t seed = 0;
};

int run_estimate(const EstimateArgs& args) {
  PanelDataset data = io::read_panel_csv(args.panel);
  if (!args.phi_path.empty())
    data.phi_observed = io::read_keyed_csv(args.phi_path, data.n_units, "phi");
  if (!args.common_path.empty())
    data.d_observed = io::read_keyed_csv(args.common_path, data.n_periods, "common");

  if (args.model == "phi" && !data.phi_observed)
    throw DataError("--model phi requires --phi <file> with the observed loadings");
  if (args.model == "phi-common" && !data.d_observed)
    throw DataError("--model phi-common requires --common <file> with the common regressors");
  if (args.model == "phi-common" && !data.phi_observed)
    throw DataError("--model phi-common requires --phi <file> with the observed loadings");

  EmConfig cfg;
  cfg.tol_param = args.tol;
  cfg.max_iters = args.max_iters;
  cfg.seed = args.seed;

  const bool auto_r = (args.r_text == "auto");
  int r = -1;
  if (!auto_r) {
    try {
      r = std::stoi(args.r_text);
    } catch (...) {
      throw DataError("--r must be an integer or 'auto'");
    }
  }

  io::EstimateReportInfo info;
  info.model = args.model;
  info.panel_path = args.panel;
  info.auto_r = auto_r;

  FitResult fit;
  if (args.model == "basic") {
    if (auto_r) {
      SelectionResult sel = select_r_path(data, args.r_max, cfg);
      info.ic_trace = sel.ic;
      r = sel.r;
    }
    info.r = r;
    fit = fit_mle(data, r, cfg);
  } else if (args.model == "zero") {
    int r1 = args.r1, r2 = args.r2;
    if (auto_r && (r1 < 0 || r2 < 0)) {
      SplitSelection ss = select_r1_r2(data, cfg, args.r_max);
      info.ic_trace = ss.ic;
      r1 = ss.r1;
      r2 = ss.r2;
    }
    if (r1 < 0 || r2 < 0)
      throw DataError("--model zero requires --r1 and --r2 (or --r auto)");
    info.r = r1 + r2;
    info.r1 = r1;
    info.r2 = r2;
    fit = (r2 == 0) ? fit_mle(data, r1, cfg) : fit_zero_restrictions(data, r1, r2, cfg);
  } else if (args.model == "phi" || args.model == "phi-common") {
    const int r2 = static_cast<int>(data.phi_observed ? data.phi_observed->cols() : 0);
    int r1 = args.r1;
    if (r1 < 0 && auto_r) {
      PanelDataset base = (args.model == "phi-common")
                              ? concentrate_common_regressors(data)
                              : data;
      SelectionResult sel = select_r_path(base, args.r_max, cfg);
      info.ic_trace = sel.ic;
      r1 = std::max(sel.r - r2, 0);
    }
    if (r1 < 0) throw DataError("--model " + args.model + " requires --r1 (or --r auto)");
    info.r = r1 + r2;
    info.r1 = r1;
    info.r2 = r2;
    fit = (args.model == "phi") ? fit_observed_phi(data, r1, cfg)
                                : fit_phi_and_common(data, r1, cfg);
  } else {
    throw DataError("unknown model '" + args.model + "'");
  }

  if (args.se_method == "moment") {
    if (args.model != "basic")
      throw DataError("--se moment is available for the basic model only");
    fit.se_beta = covariance_moment_form(fit.theta_hat, data.n_periods).se_beta;
  } else if (args.se_method != "trace") {
    throw DataError("--se must be 'trace' or 'moment'");
  }

  std::ofstream file;
  std::ostream& out = open_output(file, args.out);
  io::write_estimate_report(out, fit, info);
  return fit.converged ? 0 : 2;
}

struct SimulateArgs {
  int design = 1, n = 50, t = 75, reps = 1000, threads = default_threads();
  std::uint64_t seed = 0;
  std::string estimators = "wg,pc,mle", select = "on", dist = "chisq", out;
};

int run_simulate(const SimulateArgs& args) {
  DgpConfig cfg;
  cfg.design = args.design;
  cfg.n = args.n;
  cfg.t = args.t;
  cfg.seed = args.seed;
  if (args.dist == "chisq") {
    cfg.error_dist = ErrorDist::chisq2_normalized;
  } else if (args.dist == "normal") {
    cfg.error_dist = ErrorDist::normal;
  } else if (args.dist.rfind("t:", 0) == 0) {
    cfg.error_dist = ErrorDist::student_t;
    cfg.t_df = std::atof(args.dist.c_str() + 2);
    if (!(cfg.t_df > 2.0)) throw DataError("--dist t:<df> needs df > 2");
  } else {
    throw DataError("--dist must be chisq, normal, or t:<df>");
  }

  EstimatorSet est{false, false, false};
  std::stringstream ss(args.estimators);
  std::string tok;
  while (std::getline(ss, tok, ',')) {
    if (tok == "wg")
      est.wg = true;
    else if (tok == "pc")
      est.pc = true;
    else if (tok == "mle")
      est.mle = true;
    else if (!tok.empty())
      throw DataError("unknown estimator '" + tok + "'");
  }
  if (args.select != "on" && args.select != "off")
    throw DataError("--select-r must be 'on' or 'off'");

  McReport rep = run_monte_carlo(cfg, args.reps, est, args.select == "on", EmConfig(),
                                 args.threads);
  std::ofstream file;
  std::ostream& out = open_output(file, args.out);
  io::write_mc_report(out, rep, args.estimators);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"maximum likelihood estimation of panel models with interactive effects"};
  app.require_subcommand(1);

  EstimateArgs est;
  CLI::App* cmd_est = app.add_subcommand("estimate", "fit a model to a panel CSV");
  cmd_est->add_option("--panel", est.panel, "long-format CSV: unit,time,y,x1,...,xK")
      ->required();
  cmd_est->add_option("--model", est.model, "basic | zero | phi | phi-common");
  cmd_est->add_option("--r", est.r_text, "factor count, or 'auto'");
  cmd_est->add_option("--r1", est.r1, "shared factor count (zero/phi models)");
  cmd_est->add_option("--r2", est.r2, "restricted factor count (zero model)");
  cmd_est->add_option("--r-max", est.r_max, "selection upper bound (default 4)");
  cmd_est->add_option("--phi", est.phi_path, "observed loadings file, one row per unit");
  cmd_est->add_option("--common", est.common_path,
                      "observed common regressors, one row per period");
  cmd_est->add_option("--se", est.se_method, "trace | moment");
  cmd_est->add_option("--out", est.out, "report path (stdout when omitted)");
  cmd_est->add_option("--tol", est.tol, "parameter tolerance (default 1e-8)");
  cmd_est->add_option("--max-iters", est.max_iters, "EM iteration cap (default 3000)");
  cmd_est->add_option("--seed", est.seed, "seed for randomized starts");

  SimulateArgs sim;
  CLI::App* cmd_sim = app.add_subcommand("simulate", "run the Monte Carlo harness");
  cmd_sim->add_option("--design", sim.design, "data generating design: 1..4")->required();
  cmd_sim->add_option("--n", sim.n, "cross-section size");
  cmd_sim->add_option("--t", sim.t, "time-series length");
  cmd_sim->add_option("--reps", sim.reps, "replications");
  cmd_sim->add_option("--seed", sim.seed, "master seed");
  cmd_sim->add_option("--estimators", sim.estimators, "comma list from wg,pc,mle");
  cmd_sim->add_option("--select-r", sim.select, "on | off");
  cmd_sim->add_option("--dist", sim.dist, "chisq | normal | t:<df>");
  cmd_sim->add_option("--threads", sim.threads, "worker threads (default: all cores)");
  cmd_sim->add_option("--out", sim.out, "table path (stdout when omitted)");

  try {
    app.parse(argc, argv);
    if (app.got_subcommand(cmd_est)) return run_estimate(est);
    return run_simulate(sim);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
