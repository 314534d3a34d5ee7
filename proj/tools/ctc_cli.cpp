// Command-line front end: simulate, truth, estimate, replicate sim7, diagnose nid.
//
// Exit status: 0 success, 2 invalid input, 3 non-convergence, 4 violated
// assumption (positivity, information drift flagged), 5 I/O.

#include <CLI11.hpp>

#include <cstdio>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include "ctc/ctc.hpp"

namespace {

using namespace ctc;

struct ModelInput {
  std::string dgp;
  std::string params;
  std::optional<std::size_t> n;
  std::optional<std::size_t> steps;
  std::optional<std::uint64_t> seed;
};

ParamFile load_params(const std::string& path) {
  if (path.empty()) return {};
  std::ifstream in(path);
  if (!in) throw IoError("cannot open parameter file " + path);
  return parse_param_file(in);
}

Family resolve_family(const std::string& flag, const ParamFile& pf) {
  if (!flag.empty()) return parse_family(flag);
  if (pf.has("dgp")) {
    const auto& v = pf.entries.at("dgp");
    if (v.size() != 1) throw ValidationError("parameter 'dgp' expects one value");
    return parse_family(v.front());
  }
  throw ValidationError("no DGP given (use --dgp or the dgp key)");
}

DgpConfig resolve_config(const ModelInput& in, const ParamFile& pf, Family family) {
  DgpConfig cfg = config_from_params(family, pf);
  if (in.steps) {
    std::visit(
        [&](auto& c) {
          if constexpr (std::is_same_v<std::decay_t<decltype(c)>, DiscreteConfig>) c.periods = *in.steps;
          else c.steps = *in.steps;
          c.validate();
        },
        cfg);
  }
  return cfg;
}

std::uint64_t resolve_seed(const ModelInput& in, const ParamFile& pf) {
  if (in.seed) return *in.seed;
  if (pf.has("seed")) return pf.count("seed");
  throw ValidationError("no seed given (use --seed or the seed key)");
}

Ensemble read_trajectories(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open trajectory file " + path);
  return read_ensemble(in);
}

void write_output(const std::string& path, const std::string& text) {
  if (path.empty() || path == "-") {
    std::cout << text;
    std::cout.flush();
    if (!std::cout) throw IoError("failed writing to standard output");
  } else {
    write_text(path, text);
  }
}

std::vector<std::pair<double, double>> parse_lags(const std::string& text) {
  std::vector<std::pair<double, double>> out;
  const auto values = parse_number_list(text, "--lags");
  if (values.size() % 2 != 0) throw ValidationError("--lags expects pairs s,t,s,t,...");
  for (std::size_t i = 0; i < values.size(); i += 2) out.emplace_back(values[i], values[i + 1]);
  return out;
}

void report_time(double seconds) { std::fprintf(stderr, "elapsed %.2f s\n", seconds); }

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Continuous-time causal estimation from sampled trajectories"};
  app.require_subcommand(1);

  // simulate
  ModelInput sim;
  std::string sim_out;
  auto* simulate_cmd = app.add_subcommand("simulate", "Simulate a factual ensemble and write it as CSV");
  simulate_cmd->add_option("--dgp", sim.dgp, "ou | discrete | tte | posint");
  simulate_cmd->add_option("--params", sim.params, "key=value parameter file");
  simulate_cmd->add_option("--n", sim.n, "number of subjects");
  simulate_cmd->add_option("--steps", sim.steps, "grid steps (periods J for discrete)");
  simulate_cmd->add_option("--seed", sim.seed, "64-bit seed");
  simulate_cmd->add_option("--out", sim_out, "output CSV (stdout when omitted)");

  // truth
  ModelInput tr;
  std::string truth_plan = "const:1", truth_out;
  std::size_t n_mc = 100000;
  auto* truth_cmd = app.add_subcommand("truth", "Monte Carlo counterfactual mean under a plan");
  truth_cmd->add_option("--dgp", tr.dgp, "ou | discrete | tte | posint");
  truth_cmd->add_option("--params", tr.params, "key=value parameter file");
  truth_cmd->add_option("--plan", truth_plan, "const:<v> or csv:<file>")->capture_default_str();
  truth_cmd->add_option("--n-mc", n_mc, "Monte Carlo size")->capture_default_str();
  truth_cmd->add_option("--steps", tr.steps, "grid steps (periods J for discrete)");
  truth_cmd->add_option("--seed", tr.seed, "64-bit seed");
  truth_cmd->add_option("--out", truth_out, "output file (stdout when omitted)");

  // estimate
  std::string est_family, est_traj, est_plan = "const:1", est_method = "orth", est_moments, est_times, est_out,
                                    est_gamma0, est_params;
  bool est_joint = false;
  auto* estimate_cmd = app.add_subcommand("estimate", "Estimate causal parameters and a counterfactual mean");
  estimate_cmd->add_option("--family", est_family, "ou | discrete | tte | posint")->required();
  estimate_cmd->add_option("--traj", est_traj, "trajectory CSV")->required();
  estimate_cmd->add_option("--plan", est_plan, "const:<v> or csv:<file>")->capture_default_str();
  estimate_cmd->add_option("--method", est_method, "orth | weight")->capture_default_str();
  estimate_cmd->add_option("--moments", est_moments, "integrands, e.g. base,zw:1,ww,yw or zpow:1..3");
  estimate_cmd->add_option("--times", est_times, "comma list of evaluation times (default T)");
  estimate_cmd->add_option("--gamma0", est_gamma0, "starting point, comma list");
  estimate_cmd->add_option("--params", est_params, "parameter file (clamp_lo / clamp_hi for posint)");
  estimate_cmd->add_option("--out", est_out, "output directory")->required();
  estimate_cmd->add_flag("--joint", est_joint, "solve nuisance and causal equations jointly (ou)");

  // replicate sim7
  auto* replicate_cmd = app.add_subcommand("replicate", "Reference replication runs");
  replicate_cmd->require_subcommand(1);
  std::uint64_t rep_seed = 0;
  std::string rep_out;
  ReplicationOptions rep_opts;
  auto* sim7_cmd = replicate_cmd->add_subcommand("sim7", "OU study: n = 2000 paths, plan w = 1");
  sim7_cmd->add_option("--seed", rep_seed, "64-bit seed")->required();
  sim7_cmd->add_option("--out", rep_out, "output directory")->required();
  sim7_cmd->add_option("--n", rep_opts.n, "number of subjects")->capture_default_str();
  sim7_cmd->add_option("--steps", rep_opts.steps, "Euler steps on [0, 1]")->capture_default_str();
  sim7_cmd->add_flag("--joint", rep_opts.joint, "solve nuisance and causal equations jointly");

  // diagnose nid
  auto* diagnose_cmd = app.add_subcommand("diagnose", "Assumption diagnostics");
  diagnose_cmd->require_subcommand(1);
  std::string diag_traj, diag_gamma, diag_out, diag_lags;
  bool diag_hide_z = false;
  auto* nid_cmd = diagnose_cmd->add_subcommand("nid", "No-information-drift regression test (ou)");
  nid_cmd->add_option("--traj", diag_traj, "trajectory CSV")->required();
  nid_cmd->add_option("--gamma", diag_gamma, "reference gamma, comma list")->required();
  nid_cmd->add_option("--lags", diag_lags, "pairs s,t,s,t,... (default 0,T/2,T/2,T)");
  nid_cmd->add_flag("--hide-z", diag_hide_z, "leave Z out of the nuisance model (negative control)");
  nid_cmd->add_option("--out", diag_out, "output CSV (stdout when omitted)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  try {
    if (*simulate_cmd) {
      const auto pf = load_params(sim.params);
      const Family family = resolve_family(sim.dgp, pf);
      const DgpConfig cfg = resolve_config(sim, pf, family);
      const std::size_t n = sim.n ? *sim.n : pf.has("n") ? static_cast<std::size_t>(pf.count("n")) : 0;
      if (n == 0) throw ValidationError("no ensemble size given (use --n or the n key)");
      const Ensemble e = simulate(cfg, n, resolve_seed(sim, pf));
      if (sim_out.empty()) {
        write_ensemble(e, std::cout);
      } else {
        std::ofstream out(sim_out, std::ios::binary);
        if (!out) throw IoError("cannot open " + sim_out + " for writing");
        write_ensemble(e, out);
      }
    } else if (*truth_cmd) {
      const auto pf = load_params(tr.params);
      const Family family = resolve_family(tr.dgp, pf);
      const DgpConfig cfg = resolve_config(tr, pf, family);
      const GridPtr grid = simulation_grid(cfg);
      const TreatmentPlan plan = parse_plan(truth_plan, grid);
      const auto r = true_counterfactual_mean(cfg, plan, n_mc, resolve_seed(tr, pf));
      write_output(truth_out, "dgp=" + to_string(family) + "\nplan=" + truth_plan + "\nn_mc=" + std::to_string(n_mc) +
                                  "\nmean=" + format_number(r.mean) + "\nstd_error=" + format_number(r.std_error) + "\n");
    } else if (*estimate_cmd) {
      const Family family = parse_family(est_family);
      const Ensemble e = read_trajectories(est_traj);
      const TreatmentPlan plan = parse_plan(est_plan, e.grid(), e.treatment_dim());
      EstimationOptions opts;
      opts.method = parse_method(est_method);
      if (!est_moments.empty()) opts.hspec = HSpec::parse(est_moments);
      if (!est_times.empty()) opts.times = parse_number_list(est_times, "--times");
      if (!est_gamma0.empty()) opts.gamma0 = CausalParams{family, parse_number_list(est_gamma0, "--gamma0")};
      opts.joint = est_joint;
      if (!est_params.empty()) {
        const auto pf = load_params(est_params);
        if (pf.has("clamp_lo")) opts.clamp_lo = pf.scalar("clamp_lo");
        if (pf.has("clamp_hi")) opts.clamp_hi = pf.scalar("clamp_hi");
      }
      const RunResult r = run_estimation(e, family, plan, opts);
      write_run(r, est_out);
      report_time(r.seconds);
    } else if (*sim7_cmd) {
      const RunResult r = run_replication_sim7(rep_seed, rep_opts);
      write_run(r, rep_out);
      report_time(r.seconds);
    } else if (*nid_cmd) {
      const Ensemble e = read_trajectories(diag_traj);
      DiagnoseOptions opts;
      opts.hide_z = diag_hide_z;
      if (!diag_lags.empty()) opts.lags = parse_lags(diag_lags);
      const auto g = parse_number_list(diag_gamma, "--gamma");
      const NidReport rep = run_diagnose_nid(e, CausalParams{Family::ou, g}, opts);
      write_output(diag_out, format_nid_report(rep));
      if (rep.flagged) {
        std::cerr << "information drift flagged: residual increments depend on the baseline outcome\n";
        return 4;
      }
    }
  } catch (const ctc::Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return e.exit_code();
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
