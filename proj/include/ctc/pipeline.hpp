#pragma once

// Staged estimation: nuisance model -> residuals (or rates) -> moments ->
// criterion minimization -> counterfactual mean, plus the OU replication run,
// the NID diagnostic run, and the flat file writers used by the CLI.

#include <array>
#include <charconv>
#include <chrono>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include "ctc/config.hpp"
#include "ctc/decompose.hpp"
#include "ctc/ensemble_io.hpp"
#include "ctc/moments.hpp"
#include "ctc/simulate.hpp"
#include "ctc/solve.hpp"
#include "ctc/structural.hpp"

namespace ctc {

// ---------------------------------------------------------------------------
// Plans, number lists

/// `const:<v>` or `csv:<file>` (trajectory CSV; the first subject's W is used).
inline TreatmentPlan parse_plan(const std::string& spec, const GridPtr& grid, std::size_t q = 1) {
  if (spec.rfind("const:", 0) == 0) {
    const std::string v = spec.substr(6);
    double value = 0.0;
    auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), value);
    if (ec != std::errc() || ptr != v.data() + v.size() || v.empty())
      throw ValidationError("bad constant plan '" + spec + "'");
    return TreatmentPlan::constant(grid, value, q);
  }
  if (spec.rfind("csv:", 0) == 0) {
    const std::string path = spec.substr(4);
    std::ifstream in(path);
    if (!in) throw IoError("cannot open plan file " + path);
    const Ensemble e = read_ensemble(in);
    if (!(*e.grid() == *grid)) throw ValidationError("plan file " + path + " is not on the data grid");
    if (e.treatment_dim() != q) throw ValidationError("plan file " + path + " has the wrong treatment dimension");
    return TreatmentPlan{SampledPath(grid, q, std::vector<double>(e[0].w.values().begin(), e[0].w.values().end()))};
  }
  throw ValidationError("plan spec must be const:<v> or csv:<file>, got '" + spec + "'");
}

inline std::vector<double> parse_number_list(const std::string& text, const char* what) {
  std::vector<double> out;
  std::string tok;
  std::stringstream ss(text);
  while (std::getline(ss, tok, ',')) {
    tok.erase(0, tok.find_first_not_of(" \t"));
    tok.erase(tok.find_last_not_of(" \t") + 1);
    double v = 0.0;
    auto [ptr, ec] = std::from_chars(tok.data(), tok.data() + tok.size(), v);
    if (tok.empty() || ec != std::errc() || ptr != tok.data() + tok.size())
      throw ValidationError(std::string("bad number '") + tok + "' in " + what);
    out.push_back(v);
  }
  if (out.empty()) throw ValidationError(std::string("empty list for ") + what);
  return out;
}

inline HSpec default_hspec(Family f) {
  switch (f) {
    case Family::ou: return HSpec::parse("base,zw:1,ww,yw");
    case Family::tte: return HSpec::parse("zpow:1..3");
    default: return HSpec::parse("base");
  }
}

// ---------------------------------------------------------------------------
// Estimation

enum class EstimationMethod { orth, weight };

inline EstimationMethod parse_method(const std::string& s) {
  if (s == "orth") return EstimationMethod::orth;
  if (s == "weight") return EstimationMethod::weight;
  throw ValidationError("method must be orth or weight, got '" + s + "'");
}

struct EstimationOptions {
  EstimationMethod method = EstimationMethod::orth;
  std::optional<HSpec> hspec;          // family default when empty
  std::vector<double> times;           // {T} when empty
  bool joint = false;                  // ou only: nuisance and causal equations in one criterion
  std::optional<CausalParams> gamma0;  // family default when empty
  SolveOptions solver{1e-22, 40000, 0.1, 5, 0};

  // Nuisance: estimated unless fixed here.
  std::size_t nuisance_times = 10;
  bool hide_z = false;
  std::optional<std::array<double, 4>> ou_nu;
  std::optional<std::array<double, 4>> discrete_coef;
  std::optional<double> tte_alpha1;
  std::optional<double> posint_lambda;
  double clamp_lo = -3.0;
  double clamp_hi = 3.0;
};

struct RunResult {
  Family family = Family::ou;
  std::string method;
  std::string hspec;
  CausalParams gamma_hat;
  std::vector<std::pair<std::string, double>> nuisance;
  double criterion = 0.0;
  double counterfactual_mean = 0.0;
  std::optional<MeanAndError> mc_truth;
  std::uint64_t seed = 0;
  std::size_t n = 0;
  double seconds = 0.0;  // wall time; reported on stderr, never written to files
  MomentReport report;
  std::vector<double> po_mean;      // estimated PO process, cross-sectional mean per grid point
  std::vector<double> observed_mean;
  GridPtr grid;
};

namespace detail {

/// Runs `fn`, prefixing any library error with the stage name. The original
/// category (and so the exit status) is kept.
template <class Fn>
auto staged(const char* stage, Fn&& fn) -> decltype(fn()) {
  try {
    return fn();
  } catch (const ConvergenceError& e) {
    throw ConvergenceError(std::string(stage) + ": " + e.what(), e.best(), e.best_value());
  } catch (const PositivityError& e) {
    throw PositivityError(std::string(stage) + ": " + e.what());
  } catch (const AssumptionError& e) {
    throw AssumptionError(std::string(stage) + ": " + e.what());
  } catch (const IoError& e) {
    throw IoError(std::string(stage) + ": " + e.what());
  } catch (const ValidationError& e) {
    throw ValidationError(std::string(stage) + ": " + e.what());
  }
}

inline CausalParams default_gamma0(Family f) {
  switch (f) {
    case Family::ou: return CausalParams::ou(1.0, 0.5, 1.0, 2.0);
    case Family::discrete: return CausalParams::discrete(0.0);
    case Family::tte: return CausalParams::tte(1.0);
    case Family::posint: return CausalParams::posint(0.0);
  }
  return {};
}

/// Coarse scan of the scalar tte threshold on (0, 10]; the criterion is a step
/// function of alpha2, so the simplex search only refines around this point.
inline CausalParams scan_tte_start(const MomentSystem& sys) {
  double best_x = 0.025, best_v = std::numeric_limits<double>::infinity();
  for (int i = 1; i <= 400; ++i) {
    const double x = 0.025 * i;
    const double v = sys.criterion(CausalParams::tte(x));
    if (v < best_v) {
      best_v = v;
      best_x = x;
    }
  }
  return CausalParams::tte(best_x);
}

struct NuisanceStage {
  Decomposition decomposition;
  std::vector<std::pair<std::string, double>> reported;
  std::optional<OuNuisanceProblem> ou_problem;
};

// a noiseless treatment still gets a positive nu4 start; the fit then reports the collapse
inline std::array<double, 4> ou_start(const Ensemble& e) {
  const double rv = realized_volatility(e);
  return {0.0, 0.0, 0.0, rv > 0.0 ? rv : 1.0};
}

inline NuisanceStage fit_nuisance(const Ensemble& e, Family family, const EstimationOptions& opts) {
  NuisanceStage st;
  switch (family) {
    case Family::ou: {
      std::array<double, 4> nu{};
      if (opts.ou_nu) {
        nu = *opts.ou_nu;
        if (opts.joint) st.ou_problem.emplace(e, equidistant_times(*e.grid(), opts.nuisance_times));
      } else {
        const auto times = equidistant_times(*e.grid(), opts.nuisance_times);
        OuNuisanceOptions no;
        no.hide_z = opts.hide_z;
        nu = estimate_ou_nuisance(e, times, ou_start(e), no).nu;
        if (opts.joint) st.ou_problem.emplace(e, times);
      }
      st.decomposition = ou_decomposition(e, nu);
      st.reported = {{"nu1", nu[0]}, {"nu2", nu[1]}, {"nu3", nu[2]}, {"nu4", nu[3]}};
      break;
    }
    case Family::discrete: {
      std::array<double, 4> coef{};
      if (opts.discrete_coef) {
        coef = *opts.discrete_coef;
      } else {
        coef = discrete_compensator_fit(e).coef;
      }
      st.decomposition = discrete_decomposition(e, coef);
      st.reported = {{"c_intercept", coef[0]}, {"c_W", coef[1]}, {"c_Y", coef[2]}, {"c_Z", coef[3]}};
      break;
    }
    case Family::tte: {
      const double alpha1 = opts.tte_alpha1 ? *opts.tte_alpha1 : estimate_tte_alpha1(e);
      st.decomposition = tte_decomposition(e, alpha1);
      st.reported = {{"alpha0", estimate_tte_alpha0(e)}, {"alpha1", alpha1}};
      break;
    }
    case Family::posint: {
      const double lambda = opts.posint_lambda ? *opts.posint_lambda
                                               : estimate_posint_lambda(e, opts.clamp_lo, opts.clamp_hi);
      st.decomposition = posint_decomposition(e, PosIntNuisance{lambda, opts.clamp_lo, opts.clamp_hi});
      st.reported = {{"lambda", lambda}};
      break;
    }
  }
  return st;
}

inline std::vector<double> feature_path_residual(const SubjectTrajectory& s, int which) {
  // which: 0 -> W_t - W_0, 1..3 -> int Y, int W, int Z (left-endpoint rule)
  const TimeGrid& g = *s.grid();
  std::vector<double> v(g.size(), 0.0);
  double acc = 0.0;
  for (std::size_t k = 1; k < g.size(); ++k) {
    if (which == 0) {
      v[k] = s.w(k) - s.w(0);
    } else {
      const double x = which == 1 ? s.y(k - 1) : which == 2 ? s.w(k - 1) : s.z(k - 1);
      acc += x * g.step(k);
      v[k] = acc;
    }
  }
  return v;
}

/// Joint OU criterion: |nuisance equations|^2 + g_n(gamma; M(nu)). The
/// residual is affine in nu, M = D + nu1 I_Y + nu2 I_W + nu3 I_Z, so the moments
/// are the same affine combination of four fixed moment systems.
inline GmmResult joint_ou_fit(const Ensemble& e, const OuNuisanceProblem& problem, const HSpec& hspec,
                              const StructuralModel& model, const std::vector<double>& times,
                              const std::array<double, 4>& nu0, const CausalParams& gamma0, const SolveOptions& solver,
                              std::array<double, 4>& nu_out) {
  std::vector<MomentSystem> parts;
  for (int which = 0; which < 4; ++which) {
    std::vector<ResidualPath> res(e.size());
    parallel_for(e.size(), [&](std::size_t i) { res[i] = SampledPath(e.grid(), 1, feature_path_residual(e[i], which)); });
    parts.push_back(MomentSystem::orthogonal(e, res, hspec, model, identity_weight(hspec, 1), times));
  }
  auto split = [](const std::vector<double>& x) {
    return std::make_pair(std::array<double, 4>{x[0], x[1], x[2], x[3]}, CausalParams::ou(x[4], x[5], x[6], x[7]));
  };
  auto objective = [&](const std::vector<double>& x) {
    const auto [nu, g] = split(x);
    double total = 0.0;
    for (double r : problem.residuals(nu)) total += r * r;
    const auto y0 = baseline_outcomes(e, model, g);
    auto mus = parts[0].moments_from_baseline(y0);
    for (int c = 1; c < 4; ++c) {
      const auto extra = parts[static_cast<std::size_t>(c)].moments_from_baseline(y0);
      for (std::size_t m = 0; m < mus.size(); ++m) mus[m] += nu[static_cast<std::size_t>(c - 1)] * extra[m];
    }
    return total + parts[0].criterion_of(mus);
  };
  auto admissible = [&](const std::vector<double>& x) { return x[3] > 0.0 && in_domain(split(x).second); };
  std::vector<double> x0{nu0[0], nu0[1], nu0[2], nu0[3]};
  x0.insert(x0.end(), gamma0.values.begin(), gamma0.values.end());
  const auto fit = gmm_minimize(objective, admissible, x0, solver);
  const auto [nu, g] = split(fit.gamma);
  nu_out = nu;
  const auto d = ou_decomposition(e, nu);
  const auto sys = MomentSystem::orthogonal(e, d.residuals, hspec, model, identity_weight(hspec, 1), times);
  GmmResult out;
  out.gamma = g;
  out.criterion = fit.criterion;
  out.report = sys.report(g);
  return out;
}

}  // namespace detail

/// Full pipeline on an observed ensemble.
inline RunResult run_estimation(const Ensemble& e, Family family, const TreatmentPlan& plan,
                                const EstimationOptions& opts = {}) {
  const auto started = std::chrono::steady_clock::now();
  detail::staged("plan", [&] { detail::require_plan(plan, e); });
  if (opts.joint && (family != Family::ou || opts.method != EstimationMethod::orth))
    throw ValidationError("joint estimation is available for the ou family with the orth method only");

  RunResult out;
  out.family = family;
  out.method = opts.method == EstimationMethod::orth ? "orth" : "weight";
  out.n = e.size();
  out.seed = e.meta().seed;
  out.grid = e.grid();
  const HSpec hspec = opts.hspec ? *opts.hspec : default_hspec(family);
  out.hspec = hspec.to_string();
  const std::vector<double> times = opts.times.empty() ? std::vector<double>{e.grid()->horizon()} : opts.times;
  const StructuralModel model = detail::staged("model", [&] { return StructuralModel::for_ensemble(family, e); });

  auto nuisance = detail::staged("nuisance", [&] { return detail::fit_nuisance(e, family, opts); });
  out.nuisance = nuisance.reported;

  const auto v = identity_weight(hspec, e.treatment_dim());
  auto system = detail::staged("moments", [&] {
    if (opts.method == EstimationMethod::orth)
      return MomentSystem::orthogonal(e, nuisance.decomposition.residuals, hspec, model, v, times);
    std::vector<SampledPath> rates(e.size());
    parallel_for(e.size(), [&](std::size_t i) { rates[i] = rate_from_compensator(nuisance.decomposition.compensators[i]); });
    return MomentSystem::weighting(e, rates, hspec, model, v, times);
  });

  CausalParams gamma0 = opts.gamma0 ? *opts.gamma0 : detail::default_gamma0(family);
  if (!opts.gamma0 && family == Family::tte) gamma0 = detail::scan_tte_start(system);

  GmmResult fit = detail::staged("solve", [&] {
    if (opts.joint) {
      std::array<double, 4> nu{};
      for (int c = 0; c < 4; ++c) nu[static_cast<std::size_t>(c)] = nuisance.reported[static_cast<std::size_t>(c)].second;
      std::array<double, 4> nu_hat{};
      auto r = detail::joint_ou_fit(e, *nuisance.ou_problem, hspec, model, times, nu, gamma0, opts.solver, nu_hat);
      for (int c = 0; c < 4; ++c) out.nuisance[static_cast<std::size_t>(c)].second = nu_hat[static_cast<std::size_t>(c)];
      return r;
    }
    return gmm_fit(system, gamma0, opts.solver);
  });
  out.gamma_hat = fit.gamma;
  out.criterion = fit.criterion;
  out.report = fit.report;

  detail::staged("counterfactual", [&] {
    out.counterfactual_mean = counterfactual_mean_estimate(e, model, fit.gamma, plan);
    const std::size_t len = e.grid()->size();
    std::vector<std::vector<double>> po(e.size()), obs(e.size());
    parallel_for(e.size(), [&](std::size_t i) {
      const auto path = counterfactual_path_estimate(e[i], model, fit.gamma, plan);
      po[i].assign(path.values().begin(), path.values().end());
      obs[i].assign(e[i].y.values().begin(), e[i].y.values().end());
    });
    out.po_mean.resize(len);
    out.observed_mean.resize(len);
    std::vector<double> buf(e.size());
    for (std::size_t k = 0; k < len; ++k) {
      for (std::size_t i = 0; i < e.size(); ++i) buf[i] = po[i][k];
      out.po_mean[k] = sample_mean(buf);
      for (std::size_t i = 0; i < e.size(); ++i) buf[i] = obs[i][k];
      out.observed_mean[k] = sample_mean(buf);
    }
  });
  out.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
  return out;
}

// ---------------------------------------------------------------------------
// OU replication run

struct ReplicationOptions {
  std::size_t n = 2000;
  std::size_t steps = 200;
  std::size_t nuisance_times = 10;
  std::size_t mc_truth_n = 20000;  // 0 disables the Monte Carlo truth
  bool joint = false;
};

/// Simulates the OU system at its reference parameters, estimates nu then
/// gamma with H = (base, zw:1, ww, yw), V = I and times {T}, and estimates
/// E[Y_T] under the plan w = 1. The simplex starts at gamma(beta).
inline RunResult run_replication_sim7(std::uint64_t seed, const ReplicationOptions& ro = {}) {
  const auto started = std::chrono::steady_clock::now();
  OuConfig cfg = OuConfig::reference();
  cfg.steps = ro.steps;
  const Ensemble e = simulate(cfg, ro.n, seed);
  const TreatmentPlan plan = TreatmentPlan::constant(e.grid(), 1.0);
  EstimationOptions opts;
  opts.nuisance_times = ro.nuisance_times;
  opts.joint = ro.joint;
  opts.gamma0 = gamma_from_beta(cfg.beta);
  opts.solver.seed = seed;
  RunResult r = run_estimation(e, Family::ou, plan, opts);
  if (ro.mc_truth_n > 0) r.mc_truth = true_counterfactual_mean(cfg, plan, ro.mc_truth_n, seed + 1);
  r.seed = seed;
  r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
  return r;
}

// ---------------------------------------------------------------------------
// NID diagnostic run

struct DiagnoseOptions {
  bool hide_z = false;
  std::vector<std::pair<double, double>> lags;  // (0, T/2), (T/2, T) when empty
  std::optional<std::array<double, 4>> nu;      // estimated when empty
  std::size_t nuisance_times = 10;
};

inline std::vector<std::pair<double, double>> default_lags(const TimeGrid& g) {
  const double mid = g[g.steps() / 2];
  if (g.steps() < 2) throw ValidationError("the diagnostic needs at least two grid steps");
  return {{0.0, mid}, {mid, g.horizon()}};
}

/// OU residuals (nu3 = 0 with hide_z, and Z left out of the regression) and
/// the NID report at the reference gamma.
inline NidReport run_diagnose_nid(const Ensemble& e, const CausalParams& gamma_ref, const DiagnoseOptions& opts = {}) {
  if (gamma_ref.family != Family::ou) throw ValidationError("the diagnostic run supports the ou family");
  require_domain(gamma_ref);
  std::array<double, 4> nu{};
  if (opts.nu) {
    nu = *opts.nu;
    if (opts.hide_z) nu[2] = 0.0;
  } else {
    OuNuisanceOptions no;
    no.hide_z = opts.hide_z;
    nu = detail::staged("nuisance", [&] {
      return estimate_ou_nuisance(e, equidistant_times(*e.grid(), opts.nuisance_times),
                                  detail::ou_start(e), no)
          .nu;
    });
  }
  const auto d = ou_decomposition(e, nu);
  const StructuralModel model(Family::ou, e.grid());
  const auto lags = opts.lags.empty() ? default_lags(*e.grid()) : opts.lags;
  return detail::staged("diagnose", [&] {
    return nid_diagnostic(e, d.residuals, model, gamma_ref, lags, !opts.hide_z);
  });
}

// ---------------------------------------------------------------------------
// Writers

inline std::string format_number(double v) {
  char buf[32];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, ptr);
}

inline std::string join_numbers(const std::vector<double>& xs) {
  std::string out;
  for (std::size_t i = 0; i < xs.size(); ++i) out += (i ? "," : "") + format_number(xs[i]);
  return out;
}

inline std::string format_result(const RunResult& r) {
  std::string out;
  auto line = [&](const std::string& k, const std::string& v) { out += k + "=" + v + "\n"; };
  line("family", to_string(r.family));
  line("method", r.method);
  line("n", std::to_string(r.n));
  line("seed", std::to_string(r.seed));
  line("moments", r.hspec);
  line("gamma", join_numbers(r.gamma_hat.values));
  for (const auto& [k, v] : r.nuisance) line(k, format_number(v));
  line("criterion", format_number(r.criterion));
  line("counterfactual_mean", format_number(r.counterfactual_mean));
  if (r.mc_truth) {
    line("mc_truth", format_number(r.mc_truth->mean));
    line("mc_truth_se", format_number(r.mc_truth->std_error));
  }
  return out;
}

inline void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out << text;
  if (!out) throw IoError("failed writing " + path.string());
}

inline std::string format_moment_report(const MomentReport& rep, const HSpec& hspec) {
  std::string out = "t,integrand,component,moment,std_error\n";
  for (std::size_t m = 0; m < rep.times.size(); ++m)
    for (Eigen::Index r = 0; r < rep.moments[m].rows(); ++r)
      for (Eigen::Index j = 0; j < rep.moments[m].cols(); ++j)
        out += format_number(rep.times[m]) + "," + hspec.items[static_cast<std::size_t>(r)].name() + "," +
               std::to_string(j + 1) + "," + format_number(rep.moments[m](r, j)) + "," +
               format_number(rep.std_errors[m](r, j)) + "\n";
  return out;
}

inline std::string format_po_table(const RunResult& r) {
  std::string out = "t,observed_mean,estimated_po_mean\n";
  for (std::size_t k = 0; k < r.po_mean.size(); ++k)
    out += format_number((*r.grid)[k]) + "," + format_number(r.observed_mean[k]) + "," + format_number(r.po_mean[k]) + "\n";
  return out;
}

/// result.txt, moments.csv and po_path.csv in `dir`.
inline void write_run(const RunResult& r, const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create output directory " + dir.string());
  write_text(dir / "result.txt", format_result(r));
  write_text(dir / "moments.csv", format_moment_report(r.report, HSpec::parse(r.hspec)));
  write_text(dir / "po_path.csv", format_po_table(r));
}

inline std::string format_nid_report(const NidReport& rep) {
  std::string out = "s,t,component,regressor,coef,std_error,stat,flag\n";
  for (const auto& s : rep.stats)
    out += format_number(s.s) + "," + format_number(s.t) + "," + std::to_string(s.component + 1) + "," + s.regressor +
           "," + format_number(s.coef) + "," + format_number(s.std_error) + "," + format_number(s.stat) + "," +
           (s.flag ? "1" : "0") + "\n";
  return out;
}

}  // namespace ctc
