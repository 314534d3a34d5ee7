#include <catch_amalgamated.hpp>

#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "ctc/ctc.hpp"

using namespace ctc;
namespace fs = std::filesystem;

namespace {

fs::path scratch() {
  static const fs::path dir = [] {
    const fs::path d = fs::temp_directory_path() / "ctc_test_pipeline";
    fs::remove_all(d);
    fs::create_directories(d);
    return d;
  }();
  return dir;
}

int run_cli(const std::string& args) {
  const std::string cmd = std::string(CTC_CLI_PATH) + " " + args + " >" + (scratch() / "stdout.txt").string() +
                          " 2>" + (scratch() / "stderr.txt").string();
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::map<std::string, std::string> read_kv(const fs::path& p) {
  std::map<std::string, std::string> out;
  std::istringstream in(slurp(p));
  for (std::string line; std::getline(in, line);) {
    const auto eq = line.find('=');
    if (eq != std::string::npos) out[line.substr(0, eq)] = line.substr(eq + 1);
  }
  return out;
}

// independent root of the discrete-time equation f(eta1) = P_n[sum_i Y'_{i-1}(Y'_J - eta1 dose) dM'_i] = 0,
// which is affine in eta1
double discrete_root(const Ensemble& e, const std::array<double, 4>& coef) {
  const std::size_t J = e.grid()->steps();
  const double period = e.grid()->horizon() / static_cast<double>(J);
  double a = 0.0, b = 0.0;
  for (const auto& s : e.subjects()) {
    double dose = 0.0;
    for (std::size_t l = 0; l < J; ++l) dose += period * s.w(l);
    double inner = 0.0;
    for (std::size_t i = 1; i <= J; ++i)
      inner += s.y(i - 1) *
               ((s.w(i) - s.w(i - 1)) - (coef[0] + coef[1] * s.w(i - 1) + coef[2] * s.y(i - 1) + coef[3] * s.z(i - 1)));
    a += s.y(J) * inner;
    b += dose * inner;
  }
  return a / b;
}

}  // namespace

TEST_CASE("plans and number lists") {
  const auto g = make_uniform_grid(1.0, 4);
  const auto p = parse_plan("const:0.5", g);
  CHECK(p.path(3) == 0.5);
  CHECK_THROWS_AS(parse_plan("const:", g), ValidationError);
  CHECK_THROWS_AS(parse_plan("const:1x", g), ValidationError);
  CHECK_THROWS_AS(parse_plan("linear:1", g), ValidationError);
  CHECK_THROWS_AS(parse_plan("csv:/nonexistent/plan.csv", g), IoError);

  const fs::path plan_file = scratch() / "plan.csv";
  {
    std::ofstream out(plan_file);
    out << "subject,t,W,Y\n0,0,0,0\n0,0.25,1,0\n0,0.5,1,0\n0,0.75,0,0\n0,1,0,0\n";
  }
  const auto q = parse_plan("csv:" + plan_file.string(), g);
  CHECK(q.path(1) == 1.0);
  CHECK(q.path(3) == 0.0);
  CHECK_THROWS_AS(parse_plan("csv:" + plan_file.string(), make_uniform_grid(1.0, 5)), ValidationError);

  CHECK(parse_number_list("1, 2.5,-3", "x") == std::vector<double>{1, 2.5, -3});
  CHECK_THROWS_AS(parse_number_list("1,,2", "x"), ValidationError);
  CHECK_THROWS_AS(parse_number_list("", "x"), ValidationError);
  CHECK(parse_method("weight") == EstimationMethod::weight);
  CHECK_THROWS_AS(parse_method("ipw"), ValidationError);
}

TEST_CASE("orth estimation on the discrete family matches the discrete-time root") {
  const DiscreteConfig c;
  const auto e = simulate_discrete(c, 5000, 3);
  const std::array<double, 4> coef{0.0, c.rho_w - 1.0, c.load_y, c.load_z};
  EstimationOptions opts;
  opts.hspec = HSpec::parse("yw");
  opts.discrete_coef = coef;
  opts.solver.tolerance = 1e-28;
  const auto r = run_estimation(e, Family::discrete, TreatmentPlan::constant(e.grid(), 1.0), opts);
  const double root = discrete_root(e, coef);
  CHECK(std::abs(r.gamma_hat[0] - root) <= 1e-10 * std::abs(root));

  EstimationOptions fitted;
  const auto f = run_estimation(e, Family::discrete, TreatmentPlan::constant(e.grid(), 1.0), fitted);
  CHECK(f.hspec == "base");
  CHECK(f.nuisance.size() == 4);
  CHECK(std::abs(f.gamma_hat[0] - 1.5) < 0.15);
  CHECK(f.po_mean.size() == e.grid()->size());
}

TEST_CASE("estimation for the other families") {
  const PosIntConfig pc;
  const auto pe = simulate_posint(pc, 3000, 9);
  const auto one = TreatmentPlan::constant(pe.grid(), 1.0);
  EstimationOptions o;
  const auto orth = run_estimation(pe, Family::posint, one, o);
  o.method = EstimationMethod::weight;
  const auto weight = run_estimation(pe, Family::posint, one, o);
  CHECK(std::abs(orth.gamma_hat[0] - pc.eta1) < 0.15);
  CHECK(std::abs(weight.gamma_hat[0] - pc.eta1) < 0.15);
  CHECK(weight.method == "weight");

  const TteConfig tc;
  const auto te = simulate_tte(tc, 3000, 10);
  const auto tr = run_estimation(te, Family::tte, TreatmentPlan::constant(te.grid(), 0.0));
  CHECK(std::abs(tr.gamma_hat[0] - tc.alpha2) < 0.15);
  CHECK(tr.hspec == "zpow:1,zpow:2,zpow:3");
  EstimationOptions tw;
  tw.method = EstimationMethod::weight;
  CHECK_THROWS_AS(run_estimation(te, Family::tte, TreatmentPlan::constant(te.grid(), 0.0), tw), PositivityError);

  const auto oe = simulate_ou(OuConfig::reference(), 400, 11);
  EstimationOptions bad;
  bad.joint = true;
  bad.method = EstimationMethod::weight;
  CHECK_THROWS_AS(run_estimation(oe, Family::ou, TreatmentPlan::constant(oe.grid(), 1.0), bad), ValidationError);
  CHECK_THROWS_AS(run_estimation(oe, Family::ou, TreatmentPlan::constant(make_uniform_grid(1.0, 10), 1.0)),
                  ValidationError);
}

TEST_CASE("ou estimation runs end to end, two-stage and joint") {
  const auto e = simulate_ou(OuConfig::reference(), 500, 12);
  const auto one = TreatmentPlan::constant(e.grid(), 1.0);
  EstimationOptions o;
  o.gamma0 = gamma_from_beta(OuConfig::reference().beta);
  const auto r = run_estimation(e, Family::ou, one, o);
  CHECK(in_domain(r.gamma_hat));
  CHECK(r.report.moments.size() == 1);
  CHECK(r.criterion <= MomentSystem::orthogonal(e, ou_decomposition(e, {r.nuisance[0].second, r.nuisance[1].second,
                                                                        r.nuisance[2].second, r.nuisance[3].second})
                                                       .residuals,
                                                default_hspec(Family::ou), StructuralModel(Family::ou, e.grid()),
                                                Eigen::MatrixXd::Identity(4, 4), {1.0})
                            .criterion(*o.gamma0));
  o.joint = true;
  const auto j = run_estimation(e, Family::ou, one, o);
  CHECK(in_domain(j.gamma_hat));
  CHECK(j.nuisance[3].second > 0.0);

  const auto text = format_result(r);
  CHECK(text.find("family=ou\n") == 0);
  CHECK(text.find("seconds") == std::string::npos);
}

TEST_CASE("diagnose run") {
  const auto e = simulate_ou(OuConfig::reference(), 1000, 13);
  const auto g = gamma_from_beta(OuConfig::reference().beta);
  const auto rep = run_diagnose_nid(e, g);
  CHECK(rep.stats.size() == 10);
  DiagnoseOptions hidden;
  hidden.hide_z = true;
  CHECK(run_diagnose_nid(e, g, hidden).stats.size() == 8);
  CHECK_THROWS_AS(run_diagnose_nid(e, CausalParams::posint(1.0)), ValidationError);
  const auto csv = format_nid_report(rep);
  CHECK(csv.rfind("s,t,component,regressor,coef,std_error,stat,flag\n", 0) == 0);
}

TEST_CASE("command-line tool") {
  const fs::path dir = scratch();
  const std::string traj = (dir / "ou.csv").string();

  CHECK(run_cli("") == 2);
  CHECK(run_cli("simulate --dgp ou --n 50 --seed 1 --out " + traj) == 0);
  const Ensemble e = [&] {
    std::ifstream in(traj);
    return read_ensemble(in);
  }();
  CHECK(e.size() == 50);
  CHECK(e == simulate_ou(OuConfig::reference(), 50, 1));

  // stdout output and a parameter file
  const fs::path params = dir / "tte.params";
  {
    std::ofstream out(params);
    out << "dgp = tte\nn = 20\nseed = 4\nsteps = 50\n";
  }
  CHECK(run_cli("simulate --params " + params.string()) == 0);
  CHECK(slurp(dir / "stdout.txt").rfind("subject,t,W,Y,Z1\n", 0) == 0);

  CHECK(run_cli("truth --dgp tte --plan const:1 --n-mc 500 --seed 2") == 0);
  const auto truth = slurp(dir / "stdout.txt");
  CHECK(truth.find("mean=0\n") != std::string::npos);

  CHECK(run_cli("estimate --family ou --traj " + traj + " --out " + (dir / "est").string() +
                " --gamma0 0.5,0.66,0.76,1.24") == 0);
  CHECK(fs::exists(dir / "est" / "result.txt"));
  CHECK(fs::exists(dir / "est" / "moments.csv"));
  CHECK(fs::exists(dir / "est" / "po_path.csv"));
  CHECK(read_kv(dir / "est" / "result.txt").at("family") == "ou");
  CHECK(slurp(dir / "stderr.txt").find("elapsed") != std::string::npos);

  // validation errors
  CHECK(run_cli("simulate --dgp bogus --n 5 --seed 1") == 2);
  CHECK(run_cli("simulate --dgp ou --seed 1") == 2);
  const fs::path unknown = dir / "bad.params";
  {
    std::ofstream out(unknown);
    out << "dgp = ou\nsurprise = 1\n";
  }
  CHECK(run_cli("simulate --params " + unknown.string() + " --n 3 --seed 1") == 2);
  CHECK(run_cli("estimate --family ou --traj " + traj + " --out " + (dir / "x").string() + " --moments nope") == 2);
  CHECK(run_cli("estimate --family ou --traj " + traj + " --out " + (dir / "x").string() + " --times 0.333") == 2);

  // I/O errors
  CHECK(run_cli("estimate --family ou --traj /nonexistent/x.csv --out " + (dir / "x").string()) == 5);
  CHECK(run_cli("simulate --dgp ou --n 3 --seed 1 --out /nonexistent/dir/x.csv") == 5);

  // malformed CSV
  {
    std::ofstream out(dir / "ragged.csv");
    out << "subject,t,W,Y,Z1\n0,0,1,1,1\n0,1,1\n";
  }
  CHECK(run_cli("estimate --family ou --traj " + (dir / "ragged.csv").string() + " --out " + (dir / "x").string()) == 2);

  // a flat treatment: the nuisance model cannot settle
  {
    std::ofstream out(dir / "flat.csv");
    out << "subject,t,W,Y,Z1\n";
    for (int i = 0; i < 30; ++i)
      for (int k = 0; k <= 20; ++k) out << i << "," << k / 20.0 << "," << 0.1 * i << ",0,0\n";
  }
  CHECK(run_cli("estimate --family ou --traj " + (dir / "flat.csv").string() + " --out " + (dir / "x").string()) == 3);

  // positivity: the tte rate vanishes before treatment seeking starts
  const std::string tte_traj = (dir / "tte.csv").string();
  CHECK(run_cli("simulate --dgp tte --n 200 --seed 3 --out " + tte_traj) == 0);
  CHECK(run_cli("estimate --family tte --method weight --traj " + tte_traj + " --out " + (dir / "x").string()) == 4);
  CHECK(slurp(dir / "stderr.txt").find("rate vanishes") != std::string::npos);

  CHECK(run_cli("diagnose nid --traj " + traj + " --gamma 0.5,0.66,0.76,1.24 --out " + (dir / "nid.csv").string()) !=
        2);
  CHECK(fs::exists(dir / "nid.csv"));
  CHECK(run_cli("diagnose nid --traj " + traj + " --gamma 0.5,2,0.76,1.24") == 2);
}
