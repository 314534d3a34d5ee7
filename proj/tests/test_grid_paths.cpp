#include <catch_amalgamated.hpp>

#include <random>
#include <sstream>

#include "ctc/config.hpp"
#include "ctc/ensemble_io.hpp"
#include "ctc/grid_paths.hpp"

using namespace ctc;
using Catch::Approx;

namespace {

GridPtr grid_of(std::vector<double> pts) { return std::make_shared<const TimeGrid>(std::move(pts)); }

SampledPath path_of(const GridPtr& g, std::vector<double> v) { return SampledPath(g, 1, std::move(v)); }

GridPtr random_grid(std::mt19937_64& rng) {
  std::uniform_int_distribution<int> steps(1, 30);
  std::uniform_real_distribution<double> gap(0.01, 1.0);
  const int l = steps(rng);
  std::vector<double> pts{0.0};
  for (int k = 0; k < l; ++k) pts.push_back(pts.back() + gap(rng));
  return grid_of(pts);
}

SampledPath random_path(std::mt19937_64& rng, const GridPtr& g, std::size_t dim = 1) {
  std::normal_distribution<double> nd(0.0, 2.0);
  std::vector<double> v(g->size() * dim);
  for (double& x : v) x = nd(rng);
  return SampledPath(g, dim, v);
}

}  // namespace

TEST_CASE("uniform grids") {
  CHECK(make_uniform_grid(1.0, 2)->points().size() == 3);
  const auto g = make_uniform_grid(2.0, 4);
  const std::vector<double> want{0, 0.5, 1.0, 1.5, 2.0};
  CHECK(std::vector<double>(g->points().begin(), g->points().end()) == want);
  const auto g1 = make_uniform_grid(1.0, 1);
  CHECK(g1->size() == 2);
  CHECK((*g1)[1] == 1.0);
  CHECK(make_uniform_grid(3.0, 7)->horizon() == 3.0);
  CHECK_THROWS_AS(make_uniform_grid(0.0, 3), ValidationError);
  CHECK_THROWS_AS(make_uniform_grid(-1.0, 3), ValidationError);
  CHECK_THROWS_AS(make_uniform_grid(1.0, 0), ValidationError);
}

TEST_CASE("grid invariants") {
  CHECK_THROWS_AS(TimeGrid({0.0}), ValidationError);
  CHECK_THROWS_AS(TimeGrid({0.1, 1.0}), ValidationError);
  CHECK_THROWS_AS(TimeGrid({0.0, 0.5, 0.5}), ValidationError);
  const TimeGrid g({0.0, 0.3, 1.0});
  CHECK(g.index_of(0.3) == std::optional<std::size_t>(1));
  CHECK(g.index_of(0.3 + 1e-12) == std::optional<std::size_t>(1));
  CHECK_FALSE(g.index_of(0.5).has_value());
  CHECK_THROWS_AS(g.require_index(0.5), ValidationError);
}

TEST_CASE("left limits follow the cadlag convention") {
  const auto g = make_uniform_grid(1.0, 2);
  const auto p = path_of(g, {5, 6, 7});
  CHECK(p.left_limit(0) == 5);
  CHECK(p.left_limit(1) == 5);
  CHECK(p.left_limit(2) == 6);
  CHECK(p.terminal() == 7);
}

TEST_CASE("ito_sum examples") {
  const auto g = make_uniform_grid(1.0, 4);
  CHECK(ito_sum(SampledPath::constant(g, 1.0), path_of(g, {0, 1, -3, 0.25, 2.5}), 1.0) == 2.5);

  const auto g2 = make_uniform_grid(1.0, 2);
  CHECK(ito_sum(path_of(g2, {2, 3, 100}), path_of(g2, {1, 4, 6}), 1.0) == 12.0);

  // integrand = left limits of a unit jump at 0.5
  const auto jump = path_of(g2, {0, 1, 1});
  CHECK(ito_sum(jump, jump, 1.0) == 0.0);

  CHECK_THROWS_AS(ito_sum(jump, path_of(g, {0, 0, 0, 0, 0}), 1.0), ValidationError);
  CHECK_THROWS_AS(ito_sum(jump, jump, 0.3), ValidationError);
}

TEST_CASE("riemann_integral examples") {
  const auto g = make_uniform_grid(1.0, 10);
  CHECK(riemann_integral(SampledPath::constant(g, 1.0), 1.0) == Approx(1.0).epsilon(1e-14));
  SampledPath step(g, 1);
  for (std::size_t k = 5; k <= 10; ++k) step.at(k) = 2.0;
  CHECK(riemann_integral(step, 1.0) == Approx(1.0).epsilon(1e-14));
  CHECK(riemann_integral(SampledPath(g, 1), 1.0) == 0.0);
  CHECK_THROWS_AS(riemann_integral(step, 0.55), ValidationError);
}

TEST_CASE("ito_sum properties on random instances") {
  std::mt19937_64 rng(20240611);
  std::uniform_real_distribution<double> coef(-3.0, 3.0);
  for (int rep = 0; rep < 1000; ++rep) {
    const auto g = random_grid(rng);
    const auto h1 = random_path(rng, g), h2 = random_path(rng, g);
    const auto x1 = random_path(rng, g), x2 = random_path(rng, g);
    const double a = coef(rng), b = coef(rng);
    const std::size_t end = g->steps();
    const double scale = 1.0 + std::abs(ito_sum_to(h1, x1, end)) + std::abs(ito_sum_to(h2, x1, end)) +
                         std::abs(ito_sum_to(h1, x2, end));

    SampledPath hc(g, 1), xc(g, 1);
    for (std::size_t k = 0; k < g->size(); ++k) {
      hc.at(k) = a * h1(k) + b * h2(k);
      xc.at(k) = a * x1(k) + b * x2(k);
    }
    // bilinearity
    CHECK(ito_sum_to(hc, x1, end) ==
          Approx(a * ito_sum_to(h1, x1, end) + b * ito_sum_to(h2, x1, end)).margin(1e-11 * scale * 10));
    CHECK(ito_sum_to(h1, xc, end) ==
          Approx(a * ito_sum_to(h1, x1, end) + b * ito_sum_to(h1, x2, end)).margin(1e-11 * scale * 10));
    // telescoping
    CHECK(ito_sum_to(SampledPath::constant(g, 1.0), x1, end) == Approx(x1.terminal() - x1(0)).margin(1e-11 * scale));
    // additivity over adjacent windows
    const std::size_t mid = end / 2;
    double tail = 0.0;
    for (std::size_t k = mid + 1; k <= end; ++k) tail += h1(k - 1) * (x1(k) - x1(k - 1));
    CHECK(ito_sum_to(h1, x1, end) == Approx(ito_sum_to(h1, x1, mid) + tail).margin(1e-11 * scale));
    // constant integral on any grid
    const double c = coef(rng);
    CHECK(riemann_integral(SampledPath::constant(g, c), g->horizon()) ==
          Approx(c * g->horizon()).epsilon(1e-12).margin(1e-300));
  }
}

TEST_CASE("ito_sum equals the Stieltjes sum over jumps of a step integrator") {
  std::mt19937_64 rng(7);
  for (int rep = 0; rep < 1000; ++rep) {
    const auto g = random_grid(rng);
    const auto h = random_path(rng, g);
    // integrator with a few jumps, integer valued so every sum is exact
    SampledPath x(g, 1);
    std::uniform_int_distribution<int> jump(-3, 3);
    std::bernoulli_distribution has_jump(0.3);
    std::vector<std::pair<std::size_t, double>> jumps;
    double level = 0.0;
    for (std::size_t k = 1; k < g->size(); ++k) {
      if (has_jump(rng)) {
        const double j = jump(rng);
        level += j;
        jumps.emplace_back(k, j);
      }
      x.at(k) = level;
    }
    // oracle: sum over jump times of the integrand's left limit times the jump
    double oracle = 0.0;
    for (const auto& [k, j] : jumps) oracle += h.left_limit(k) * j;
    double direct = 0.0;
    for (std::size_t k = 1; k < g->size(); ++k) {
      if (x(k) != x(k - 1)) direct += h(k - 1) * (x(k) - x(k - 1));
    }
    CHECK(ito_sum_to(h, x, g->steps()) == direct);
    CHECK(ito_sum_to(h, x, g->steps()) == Approx(oracle).margin(1e-12 * (1.0 + std::abs(oracle))));
  }
}

TEST_CASE("CSV header and row count") {
  const auto g = make_uniform_grid(1.0, 200);
  std::vector<SubjectTrajectory> subjects;
  for (int i = 0; i < 2000; ++i) {
    SubjectTrajectory s;
    s.id = i;
    s.w = SampledPath(g, 1);
    s.y = SampledPath(g, 1);
    s.z = SampledPath(g, 1);
    subjects.push_back(std::move(s));
  }
  const Ensemble e(g, std::move(subjects));
  std::stringstream ss;
  write_ensemble(e, ss);
  std::string line;
  std::getline(ss, line);
  CHECK(line == "subject,t,W,Y,Z1");
  std::size_t rows = 0;
  while (std::getline(ss, line)) ++rows;
  CHECK(rows == 402000);
  CHECK(csv_header(2, 0) == "subject,t,W1,W2,Y");
}

TEST_CASE("CSV reading") {
  {
    std::istringstream in("subject,t,W,Y,Z1\n0,0,1,2,3\n0,1,4,5,6\n");
    const auto e = read_ensemble(in);
    CHECK(e.size() == 1);
    CHECK(e.grid()->steps() == 1);
    CHECK(e[0].z.terminal() == 6);
  }
  {
    std::istringstream in("subject,t,W,Y\n0,0,1,2\n0,0.5,1,2\n0,0.4,1,2\n");
    try {
      read_ensemble(in);
      FAIL("expected a parse error");
    } catch (const ParseError& e) {
      CHECK(std::string(e.what()).find("non-increasing time") != std::string::npos);
      CHECK(e.row() == 4);
      CHECK(e.column() == 2);
    }
  }
  {
    std::istringstream in("subject,t,W,Y\n0,0,1,2\n0,1,1,2\n1,0,1,2\n1,0.5,1,2\n");
    CHECK_THROWS_WITH(read_ensemble(in), Catch::Matchers::ContainsSubstring("grid mismatch"));
  }
  {
    std::istringstream in("subject,t,W,Y\n0,0,1,2\n0,1,x,2\n");
    try {
      read_ensemble(in);
      FAIL("expected a parse error");
    } catch (const ParseError& e) {
      CHECK(e.row() == 3);
      CHECK(e.column() == 3);
    }
  }
  {
    std::istringstream in("0,0,1,2\n");
    CHECK_THROWS_AS(read_ensemble(in), ParseError);
  }
  {
    std::istringstream in("subject,t,W,Y\n0,0,1,2\n0,1,1\n");
    CHECK_THROWS_WITH(read_ensemble(in), Catch::Matchers::ContainsSubstring("ragged"));
  }
  {
    std::istringstream in("subject,t,W,Y\n1,0,1,2\n1,1,1,2\n0,0,1,2\n0,1,1,2\n");
    CHECK_THROWS_WITH(read_ensemble(in), Catch::Matchers::ContainsSubstring("not sorted"));
  }
  {
    std::istringstream in("subject,t,W,Y\n");
    CHECK_THROWS_AS(read_ensemble(in), ParseError);
  }
}

TEST_CASE("CSV round trip on random ensembles") {
  std::mt19937_64 rng(99);
  std::uniform_int_distribution<int> count(1, 5), dims(1, 3), zdims(0, 2);
  std::uniform_real_distribution<double> wide(-1e6, 1e6);
  for (int rep = 0; rep < 1000; ++rep) {
    const auto g = random_grid(rng);
    const int n = count(rng);
    const std::size_t q = static_cast<std::size_t>(dims(rng));
    const std::size_t r = static_cast<std::size_t>(zdims(rng));
    std::vector<SubjectTrajectory> subjects;
    for (int i = 0; i < n; ++i) {
      SubjectTrajectory s;
      s.id = 3 * i + 1;
      s.w = random_path(rng, g, q);
      s.y = random_path(rng, g, 1);
      if (r > 0) s.z = random_path(rng, g, r);
      if (rep % 7 == 0) s.y.at(0) = wide(rng) * 1e-300;  // subnormal-scale values survive too
      subjects.push_back(std::move(s));
    }
    const Ensemble e(g, std::move(subjects));
    std::stringstream ss;
    write_ensemble(e, ss);
    const Ensemble back = read_ensemble(ss);
    REQUIRE(back == e);
  }
}

TEST_CASE("ensemble invariants") {
  const auto g = make_uniform_grid(1.0, 2);
  const auto other = make_uniform_grid(1.0, 3);
  CHECK_THROWS_AS(Ensemble(g, {}), ValidationError);
  SubjectTrajectory s;
  s.w = SampledPath(other, 1);
  s.y = SampledPath(other, 1);
  CHECK_THROWS_AS(Ensemble(g, {s}), ValidationError);
  SubjectTrajectory bad;
  bad.w = SampledPath(g, 1);
  bad.y = SampledPath(other, 1);
  CHECK_THROWS_AS(bad.validate(), ValidationError);
  CHECK_THROWS_AS(SampledPath(g, 1, {1.0, 2.0}), ValidationError);
}

TEST_CASE("parameter files") {
  std::istringstream in(
      "# OU settings\n"
      "dgp = ou\n"
      "T = 2\n"
      "steps = 50\n"
      "beta = 1 0 0, 0 1 0, 0 0 1\n"
      "init_mean = 1,1,1\n");
  const auto pf = parse_param_file(in);
  const auto cfg = std::get<OuConfig>(config_from_params(Family::ou, pf));
  CHECK(cfg.horizon == 2.0);
  CHECK(cfg.steps == 50);
  CHECK(cfg.beta.isIdentity());
  CHECK(cfg.init_mean == Eigen::Vector3d(1, 1, 1));

  std::istringstream unknown("gamma = 1\n");
  CHECK_THROWS_WITH(parse_param_file(unknown), Catch::Matchers::ContainsSubstring("unknown key"));
  std::istringstream short_beta("beta = 1 2 3\n");
  CHECK_THROWS_AS(config_from_params(Family::ou, parse_param_file(short_beta)), ValidationError);
  std::istringstream shared_noise("sigma = 0.1 0.1 0 0.1 0.1 0\n");
  CHECK_THROWS_AS(config_from_params(Family::ou, parse_param_file(shared_noise)), ValidationError);
  std::istringstream tte_bad("alpha1 = 2\nalpha2 = 1\n");
  CHECK_THROWS_AS(config_from_params(Family::tte, parse_param_file(tte_bad)), ValidationError);
  std::istringstream pos_bad("lambda = 0\n");
  CHECK_THROWS_AS(config_from_params(Family::posint, parse_param_file(pos_bad)), ValidationError);
  std::istringstream disc("J = 0\n");
  CHECK_THROWS_AS(config_from_params(Family::discrete, parse_param_file(disc)), ValidationError);
  CHECK_THROWS_AS(parse_family("bogus"), ValidationError);
}
