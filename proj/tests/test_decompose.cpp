#include <catch_amalgamated.hpp>

#include "ctc/decompose.hpp"
#include "ctc/simulate.hpp"

using namespace ctc;
using Catch::Approx;

namespace {

const std::array<double, 4> kNuStar{-0.7, 1.0, -0.6, 0.1};

SubjectTrajectory constant_subject(const GridPtr& g, double w, double y, double z) {
  SubjectTrajectory s;
  s.w = SampledPath::constant(g, w);
  s.y = SampledPath::constant(g, y);
  s.z = SampledPath::constant(g, z);
  return s;
}

const Ensemble& ou_data() {
  static const Ensemble e = simulate_ou(OuConfig::reference(), 2000, 101);
  return e;
}

// P_n[(M_t - M_s) g_s] against its standard error for g in {1, W_s, Y_s, Z_s}
void check_martingale_increments(const Ensemble& e, const std::vector<ResidualPath>& res,
                                 const std::vector<std::pair<std::size_t, std::size_t>>& pairs) {
  for (const auto& [ks, kt] : pairs) {
    for (int which = 0; which < 4; ++which) {
      std::vector<double> v(e.size());
      for (std::size_t i = 0; i < e.size(); ++i) {
        const auto& s = e[i];
        const double g = which == 0 ? 1.0 : which == 1 ? s.w(ks) : which == 2 ? s.y(ks) : s.z(ks);
        v[i] = (res[i](kt) - res[i](ks)) * g;
      }
      const auto m = mean_and_error(v);
      INFO("pair " << ks << "," << kt << " g#" << which << " mean " << m.mean << " se " << m.std_error);
      if (m.std_error == 0.0) CHECK(m.mean == 0.0);
      else CHECK(std::abs(m.mean) < 3.0 * m.std_error);
    }
  }
}

}  // namespace

TEST_CASE("ou residual examples") {
  const auto g = make_uniform_grid(1.0, 10);
  const auto& e = ou_data();
  const auto m0 = ou_residual(e[0], {0, 0, 0, 1});
  for (std::size_t k = 0; k < e.grid()->size(); ++k) CHECK(m0(k) == e[0].w(k) - e[0].w(0));

  const auto ones = constant_subject(g, 1, 1, 1);
  const auto m = ou_residual(ones, {1, 1, 1, 1});
  for (std::size_t k = 0; k < g->size(); ++k) CHECK(m(k) == Approx(3.0 * (*g)[k]).margin(1e-12));

  std::vector<double> terminal;
  for (const auto& s : e.subjects()) terminal.push_back(ou_residual(s, kNuStar).terminal());
  CHECK(std::abs(sample_mean(terminal)) < 3.0 * kNuStar[3] / std::sqrt(2000.0));

  SubjectTrajectory no_z;
  no_z.w = SampledPath(g, 1);
  no_z.y = SampledPath(g, 1);
  CHECK_THROWS_AS(ou_residual(no_z, kNuStar), ValidationError);
}

TEST_CASE("ou nuisance equations at the true drift") {
  const auto& e = ou_data();
  const auto times = equidistant_times(*e.grid(), 10);
  REQUIRE(times.size() == 10);
  CHECK(times.back() == 1.0);
  CHECK(times.front() == Approx(0.1).margin(1e-12));
  const auto r = ou_nuisance_equations(e, kNuStar, times);
  REQUIRE(r.size() == 30);

  // direct evaluation from residual paths, also the Monte Carlo standard errors
  std::vector<ResidualPath> res;
  for (const auto& s : e.subjects()) res.push_back(ou_residual(s, kNuStar));
  std::size_t prev = 0;
  for (std::size_t m = 0; m < times.size(); ++m) {
    const std::size_t k = e.grid()->require_index(times[m]);
    std::vector<double> mean(e.size()), second(e.size()), cross(e.size());
    for (std::size_t i = 0; i < e.size(); ++i) {
      mean[i] = res[i](k);
      second[i] = res[i](k) * res[i](k) - kNuStar[3] * kNuStar[3] * times[m];
      cross[i] = res[i](prev) * (res[i](k) - res[i](prev));
    }
    const auto a = mean_and_error(mean), b = mean_and_error(second), c = mean_and_error(cross);
    CHECK(r[m] == Approx(a.mean).margin(1e-12));
    CHECK(r[10 + m] == Approx(b.mean).margin(1e-12));
    CHECK(r[20 + m] == Approx(c.mean).margin(1e-12));
    CHECK(std::abs(a.mean) < 3.0 * a.std_error);
    CHECK(std::abs(b.mean) < 3.0 * b.std_error);
    if (m > 0) CHECK(std::abs(c.mean) < 3.0 * c.std_error);
    prev = k;
  }

  // doubling nu4 moves only the second-moment block
  auto doubled = kNuStar;
  doubled[3] *= 2.0;
  const auto r2 = ou_nuisance_equations(e, doubled, times);
  for (std::size_t m = 0; m < 10; ++m) {
    CHECK(r2[m] == r[m]);
    CHECK(r2[20 + m] == r[20 + m]);
    CHECK(r2[10 + m] != r[10 + m]);
    CHECK(r2[10 + m] - r[10 + m] == Approx(-3.0 * 0.01 * times[m]).margin(1e-12));
  }

  auto norm = [](const std::vector<double>& v) {
    double s = 0;
    for (double x : v) s += x * x;
    return s;
  };
  std::array<double, 4> twice;
  for (int j = 0; j < 4; ++j) twice[j] = 2.0 * kNuStar[j];
  CHECK(norm(r) < norm(ou_nuisance_equations(e, twice, times)));
}

TEST_CASE("ou nuisance equation input checks") {
  const auto g = make_uniform_grid(1.0, 10);
  const Ensemble one(g, {constant_subject(g, 1, 0, 0)});
  CHECK_THROWS_AS(ou_nuisance_equations(one, {0, 0, 0, 0}, {1.0}), ValidationError);
  CHECK_THROWS_AS(ou_nuisance_equations(one, {0, 0, 0, 1}, {}), ValidationError);
  CHECK_THROWS_AS(ou_nuisance_equations(one, {0, 0, 0, 1}, {0.5, 0.3}), ValidationError);
  CHECK_THROWS_AS(ou_nuisance_equations(one, {0, 0, 0, 1}, {0.0, 0.3}), ValidationError);
  CHECK_THROWS_AS(ou_nuisance_equations(one, {0, 0, 0, 1}, {0.55}), ValidationError);
}

TEST_CASE("ou nuisance estimation") {
  const auto& e = ou_data();
  const auto times = equidistant_times(*e.grid(), 10);
  const auto fit = estimate_ou_nuisance(e, times, {0.0, 0.0, 0.0, realized_volatility(e)});
  for (int j = 0; j < 4; ++j) {
    INFO("nu" << j + 1 << " = " << fit.nu[j]);
    CHECK(std::abs(fit.nu[j] - kNuStar[j]) < 0.15);
  }
  // drift adds about dt * E[drift^2] to each squared increment on the coarse grid
  CHECK(realized_volatility(e) > 0.1);
  CHECK(realized_volatility(e) < 0.13);

  // constant treatment, silent outcome and covariate
  const auto g = make_uniform_grid(1.0, 20);
  std::vector<SubjectTrajectory> flat;
  for (int i = 0; i < 30; ++i) {
    auto s = constant_subject(g, 0.1 * i, 0, 0);
    s.id = i;
    flat.push_back(s);
  }
  const Ensemble dead(g, flat);
  CHECK_THROWS_AS(estimate_ou_nuisance(dead, equidistant_times(*g, 4), {0, 0, 0, 0.5}), ConvergenceError);
  CHECK_THROWS_AS(estimate_ou_nuisance(dead, {1.0}, {0, 0, 0, 0.5}), ValidationError);
}

TEST_CASE("counting compensator examples") {
  const auto g = make_uniform_grid(1.0, 10);
  SubjectTrajectory s = constant_subject(g, 0, 0, 0);
  for (std::size_t k = 7; k <= 10; ++k) s.w.at(k) = 1.0;
  CHECK(counting_compensator(s, 0.3).terminal() == Approx(0.4).margin(1e-12));
  const auto untreated = constant_subject(g, 0, 0, 0);
  CHECK(counting_compensator(untreated, 0.3).terminal() == Approx(0.7).margin(1e-12));
  const auto none = counting_compensator(untreated, std::nullopt);
  for (std::size_t k = 0; k < g->size(); ++k) CHECK(none(k) == 0.0);
}

TEST_CASE("tte decomposition on simulated data") {
  const TteConfig c;
  const auto e = simulate_tte(c, 5000, 55);
  const double a1 = estimate_tte_alpha1(e);
  CHECK(a1 >= c.alpha1);
  CHECK(a1 < c.alpha1 + 0.05);
  CHECK(estimate_tte_alpha0(e) == Approx(1.0).epsilon(0.02));

  const auto d = tte_decomposition(e, c.alpha1);
  for (std::size_t i = 0; i < e.size(); ++i) {
    const auto& a = d.compensators[i];
    bool jumped = false;
    for (std::size_t k = 1; k < a.size(); ++k) {
      CHECK(a(k) >= a(k - 1));
      if (jumped) CHECK(a(k) == a(k - 1));
      if (e[i].w(k - 1) > 0.5) jumped = true;
    }
  }
  check_martingale_increments(e, d.residuals, {{0, 100}, {100, 200}, {40, 160}});

  // nobody treated
  TteConfig high = c;
  high.alpha1 = 40;
  high.alpha2 = 50;
  CHECK_THROWS_AS(estimate_tte_alpha1(simulate_tte(high, 50, 1)), AssumptionError);
}

TEST_CASE("discrete compensator regression") {
  const DiscreteConfig c;
  const auto e = simulate_discrete(c, 5000, 66);
  const auto fit = discrete_compensator_fit(e);
  const std::array<double, 4> truth{0.0, c.rho_w - 1.0, c.load_y, c.load_z};
  for (int j = 0; j < 4; ++j) {
    INFO(discrete_regressor_names()[j] << " " << fit.coef[j] << " se " << fit.std_error[j]);
    CHECK(std::abs(fit.coef[j] - truth[j]) < 3.0 * fit.std_error[j]);
  }
  const auto d = discrete_decomposition(e, fit.coef);
  double pooled = 0.0;
  for (const auto& m : d.residuals) pooled += m.terminal();
  CHECK(std::abs(pooled / (e.size() * c.periods)) < 1e-10);

  const auto dt = discrete_decomposition(e, truth);
  check_martingale_increments(e, dt.residuals, {{0, 5}, {5, 10}, {2, 3}});
}

TEST_CASE("discrete compensator edge cases") {
  const auto g = make_uniform_grid(1.0, 5);
  std::vector<SubjectTrajectory> subjects;
  for (int i = 0; i < 20; ++i) {
    auto s = constant_subject(g, 0.3 * i - 2.0, 0, 0);
    s.id = i;
    for (std::size_t k = 0; k < g->size(); ++k) {
      s.y.at(k) = std::sin(1.7 * i + 0.9 * k);
      s.z.at(k) = std::cos(0.7 * i * k + 0.2);
    }
    subjects.push_back(s);
  }
  const Ensemble still(g, subjects);
  const auto fit = discrete_compensator_fit(still);
  for (double v : fit.coef) CHECK(std::abs(v) < 1e-12);
  for (const auto& a : discrete_decomposition(still, fit.coef).compensators) CHECK(std::abs(a.terminal()) < 1e-11);

  for (auto& s : subjects) s.z = SampledPath(g, 1);
  try {
    discrete_compensator_fit(Ensemble(g, subjects));
    FAIL("expected a singular design");
  } catch (const ValidationError& err) {
    CHECK(std::string(err.what()).find("Z_lag") != std::string::npos);
  }
}

TEST_CASE("positive-intensity compensator") {
  const auto g = make_uniform_grid(1.0, 8);
  const auto flat = constant_subject(g, 0, 0, 0);
  const auto a = posint_compensator(flat, {0.5, -3, 3});
  const auto b = posint_compensator(flat, {1.0, -3, 3});
  for (std::size_t k = 0; k < g->size(); ++k) {
    CHECK(a(k) == Approx(0.5 * (*g)[k]).margin(1e-14));
    CHECK(b(k) == 2.0 * a(k));
  }
  CHECK_THROWS_AS(posint_compensator(flat, {0.0, -3, 3}), ValidationError);

  const PosIntConfig c;
  const auto e = simulate_posint(c, 5000, 77);
  const auto d = posint_decomposition(e, {c.lambda, c.clamp_lo, c.clamp_hi});
  std::vector<double> diff;
  for (std::size_t i = 0; i < e.size(); ++i) diff.push_back(e[i].w.terminal() - d.compensators[i].terminal());
  const auto m = mean_and_error(diff);
  CHECK(std::abs(m.mean) < 3.0 * m.std_error);
  CHECK(std::abs(estimate_posint_lambda(e, c.clamp_lo, c.clamp_hi) - c.lambda) < 0.05);
  check_martingale_increments(e, d.residuals, {{0, 100}, {100, 200}, {20, 180}});

  // rates recovered from the compensator increments
  const auto rate = rate_from_compensator(d.compensators[3]);
  const auto& s = e[3];
  for (std::size_t k = 0; k + 1 < g->size(); ++k)
    CHECK(rate(k) == Approx(c.lambda * std::exp(std::clamp(s.z(k) + s.y(k), -3.0, 3.0))).epsilon(1e-10));
}

TEST_CASE("residuals from compensators") {
  const auto& e = ou_data();
  const auto& s = e[5];
  const SampledPath zero(e.grid(), 1);
  const auto m0 = residual_from_compensator(s, zero);
  SampledPath full(e.grid(), 1);
  for (std::size_t k = 0; k < full.size(); ++k) full.at(k) = s.w(k) - s.w(0);
  const auto mf = residual_from_compensator(s, full);
  const auto a1 = ou_compensator(s, kNuStar), a2 = ou_compensator(s, {0.3, -0.2, 0.1, 1});
  SampledPath sum(e.grid(), 1);
  for (std::size_t k = 0; k < sum.size(); ++k) sum.at(k) = a1(k) + a2(k);
  const auto ms = residual_from_compensator(s, sum);
  const auto m1 = residual_from_compensator(s, a1);
  for (std::size_t k = 0; k < full.size(); ++k) {
    CHECK(m0(k) == full(k));
    CHECK(mf(k) == 0.0);
    CHECK(ms(k) == Approx(m1(k) - a2(k)).margin(1e-12));
    CHECK(s.w(0) + m1(k) + a1(k) == Approx(s.w(k)).margin(1e-12));
  }
  CHECK(m1(0) == 0.0);
  CHECK_THROWS_AS(residual_from_compensator(s, SampledPath(make_uniform_grid(1.0, 3), 1)), ValidationError);
}

TEST_CASE("ou martingale increments at the true drift") {
  const auto& e = ou_data();
  const auto d = ou_decomposition(e, kNuStar);
  check_martingale_increments(e, d.residuals, {{0, 100}, {100, 200}, {50, 150}});
}
