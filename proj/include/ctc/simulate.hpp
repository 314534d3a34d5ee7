#pragma once

// Seeded factual and counterfactual ensembles for the four DGP families.
//
// Every subject i draws from its own engine keyed by (seed, i). A
// counterfactual call consumes exactly the same draws in the same order as the
// factual call, so the noise is coupled path by path; only the treatment fed
// into the outcome and covariate recursions differs.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <random>
#include <vector>

#include "ctc/config.hpp"
#include "ctc/grid_paths.hpp"
#include "ctc/parallel.hpp"
#include "ctc/rng.hpp"

namespace ctc {

/// A deterministic treatment trajectory w(s), 0 <= s <= T.
struct TreatmentPlan {
  SampledPath path;

  static TreatmentPlan constant(GridPtr grid, double value, std::size_t dim = 1) {
    return TreatmentPlan{SampledPath::constant(std::move(grid), value, dim)};
  }
};

inline GridPtr simulation_grid(const DgpConfig& config) {
  return make_uniform_grid(config_horizon(config), config_steps(config));
}

namespace detail {

inline void require_plan_grid(const TreatmentPlan* plan, const GridPtr& grid) {
  if (plan && !same_grid(plan->path.grid(), grid))
    throw ValidationError("treatment plan is not defined on the simulation grid");
}

inline SubjectTrajectory empty_subject(const GridPtr& grid, std::int64_t id) {
  SubjectTrajectory s;
  s.id = id;
  s.w = SampledPath(grid, 1);
  s.y = SampledPath(grid, 1);
  s.z = SampledPath(grid, 1);
  return s;
}

/// Event times of a unit-rate Poisson process on (0, horizon], drawn as
/// exponential gaps.
inline std::vector<double> poisson_events(std::mt19937_64& rng, double horizon) {
  std::exponential_distribution<double> gap(1.0);
  std::vector<double> events;
  for (double t = gap(rng); t <= horizon; t += gap(rng)) events.push_back(t);
  return events;
}

/// First grid index m with t_m >= t (event time rounded up to the grid).
inline std::size_t round_up_to_grid(const TimeGrid& grid, double t) {
  auto pts = grid.points();
  return static_cast<std::size_t>(std::lower_bound(pts.begin(), pts.end(), t) - pts.begin());
}

inline std::optional<std::size_t> first_crossing(const SampledPath& z, double threshold) {
  for (std::size_t k = 0; k < z.size(); ++k)
    if (z(k) >= threshold) return k;
  return std::nullopt;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Ornstein-Uhlenbeck (Euler-Maruyama)

inline Eigen::Matrix3d symmetric_sqrt(const Eigen::Matrix3d& cov) {
  Eigen::SelfAdjointEigenSolver<Eigen::Matrix3d> es(cov);
  const Eigen::Vector3d root = es.eigenvalues().cwiseMax(0.0).cwiseSqrt();
  return es.eigenvectors() * root.asDiagonal() * es.eigenvectors().transpose();
}

/// One subject of the OU system. With a plan, W is replaced by the plan in the
/// Y and Z drift rows (and reported as W); the draws are identical either way.
inline SubjectTrajectory simulate_ou_subject(const OuConfig& c, const GridPtr& grid, std::uint64_t seed,
                                             std::size_t index, const TreatmentPlan* plan = nullptr) {
  auto rng = subject_engine(seed, index);
  std::normal_distribution<double> normal(0.0, 1.0);
  const Eigen::Matrix3d root = symmetric_sqrt(c.init_cov);
  Eigen::Vector3d e;
  for (int i = 0; i < 3; ++i) e(i) = normal(rng);
  const Eigen::Vector3d x0 = c.init_mean + root * e;

  SubjectTrajectory s = detail::empty_subject(grid, static_cast<std::int64_t>(index));
  double y = x0(0), w = x0(1), z = x0(2);
  if (plan) w = plan->path(0);
  s.y.at(0) = y;
  s.w.at(0) = w;
  s.z.at(0) = z;
  const auto& b = c.beta;
  const auto& sg = c.sigma;
  for (std::size_t k = 1; k < grid->size(); ++k) {
    const double dt = grid->step(k);
    const double sq = std::sqrt(dt);
    const double db1 = sq * normal(rng);
    const double db2 = sq * normal(rng);
    const double ny = y - (b(0, 0) * y + b(0, 1) * w + b(0, 2) * z) * dt + sg(0, 0) * db1 + sg(0, 1) * db2;
    const double nz = z - (b(2, 0) * y + b(2, 1) * w + b(2, 2) * z) * dt + sg(2, 0) * db1 + sg(2, 1) * db2;
    double nw;
    if (plan) {
      nw = plan->path(k);
    } else {
      nw = w - (b(1, 0) * y + b(1, 1) * w + b(1, 2) * z) * dt + sg(1, 0) * db1 + sg(1, 1) * db2;
    }
    y = ny;
    w = nw;
    z = nz;
    s.y.at(k) = y;
    s.w.at(k) = w;
    s.z.at(k) = z;
  }
  return s;
}

// ---------------------------------------------------------------------------
// Discrete-time DGP on the J-period grid

inline SubjectTrajectory simulate_discrete_subject(const DiscreteConfig& c, const GridPtr& grid, std::uint64_t seed,
                                                   std::size_t index, const TreatmentPlan* plan = nullptr) {
  auto rng = subject_engine(seed, index);
  std::normal_distribution<double> normal(0.0, 1.0);
  const std::size_t J = c.periods;
  const double period = c.horizon / static_cast<double>(J);
  SubjectTrajectory s = detail::empty_subject(grid, static_cast<std::int64_t>(index));

  double z = c.sd_zeta * normal(rng);
  double w = c.sd_u * normal(rng);
  double y = c.eta0 + c.sd_eps * normal(rng);
  if (plan) w = plan->path(0);
  double dose = 0.0;  // (T/J) sum_{i<k} W'_i
  s.z.at(0) = z;
  s.w.at(0) = w;
  s.y.at(0) = y;
  for (std::size_t k = 1; k <= J; ++k) {
    const double zeta = c.sd_zeta * normal(rng);
    const double u = c.sd_u * normal(rng);
    const double eps = c.sd_eps * normal(rng);
    dose += period * w;
    const double nz = c.ar_z * z + zeta;
    const double nw = plan ? plan->path(k) : c.rho_w * w + c.load_z * z + c.load_y * y + u;
    const double ny = c.eta0 + c.eta1 * dose + z + eps;
    z = nz;
    w = nw;
    y = ny;
    s.z.at(k) = z;
    s.w.at(k) = w;
    s.y.at(k) = y;
  }
  return s;
}

// ---------------------------------------------------------------------------
// Time-to-event DGP

inline SubjectTrajectory simulate_tte_subject(const TteConfig& c, const GridPtr& grid, std::uint64_t seed,
                                              std::size_t index, const TreatmentPlan* plan = nullptr) {
  auto rng = subject_engine(seed, index);
  std::normal_distribution<double> normal(0.0, 1.0);
  SubjectTrajectory s = detail::empty_subject(grid, static_cast<std::int64_t>(index));
  for (std::size_t k = 1; k < grid->size(); ++k)
    s.z.at(k) = s.z(k - 1) + c.alpha0 * std::sqrt(grid->step(k)) * normal(rng);
  const auto events = detail::poisson_events(rng, grid->horizon());

  const auto iota1 = detail::first_crossing(s.z, c.alpha1);
  const auto iota2 = detail::first_crossing(s.z, c.alpha2);
  if (plan) {
    for (std::size_t k = 0; k < grid->size(); ++k) s.w.at(k) = plan->path(k);
  } else if (iota1) {
    const double start = (*grid)[*iota1];
    auto it = std::find_if(events.begin(), events.end(), [&](double e) { return e >= start; });
    if (it != events.end()) {
      for (std::size_t k = detail::round_up_to_grid(*grid, *it); k < grid->size(); ++k) s.w.at(k) = 1.0;
    }
  }
  if (iota2 && s.w.left_limit(*iota2) == 0.0) {
    for (std::size_t k = *iota2; k < grid->size(); ++k) s.y.at(k) = 1.0;
  } else if (iota2 && plan) {
    // dY^w = (1 - w_-) dU^2 for general plan values
    const double jump = 1.0 - s.w.left_limit(*iota2);
    for (std::size_t k = *iota2; k < grid->size(); ++k) s.y.at(k) = jump;
  }
  return s;
}

// ---------------------------------------------------------------------------
// Positive-intensity DGP

inline double clamp_exponent(double x, double lo, double hi) { return std::clamp(x, lo, hi); }

inline SubjectTrajectory simulate_posint_subject(const PosIntConfig& c, const GridPtr& grid, std::uint64_t seed,
                                                 std::size_t index, const TreatmentPlan* plan = nullptr) {
  auto rng = subject_engine(seed, index);
  std::normal_distribution<double> normal(0.0, 1.0);
  SubjectTrajectory s = detail::empty_subject(grid, static_cast<std::int64_t>(index));
  for (std::size_t k = 1; k < grid->size(); ++k) s.z.at(k) = s.z(k - 1) + std::sqrt(grid->step(k)) * normal(rng);
  const auto events = detail::poisson_events(rng, grid->horizon());
  std::vector<int> counts(grid->size(), 0);
  for (double e : events) ++counts[detail::round_up_to_grid(*grid, e)];

  double dose = 0.0;
  if (plan) s.w.at(0) = plan->path(0);
  s.y.at(0) = c.eta1 * dose + s.z(0);
  for (std::size_t k = 1; k < grid->size(); ++k) {
    if (plan) {
      s.w.at(k) = plan->path(k);
    } else {
      const double rate = c.lambda * std::exp(clamp_exponent(s.z(k - 1) + s.y(k - 1), c.clamp_lo, c.clamp_hi));
      s.w.at(k) = s.w(k - 1) + rate * counts[k];
    }
    dose += s.w(k - 1) * grid->step(k);
    s.y.at(k) = c.eta1 * dose + s.z(k);
  }
  return s;
}

// ---------------------------------------------------------------------------
// Ensembles

inline SubjectTrajectory simulate_subject(const DgpConfig& config, const GridPtr& grid, std::uint64_t seed,
                                          std::size_t index, const TreatmentPlan* plan = nullptr) {
  return std::visit(
      [&](const auto& c) {
        using C = std::decay_t<decltype(c)>;
        if constexpr (std::is_same_v<C, OuConfig>) return simulate_ou_subject(c, grid, seed, index, plan);
        else if constexpr (std::is_same_v<C, DiscreteConfig>) return simulate_discrete_subject(c, grid, seed, index, plan);
        else if constexpr (std::is_same_v<C, TteConfig>) return simulate_tte_subject(c, grid, seed, index, plan);
        else return simulate_posint_subject(c, grid, seed, index, plan);
      },
      config);
}

namespace detail {
inline Ensemble simulate_impl(const DgpConfig& config, std::size_t n, std::uint64_t seed, const TreatmentPlan* plan,
                              GridPtr grid = nullptr) {
  std::visit([](const auto& c) { c.validate(); }, config);
  if (n == 0) throw ValidationError("ensemble size must be at least 1");
  if (!grid) grid = plan ? plan->path.grid() : simulation_grid(config);
  const GridPtr expected = simulation_grid(config);
  if (!same_grid(grid, expected)) throw ValidationError("grid does not match the simulation configuration");
  require_plan_grid(plan, grid);
  std::vector<SubjectTrajectory> subjects(n);
  parallel_for(n, [&](std::size_t i) { subjects[i] = simulate_subject(config, grid, seed, i, plan); });
  std::string label = to_string(family_of(config));
  if (plan) label += "-counterfactual";
  return Ensemble(grid, std::move(subjects), EnsembleMeta{seed, label});
}
}  // namespace detail

/// n independent subjects; subject i uses the stream keyed by (seed, i).
inline Ensemble simulate(const DgpConfig& config, std::size_t n, std::uint64_t seed) {
  return detail::simulate_impl(config, n, seed, nullptr);
}

/// Potential-outcome ensemble under a deterministic plan, noise-coupled with
/// simulate(config, n, seed). The W column holds the plan.
inline Ensemble simulate_counterfactual(const DgpConfig& config, const TreatmentPlan& plan, std::size_t n,
                                        std::uint64_t seed) {
  return detail::simulate_impl(config, n, seed, &plan);
}

inline Ensemble simulate_ou(const OuConfig& c, std::size_t n, std::uint64_t seed) { return simulate(c, n, seed); }
inline Ensemble simulate_ou_counterfactual(const OuConfig& c, const TreatmentPlan& plan, std::size_t n,
                                           std::uint64_t seed) {
  return simulate_counterfactual(c, plan, n, seed);
}
inline Ensemble simulate_discrete(const DiscreteConfig& c, std::size_t n, std::uint64_t seed) {
  return simulate(c, n, seed);
}
inline Ensemble simulate_tte(const TteConfig& c, std::size_t n, std::uint64_t seed) { return simulate(c, n, seed); }
inline Ensemble simulate_posint(const PosIntConfig& c, std::size_t n, std::uint64_t seed) {
  return simulate(c, n, seed);
}

/// Monte Carlo mean of Y^w_T over n_mc counterfactual subjects, with its
/// standard error.
inline MeanAndError true_counterfactual_mean(const DgpConfig& config, const TreatmentPlan& plan, std::size_t n_mc,
                                             std::uint64_t seed) {
  if (n_mc < 2) throw ValidationError("n_mc must be at least 2");
  std::visit([](const auto& c) { c.validate(); }, config);
  const GridPtr grid = plan.path.grid();
  if (!same_grid(grid, simulation_grid(config))) throw ValidationError("plan is not on the simulation grid");
  std::vector<double> terminal(n_mc);
  parallel_for(n_mc, [&](std::size_t i) { terminal[i] = simulate_subject(config, grid, seed, i, &plan).y.terminal(); });
  return mean_and_error(terminal);
}

}  // namespace ctc
