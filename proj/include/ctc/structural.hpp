#pragma once

// Causal structural models tau_t(w; gamma) for the four families, the
// beta -> gamma map for the OU system, and plug-in counterfactual estimates.

#include <Eigen/Dense>

#include <cmath>
#include <limits>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "ctc/config.hpp"
#include "ctc/grid_paths.hpp"
#include "ctc/parallel.hpp"
#include "ctc/simulate.hpp"

namespace ctc {

/// Family tag plus parameter vector:
///   discrete (eta1), ou (g1, g2, g3, g4), tte (alpha2), posint (eta1).
struct CausalParams {
  Family family = Family::ou;
  std::vector<double> values;

  static CausalParams ou(double g1, double g2, double g3, double g4) { return {Family::ou, {g1, g2, g3, g4}}; }
  static CausalParams discrete(double eta1) { return {Family::discrete, {eta1}}; }
  static CausalParams tte(double alpha2) { return {Family::tte, {alpha2}}; }
  static CausalParams posint(double eta1) { return {Family::posint, {eta1}}; }

  double operator[](std::size_t i) const { return values.at(i); }
  std::size_t size() const noexcept { return values.size(); }
};

inline std::size_t causal_dim(Family f) { return f == Family::ou ? 4 : 1; }

/// Upper bound used for the decay rates g3, g4 and for alpha2.
inline constexpr double kRateUpperBound = 10.0;

/// Membership in the parameter set Gamma. The ou exponents are ordered
/// (g3 <= g4) so the two modes cannot swap labels.
inline bool in_domain(const CausalParams& p) {
  if (p.values.size() != causal_dim(p.family)) return false;
  for (double v : p.values)
    if (!std::isfinite(v)) return false;
  switch (p.family) {
    case Family::ou:
      return p[1] >= 0.0 && p[1] <= 1.0 && p[2] > 0.0 && p[2] <= p[3] && p[3] <= kRateUpperBound;
    case Family::tte:
      return p[0] > 0.0 && p[0] <= kRateUpperBound;
    default:
      return true;
  }
}

inline void require_domain(const CausalParams& p) {
  if (p.values.size() != causal_dim(p.family))
    throw ValidationError(to_string(p.family) + " parameters need " + std::to_string(causal_dim(p.family)) +
                          " values");
  if (!in_domain(p)) {
    if (p.family == Family::ou)
      throw ValidationError("ou parameters must satisfy 0 <= g2 <= 1 and 0 < g3 <= g4 <= 10");
    throw ValidationError(to_string(p.family) + " parameters outside the admissible set");
  }
}

// ---------------------------------------------------------------------------
// OU family

/// Quadrature weights of the two-exponential kernel for horizon t_K:
/// tau = sum_{k=1..K} w(t_{k-1}) * weight[k-1].
inline std::vector<double> ou_kernel(const TimeGrid& grid, const CausalParams& g, std::size_t k_end) {
  const double g1 = g[0], g2 = g[1], g3 = g[2], g4 = g[3];
  const double t = grid[k_end];
  std::vector<double> weight(k_end);
  for (std::size_t k = 1; k <= k_end; ++k) {
    const double s = grid[k - 1];
    weight[k - 1] = g1 * (g2 * std::exp(g3 * (s - t)) + (1.0 - g2) * std::exp(g4 * (s - t))) * grid.step(k);
  }
  return weight;
}

inline double apply_kernel(const std::vector<double>& weight, const SampledPath& plan, std::size_t j = 0) {
  double s = 0.0;
  for (std::size_t k = 0; k < weight.size(); ++k) s += plan(k, j) * weight[k];
  return s;
}

inline double tau_ou(const SampledPath& plan, const CausalParams& gamma, double t) {
  if (gamma.family != Family::ou || gamma.size() != 4) throw ValidationError("tau_ou needs ou parameters");
  const std::size_t k = plan.grid()->require_index(t);
  return apply_kernel(ou_kernel(*plan.grid(), gamma, k), plan);
}

/// Maps the OU drift matrix to the two-exponential parameters. With
/// Bt = [[b11, b13], [b31, b33]] = V diag(lambda) V^-1 and b = (-b12, -b32), the
/// Y-response to a unit treatment impulse after lag u is
/// sum_i V_1i (V^-1 b)_i exp(-lambda_i u).
inline CausalParams gamma_from_beta(const Eigen::Matrix3d& beta) {
  Eigen::Matrix2d bt;
  bt << beta(0, 0), beta(0, 2), beta(2, 0), beta(2, 2);
  const Eigen::Vector2d b(-beta(0, 1), -beta(2, 1));
  const double tr = bt.trace();
  const double disc = (bt(0, 0) - bt(1, 1)) * (bt(0, 0) - bt(1, 1)) + 4.0 * bt(0, 1) * bt(1, 0);
  const double scale = std::max(1.0, tr * tr);
  if (!(disc > 1e-12 * scale))
    throw ValidationError("unsupported parametrization: the (Y, Z) drift block needs real distinct eigenvalues");
  Eigen::EigenSolver<Eigen::Matrix2d> es(bt);
  Eigen::Vector2d lambda = es.eigenvalues().real();
  Eigen::Matrix2d v = es.eigenvectors().real();
  if (lambda(0) > lambda(1)) {
    std::swap(lambda(0), lambda(1));
    v.col(0).swap(v.col(1));
  }
  const Eigen::Vector2d coef = v.partialPivLu().solve(b);
  const double w_small = v(0, 0) * coef(0);
  const double w_large = v(0, 1) * coef(1);
  const double g1 = w_small + w_large;
  if (std::abs(g1) < 1e-14 * std::max(1.0, std::abs(w_small) + std::abs(w_large)))
    throw ValidationError("unsupported parametrization: zero total effect with nonzero modes");
  return CausalParams::ou(g1, w_small / g1, lambda(0), lambda(1));
}

// ---------------------------------------------------------------------------
// Discrete, time-to-event and positive-intensity families

/// Number of whole periods elapsed by time t on a J-period grid.
inline std::size_t elapsed_periods(double t, double horizon, std::size_t periods) {
  if (!(t >= -1e-12 * horizon) || t > horizon * (1.0 + 1e-12)) throw ValidationError("time outside [0, T]");
  const double x = static_cast<double>(periods) * t / horizon;
  return std::min(periods, static_cast<std::size_t>(std::floor(x + 1e-9)));
}

inline double tau_discrete(const SampledPath& plan, double eta1, double t, std::size_t periods) {
  const TimeGrid& g = *plan.grid();
  if (g.steps() != periods) throw ValidationError("discrete plan must live on the J-step grid");
  return eta1 * riemann_integral_to(plan, elapsed_periods(t, g.horizon(), periods));
}

inline std::optional<std::size_t> hitting_index(const SampledPath& z, double level) {
  for (std::size_t k = 0; k < z.size(); ++k)
    if (z(k) >= level) return k;
  return std::nullopt;
}

inline double tau_tte_at(const SampledPath& plan, const SampledPath& z, double alpha2, std::size_t k) {
  detail::require_same_grid(plan, z, "tau_tte");
  const auto iota2 = hitting_index(z, alpha2);
  if (!iota2 || *iota2 > k) return 0.0;
  return -plan.left_limit(*iota2);
}

inline double tau_tte(const SampledPath& plan, const SampledPath& z, double alpha2, double t) {
  detail::require_same_grid(plan, z, "tau_tte");
  return tau_tte_at(plan, z, alpha2, plan.grid()->require_index(t));
}

inline double tau_posint(const SampledPath& plan, double eta1, double t) { return eta1 * riemann_integral(plan, t); }

// ---------------------------------------------------------------------------
// Structural model bound to a grid

class StructuralModel {
 public:
  StructuralModel(Family family, GridPtr grid) : family_(family), grid_(std::move(grid)) {
    if (!grid_) throw ValidationError("structural model without a grid");
  }

  static StructuralModel for_ensemble(Family family, const Ensemble& ensemble) {
    if (family == Family::tte && ensemble.covariate_dim() == 0)
      throw ValidationError("tte model needs the covariate path Z");
    return StructuralModel(family, ensemble.grid());
  }

  Family family() const noexcept { return family_; }
  const GridPtr& grid() const noexcept { return grid_; }

  /// tau at grid index k for treatment path `plan` of subject `subject`; only
  /// the tte family reads the subject (its observed Z path).
  double tau_at(const SubjectTrajectory& subject, const SampledPath& plan, const CausalParams& g, std::size_t k) const {
    check(g);
    if (!same_grid(plan.grid(), grid_)) throw ValidationError("plan grid does not match the model grid");
    switch (family_) {
      case Family::ou: return apply_kernel(ou_kernel(*grid_, g, k), plan);
      case Family::discrete: return g[0] * riemann_integral_to(plan, k);
      case Family::posint: return g[0] * riemann_integral_to(plan, k);
      case Family::tte: return tau_tte_at(plan, subject.z, g[0], k);
    }
    return 0.0;
  }

  double tau_terminal(const SubjectTrajectory& subject, const SampledPath& plan, const CausalParams& g) const {
    return tau_at(subject, plan, g, grid_->steps());
  }

  /// tau_T(W_i; gamma) for every subject, with the OU kernel built once.
  std::vector<double> terminal_effects(const Ensemble& ensemble, const CausalParams& g) const {
    check(g);
    if (!same_grid(ensemble.grid(), grid_)) throw ValidationError("ensemble grid does not match the model grid");
    std::vector<double> out(ensemble.size());
    if (family_ == Family::ou) {
      const auto kernel = ou_kernel(*grid_, g, grid_->steps());
      parallel_for(ensemble.size(), [&](std::size_t i) { out[i] = apply_kernel(kernel, ensemble[i].w); });
    } else {
      parallel_for(ensemble.size(), [&](std::size_t i) { out[i] = tau_terminal(ensemble[i], ensemble[i].w, g); });
    }
    return out;
  }

 private:
  void check(const CausalParams& g) const {
    if (g.family != family_) throw ValidationError("parameter family " + to_string(g.family) +
                                                   " does not match model family " + to_string(family_));
    if (g.size() != causal_dim(family_)) throw ValidationError("wrong number of causal parameters");
  }

  Family family_;
  GridPtr grid_;
};

/// Y_T^0 reconstructed from observed data: Y_T - tau_T(W; gamma).
inline double baseline_outcome(const SubjectTrajectory& subject, const StructuralModel& model, const CausalParams& g) {
  return subject.y.terminal() - model.tau_terminal(subject, subject.w, g);
}

inline std::vector<double> baseline_outcomes(const Ensemble& ensemble, const StructuralModel& model,
                                             const CausalParams& g) {
  auto out = model.terminal_effects(ensemble, g);
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = ensemble[i].y.terminal() - out[i];
  return out;
}

namespace detail {
inline void require_plan(const TreatmentPlan& plan, const Ensemble& ensemble) {
  if (!same_grid(plan.path.grid(), ensemble.grid())) throw ValidationError("plan grid does not match the ensemble");
  if (plan.path.dim() != ensemble.treatment_dim()) throw ValidationError("plan dimension does not match W");
}
}  // namespace detail

/// P_n[Y_T - tau_T(W; g) + tau_T(w; g)].
inline double counterfactual_mean_estimate(const Ensemble& ensemble, const StructuralModel& model,
                                           const CausalParams& g, const TreatmentPlan& plan) {
  detail::require_plan(plan, ensemble);
  auto values = baseline_outcomes(ensemble, model, g);
  if (model.family() == Family::tte) {
    for (std::size_t i = 0; i < values.size(); ++i) values[i] += model.tau_terminal(ensemble[i], plan.path, g);
    return sample_mean(values);
  }
  // tau does not depend on the subject here.
  return sample_mean(values) + model.tau_terminal(ensemble[0], plan.path, g);
}

/// Y_t - tau_t(W; g) + tau_t(w; g) at every grid point.
inline SampledPath counterfactual_path_estimate(const SubjectTrajectory& subject, const StructuralModel& model,
                                                const CausalParams& g, const TreatmentPlan& plan) {
  if (!same_grid(plan.path.grid(), subject.grid())) throw ValidationError("plan grid does not match the subject");
  SampledPath out(subject.grid(), 1);
  for (std::size_t k = 0; k < out.size(); ++k)
    out.at(k) = subject.y(k) - model.tau_at(subject, subject.w, g, k) + model.tau_at(subject, plan.path, g, k);
  return out;
}

struct WeightedPlan {
  TreatmentPlan plan;
  double weight = 0.0;
};

/// sum_j weight_j * counterfactual_mean_estimate(plan_j) for a discrete mixture
/// of deterministic plans.
inline double stochastic_intervention_mean(const Ensemble& ensemble, const StructuralModel& model,
                                           const CausalParams& g, const std::vector<WeightedPlan>& plans) {
  if (plans.empty()) throw ValidationError("no plans in the mixture");
  double total = 0.0;
  for (const auto& p : plans) {
    if (!(p.weight >= 0.0)) throw ValidationError("mixture weights must be non-negative");
    total += p.weight;
  }
  if (std::abs(total - 1.0) > 1e-9) throw ValidationError("mixture weights must sum to 1");
  double mean = 0.0;
  for (const auto& p : plans) mean += p.weight * counterfactual_mean_estimate(ensemble, model, g, p.plan);
  return mean;
}

}  // namespace ctc
