#pragma once

// Estimated canonical decomposition W = W_0 + M + A of the treatment: nuisance
// models for the compensator A, the martingale residual M, and the treatment
// rate a (dA = a dt) used by the weighting estimator.

#include <Eigen/Dense>

#include <array>
#include <cmath>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "ctc/config.hpp"
#include "ctc/grid_paths.hpp"
#include "ctc/parallel.hpp"
#include "ctc/solve.hpp"

namespace ctc {

using ResidualPath = SampledPath;
using CompensatorPath = SampledPath;

// ---------------------------------------------------------------------------
// Generic pieces

/// M_t = W_t - W_0 - A_t.
inline ResidualPath residual_from_compensator(const SubjectTrajectory& subject, const CompensatorPath& comp) {
  detail::require_same_grid(subject.w, comp, "residual_from_compensator");
  if (comp.dim() != subject.w.dim()) throw ValidationError("compensator dimension does not match W");
  const std::size_t q = comp.dim();
  SampledPath m(comp.grid(), q);
  for (std::size_t k = 0; k < m.size(); ++k)
    for (std::size_t j = 0; j < q; ++j) m.at(k, j) = subject.w(k, j) - subject.w(0, j) - comp(k, j);
  return m;
}

/// Rate a with A_k - A_{k-1} = a_{k-1} (t_k - t_{k-1}); the last grid value
/// repeats the one before it and is never used by a predictable integrand.
inline SampledPath rate_from_compensator(const CompensatorPath& comp) {
  const TimeGrid& g = *comp.grid();
  SampledPath a(comp.grid(), comp.dim());
  for (std::size_t k = 1; k < g.size(); ++k)
    for (std::size_t j = 0; j < comp.dim(); ++j) a.at(k - 1, j) = (comp(k, j) - comp(k - 1, j)) / g.step(k);
  for (std::size_t j = 0; j < comp.dim(); ++j) a.at(g.size() - 1, j) = a(g.size() - 2, j);
  return a;
}

struct Decomposition {
  std::vector<CompensatorPath> compensators;
  std::vector<ResidualPath> residuals;
};

template <class CompFn>
Decomposition decompose_with(const Ensemble& ensemble, CompFn&& compensator_of) {
  Decomposition d;
  d.compensators.resize(ensemble.size());
  d.residuals.resize(ensemble.size());
  parallel_for(ensemble.size(), [&](std::size_t i) {
    d.compensators[i] = compensator_of(ensemble[i]);
    d.residuals[i] = residual_from_compensator(ensemble[i], d.compensators[i]);
  });
  return d;
}

// ---------------------------------------------------------------------------
// OU family: dW = -(nu1 Y + nu2 W + nu3 Z) dt + nu4 dB

struct OuNuisance {
  std::array<double, 4> nu{0.0, 0.0, 0.0, 0.0};
  double residual_norm = 0.0;
};

inline void require_ou_subject(const SubjectTrajectory& s) {
  if (s.w.dim() != 1 || !s.has_covariates()) throw ValidationError("ou nuisance model needs scalar W and a Z path");
}

inline CompensatorPath ou_compensator(const SubjectTrajectory& s, const std::array<double, 4>& nu) {
  require_ou_subject(s);
  const TimeGrid& g = *s.grid();
  SampledPath a(s.grid(), 1);
  double acc = 0.0;
  for (std::size_t k = 1; k < g.size(); ++k) {
    acc -= (nu[0] * s.y(k - 1) + nu[1] * s.w(k - 1) + nu[2] * s.z(k - 1)) * g.step(k);
    a.at(k) = acc;
  }
  return a;
}

/// M_t(nu) = W_t - W_0 + int_0^t (nu1 Y + nu2 W + nu3 Z) ds, left-endpoint rule.
inline ResidualPath ou_residual(const SubjectTrajectory& s, const std::array<double, 4>& nu) {
  return residual_from_compensator(s, ou_compensator(s, nu));
}

/// The stacked equations at grid indices k_1 < ... < k_l, written through
/// per-subject features f = (W_t - W_0, int Y, int W, int Z) so that
/// M_t(nu) = f . (1, nu1, nu2, nu3). Only 4x4 moment matrices of f are kept.
class OuNuisanceProblem {
 public:
  OuNuisanceProblem(const Ensemble& ensemble, std::vector<double> times) : times_(std::move(times)) {
    if (times_.empty()) throw ValidationError("nuisance equations need at least one time");
    const TimeGrid& g = *ensemble.grid();
    for (std::size_t i = 0; i < times_.size(); ++i) {
      if (!(times_[i] > 0.0)) throw ValidationError("nuisance equation times must be positive");
      if (i > 0 && !(times_[i] > times_[i - 1])) throw ValidationError("nuisance equation times must increase");
      index_.push_back(g.require_index(times_[i]));
    }
    const std::size_t n = ensemble.size();
    const std::size_t l = times_.size();
    // feature[i][m] = 4-vector at the m-th time for subject i (m = 0 is t = 0)
    std::vector<std::vector<Eigen::Vector4d>> feature(n, std::vector<Eigen::Vector4d>(l + 1));
    parallel_for(n, [&](std::size_t i) {
      const auto& s = ensemble[i];
      require_ou_subject(s);
      Eigen::Vector4d acc(0.0, 0.0, 0.0, 0.0);
      feature[i][0] = acc;
      std::size_t m = 0;
      for (std::size_t k = 1; k <= index_.back(); ++k) {
        const double dt = g.step(k);
        acc(1) += s.y(k - 1) * dt;
        acc(2) += s.w(k - 1) * dt;
        acc(3) += s.z(k - 1) * dt;
        if (k == index_[m]) {
          feature[i][m + 1] = acc;
          feature[i][m + 1](0) = s.w(k) - s.w(0);
          ++m;
        }
      }
    });
    mean_.resize(l);
    second_.resize(l);
    cross_.resize(l);
    std::vector<double> buf(n);
    for (std::size_t m = 0; m < l; ++m) {
      for (int a = 0; a < 4; ++a) {
        for (std::size_t i = 0; i < n; ++i) buf[i] = feature[i][m + 1](a);
        mean_[m](a) = sample_mean(buf);
        for (int b = 0; b < 4; ++b) {
          for (std::size_t i = 0; i < n; ++i) buf[i] = feature[i][m + 1](a) * feature[i][m + 1](b);
          second_[m](a, b) = sample_mean(buf);
          for (std::size_t i = 0; i < n; ++i)
            buf[i] = feature[i][m](a) * (feature[i][m + 1](b) - feature[i][m](b));
          cross_[m](a, b) = sample_mean(buf);
        }
      }
    }
  }

  std::size_t equations() const noexcept { return 3 * times_.size(); }
  const std::vector<double>& times() const noexcept { return times_; }

  /// Residuals ordered as all mean equations, then all second-moment
  /// equations, then all increment-orthogonality equations.
  std::vector<double> residuals(const std::array<double, 4>& nu) const {
    if (!(nu[3] > 0.0)) throw ValidationError("nu4 must be positive");
    const Eigen::Vector4d c(1.0, nu[0], nu[1], nu[2]);
    const std::size_t l = times_.size();
    std::vector<double> r(3 * l);
    for (std::size_t m = 0; m < l; ++m) {
      r[m] = mean_[m].dot(c);
      r[l + m] = c.dot(second_[m] * c) - nu[3] * nu[3] * times_[m];
      r[2 * l + m] = c.dot(cross_[m] * c);
    }
    return r;
  }

 private:
  std::vector<double> times_;
  std::vector<std::size_t> index_;
  std::vector<Eigen::Vector4d> mean_;
  std::vector<Eigen::Matrix4d> second_;
  std::vector<Eigen::Matrix4d> cross_;
};

inline std::vector<double> ou_nuisance_equations(const Ensemble& ensemble, const std::array<double, 4>& nu,
                                                 const std::vector<double>& times) {
  return OuNuisanceProblem(ensemble, times).residuals(nu);
}

/// l equidistant times T/l, 2T/l, ..., T snapped to the grid.
inline std::vector<double> equidistant_times(const TimeGrid& grid, std::size_t l) {
  if (l == 0 || l > grid.steps()) throw ValidationError("need 1 <= l <= number of grid steps");
  std::vector<double> out;
  for (std::size_t i = 1; i <= l; ++i)
    out.push_back(grid[static_cast<std::size_t>(std::llround(static_cast<double>(grid.steps() * i) / static_cast<double>(l)))]);
  return out;
}

/// sqrt of the pooled realized quadratic variation of W per unit time.
inline double realized_volatility(const Ensemble& ensemble, std::size_t j = 0) {
  std::vector<double> qv(ensemble.size());
  for (std::size_t i = 0; i < ensemble.size(); ++i) {
    double s = 0.0;
    const auto& w = ensemble[i].w;
    for (std::size_t k = 1; k < w.size(); ++k) s += (w(k, j) - w(k - 1, j)) * (w(k, j) - w(k - 1, j));
    qv[i] = s;
  }
  return std::sqrt(sample_mean(qv) / ensemble.grid()->horizon());
}

struct OuNuisanceOptions {
  bool hide_z = false;  // fix nu3 = 0 (the covariate is left out of the drift model)
  double collapse_threshold = 1e-4;  // nu4 enters squared, so this is a variance of 1e-8
  SolveOptions solver{1e-20, 20000, 0.1, 5, 0};
};

/// Least-squares solution of the stacked equations. Throws ConvergenceError if
/// the search does not settle or nu4 collapses to zero.
inline OuNuisance estimate_ou_nuisance(const Ensemble& ensemble, const std::vector<double>& times,
                                       std::array<double, 4> init, const OuNuisanceOptions& opts = {}) {
  const OuNuisanceProblem problem(ensemble, times);
  if (problem.equations() < 4) throw ValidationError("need at least 4 stacked equations (two or more times)");
  if (!(init[3] > 0.0)) throw ValidationError("initial nu4 must be positive");
  auto unpack = [&](const std::vector<double>& x) {
    return opts.hide_z ? std::array<double, 4>{x[0], x[1], 0.0, x[2]} : std::array<double, 4>{x[0], x[1], x[2], x[3]};
  };
  auto residuals = [&](const std::vector<double>& x) -> std::vector<double> {
    const auto nu = unpack(x);
    if (!(nu[3] > 0.0)) return {};
    return problem.residuals(nu);
  };
  std::vector<double> x0 = opts.hide_z ? std::vector<double>{init[0], init[1], init[3]}
                                       : std::vector<double>{init[0], init[1], init[2], init[3]};
  const auto sol = solve_stacked(residuals, x0, opts.solver);
  const auto nu = unpack(sol.x);
  if (!sol.converged) throw ConvergenceError("nuisance equations did not converge", sol.x, sol.residual_norm);
  if (nu[3] < opts.collapse_threshold)
    throw ConvergenceError("diffusion scale nu4 collapsed to zero; the treatment path carries no noise", sol.x,
                           sol.residual_norm);
  return OuNuisance{nu, sol.residual_norm};
}

inline Decomposition ou_decomposition(const Ensemble& ensemble, const std::array<double, 4>& nu) {
  return decompose_with(ensemble, [&](const SubjectTrajectory& s) { return ou_compensator(s, nu); });
}

// ---------------------------------------------------------------------------
// Discrete family: pooled regression of period increments

struct DiscreteNuisance {
  std::array<double, 4> coef{0.0, 0.0, 0.0, 0.0};  // intercept, W', Y', Z' (lagged)
  std::array<double, 4> std_error{0.0, 0.0, 0.0, 0.0};
};

inline const std::array<const char*, 4>& discrete_regressor_names() {
  static const std::array<const char*, 4> names{"intercept", "W_lag", "Y_lag", "Z_lag"};
  return names;
}

inline void require_discrete_subject(const SubjectTrajectory& s) {
  if (s.w.dim() != 1 || !s.has_covariates()) throw ValidationError("discrete nuisance model needs scalar W and a Z path");
}

/// A'_k = sum_{i <= k} (c0 + c1 W'_{i-1} + c2 Y'_{i-1} + c3 Z'_{i-1}).
inline CompensatorPath discrete_compensator(const SubjectTrajectory& s, const std::array<double, 4>& coef) {
  require_discrete_subject(s);
  SampledPath a(s.grid(), 1);
  double acc = 0.0;
  for (std::size_t k = 1; k < a.size(); ++k) {
    acc += coef[0] + coef[1] * s.w(k - 1) + coef[2] * s.y(k - 1) + coef[3] * s.z(k - 1);
    a.at(k) = acc;
  }
  return a;
}

/// OLS of dW'_k on (1, W'_{k-1}, Y'_{k-1}, Z'_{k-1}) pooled over subjects and
/// periods, with classical standard errors.
inline DiscreteNuisance discrete_compensator_fit(const Ensemble& ensemble) {
  const std::size_t periods = ensemble.grid()->steps();
  const std::size_t rows = ensemble.size() * periods;
  if (rows <= 4) throw ValidationError("discrete compensator fit needs more observations than regressors");
  Eigen::MatrixXd x(rows, 4);
  Eigen::VectorXd y(rows);
  for (std::size_t i = 0; i < ensemble.size(); ++i) {
    const auto& s = ensemble[i];
    require_discrete_subject(s);
    for (std::size_t k = 1; k <= periods; ++k) {
      const auto r = static_cast<Eigen::Index>(i * periods + k - 1);
      x(r, 0) = 1.0;
      x(r, 1) = s.w(k - 1);
      x(r, 2) = s.y(k - 1);
      x(r, 3) = s.z(k - 1);
      y(r) = s.w(k) - s.w(k - 1);
    }
  }
  Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(x);
  qr.setThreshold(1e-10);
  if (qr.rank() < 4) {
    std::string names;
    const auto& perm = qr.colsPermutation().indices();
    for (Eigen::Index c = qr.rank(); c < 4; ++c) {
      if (!names.empty()) names += ", ";
      names += discrete_regressor_names()[static_cast<std::size_t>(perm(c))];
    }
    throw ValidationError("singular design: column(s) " + names + " collinear with the others");
  }
  const Eigen::Vector4d beta = qr.solve(y);
  const Eigen::VectorXd resid = y - x * beta;
  const double sigma2 = resid.squaredNorm() / static_cast<double>(rows - 4);
  const Eigen::Matrix4d xtx_inv = (x.transpose() * x).inverse();
  DiscreteNuisance out;
  for (int j = 0; j < 4; ++j) {
    out.coef[j] = beta(j);
    out.std_error[j] = std::sqrt(sigma2 * xtx_inv(j, j));
  }
  return out;
}

inline Decomposition discrete_decomposition(const Ensemble& ensemble, const std::array<double, 4>& coef) {
  return decompose_with(ensemble, [&](const SubjectTrajectory& s) { return discrete_compensator(s, coef); });
}

// ---------------------------------------------------------------------------
// Time-to-event family: A_t = int_0^t U1_{s-} (1 - W_{s-}) ds

/// Grid time at which Z first reaches alpha1, if any.
inline std::optional<double> treatment_seeking_time(const SubjectTrajectory& s, double alpha1) {
  for (std::size_t k = 0; k < s.z.size(); ++k)
    if (s.z(k) >= alpha1) return (*s.grid())[k];
  return std::nullopt;
}

inline CompensatorPath counting_compensator(const SubjectTrajectory& s, std::optional<double> iota1) {
  if (s.w.dim() != 1) throw ValidationError("counting compensator needs scalar W");
  const TimeGrid& g = *s.grid();
  SampledPath a(s.grid(), 1);
  double acc = 0.0;
  for (std::size_t k = 1; k < g.size(); ++k) {
    const bool seeking = iota1 && g[k - 1] >= *iota1 - 1e-12 * g.horizon();
    if (seeking) acc += (1.0 - s.w(k - 1)) * g.step(k);
    a.at(k) = acc;
  }
  return a;
}

/// Smallest running maximum of Z at the treatment jump over treated subjects.
/// Every treated subject must have crossed alpha1 by its jump, and the bound
/// is attained by the likelihood in the threshold.
inline double estimate_tte_alpha1(const Ensemble& ensemble) {
  double best = std::numeric_limits<double>::infinity();
  for (const auto& s : ensemble.subjects()) {
    if (!s.has_covariates()) throw ValidationError("tte data need the covariate path Z");
    double running = -std::numeric_limits<double>::infinity();
    for (std::size_t k = 0; k < s.w.size(); ++k) {
      running = std::max(running, s.z(k));
      if (s.w(k) > 0.5) {
        best = std::min(best, running);
        break;
      }
    }
  }
  if (!std::isfinite(best)) throw AssumptionError("no treated subjects: the treatment threshold is not identified");
  return best;
}

/// alpha0 from the realized quadratic variation of Z.
inline double estimate_tte_alpha0(const Ensemble& ensemble) {
  std::vector<double> qv(ensemble.size());
  for (std::size_t i = 0; i < ensemble.size(); ++i) {
    const auto& z = ensemble[i].z;
    double s = 0.0;
    for (std::size_t k = 1; k < z.size(); ++k) s += (z(k) - z(k - 1)) * (z(k) - z(k - 1));
    qv[i] = s;
  }
  return std::sqrt(sample_mean(qv) / ensemble.grid()->horizon());
}

inline Decomposition tte_decomposition(const Ensemble& ensemble, double alpha1) {
  return decompose_with(ensemble, [&](const SubjectTrajectory& s) {
    return counting_compensator(s, treatment_seeking_time(s, alpha1));
  });
}

// ---------------------------------------------------------------------------
// Positive-intensity family: a_t = lambda exp(clamp(Z_t + Y_t))

struct PosIntNuisance {
  double lambda = 0.0;
  double clamp_lo = -3.0;
  double clamp_hi = 3.0;
};

inline CompensatorPath posint_compensator(const SubjectTrajectory& s, const PosIntNuisance& p) {
  if (!(p.lambda > 0.0)) throw ValidationError("lambda must be positive");
  if (s.w.dim() != 1 || !s.has_covariates()) throw ValidationError("posint model needs scalar W and a Z path");
  const TimeGrid& g = *s.grid();
  SampledPath a(s.grid(), 1);
  double acc = 0.0;
  for (std::size_t k = 1; k < g.size(); ++k) {
    acc += p.lambda * std::exp(std::clamp(s.z(k - 1) + s.y(k - 1), p.clamp_lo, p.clamp_hi)) * g.step(k);
    a.at(k) = acc;
  }
  return a;
}

/// Ratio estimator P_n[W_T - W_0] / P_n[int_0^T exp(clamp(Z + Y)) ds].
inline double estimate_posint_lambda(const Ensemble& ensemble, double clamp_lo, double clamp_hi) {
  std::vector<double> num(ensemble.size()), den(ensemble.size());
  const PosIntNuisance unit{1.0, clamp_lo, clamp_hi};
  for (std::size_t i = 0; i < ensemble.size(); ++i) {
    num[i] = ensemble[i].w.terminal() - ensemble[i].w(0);
    den[i] = posint_compensator(ensemble[i], unit).terminal();
  }
  const double lambda = pairwise_sum(num) / pairwise_sum(den);
  if (!(lambda > 0.0)) throw AssumptionError("estimated treatment intensity is not positive");
  return lambda;
}

inline Decomposition posint_decomposition(const Ensemble& ensemble, const PosIntNuisance& p) {
  return decompose_with(ensemble, [&](const SubjectTrajectory& s) { return posint_compensator(s, p); });
}

}  // namespace ctc
