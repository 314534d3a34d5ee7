#pragma once

// Nelder-Mead minimization with seeded restarts, least-squares solving of
// stacked estimating equations, and the GMM driver built on both.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <numeric>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "ctc/error.hpp"

namespace ctc {

struct SolveOptions {
  double tolerance = 1e-12;      // stop when max f - min f over the simplex drops below this
  std::size_t max_iterations = 20000;
  double initial_scale = 0.1;    // simplex edge, relative to max(1, |x_j|)
  std::size_t restarts = 5;
  std::uint64_t seed = 0;        // jitter of restart simplices

  void validate() const {
    if (!(tolerance > 0.0)) throw ValidationError("solver tolerance must be positive");
    if (max_iterations < 1) throw ValidationError("solver needs at least one iteration");
    if (!(initial_scale > 0.0)) throw ValidationError("initial simplex scale must be positive");
  }
};

struct MinimizeResult {
  std::vector<double> x;
  double value = std::numeric_limits<double>::infinity();
  bool converged = false;
  std::size_t iterations = 0;
  std::size_t evaluations = 0;
};

using Objective = std::function<double(const std::vector<double>&)>;

namespace detail {

inline std::string format_point(const std::vector<double>& x) {
  std::ostringstream os;
  os.precision(17);
  os << '(';
  for (std::size_t i = 0; i < x.size(); ++i) os << (i ? ", " : "") << x[i];
  os << ')';
  return os.str();
}

/// +inf is a barrier (the point is rejected); NaN or -inf aborts the search.
inline double checked_eval(const Objective& f, const std::vector<double>& x, std::size_t& evals) {
  ++evals;
  const double v = f(x);
  if (std::isnan(v) || v == -std::numeric_limits<double>::infinity())
    throw ConvergenceError("non-finite objective at " + format_point(x), x, v);
  return v;
}

/// One Nelder-Mead run from an explicit initial simplex.
inline MinimizeResult nelder_mead_run(const Objective& f, std::vector<std::vector<double>> simplex,
                                      const SolveOptions& opts, std::size_t& evals) {
  const std::size_t k = simplex.size() - 1;
  std::vector<double> fv(k + 1);
  for (std::size_t i = 0; i <= k; ++i) fv[i] = checked_eval(f, simplex[i], evals);
  std::vector<std::size_t> order(k + 1);
  auto point = [&](const std::vector<double>& c, const std::vector<double>& p, double coef) {
    std::vector<double> out(k);
    for (std::size_t j = 0; j < k; ++j) out[j] = c[j] + coef * (p[j] - c[j]);
    return out;
  };

  MinimizeResult res;
  for (std::size_t it = 0;; ++it) {
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return fv[a] < fv[b]; });
    const std::size_t best = order.front(), worst = order.back(), second = order[k - 1];
    const double spread = fv[worst] - fv[best];
    double diameter = 0.0;
    for (std::size_t i = 0; i <= k; ++i)
      for (std::size_t j = 0; j < k; ++j)
        diameter = std::max(diameter, std::abs(simplex[i][j] - simplex[best][j]) / std::max(1.0, std::abs(simplex[best][j])));
    res.iterations = it;
    if (spread < opts.tolerance || (std::isfinite(spread) && diameter < 1e-15)) {
      // a simplex collapsed to round-off has settled in x even if f still jitters
      res.converged = true;
      res.x = simplex[best];
      res.value = fv[best];
      return res;
    }
    if (it >= opts.max_iterations) {
      res.x = simplex[best];
      res.value = fv[best];
      res.converged = false;
      return res;
    }

    std::vector<double> centroid(k, 0.0);
    for (std::size_t i = 0; i <= k; ++i) {
      if (i == worst) continue;
      for (std::size_t j = 0; j < k; ++j) centroid[j] += simplex[i][j];
    }
    for (double& c : centroid) c /= static_cast<double>(k);

    const auto xr = point(centroid, simplex[worst], -1.0);
    const double fr = checked_eval(f, xr, evals);
    if (fr < fv[best]) {
      const auto xe = point(centroid, simplex[worst], -2.0);
      const double fe = checked_eval(f, xe, evals);
      if (fe < fr) {
        simplex[worst] = xe;
        fv[worst] = fe;
      } else {
        simplex[worst] = xr;
        fv[worst] = fr;
      }
      continue;
    }
    if (fr < fv[second]) {
      simplex[worst] = xr;
      fv[worst] = fr;
      continue;
    }
    // contraction: outside when the reflected point beats the worst vertex
    const bool outside = fr < fv[worst];
    const auto xc = outside ? point(centroid, xr, 0.5) : point(centroid, simplex[worst], 0.5);
    const double fc = checked_eval(f, xc, evals);
    if (fc < (outside ? fr : fv[worst])) {
      simplex[worst] = xc;
      fv[worst] = fc;
      continue;
    }
    for (std::size_t i = 0; i <= k; ++i) {
      if (i == best) continue;
      simplex[i] = point(simplex[best], simplex[i], 0.5);
      fv[i] = checked_eval(f, simplex[i], evals);
    }
  }
}

inline std::vector<std::vector<double>> axis_simplex(const std::vector<double>& x0, double scale) {
  std::vector<std::vector<double>> s(x0.size() + 1, x0);
  for (std::size_t j = 0; j < x0.size(); ++j) s[j + 1][j] += scale * std::max(1.0, std::abs(x0[j]));
  return s;
}

}  // namespace detail

/// Nelder-Mead with coefficients reflection 1, expansion 2, contraction 0.5 and
/// shrink 0.5. After the first run, `restarts` further runs start from the
/// incumbent with a randomly signed and scaled simplex. Points where the
/// objective is +inf are rejected like any worse point.
inline MinimizeResult nelder_mead(const Objective& f, const std::vector<double>& x0, const SolveOptions& opts = {}) {
  opts.validate();
  if (x0.empty()) throw ValidationError("nelder_mead needs at least one parameter");
  std::size_t evals = 0;
  const double f0 = detail::checked_eval(f, x0, evals);
  if (!std::isfinite(f0)) throw ValidationError("objective is not finite at the starting point " + detail::format_point(x0));

  MinimizeResult best = detail::nelder_mead_run(f, detail::axis_simplex(x0, opts.initial_scale), opts, evals);
  bool any_converged = best.converged;
  std::size_t iterations = best.iterations;
  std::mt19937_64 rng(opts.seed);
  std::uniform_real_distribution<double> unit(0.5, 1.5);
  std::bernoulli_distribution sign(0.5);
  for (std::size_t r = 0; r < opts.restarts; ++r) {
    std::vector<std::vector<double>> simplex(x0.size() + 1, best.x);
    for (std::size_t j = 0; j < x0.size(); ++j)
      simplex[j + 1][j] += (sign(rng) ? 1.0 : -1.0) * unit(rng) * opts.initial_scale * std::max(1.0, std::abs(best.x[j]));
    MinimizeResult run = detail::nelder_mead_run(f, std::move(simplex), opts, evals);
    iterations += run.iterations;
    any_converged = any_converged || run.converged;
    const bool improved = run.value < best.value;
    if (improved) best = std::move(run);
    if (!improved && any_converged) break;
  }
  best.converged = any_converged;
  best.iterations = iterations;
  best.evaluations = evals;
  return best;
}

struct StackedSolution {
  std::vector<double> x;
  double residual_norm = 0.0;
  bool converged = false;
};

using ResidualFunction = std::function<std::vector<double>(const std::vector<double>&)>;

/// Least-squares root of an m-vector of equations in k <= m unknowns. A
/// residual function may return an empty vector to reject a point.
inline StackedSolution solve_stacked(const ResidualFunction& residuals, const std::vector<double>& x0,
                                     const SolveOptions& opts = {}) {
  const auto r0 = residuals(x0);
  if (r0.size() < x0.size())
    throw ValidationError("solve_stacked: " + std::to_string(r0.size()) + " equations for " +
                          std::to_string(x0.size()) + " unknowns");
  auto objective = [&](const std::vector<double>& x) {
    const auto r = residuals(x);
    if (r.empty()) return std::numeric_limits<double>::infinity();
    double s = 0.0;
    for (double v : r) s += v * v;
    return s;
  };
  const auto m = nelder_mead(objective, x0, opts);
  return {m.x, std::sqrt(m.value), m.converged};
}

struct GmmFit {
  std::vector<double> gamma;
  double criterion = 0.0;
  bool converged = false;
  std::size_t evaluations = 0;
};

/// Minimizes a criterion over a parameter set given by `admissible`; points
/// outside get +inf. Throws ConvergenceError when no run converged.
inline GmmFit gmm_minimize(const Objective& criterion, const std::function<bool(const std::vector<double>&)>& admissible,
                           const std::vector<double>& gamma0, const SolveOptions& opts) {
  if (!admissible(gamma0)) throw ValidationError("starting point " + detail::format_point(gamma0) + " is outside the parameter set");
  auto objective = [&](const std::vector<double>& g) {
    return admissible(g) ? criterion(g) : std::numeric_limits<double>::infinity();
  };
  const auto m = nelder_mead(objective, gamma0, opts);
  if (!m.converged)
    throw ConvergenceError("criterion minimization did not converge; best point " + detail::format_point(m.x), m.x,
                           m.value);
  return {m.x, m.value, true, m.evaluations};
}

}  // namespace ctc
