#pragma once

// Time meshes, step-function (cadlag) sampled paths, subject trajectories and
// ensembles, plus the two path integrals everything else is built from: the
// predictable (Ito) sum and the left-endpoint Riemann sum.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "ctc/error.hpp"

namespace ctc {

/// Strictly increasing mesh 0 = t_0 < t_1 < ... < t_L = T with L >= 1.
class TimeGrid {
 public:
  explicit TimeGrid(std::vector<double> points) : points_(std::move(points)) {
    if (points_.size() < 2) throw ValidationError("time grid needs at least two points");
    if (points_.front() != 0.0) throw ValidationError("time grid must start at 0");
    for (std::size_t k = 1; k < points_.size(); ++k)
      if (!(points_[k] > points_[k - 1])) throw ValidationError("time grid must be strictly increasing");
    if (!std::isfinite(points_.back())) throw ValidationError("time grid horizon must be finite");
  }

  std::size_t size() const noexcept { return points_.size(); }
  std::size_t steps() const noexcept { return points_.size() - 1; }
  double horizon() const noexcept { return points_.back(); }
  double operator[](std::size_t k) const { return points_[k]; }
  double step(std::size_t k) const { return points_[k] - points_[k - 1]; }  // length of (t_{k-1}, t_k]
  std::span<const double> points() const noexcept { return points_; }

  /// Index of a grid point, matched with a tolerance of 1e-9 relative to T.
  std::optional<std::size_t> index_of(double t) const {
    const double tol = 1e-9 * std::max(1.0, horizon());
    auto it = std::lower_bound(points_.begin(), points_.end(), t - tol);
    if (it == points_.end() || std::abs(*it - t) > tol) return std::nullopt;
    return static_cast<std::size_t>(it - points_.begin());
  }

  std::size_t require_index(double t) const {
    if (auto k = index_of(t)) return *k;
    throw ValidationError("time " + std::to_string(t) + " is not a grid point");
  }

  bool operator==(const TimeGrid& other) const { return points_ == other.points_; }

 private:
  std::vector<double> points_;
};

using GridPtr = std::shared_ptr<const TimeGrid>;

/// points k * horizon / steps, k = 0..steps; the last point is exactly horizon.
inline GridPtr make_uniform_grid(double horizon, std::size_t steps) {
  if (!(horizon > 0.0) || !std::isfinite(horizon)) throw ValidationError("grid horizon must be positive");
  if (steps == 0) throw ValidationError("grid needs at least one step");
  std::vector<double> pts(steps + 1);
  for (std::size_t k = 0; k <= steps; ++k)
    pts[k] = k == steps ? horizon : horizon * static_cast<double>(k) / static_cast<double>(steps);
  return std::make_shared<const TimeGrid>(std::move(pts));
}

inline bool same_grid(const GridPtr& a, const GridPtr& b) { return a == b || (a && b && *a == *b); }

/// An m-dimensional step function on a grid: the value at t_k holds on
/// [t_k, t_{k+1}); the left limit at t_k is the value at t_{k-1} (and at t_0 it
/// is the value at t_0 itself).
class SampledPath {
 public:
  SampledPath() = default;
  SampledPath(GridPtr grid, std::size_t dim) : grid_(std::move(grid)), dim_(dim) {
    check();
    values_.assign(grid_->size() * dim_, 0.0);
  }
  SampledPath(GridPtr grid, std::size_t dim, std::vector<double> values)
      : grid_(std::move(grid)), dim_(dim), values_(std::move(values)) {
    check();
    if (values_.size() != grid_->size() * dim_)
      throw ValidationError("path length does not match its grid");
  }

  static SampledPath constant(GridPtr grid, double value, std::size_t dim = 1) {
    SampledPath p(std::move(grid), dim);
    std::fill(p.values_.begin(), p.values_.end(), value);
    return p;
  }

  const GridPtr& grid() const noexcept { return grid_; }
  std::size_t dim() const noexcept { return dim_; }
  std::size_t size() const noexcept { return grid_ ? grid_->size() : 0; }
  std::span<const double> values() const noexcept { return values_; }

  double operator()(std::size_t k, std::size_t j = 0) const { return values_[k * dim_ + j]; }
  double& at(std::size_t k, std::size_t j = 0) { return values_[k * dim_ + j]; }
  double left_limit(std::size_t k, std::size_t j = 0) const { return (*this)(k == 0 ? 0 : k - 1, j); }
  double terminal(std::size_t j = 0) const { return (*this)(size() - 1, j); }

  SampledPath component(std::size_t j) const {
    SampledPath out(grid_, 1);
    for (std::size_t k = 0; k < size(); ++k) out.values_[k] = (*this)(k, j);
    return out;
  }

  bool operator==(const SampledPath& other) const {
    return dim_ == other.dim_ && same_grid(grid_, other.grid_) && values_ == other.values_;
  }

 private:
  void check() const {
    if (!grid_) throw ValidationError("path without a grid");
    if (dim_ == 0) throw ValidationError("path dimension must be at least 1");
  }

  GridPtr grid_;
  std::size_t dim_ = 1;
  std::vector<double> values_;
};

namespace detail {
inline void require_same_grid(const SampledPath& a, const SampledPath& b, const char* what) {
  if (!same_grid(a.grid(), b.grid())) throw ValidationError(std::string(what) + ": paths live on different grids");
}
}  // namespace detail

/// Sum over increments (t_{k-1}, t_k], k <= k_end, of integrand(t_{k-1}) times
/// the integrator increment. Component j of each path.
inline double ito_sum_to(const SampledPath& integrand, const SampledPath& integrator, std::size_t k_end,
                         std::size_t integrand_j = 0, std::size_t integrator_j = 0) {
  detail::require_same_grid(integrand, integrator, "ito_sum");
  double s = 0.0;
  for (std::size_t k = 1; k <= k_end; ++k)
    s += integrand(k - 1, integrand_j) * (integrator(k, integrator_j) - integrator(k - 1, integrator_j));
  return s;
}

inline double ito_sum(const SampledPath& integrand, const SampledPath& integrator, double upto) {
  detail::require_same_grid(integrand, integrator, "ito_sum");
  return ito_sum_to(integrand, integrator, integrand.grid()->require_index(upto));
}

/// Left-endpoint rule: sum of values[k-1] * (t_k - t_{k-1}) for k <= k_end.
inline double riemann_integral_to(const SampledPath& path, std::size_t k_end, std::size_t j = 0) {
  const TimeGrid& g = *path.grid();
  double s = 0.0;
  for (std::size_t k = 1; k <= k_end; ++k) s += path(k - 1, j) * g.step(k);
  return s;
}

inline double riemann_integral(const SampledPath& path, double upto) {
  return riemann_integral_to(path, path.grid()->require_index(upto));
}

/// Observed data for one subject: treatment W (q-dim), outcome Y (scalar) and
/// covariates Z ((p-1)-dim, possibly zero-dim in which case z is empty).
struct SubjectTrajectory {
  std::int64_t id = 0;
  SampledPath w;
  SampledPath y;
  SampledPath z;

  bool has_covariates() const noexcept { return z.size() > 0; }
  const GridPtr& grid() const noexcept { return w.grid(); }

  void validate() const {
    if (!same_grid(w.grid(), y.grid()) || (has_covariates() && !same_grid(w.grid(), z.grid())))
      throw ValidationError("subject " + std::to_string(id) + ": W, Y, Z on different grids");
    if (y.dim() != 1) throw ValidationError("outcome must be scalar");
  }

  bool operator==(const SubjectTrajectory& o) const {
    return id == o.id && w == o.w && y == o.y && has_covariates() == o.has_covariates() &&
           (!has_covariates() || z == o.z);
  }
};

struct EnsembleMeta {
  std::uint64_t seed = 0;
  std::string label;
};

/// n >= 1 subjects sharing one grid; the empirical measure P_n.
class Ensemble {
 public:
  Ensemble(GridPtr grid, std::vector<SubjectTrajectory> subjects, EnsembleMeta meta = {})
      : grid_(std::move(grid)), subjects_(std::move(subjects)), meta_(std::move(meta)) {
    if (!grid_) throw ValidationError("ensemble without a grid");
    if (subjects_.empty()) throw ValidationError("ensemble must contain at least one subject");
    const auto& first = subjects_.front();
    for (const auto& s : subjects_) {
      s.validate();
      if (!same_grid(s.grid(), grid_)) throw ValidationError("subject " + std::to_string(s.id) + ": grid mismatch");
      if (s.w.dim() != first.w.dim() || s.has_covariates() != first.has_covariates() ||
          (s.has_covariates() && s.z.dim() != first.z.dim()))
        throw ValidationError("subject " + std::to_string(s.id) + ": path dimensions differ from subject 0");
    }
  }

  const GridPtr& grid() const noexcept { return grid_; }
  std::size_t size() const noexcept { return subjects_.size(); }
  const SubjectTrajectory& operator[](std::size_t i) const { return subjects_[i]; }
  const std::vector<SubjectTrajectory>& subjects() const noexcept { return subjects_; }
  const EnsembleMeta& meta() const noexcept { return meta_; }
  std::size_t treatment_dim() const { return subjects_.front().w.dim(); }
  std::size_t covariate_dim() const {
    return subjects_.front().has_covariates() ? subjects_.front().z.dim() : 0;
  }

  /// Equality of observable content (grid, ids, values); metadata is ignored.
  bool operator==(const Ensemble& o) const { return same_grid(grid_, o.grid_) && subjects_ == o.subjects_; }

 private:
  GridPtr grid_;
  std::vector<SubjectTrajectory> subjects_;
  EnsembleMeta meta_;
};

}  // namespace ctc
