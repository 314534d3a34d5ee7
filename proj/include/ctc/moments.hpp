#pragma once

// Identification moments. For an integrand H_s = h_s * Y_T^0(gamma), with h an
// observed left-continuous factor, the orthogonal moment is
//   mu(t) = P_n[ Y_T^0(gamma) * sum_{k <= t} h_{k-1} dM_k ]
// and the weighting moment (treatment rate a, cross-sectional projection) is
//   mu(t) = P_n[ sum_{k <= t} (H_{k-1} - P_n H_{k-1}) / a_{k-1} dW_k ].
// The gamma-free per-subject sums are computed once; each criterion
// evaluation only recomputes Y_T^0(gamma).

#include <Eigen/Dense>

#include <cmath>
#include <sstream>
#include <string>
#include <vector>

#include "ctc/decompose.hpp"
#include "ctc/grid_paths.hpp"
#include "ctc/parallel.hpp"
#include "ctc/solve.hpp"
#include "ctc/structural.hpp"

namespace ctc {

// ---------------------------------------------------------------------------
// HSpec

struct HDescriptor {
  enum class Kind { base, covariate, treatment, outcome, power };
  Kind kind = Kind::base;
  std::size_t component = 0;  // 0-based, for covariate / treatment
  int power = 1;              // for power

  std::string name() const {
    switch (kind) {
      case Kind::base: return "base";
      case Kind::covariate: return "zw:" + std::to_string(component + 1);
      case Kind::treatment: return "ww:" + std::to_string(component + 1);
      case Kind::outcome: return "yw";
      case Kind::power: return "zpow:" + std::to_string(power);
    }
    return "?";
  }

  /// The observed factor h at grid index k.
  double factor(const SubjectTrajectory& s, std::size_t k) const {
    switch (kind) {
      case Kind::base: return 1.0;
      case Kind::covariate: return s.z(k, component);
      case Kind::treatment: return s.w(k, component);
      case Kind::outcome: return s.y(k);
      case Kind::power: return std::pow(s.z(k, 0), power);
    }
    return 0.0;
  }

  void check(const Ensemble& e) const {
    if ((kind == Kind::covariate || kind == Kind::power) && component >= e.covariate_dim())
      throw ValidationError("integrand " + name() + " refers to a missing covariate");
    if (kind == Kind::treatment && component >= e.treatment_dim())
      throw ValidationError("integrand " + name() + " refers to a missing treatment component");
  }
};

struct HSpec {
  std::vector<HDescriptor> items;

  std::size_t size() const noexcept { return items.size(); }

  std::string to_string() const {
    std::string out;
    for (const auto& d : items) out += (out.empty() ? "" : ",") + d.name();
    return out;
  }

  /// Parses a comma list: base, zw[:j], ww[:j], yw, zpow:i. Indices accept a
  /// range a..b, so `zpow:1..3` is three descriptors.
  static HSpec parse(const std::string& text) {
    HSpec spec;
    const auto last = text.find_last_not_of(" \t");
    if (last != std::string::npos && text[last] == ',') throw ValidationError("empty integrand in '" + text + "'");
    std::stringstream ss(text);
    for (std::string tok; std::getline(ss, tok, ',');) {
      tok.erase(0, tok.find_first_not_of(" \t"));
      tok.erase(tok.find_last_not_of(" \t") + 1);
      if (tok.empty()) throw ValidationError("empty integrand in '" + text + "'");
      const auto colon = tok.find(':');
      const std::string head = tok.substr(0, colon);
      int lo = 1, hi = 1;
      if (colon != std::string::npos) {
        const std::string arg = tok.substr(colon + 1);
        const auto dots = arg.find("..");
        try {
          std::size_t used = 0;
          lo = std::stoi(arg.substr(0, dots), &used);
          if (used != arg.substr(0, dots).size()) throw std::invalid_argument(arg);
          hi = lo;
          if (dots != std::string::npos) {
            hi = std::stoi(arg.substr(dots + 2), &used);
            if (used != arg.substr(dots + 2).size()) throw std::invalid_argument(arg);
          }
        } catch (const std::exception&) {
          throw ValidationError("bad index in integrand '" + tok + "'");
        }
        if (lo < 1 || hi < lo) throw ValidationError("bad index range in integrand '" + tok + "'");
      }
      using K = HDescriptor::Kind;
      for (int v = lo; v <= hi; ++v) {
        HDescriptor d;
        if (head == "base") d.kind = K::base;
        else if (head == "zw") d = {K::covariate, static_cast<std::size_t>(v - 1), 1};
        else if (head == "ww") d = {K::treatment, static_cast<std::size_t>(v - 1), 1};
        else if (head == "yw") d.kind = K::outcome;
        else if (head == "zpow") d = {K::power, 0, v};
        else throw ValidationError("unknown integrand '" + head + "' (expected base, zw, ww, yw, zpow)");
        if (colon != std::string::npos && (d.kind == K::base || d.kind == K::outcome))
          throw ValidationError("integrand '" + head + "' takes no index");
        spec.items.push_back(d);
      }
    }
    if (spec.items.empty()) throw ValidationError("empty integrand list");
    return spec;
  }
};

// ---------------------------------------------------------------------------
// Moment system

struct MomentReport {
  std::vector<double> times;
  std::vector<Eigen::MatrixXd> moments;      // d x q per time
  std::vector<Eigen::MatrixXd> std_errors;   // Monte Carlo standard errors, same shape
  double criterion = 0.0;
};

inline void require_positive_definite(const Eigen::MatrixXd& v, Eigen::Index dim) {
  if (v.rows() != dim || v.cols() != dim)
    throw ValidationError("weighting matrix must be " + std::to_string(dim) + "x" + std::to_string(dim));
  if (!v.isApprox(v.transpose(), 1e-12)) throw ValidationError("weighting matrix must be symmetric");
  Eigen::LLT<Eigen::MatrixXd> llt(v);
  if (llt.info() != Eigen::Success) throw ValidationError("weighting matrix is not positive definite");
}

class MomentSystem {
 public:
  enum class Method { orthogonal, weighting };

  /// Orthogonal moments against per-subject residual paths. The ensemble must
  /// outlive the system.
  static MomentSystem orthogonal(const Ensemble& ensemble, const std::vector<ResidualPath>& residuals, HSpec hspec,
                                 StructuralModel model, Eigen::MatrixXd v, std::vector<double> times) {
    MomentSystem sys(ensemble, std::move(hspec), std::move(model), std::move(v), std::move(times), Method::orthogonal);
    sys.check_paths(residuals, "residual");
    sys.build_orthogonal(residuals);
    return sys;
  }

  /// Inverse-rate weighting moments. Rates must stay at least 1e-8 away from 0.
  static MomentSystem weighting(const Ensemble& ensemble, const std::vector<SampledPath>& rates, HSpec hspec,
                                StructuralModel model, Eigen::MatrixXd v, std::vector<double> times) {
    MomentSystem sys(ensemble, std::move(hspec), std::move(model), std::move(v), std::move(times), Method::weighting);
    sys.check_paths(rates, "rate");
    sys.build_weighting(rates);
    return sys;
  }

  static constexpr double kPositivityFloor = 1e-8;

  std::size_t rows() const noexcept { return hspec_.size(); }
  std::size_t cols() const noexcept { return q_; }
  const std::vector<double>& times() const noexcept { return times_; }
  const StructuralModel& model() const noexcept { return model_; }
  Family family() const noexcept { return model_.family(); }
  Method method() const noexcept { return method_; }

  /// d x q moment matrices, one per evaluation time.
  std::vector<Eigen::MatrixXd> moments(const CausalParams& g) const {
    return evaluate(baseline_outcomes(*ensemble_, model_, g), nullptr);
  }

  /// Moments for given per-subject baseline outcomes Y_T^0 (in subject order).
  std::vector<Eigen::MatrixXd> moments_from_baseline(const std::vector<double>& y0) const {
    if (y0.size() != ensemble_->size()) throw ValidationError("baseline outcomes misaligned with the ensemble");
    return evaluate(y0, nullptr);
  }

  double criterion_of(const std::vector<Eigen::MatrixXd>& mus) const {
    double total = 0.0;
    for (const auto& mu : mus) {
      Eigen::VectorXd flat(rows() * q_);
      for (std::size_t r = 0; r < rows(); ++r)
        for (std::size_t j = 0; j < q_; ++j) flat(static_cast<Eigen::Index>(r * q_ + j)) = mu(r, j);
      total += flat.dot(v_ * flat);
    }
    return total;
  }

  double criterion(const CausalParams& g) const { return criterion_of(moments(g)); }

  MomentReport report(const CausalParams& g) const {
    MomentReport r;
    r.times = times_;
    r.moments = evaluate(baseline_outcomes(*ensemble_, model_, g), &r.std_errors);
    r.criterion = criterion_of(r.moments);
    return r;
  }

 private:
  MomentSystem(const Ensemble& e, HSpec hspec, StructuralModel model, Eigen::MatrixXd v, std::vector<double> times,
               Method method)
      : ensemble_(&e), hspec_(std::move(hspec)), model_(std::move(model)), v_(std::move(v)),
        times_(std::move(times)), method_(method), q_(e.treatment_dim()) {
    if (hspec_.items.empty()) throw ValidationError("no integrands");
    for (const auto& d : hspec_.items) d.check(e);
    if (!same_grid(model_.grid(), e.grid())) throw ValidationError("model grid does not match the ensemble");
    if (times_.empty()) throw ValidationError("no evaluation times");
    for (double t : times_) index_.push_back(e.grid()->require_index(t));
    require_positive_definite(v_, static_cast<Eigen::Index>(rows() * q_));
    k_max_ = *std::max_element(index_.begin(), index_.end());
  }

  void check_paths(const std::vector<SampledPath>& paths, const char* what) const {
    if (paths.size() != ensemble_->size())
      throw ValidationError(std::string(what) + " paths misaligned: " + std::to_string(paths.size()) + " for " +
                            std::to_string(ensemble_->size()) + " subjects");
    for (const auto& p : paths) {
      if (!same_grid(p.grid(), ensemble_->grid())) throw ValidationError(std::string(what) + " path on another grid");
      if (p.dim() != q_) throw ValidationError(std::string(what) + " path dimension does not match W");
    }
  }

  std::size_t slot(std::size_t m, std::size_t r, std::size_t j) const { return (m * rows() + r) * q_ + j; }

  void build_orthogonal(const std::vector<ResidualPath>& res) {
    const std::size_t n = ensemble_->size();
    sums_.assign(times_.size() * rows() * q_, std::vector<double>(n));
    parallel_for(n, [&](std::size_t i) {
      const auto& s = (*ensemble_)[i];
      std::vector<double> acc(rows() * q_, 0.0);
      for (std::size_t k = 1; k <= k_max_; ++k) {
        for (std::size_t r = 0; r < rows(); ++r) {
          const double h = hspec_.items[r].factor(s, k - 1);
          for (std::size_t j = 0; j < q_; ++j) acc[r * q_ + j] += h * (res[i](k, j) - res[i](k - 1, j));
        }
        for (std::size_t m = 0; m < times_.size(); ++m)
          if (index_[m] == k)
            for (std::size_t c = 0; c < rows() * q_; ++c) sums_[m * rows() * q_ + c][i] = acc[c];
      }
    });
  }

  void build_weighting(const std::vector<SampledPath>& rates) {
    const std::size_t n = ensemble_->size();
    const TimeGrid& g = *ensemble_->grid();
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t k = 0; k < k_max_; ++k)
        for (std::size_t j = 0; j < q_; ++j)
          if (!(std::abs(rates[i](k, j)) >= kPositivityFloor))
            throw PositivityError("treatment rate vanishes for subject " + std::to_string((*ensemble_)[i].id) +
                                  " at t = " + std::to_string(g[k]) +
                                  "; the weighting estimator needs a nonzero rate");
    sums_.assign(times_.size() * rows() * q_, std::vector<double>(n));
    scaled_inc_.assign(q_, std::vector<double>(n * k_max_));
    factors_.assign(rows(), std::vector<double>(n * k_max_));
    parallel_for(n, [&](std::size_t i) {
      const auto& s = (*ensemble_)[i];
      std::vector<double> acc(rows() * q_, 0.0);
      for (std::size_t k = 1; k <= k_max_; ++k) {
        for (std::size_t j = 0; j < q_; ++j)
          scaled_inc_[j][(k - 1) * n + i] = (s.w(k, j) - s.w(k - 1, j)) / rates[i](k - 1, j);
        for (std::size_t r = 0; r < rows(); ++r) {
          const double h = hspec_.items[r].factor(s, k - 1);
          factors_[r][(k - 1) * n + i] = h;
          for (std::size_t j = 0; j < q_; ++j) acc[r * q_ + j] += h * scaled_inc_[j][(k - 1) * n + i];
        }
        for (std::size_t m = 0; m < times_.size(); ++m)
          if (index_[m] == k)
            for (std::size_t c = 0; c < rows() * q_; ++c) sums_[m * rows() * q_ + c][i] = acc[c];
      }
    });
    inc_mean_.assign(q_, std::vector<double>(k_max_));
    for (std::size_t j = 0; j < q_; ++j)
      for (std::size_t k = 0; k < k_max_; ++k)
        inc_mean_[j][k] = sample_mean(std::span<const double>(scaled_inc_[j]).subspan(k * n, n));
  }

  std::vector<Eigen::MatrixXd> evaluate(const std::vector<double>& y0, std::vector<Eigen::MatrixXd>* std_errors) const {
    const std::size_t n = ensemble_->size();
    std::vector<Eigen::MatrixXd> out(times_.size(), Eigen::MatrixXd::Zero(rows(), q_));
    if (std_errors) std_errors->assign(times_.size(), Eigen::MatrixXd::Zero(rows(), q_));
    std::vector<double> buf(n);

    // projection means P_n[h_{k-1} Y0] for the weighting form
    std::vector<std::vector<double>> proj;
    if (method_ == Method::weighting) {
      proj.assign(rows(), std::vector<double>(k_max_));
      for (std::size_t r = 0; r < rows(); ++r)
        for (std::size_t k = 0; k < k_max_; ++k) {
          for (std::size_t i = 0; i < n; ++i) buf[i] = factors_[r][k * n + i] * y0[i];
          proj[r][k] = sample_mean(buf);
        }
    }

    for (std::size_t m = 0; m < times_.size(); ++m) {
      for (std::size_t r = 0; r < rows(); ++r) {
        for (std::size_t j = 0; j < q_; ++j) {
          const auto& s = sums_[slot(m, r, j)];
          for (std::size_t i = 0; i < n; ++i) buf[i] = y0[i] * s[i];
          double value = sample_mean(buf);
          if (method_ == Method::weighting) {
            double correction = 0.0;
            for (std::size_t k = 0; k < index_[m]; ++k) correction += proj[r][k] * inc_mean_[j][k];
            value -= correction;
            if (std_errors) {
              for (std::size_t i = 0; i < n; ++i) {
                double c = 0.0;
                for (std::size_t k = 0; k < index_[m]; ++k) c += proj[r][k] * scaled_inc_[j][k * n + i];
                buf[i] -= c;
              }
            }
          }
          out[m](r, j) = value;
          if (std_errors) (*std_errors)[m](r, j) = mean_and_error(buf).std_error;
        }
      }
    }
    return out;
  }

  const Ensemble* ensemble_;
  HSpec hspec_;
  StructuralModel model_;
  Eigen::MatrixXd v_;
  std::vector<double> times_;
  std::vector<std::size_t> index_;
  Method method_;
  std::size_t q_;
  std::size_t k_max_ = 0;
  std::vector<std::vector<double>> sums_;        // [time, row, col] -> per-subject sum
  std::vector<std::vector<double>> scaled_inc_;  // [col] -> (k, subject) dW / a
  std::vector<std::vector<double>> factors_;     // [row] -> (k, subject) h
  std::vector<std::vector<double>> inc_mean_;    // [col][k] P_n[dW / a]
};

inline Eigen::MatrixXd identity_weight(const HSpec& hspec, std::size_t q) {
  const auto dim = static_cast<Eigen::Index>(hspec.size() * q);
  return Eigen::MatrixXd::Identity(dim, dim);
}

/// d x q matrix of orthogonal moments at time t.
inline Eigen::MatrixXd mu_hat(const Ensemble& ensemble, const std::vector<ResidualPath>& residuals, const HSpec& hspec,
                              const StructuralModel& model, const CausalParams& g, double t) {
  return MomentSystem::orthogonal(ensemble, residuals, hspec, model, identity_weight(hspec, ensemble.treatment_dim()),
                                  {t})
      .moments(g)
      .front();
}

inline double criterion_gn(const Ensemble& ensemble, const std::vector<ResidualPath>& residuals, const HSpec& hspec,
                           const StructuralModel& model, const CausalParams& g, const Eigen::MatrixXd& v,
                           const std::vector<double>& times) {
  return MomentSystem::orthogonal(ensemble, residuals, hspec, model, v, times).criterion(g);
}

inline Eigen::MatrixXd weighting_mu_hat(const Ensemble& ensemble, const std::vector<SampledPath>& rates,
                                        const HSpec& hspec, const StructuralModel& model, const CausalParams& g,
                                        double t) {
  return MomentSystem::weighting(ensemble, rates, hspec, model, identity_weight(hspec, ensemble.treatment_dim()), {t})
      .moments(g)
      .front();
}

// ---------------------------------------------------------------------------
// GMM fit

struct GmmResult {
  CausalParams gamma;
  double criterion = 0.0;
  MomentReport report;
};

inline GmmResult gmm_fit(const MomentSystem& system, const CausalParams& gamma0, const SolveOptions& opts = {}) {
  require_domain(gamma0);
  if (gamma0.family != system.family()) throw ValidationError("starting point family does not match the model");
  const Family fam = gamma0.family;
  auto wrap = [fam](const std::vector<double>& x) { return CausalParams{fam, x}; };
  const auto fit = gmm_minimize([&](const std::vector<double>& x) { return system.criterion(wrap(x)); },
                                [&](const std::vector<double>& x) { return in_domain(wrap(x)); }, gamma0.values, opts);
  GmmResult out;
  out.gamma = wrap(fit.gamma);
  out.criterion = fit.criterion;
  out.report = system.report(out.gamma);
  return out;
}

// ---------------------------------------------------------------------------
// No-information-drift diagnostic

struct NidStatistic {
  double s = 0.0;
  double t = 0.0;
  std::size_t component = 0;
  std::string regressor;
  double coef = 0.0;
  double std_error = 0.0;
  double stat = 0.0;
  bool flag = false;  // |stat| > 3 on the baseline-outcome regressor
};

struct NidReport {
  std::vector<NidStatistic> stats;
  bool flagged = false;             // any baseline-outcome flag
  bool history_exceeds = false;     // any history regressor with |stat| > 3
  double max_abs_stat = 0.0;        // over all regressors except the intercept
};

/// Regresses residual increments M_t - M_s on (1, Y_T^0(gamma_ref), W_s, Y_s,
/// Z_s) for each lag pair. Under no information drift every slope is zero; the
/// flag is raised by the Y^0 slope only.
inline NidReport nid_diagnostic(const Ensemble& ensemble, const std::vector<ResidualPath>& residuals,
                                const StructuralModel& model, const CausalParams& gamma_ref,
                                const std::vector<std::pair<double, double>>& lags, bool include_z = true,
                                double threshold = 3.0) {
  if (lags.empty()) throw ValidationError("no lag pairs");
  if (residuals.size() != ensemble.size()) throw ValidationError("residual paths misaligned with the ensemble");
  const std::size_t n = ensemble.size();
  const std::size_t q = ensemble.treatment_dim();
  const std::size_t r = include_z ? ensemble.covariate_dim() : 0;
  const auto y0 = baseline_outcomes(ensemble, model, gamma_ref);
  std::vector<std::string> names{"intercept", "Y0_T"};
  for (std::size_t j = 0; j < q; ++j) names.push_back(q == 1 ? "W_s" : "W" + std::to_string(j + 1) + "_s");
  names.push_back("Y_s");
  for (std::size_t j = 0; j < r; ++j) names.push_back(r == 1 ? "Z_s" : "Z" + std::to_string(j + 1) + "_s");
  const auto p = static_cast<Eigen::Index>(names.size());
  if (n <= static_cast<std::size_t>(p)) throw ValidationError("too few subjects for the diagnostic regression");

  NidReport report;
  const TimeGrid& g = *ensemble.grid();
  for (const auto& [s, t] : lags) {
    const std::size_t ks = g.require_index(s);
    const std::size_t kt = g.require_index(t);
    if (!(ks < kt)) throw ValidationError("lag pairs need s < t");
    Eigen::MatrixXd x(static_cast<Eigen::Index>(n), p);
    for (std::size_t i = 0; i < n; ++i) {
      const auto& sub = ensemble[i];
      const auto row = static_cast<Eigen::Index>(i);
      Eigen::Index c = 0;
      x(row, c++) = 1.0;
      x(row, c++) = y0[i];
      for (std::size_t j = 0; j < q; ++j) x(row, c++) = sub.w(ks, j);
      x(row, c++) = sub.y(ks);
      for (std::size_t j = 0; j < r; ++j) x(row, c++) = sub.z(ks, j);
    }
    Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(x);
    qr.setThreshold(1e-10);
    if (qr.rank() < p) {
      const auto bad = qr.colsPermutation().indices()(qr.rank());
      throw ValidationError("degenerate regressor " + names[static_cast<std::size_t>(bad)] + " at s = " +
                            std::to_string(s));
    }
    const Eigen::MatrixXd xtx_inv = (x.transpose() * x).inverse();
    for (std::size_t j = 0; j < q; ++j) {
      Eigen::VectorXd y(static_cast<Eigen::Index>(n));
      for (std::size_t i = 0; i < n; ++i) y(static_cast<Eigen::Index>(i)) = residuals[i](kt, j) - residuals[i](ks, j);
      const double mean = y.mean();
      if (!((y.array() - mean).square().sum() > 0.0))
        throw ValidationError("degenerate variance: residual increments are constant on (" + std::to_string(s) + ", " +
                              std::to_string(t) + "]");
      const Eigen::VectorXd beta = qr.solve(y);
      const double sigma2 = (y - x * beta).squaredNorm() / static_cast<double>(n - static_cast<std::size_t>(p));
      for (Eigen::Index c = 0; c < p; ++c) {
        NidStatistic st;
        st.s = s;
        st.t = t;
        st.component = j;
        st.regressor = names[static_cast<std::size_t>(c)];
        st.coef = beta(c);
        st.std_error = std::sqrt(sigma2 * xtx_inv(c, c));
        st.stat = st.std_error > 0.0 ? st.coef / st.std_error : 0.0;
        const bool exceeds = std::abs(st.stat) > threshold;
        if (c == 1) {
          st.flag = exceeds;
          report.flagged = report.flagged || exceeds;
        } else if (c > 1) {
          report.history_exceeds = report.history_exceeds || exceeds;
        }
        if (c > 0) report.max_abs_stat = std::max(report.max_abs_stat, std::abs(st.stat));
        report.stats.push_back(st);
      }
    }
  }
  return report;
}

}  // namespace ctc
