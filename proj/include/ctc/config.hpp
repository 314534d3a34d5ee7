#pragma once

// Data-generating process configurations and the flat key=value parameter file.

#include <Eigen/Dense>

#include <cstdint>
#include <istream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <variant>
#include <vector>

#include "ctc/error.hpp"

namespace ctc {

enum class Family { discrete, ou, tte, posint };

inline std::string to_string(Family f) {
  switch (f) {
    case Family::discrete: return "discrete";
    case Family::ou: return "ou";
    case Family::tte: return "tte";
    case Family::posint: return "posint";
  }
  return "?";
}

inline Family parse_family(const std::string& s) {
  if (s == "discrete") return Family::discrete;
  if (s == "ou") return Family::ou;
  if (s == "tte") return Family::tte;
  if (s == "posint") return Family::posint;
  throw ValidationError("unknown family '" + s + "' (expected discrete|ou|tte|posint)");
}

/// Three-dimensional OU system for (Y, W, Z): d(Y,W,Z) = -beta (Y,W,Z) dt + sigma dB
/// with a two-dimensional Brownian motion B = (B1, B2). B1 drives Y and Z, B2
/// drives W only.
struct OuConfig {
  Eigen::Matrix3d beta;
  Eigen::Matrix<double, 3, 2> sigma;
  Eigen::Vector3d init_mean = Eigen::Vector3d::Zero();
  Eigen::Matrix3d init_cov = Eigen::Matrix3d::Identity();
  double horizon = 1.0;
  std::size_t steps = 200;

  /// The simulation-study system: beta*, sigma*, MVN(0, I) start, T = 1.
  static OuConfig reference() {
    OuConfig c;
    c.beta << 1.0, -0.5, 0.2,  //
        -0.7, 1.0, -0.6,       //
        0.3, 0.2, 1.0;
    c.sigma << 0.1, 0.0,  //
        0.0, 0.1,         //
        0.1, 0.0;
    return c;
  }

  void validate() const {
    if (!(horizon > 0.0)) throw ValidationError("ou: T must be positive");
    if (steps == 0) throw ValidationError("ou: steps must be positive");
    if (sigma(0, 1) != 0.0 || sigma(1, 0) != 0.0 || sigma(2, 1) != 0.0)
      throw ValidationError("ou: sigma must be zero at (1,2), (2,1), (3,2): treatment and outcome share no noise");
    if (!init_cov.isApprox(init_cov.transpose(), 1e-12)) throw ValidationError("ou: init_cov must be symmetric");
    Eigen::SelfAdjointEigenSolver<Eigen::Matrix3d> es(init_cov);
    if (es.eigenvalues().minCoeff() < -1e-12) throw ValidationError("ou: init_cov must be positive semi-definite");
  }
};

/// Discrete-time DGP embedded as step paths over J periods:
///   Z'_k = ar_z Z'_{k-1} + zeta_k
///   W'_k = rho_w W'_{k-1} + load_z Z'_{k-1} + load_y Y'_{k-1} + u_k
///   Y'_k = eta0 + eta1 (T/J) sum_{i<k} W'_i + Z'_{k-1} + eps_k
/// with period-0 values Z'_0 = zeta_0, W'_0 = u_0, Y'_0 = eta0 + eps_0.
struct DiscreteConfig {
  std::size_t periods = 10;
  double eta0 = 0.0;
  double eta1 = 1.5;
  double ar_z = 0.8;
  double rho_w = 0.5;
  double load_y = 0.2;
  double load_z = 0.3;
  double sd_zeta = 0.5;
  double sd_u = 0.5;
  double sd_eps = 0.5;
  double horizon = 1.0;

  void validate() const {
    if (periods == 0) throw ValidationError("discrete: J must be at least 1");
    if (!(horizon > 0.0)) throw ValidationError("discrete: T must be positive");
    if (sd_zeta < 0.0 || sd_u < 0.0 || sd_eps < 0.0) throw ValidationError("discrete: noise sds must be non-negative");
  }
};

/// Time-to-event DGP: Z = alpha0 B; treatment starts at the first unit-rate
/// Poisson event after Z reaches alpha1; the outcome event happens when Z
/// reaches alpha2 unless treatment already started.
struct TteConfig {
  double alpha0 = 1.0;
  double alpha1 = 0.5;
  double alpha2 = 1.0;
  double horizon = 1.0;
  std::size_t steps = 200;

  void validate() const {
    if (!(alpha0 > 0.0)) throw ValidationError("tte: alpha0 must be positive");
    if (!(0.0 < alpha1 && alpha1 < alpha2)) throw ValidationError("tte: need 0 < alpha1 < alpha2");
    if (!(horizon > 0.0) || steps == 0) throw ValidationError("tte: invalid T or steps");
  }
};

/// Positive-intensity DGP: Z is a standard Brownian motion, the treatment
/// accumulates lambda * exp(clamp(Z_- + Y_-)) at each unit-rate Poisson event,
/// and Y_t = eta1 * int_0^t W ds + Z_t.
struct PosIntConfig {
  double lambda = 0.5;
  double eta1 = 0.8;
  double clamp_lo = -3.0;
  double clamp_hi = 3.0;
  double horizon = 1.0;
  std::size_t steps = 200;

  void validate() const {
    if (!(lambda > 0.0)) throw ValidationError("posint: lambda must be positive");
    if (!(clamp_lo < clamp_hi)) throw ValidationError("posint: need clamp_lo < clamp_hi");
    if (!(horizon > 0.0) || steps == 0) throw ValidationError("posint: invalid T or steps");
  }
};

using DgpConfig = std::variant<DiscreteConfig, OuConfig, TteConfig, PosIntConfig>;

inline Family family_of(const DgpConfig& c) {
  return std::visit(
      [](const auto& cfg) {
        using T = std::decay_t<decltype(cfg)>;
        if constexpr (std::is_same_v<T, DiscreteConfig>) return Family::discrete;
        else if constexpr (std::is_same_v<T, OuConfig>) return Family::ou;
        else if constexpr (std::is_same_v<T, TteConfig>) return Family::tte;
        else return Family::posint;
      },
      c);
}

inline DgpConfig default_config(Family f) {
  switch (f) {
    case Family::discrete: return DiscreteConfig{};
    case Family::ou: return OuConfig::reference();
    case Family::tte: return TteConfig{};
    case Family::posint: return PosIntConfig{};
  }
  throw ValidationError("unknown family");
}

/// Contents of a key=value parameter file. Lines are `key = v1 v2 ...` (commas
/// or blanks separate list values); `#` starts a comment.
struct ParamFile {
  std::map<std::string, std::vector<std::string>> entries;

  bool has(const std::string& key) const { return entries.count(key) > 0; }

  std::vector<double> numbers(const std::string& key) const {
    std::vector<double> out;
    for (const auto& tok : entries.at(key)) {
      try {
        std::size_t used = 0;
        out.push_back(std::stod(tok, &used));
        if (used != tok.size()) throw std::invalid_argument(tok);
      } catch (const std::exception&) {
        throw ValidationError("parameter '" + key + "': non-numeric value '" + tok + "'");
      }
    }
    return out;
  }

  double scalar(const std::string& key) const {
    const auto v = numbers(key);
    if (v.size() != 1) throw ValidationError("parameter '" + key + "' expects one value");
    return v.front();
  }

  std::uint64_t count(const std::string& key) const {
    const double v = scalar(key);
    if (v < 0 || v != static_cast<double>(static_cast<std::uint64_t>(v)))
      throw ValidationError("parameter '" + key + "' expects a non-negative integer");
    return static_cast<std::uint64_t>(v);
  }
};

inline ParamFile parse_param_file(std::istream& in) {
  static const std::set<std::string> known = {"dgp",    "T",      "steps",  "n",      "seed",   "beta",
                                              "sigma",  "init_mean", "init_cov", "J", "eta0",  "eta1",
                                              "alpha0", "alpha1", "alpha2", "lambda", "clamp_lo", "clamp_hi"};
  ParamFile pf;
  std::string line;
  std::size_t row = 0;
  while (std::getline(in, line)) {
    ++row;
    if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ParseError("expected key=value", row, 0);
    auto trim = [](std::string s) {
      const auto a = s.find_first_not_of(" \t\r");
      const auto b = s.find_last_not_of(" \t\r");
      return a == std::string::npos ? std::string() : s.substr(a, b - a + 1);
    };
    const std::string key = trim(line.substr(0, eq));
    if (!known.count(key)) throw ParseError("unknown key '" + key + "'", row, 1);
    std::string rest = line.substr(eq + 1);
    for (char& ch : rest)
      if (ch == ',') ch = ' ';
    std::istringstream ss(rest);
    std::vector<std::string> values;
    for (std::string tok; ss >> tok;) values.push_back(tok);
    if (values.empty()) throw ParseError("key '" + key + "' has no value", row, 0);
    pf.entries[key] = std::move(values);
  }
  return pf;
}

/// Builds the configuration for `family`, starting from its defaults and
/// overriding with every key present in the file.
inline DgpConfig config_from_params(Family family, const ParamFile& pf) {
  auto take = [&](const char* key, double& dst) {
    if (pf.has(key)) dst = pf.scalar(key);
  };
  auto take_steps = [&](const char* key, std::size_t& dst) {
    if (pf.has(key)) dst = static_cast<std::size_t>(pf.count(key));
  };
  auto fixed = [&](const char* key, std::size_t len) {
    auto v = pf.numbers(key);
    if (v.size() != len)
      throw ValidationError(std::string("parameter '") + key + "' expects " + std::to_string(len) + " values");
    return v;
  };
  DgpConfig cfg = default_config(family);
  std::visit(
      [&](auto& c) {
        using C = std::decay_t<decltype(c)>;
        take("T", c.horizon);
        if constexpr (std::is_same_v<C, DiscreteConfig>) {
          take_steps("J", c.periods);
          take("eta0", c.eta0);
          take("eta1", c.eta1);
        } else if constexpr (std::is_same_v<C, OuConfig>) {
          take_steps("steps", c.steps);
          if (pf.has("beta")) {
            const auto v = fixed("beta", 9);
            for (int i = 0; i < 9; ++i) c.beta(i / 3, i % 3) = v[i];
          }
          if (pf.has("sigma")) {
            const auto v = fixed("sigma", 6);
            for (int i = 0; i < 6; ++i) c.sigma(i / 2, i % 2) = v[i];
          }
          if (pf.has("init_mean")) {
            const auto v = fixed("init_mean", 3);
            for (int i = 0; i < 3; ++i) c.init_mean(i) = v[i];
          }
          if (pf.has("init_cov")) {
            const auto v = fixed("init_cov", 9);
            for (int i = 0; i < 9; ++i) c.init_cov(i / 3, i % 3) = v[i];
          }
        } else if constexpr (std::is_same_v<C, TteConfig>) {
          take_steps("steps", c.steps);
          take("alpha0", c.alpha0);
          take("alpha1", c.alpha1);
          take("alpha2", c.alpha2);
        } else {
          take_steps("steps", c.steps);
          take("lambda", c.lambda);
          take("eta1", c.eta1);
          take("clamp_lo", c.clamp_lo);
          take("clamp_hi", c.clamp_hi);
        }
        c.validate();
      },
      cfg);
  return cfg;
}

/// Number of grid steps the simulator uses for a configuration.
inline std::size_t config_steps(const DgpConfig& c) {
  return std::visit(
      [](const auto& cfg) -> std::size_t {
        if constexpr (std::is_same_v<std::decay_t<decltype(cfg)>, DiscreteConfig>) return cfg.periods;
        else return cfg.steps;
      },
      c);
}

inline double config_horizon(const DgpConfig& c) {
  return std::visit([](const auto& cfg) { return cfg.horizon; }, c);
}

}  // namespace ctc
