#pragma once

// Two-timescale relaxation model of per-layer spectral state: stable rank
// relaxes quickly toward a shared target behind a layer-dependent wave front,
// alpha relaxes slowly toward layer-specific targets.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <ostream>
#include <random>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "spectral/error.hpp"
#include "spectral/timelapse.hpp"

namespace spectral {

/// Logistic wave front: layer l is switched on around t = offset + tau_per_layer * l.
/// A large negative offset gives phi = 1 everywhere.
struct PhiSpec {
  double tau_per_layer = 100.0;
  double width = 20.0;
  double offset = 0.0;
};

inline double default_phi(int layer, double t, const PhiSpec& spec) {
  const double z = (t - spec.offset - spec.tau_per_layer * layer) / spec.width;
  if (z >= 0.0) return 1.0 / (1.0 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1.0 + e);
}

/// Piecewise-linear tent: alpha_lo at layer 0, alpha_hi at round(peak_ratio * (L-1)),
/// back to alpha_lo at layer L-1.
inline std::vector<double> default_alpha_star(int layers, double peak_ratio, double alpha_lo, double alpha_hi) {
  if (layers <= 0) throw SpectralError(ErrorCode::InvalidConfig, "layer count must be positive");
  if (!(peak_ratio >= 0.0 && peak_ratio <= 1.0)) throw SpectralError(ErrorCode::InvalidConfig, "peak_ratio outside [0, 1]");
  if (!(alpha_hi > alpha_lo)) throw SpectralError(ErrorCode::InvalidConfig, "alpha_hi must exceed alpha_lo");
  const int last = layers - 1;
  const int peak = static_cast<int>(std::lround(peak_ratio * last));
  std::vector<double> out(static_cast<std::size_t>(layers));
  for (int l = 0; l < layers; ++l) {
    double frac;
    if (l <= peak) {
      frac = peak == 0 ? 1.0 : static_cast<double>(l) / peak;
    } else {
      frac = 1.0 - static_cast<double>(l - peak) / (last - peak);
    }
    out[static_cast<std::size_t>(l)] = alpha_lo + (alpha_hi - alpha_lo) * frac;
  }
  return out;
}

struct SimParams {
  int layers = 8;
  int steps = 5000;
  double dt = 1.0;
  double lambda_R = 0.05;
  double lambda_alpha = 0.002;
  double R_star = 20.0;
  std::optional<std::vector<double>> R_star_per_layer;  // extension; overrides R_star
  std::vector<double> alpha_star;
  PhiSpec phi;
  std::vector<double> psi;  // per-layer gains, default all 1
  double noise_sigma_R = 0.0;
  double noise_sigma_alpha = 0.0;
  std::uint64_t seed = 0;
  std::vector<double> R_init;
  std::vector<double> alpha_init;

  double r_star(int layer) const {
    return R_star_per_layer ? (*R_star_per_layer)[static_cast<std::size_t>(layer)] : R_star;
  }
};

/// 8 layers, R from 100 toward 20 behind a 100-steps-per-layer front, alpha from
/// a flat 0.1 toward an inverted-U peaking at layer 3.
inline SimParams default_sim_params() {
  SimParams p;
  p.alpha_star = default_alpha_star(p.layers, 0.43, 0.2, 0.46);
  p.psi.assign(static_cast<std::size_t>(p.layers), 1.0);
  p.R_init.assign(static_cast<std::size_t>(p.layers), 100.0);
  p.alpha_init.assign(static_cast<std::size_t>(p.layers), 0.1);
  return p;
}

/// Throws InvalidConfig on unusable parameters; returns non-fatal warnings.
inline std::vector<std::string> validate(const SimParams& p) {
  auto fail = [](const std::string& msg) { throw SpectralError(ErrorCode::InvalidConfig, msg); };
  if (p.layers <= 0) fail("layers must be positive");
  if (p.steps < 1) fail("steps must be >= 1");
  if (!(p.dt > 0.0)) fail("dt must be positive");
  if (!(p.lambda_R >= 0.0) || !(p.lambda_alpha >= 0.0)) fail("rates must be nonnegative");
  if (p.dt * p.lambda_R >= 2.0) fail("dt * lambda_R >= 2: explicit Euler is unstable");
  if (!(p.phi.width > 0.0)) fail("phi width must be positive");
  if (p.noise_sigma_R < 0.0 || p.noise_sigma_alpha < 0.0) fail("noise scales must be nonnegative");
  const auto L = static_cast<std::size_t>(p.layers);
  if (p.alpha_star.size() != L) fail("alpha_star needs one value per layer");
  if (p.psi.size() != L) fail("psi needs one value per layer");
  if (p.R_init.size() != L) fail("R_init needs one value per layer");
  if (p.alpha_init.size() != L) fail("alpha_init needs one value per layer");
  if (p.R_star_per_layer && p.R_star_per_layer->size() != L) fail("R_star_per_layer needs one value per layer");
  std::vector<std::string> warnings;
  if (!(p.lambda_R > p.lambda_alpha)) warnings.emplace_back("lambda_R <= lambda_alpha: no timescale separation");
  return warnings;
}

struct SimTrajectory {
  std::vector<double> times;
  Eigen::MatrixXd R;      // time x layer
  Eigen::MatrixXd alpha;  // time x layer
};

/// Forward Euler with additive Gaussian noise scaled by sqrt(dt). At each step
/// and layer one normal draw is taken for R, then one for alpha, from a single
/// mt19937_64 seeded with `seed`.
inline SimTrajectory simulate(const SimParams& p) {
  validate(p);
  const int L = p.layers;
  SimTrajectory traj;
  traj.times.resize(static_cast<std::size_t>(p.steps) + 1);
  traj.R.resize(p.steps + 1, L);
  traj.alpha.resize(p.steps + 1, L);

  Eigen::VectorXd R = Eigen::Map<const Eigen::VectorXd>(p.R_init.data(), L);
  Eigen::VectorXd a = Eigen::Map<const Eigen::VectorXd>(p.alpha_init.data(), L);
  traj.R.row(0) = R.transpose();
  traj.alpha.row(0) = a.transpose();
  traj.times[0] = 0.0;

  std::mt19937_64 rng(p.seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  const double sqrt_dt = std::sqrt(p.dt);
  for (int n = 0; n < p.steps; ++n) {
    const double t = n * p.dt;
    for (int l = 0; l < L; ++l) {
      const double xi_R = normal(rng);
      const double xi_a = normal(rng);
      const double dR = -p.lambda_R * default_phi(l, t, p.phi) * (R[l] - p.r_star(l));
      const double da = p.lambda_alpha * p.psi[static_cast<std::size_t>(l)] *
                        (p.alpha_star[static_cast<std::size_t>(l)] - a[l]);
      R[l] += p.dt * dR + p.noise_sigma_R * sqrt_dt * xi_R;
      a[l] += p.dt * da + p.noise_sigma_alpha * sqrt_dt * xi_a;
      if (!std::isfinite(R[l]) || !std::isfinite(a[l])) {
        throw SpectralError(ErrorCode::Instability, "non-finite state at step " + std::to_string(n + 1) +
                                                        ", layer " + std::to_string(l));
      }
    }
    traj.times[static_cast<std::size_t>(n) + 1] = (n + 1) * p.dt;
    traj.R.row(n + 1) = R.transpose();
    traj.alpha.row(n + 1) = a.transpose();
  }
  return traj;
}

struct PredictionReport {
  // (i) stable-rank gradient is transient
  bool transient_sr_gradient = false;
  double sr_initial_span = 0.0;  // max_l |R_init(l) - R*(l)|
  double sr_final_gradient = 0.0;
  double sr_peak_abs_gradient = 0.0;
  int sr_sign_changes = 0;
  // (ii) alpha gradient is persistent
  bool persistent_alpha_gradient = false;
  bool alpha_spread_monotone = false;
  double alpha_final_spread = 0.0;
  double alpha_target_spread = 0.0;
  // (iii) compression wave propagates forward
  bool forward_wave = false;
  std::vector<std::optional<int>> onset_steps;

  std::vector<std::string> flags;
  std::string notes;

  bool all() const { return transient_sr_gradient && persistent_alpha_gradient && forward_wave; }
};

inline double row_spread(const Eigen::MatrixXd& m, Eigen::Index row) { return m.row(row).maxCoeff() - m.row(row).minCoeff(); }

inline PredictionReport check_predictions(const SimTrajectory& traj, const SimParams& p) {
  if (p.noise_sigma_R > 0.0 || p.noise_sigma_alpha > 0.0) {
    throw SpectralError(ErrorCode::NoisyTrajectory, "prediction checks need a zero-noise trajectory");
  }
  const Eigen::Index T = traj.R.rows();
  const Eigen::Index L = traj.R.cols();
  if (T < 2 || L != p.layers) throw SpectralError(ErrorCode::InvalidConfig, "trajectory does not match parameters");
  PredictionReport rep;

  // (i)
  for (int l = 0; l < L; ++l) rep.sr_initial_span = std::max(rep.sr_initial_span, std::abs(p.R_init[l] - p.r_star(l)));
  const double eps = 1e-12 * std::max(1.0, rep.sr_initial_span);
  int last_sign = 0;
  for (Eigen::Index n = 0; n < T; ++n) {
    const double g = traj.R(n, 0) - traj.R(n, L - 1);
    rep.sr_peak_abs_gradient = std::max(rep.sr_peak_abs_gradient, std::abs(g));
    const int sign = g > eps ? 1 : g < -eps ? -1 : 0;
    if (sign != 0) {
      if (last_sign != 0 && sign != last_sign) ++rep.sr_sign_changes;
      last_sign = sign;
    }
  }
  rep.sr_final_gradient = traj.R(T - 1, 0) - traj.R(T - 1, L - 1);
  rep.transient_sr_gradient =
      rep.sr_sign_changes <= 1 && std::abs(rep.sr_final_gradient) <= 0.05 * rep.sr_initial_span;

  // (ii)
  rep.alpha_target_spread = *std::max_element(p.alpha_star.begin(), p.alpha_star.end()) -
                            *std::min_element(p.alpha_star.begin(), p.alpha_star.end());
  const auto burn_in = static_cast<Eigen::Index>(std::ceil(0.01 * static_cast<double>(T - 1)));
  rep.alpha_spread_monotone = true;
  for (Eigen::Index n = std::max<Eigen::Index>(burn_in, 0) + 1; n < T; ++n) {
    if (row_spread(traj.alpha, n) < row_spread(traj.alpha, n - 1) - 1e-12) {
      rep.alpha_spread_monotone = false;
      break;
    }
  }
  rep.alpha_final_spread = row_spread(traj.alpha, T - 1);
  rep.persistent_alpha_gradient =
      rep.alpha_spread_monotone &&
      std::abs(rep.alpha_final_spread - rep.alpha_target_spread) <= 0.01 * rep.alpha_target_spread + 1e-12;
  if (rep.alpha_target_spread == 0.0) rep.flags.emplace_back("persistent gradient absent by construction");

  // (iii)
  rep.forward_wave = true;
  std::optional<int> prev;
  bool prev_none = false;
  for (Eigen::Index l = 0; l < L; ++l) {
    std::vector<StepValue> series(static_cast<std::size_t>(T));
    for (Eigen::Index n = 0; n < T; ++n) series[static_cast<std::size_t>(n)] = {n, traj.R(n, l)};
    const auto onset = onset_step(series, 0.9);
    rep.onset_steps.push_back(onset ? std::optional<int>(static_cast<int>(*onset)) : std::nullopt);
    if (l > 0) {
      if (prev_none && onset) rep.forward_wave = false;
      if (prev && onset && *onset < *prev) rep.forward_wave = false;
    }
    prev = rep.onset_steps.back();
    prev_none = !onset;
  }
  if (p.phi.tau_per_layer == 0.0) rep.flags.emplace_back("no wave configured");

  if (rep.sr_initial_span > 0.0 && !p.R_star_per_layer) {
    rep.notes =
        "shared R* drives the stable-rank gradient to zero; a persistent positive final gradient "
        "(late layers over-compressing) needs a layer-dependent R*";
  }
  return rep;
}

// ---------------------------------------------------------------------------
// Serialization

inline nlohmann::json to_json(const SimParams& p) {
  nlohmann::json j = {{"layers", p.layers},
                      {"steps", p.steps},
                      {"dt", p.dt},
                      {"lambda_R", p.lambda_R},
                      {"lambda_alpha", p.lambda_alpha},
                      {"R_star", p.R_star},
                      {"alpha_star", p.alpha_star},
                      {"phi", {{"tau_per_layer", p.phi.tau_per_layer}, {"width", p.phi.width}, {"offset", p.phi.offset}}},
                      {"psi", p.psi},
                      {"noise_sigma_R", p.noise_sigma_R},
                      {"noise_sigma_alpha", p.noise_sigma_alpha},
                      {"seed", p.seed},
                      {"R_init", p.R_init},
                      {"alpha_init", p.alpha_init}};
  if (p.R_star_per_layer) j["R_star_per_layer"] = *p.R_star_per_layer;
  return j;
}

/// Missing keys fall back to `default_sim_params()`. Per-layer vectors are
/// re-derived when only `layers` changes; scalar shorthands are accepted for
/// R_init / alpha_init / psi.
inline SimParams sim_params_from_json(const nlohmann::json& j) {
  try {
    SimParams p = default_sim_params();
    p.layers = j.value("layers", p.layers);
    const auto L = static_cast<std::size_t>(std::max(p.layers, 1));
    if (L != p.alpha_star.size()) {
      p.alpha_star = default_alpha_star(p.layers, 0.43, 0.2, 0.46);
      p.psi.assign(L, 1.0);
      p.R_init.assign(L, 100.0);
      p.alpha_init.assign(L, 0.1);
    }
    p.steps = j.value("steps", p.steps);
    p.dt = j.value("dt", p.dt);
    p.lambda_R = j.value("lambda_R", p.lambda_R);
    p.lambda_alpha = j.value("lambda_alpha", p.lambda_alpha);
    p.R_star = j.value("R_star", p.R_star);
    if (j.contains("R_star_per_layer")) p.R_star_per_layer = j["R_star_per_layer"].get<std::vector<double>>();
    if (j.contains("phi")) {
      p.phi.tau_per_layer = j["phi"].value("tau_per_layer", p.phi.tau_per_layer);
      p.phi.width = j["phi"].value("width", p.phi.width);
      p.phi.offset = j["phi"].value("offset", p.phi.offset);
    }
    p.noise_sigma_R = j.value("noise_sigma_R", p.noise_sigma_R);
    p.noise_sigma_alpha = j.value("noise_sigma_alpha", p.noise_sigma_alpha);
    p.seed = j.value("seed", p.seed);
    auto per_layer = [&](const char* key, std::vector<double>& dst) {
      if (!j.contains(key)) return;
      if (j[key].is_number()) {
        dst.assign(L, j[key].get<double>());
      } else {
        dst = j[key].get<std::vector<double>>();
      }
    };
    per_layer("alpha_star", p.alpha_star);
    per_layer("psi", p.psi);
    per_layer("R_init", p.R_init);
    per_layer("alpha_init", p.alpha_init);
    if (j.contains("alpha_star_tent")) {
      const auto& t = j["alpha_star_tent"];
      p.alpha_star = default_alpha_star(p.layers, t.at("peak_ratio").get<double>(), t.at("alpha_lo").get<double>(),
                                        t.at("alpha_hi").get<double>());
    }
    return p;
  } catch (const nlohmann::json::exception& e) {
    throw SpectralError(ErrorCode::InvalidConfig, e.what());
  }
}

inline nlohmann::json to_json(const PredictionReport& r) {
  nlohmann::json onsets = nlohmann::json::array();
  for (const auto& o : r.onset_steps) onsets.push_back(o ? nlohmann::json(*o) : nlohmann::json(nullptr));
  return {{"transient_sr_gradient",
           {{"holds", r.transient_sr_gradient},
            {"initial_span", r.sr_initial_span},
            {"peak_abs_gradient", r.sr_peak_abs_gradient},
            {"final_gradient", r.sr_final_gradient},
            {"sign_changes", r.sr_sign_changes}}},
          {"persistent_alpha_gradient",
           {{"holds", r.persistent_alpha_gradient},
            {"spread_monotone", r.alpha_spread_monotone},
            {"final_spread", r.alpha_final_spread},
            {"target_spread", r.alpha_target_spread}}},
          {"forward_wave", {{"holds", r.forward_wave}, {"onset_steps", onsets}}},
          {"all_hold", r.all()},
          {"flags", r.flags},
          {"notes", r.notes}};
}

/// Long-form CSV: time,layer,R,alpha.
inline void write_trajectory_csv(std::ostream& out, const SimTrajectory& traj) {
  out << "time,layer,R,alpha\n";
  for (Eigen::Index n = 0; n < traj.R.rows(); ++n) {
    for (Eigen::Index l = 0; l < traj.R.cols(); ++l) {
      out << format_real(traj.times[static_cast<std::size_t>(n)]) << ',' << l << ',' << format_real(traj.R(n, l))
          << ',' << format_real(traj.alpha(n, l)) << '\n';
    }
  }
}

}  // namespace spectral
