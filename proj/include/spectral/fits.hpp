#pragma once

// Regression and rank statistics: OLS, log-log power fits, Spearman correlation
// with a seeded permutation test, and the depth scaling-law fit.

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <optional>
#include <random>
#include <span>
#include <vector>

#include <json.hpp>

#include "spectral/error.hpp"
#include "spectral/parallel.hpp"

namespace spectral {

struct LineFit {
  double slope = 0.0;
  double intercept = 0.0;
  double r2 = 0.0;
  std::size_t n = 0;

  double predict(double x) const { return slope * x + intercept; }
};

inline LineFit ols(std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size()) throw SpectralError(ErrorCode::DimensionMismatch, "x and y differ in length");
  const std::size_t n = x.size();
  if (n < 2) throw SpectralError(ErrorCode::TooFewPoints, "ols needs at least 2 points");
  const double mx = std::accumulate(x.begin(), x.end(), 0.0) / static_cast<double>(n);
  const double my = std::accumulate(y.begin(), y.end(), 0.0) / static_cast<double>(n);
  double sxx = 0.0, sxy = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double dx = x[i] - mx;
    const double dy = y[i] - my;
    sxx += dx * dx;
    sxy += dx * dy;
    syy += dy * dy;
  }
  if (!(sxx > 0.0)) throw SpectralError(ErrorCode::DegenerateX, "all x values are equal");

  LineFit fit;
  fit.n = n;
  fit.slope = sxy / sxx;
  fit.intercept = my - fit.slope * mx;
  double ss_res = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double r = y[i] - fit.predict(x[i]);
    ss_res += r * r;
  }
  // A flat target fits perfectly with slope 0.
  fit.r2 = syy > 0.0 ? std::clamp(1.0 - ss_res / syy, 0.0, 1.0) : 1.0;
  return fit;
}

struct PowerFit {
  double exponent = 0.0;
  double prefactor = 0.0;
  double r2 = 0.0;  // in log space
  std::size_t n = 0;
};

/// Fit y = prefactor * x^exponent by OLS on (ln x, ln y).
inline PowerFit power_fit(std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size()) throw SpectralError(ErrorCode::DimensionMismatch, "x and y differ in length");
  std::vector<double> lx(x.size()), ly(y.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    if (!(x[i] > 0.0) || !(y[i] > 0.0)) {
      throw SpectralError(ErrorCode::NonPositiveInput, "power_fit needs strictly positive x and y");
    }
    lx[i] = std::log(x[i]);
    ly[i] = std::log(y[i]);
  }
  const auto line = ols(lx, ly);
  return {line.slope, std::exp(line.intercept), line.r2, line.n};
}

/// Tie-averaged ranks, 1-based.
inline std::vector<double> mid_ranks(std::span<const double> v) {
  std::vector<std::size_t> order(v.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) { return v[a] < v[b]; });
  std::vector<double> ranks(v.size());
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j + 1 < order.size() && v[order[j + 1]] == v[order[i]]) ++j;
    const double r = (static_cast<double>(i) + static_cast<double>(j)) / 2.0 + 1.0;
    for (std::size_t t = i; t <= j; ++t) ranks[order[t]] = r;
    i = j + 1;
  }
  return ranks;
}

struct RankCorr {
  double rho = 0.0;
  double p_value = 1.0;
  std::size_t n = 0;
  std::uint64_t permutations = 0;
  std::uint64_t seed = 0;
};

/// Spearman rho (Pearson on mid-ranks) with a two-sided permutation p-value,
/// (count(|rho_perm| >= |rho|) + 1) / (permutations + 1). Permutation i draws
/// from its own generator seeded by (seed, i), so the result does not depend on
/// how the loop is split across threads. A zero-variance rank vector gives rho 0.
inline RankCorr spearman(std::span<const double> x, std::span<const double> y,
                         std::uint64_t permutations = 100000, std::uint64_t seed = 0) {
  if (x.size() != y.size()) throw SpectralError(ErrorCode::DimensionMismatch, "x and y differ in length");
  const std::size_t n = x.size();
  if (n < 3) throw SpectralError(ErrorCode::TooFewPoints, "spearman needs at least 3 points");

  auto center = [](std::vector<double> r) {
    const double m = std::accumulate(r.begin(), r.end(), 0.0) / static_cast<double>(r.size());
    for (auto& v : r) v -= m;
    return r;
  };
  const auto rx = center(mid_ranks(x));
  const auto ry = center(mid_ranks(y));
  const double sxx = std::inner_product(rx.begin(), rx.end(), rx.begin(), 0.0);
  const double syy = std::inner_product(ry.begin(), ry.end(), ry.begin(), 0.0);

  RankCorr out;
  out.n = n;
  out.permutations = permutations;
  out.seed = seed;
  if (!(sxx > 0.0) || !(syy > 0.0)) {
    out.rho = 0.0;
    out.p_value = 1.0;
    return out;
  }
  const double denom = std::sqrt(sxx * syy);
  out.rho = std::clamp(std::inner_product(rx.begin(), rx.end(), ry.begin(), 0.0) / denom, -1.0, 1.0);
  if (permutations == 0) return out;

  const double threshold = std::abs(out.rho) - 1e-12;
  std::atomic<std::uint64_t> extreme{0};
  parallel_for(static_cast<std::size_t>(permutations), [&](std::size_t begin, std::size_t end) {
    std::vector<double> perm(ry);
    std::uint64_t local = 0;
    for (std::size_t i = begin; i < end; ++i) {
      std::copy(ry.begin(), ry.end(), perm.begin());
      std::mt19937_64 rng(mix_seed(seed, i));
      std::shuffle(perm.begin(), perm.end(), rng);
      const double r = std::inner_product(rx.begin(), rx.end(), perm.begin(), 0.0) / denom;
      if (std::abs(r) >= threshold) ++local;
    }
    extreme += local;
  });
  out.p_value = (static_cast<double>(extreme.load()) + 1.0) / (static_cast<double>(permutations) + 1.0);
  return out;
}

// ---------------------------------------------------------------------------
// Depth scaling laws

struct ModelSummary {
  double layers = 0.0;
  double delta_alpha = 0.0;
  double alpha_max = 0.0;
  double peak_ratio = 0.0;
  std::optional<double> wave_velocity;
};

struct WaveVelocitySummary {
  std::size_t n = 0;
  std::optional<double> mean;
  std::optional<LineFit> fit_vs_layers;  // needs >= 2 models with a velocity
};

struct ScalingReport {
  PowerFit delta_alpha_fit;
  PowerFit alpha_max_fit;
  LineFit peak_position_fit;
  WaveVelocitySummary wave_velocity_summary;
};

inline ScalingReport fit_scaling_laws(std::span<const ModelSummary> models) {
  if (models.size() < 3) throw SpectralError(ErrorCode::TooFewModels, "scaling fits need at least 3 models");
  std::vector<double> layers, spread, amax, peak, vx, vy;
  for (const auto& m : models) {
    layers.push_back(m.layers);
    spread.push_back(m.delta_alpha);
    amax.push_back(m.alpha_max);
    peak.push_back(m.peak_ratio);
    if (m.wave_velocity) {
      vx.push_back(m.layers);
      vy.push_back(*m.wave_velocity);
    }
  }
  ScalingReport report;
  report.delta_alpha_fit = power_fit(layers, spread);
  report.alpha_max_fit = power_fit(layers, amax);
  report.peak_position_fit = ols(layers, peak);
  auto& wave = report.wave_velocity_summary;
  wave.n = vy.size();
  if (!vy.empty()) wave.mean = std::accumulate(vy.begin(), vy.end(), 0.0) / static_cast<double>(vy.size());
  if (vy.size() >= 2) {
    try {
      wave.fit_vs_layers = ols(vx, vy);
    } catch (const SpectralError&) {
      wave.fit_vs_layers.reset();
    }
  }
  return report;
}

inline nlohmann::json to_json(const LineFit& f) {
  return {{"slope", f.slope}, {"intercept", f.intercept}, {"r2", f.r2}, {"n", f.n}};
}

inline nlohmann::json to_json(const PowerFit& f) {
  return {{"exponent", f.exponent}, {"prefactor", f.prefactor}, {"r2", f.r2}, {"n", f.n}};
}

inline nlohmann::json to_json(const RankCorr& c) {
  return {{"rho", c.rho}, {"p_value", c.p_value}, {"n", c.n}, {"permutations", c.permutations}, {"seed", c.seed}};
}

inline nlohmann::json to_json(const ScalingReport& r) {
  nlohmann::json wave = {{"n", r.wave_velocity_summary.n}, {"mean", nullptr}, {"fit_vs_layers", nullptr}};
  if (r.wave_velocity_summary.mean) wave["mean"] = *r.wave_velocity_summary.mean;
  if (r.wave_velocity_summary.fit_vs_layers) wave["fit_vs_layers"] = to_json(*r.wave_velocity_summary.fit_vs_layers);
  return {{"delta_alpha_fit", to_json(r.delta_alpha_fit)},
          {"alpha_max_fit", to_json(r.alpha_max_fit)},
          {"peak_position_fit", to_json(r.peak_position_fit)},
          {"wave_velocity_summary", wave}};
}

}  // namespace spectral
