#pragma once

// Layer-removal plans over an alpha profile: zone-aware spectral selection and
// the Last-N / random / magnitude / spectral-worst baselines, plus the
// alpha-vs-importance rank correlation.

#include <algorithm>
#include <cstdint>
#include <cstdio>
#include <map>
#include <numeric>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include <json.hpp>

#include "spectral/error.hpp"
#include "spectral/fits.hpp"
#include "spectral/timelapse.hpp"

namespace spectral {

enum class Zone { InputBoundary, Core, OutputBoundary };

inline std::string_view to_string(Zone z) {
  switch (z) {
    case Zone::InputBoundary: return "INPUT_BOUNDARY";
    case Zone::Core: return "CORE";
    case Zone::OutputBoundary: return "OUTPUT_BOUNDARY";
  }
  return "CORE";
}

struct ZoneMap {
  std::vector<Zone> zones;
  int boundary = 0;  // input-side size
  int output_boundary = 0;

  bool is_core(int layer) const { return zones.at(static_cast<std::size_t>(layer)) == Zone::Core; }
};

/// First `input_boundary` layers are INPUT_BOUNDARY, last `output_boundary` are
/// OUTPUT_BOUNDARY, the rest CORE.
inline ZoneMap classify_zones(int layers, int input_boundary, int output_boundary) {
  if (input_boundary < 0 || output_boundary < 0 || input_boundary + output_boundary >= layers) {
    throw SpectralError(ErrorCode::BoundaryTooLarge, "boundary " + std::to_string(input_boundary) + "+" +
                                                         std::to_string(output_boundary) + " leaves no interior in " +
                                                         std::to_string(layers) + " layers");
  }
  ZoneMap m{std::vector<Zone>(static_cast<std::size_t>(layers), Zone::Core), input_boundary, output_boundary};
  for (int l = 0; l < input_boundary; ++l) m.zones[static_cast<std::size_t>(l)] = Zone::InputBoundary;
  for (int l = 0; l < output_boundary; ++l) m.zones[static_cast<std::size_t>(layers - 1 - l)] = Zone::OutputBoundary;
  return m;
}

inline ZoneMap classify_zones(int layers, int boundary) { return classify_zones(layers, boundary, boundary); }

/// 2 for 14 or more layers, else 1.
inline int default_boundary(int layers) { return layers >= 14 ? 2 : 1; }

enum class Strategy { ZoneAware, LastN, Random, Magnitude, SpectralWorst };

inline std::string_view to_string(Strategy s) {
  switch (s) {
    case Strategy::ZoneAware: return "zone_aware";
    case Strategy::LastN: return "last_n";
    case Strategy::Random: return "random";
    case Strategy::Magnitude: return "magnitude";
    case Strategy::SpectralWorst: return "spectral_worst";
  }
  return "zone_aware";
}

inline std::optional<Strategy> parse_strategy(std::string_view s) {
  for (auto st : {Strategy::ZoneAware, Strategy::LastN, Strategy::Random, Strategy::Magnitude, Strategy::SpectralWorst}) {
    if (s == to_string(st)) return st;
  }
  return std::nullopt;
}

struct PrunePlan {
  Strategy strategy = Strategy::ZoneAware;
  std::vector<int> removed_layers;  // ascending
  int k = 0;
  std::optional<int> boundary;
  std::optional<int> min_gap;
  std::optional<std::uint64_t> seed;
};

/// Raised when the greedy pass runs out of candidates; carries what it managed to pick.
class InfeasibleSelectionError : public SpectralError {
 public:
  InfeasibleSelectionError(const std::string& what, std::vector<int> partial)
      : SpectralError(ErrorCode::InfeasibleSelection, what), partial_(std::move(partial)) {}
  const std::vector<int>& partial() const noexcept { return partial_; }

 private:
  std::vector<int> partial_;
};

/// Greedy over interior layers in ascending alpha (ties: lower index first);
/// a layer is accepted when it sits at least `min_gap` from every layer
/// already accepted. No backtracking.
inline PrunePlan zone_aware_select(const AlphaProfile& profile, int k, int boundary, int min_gap = 2) {
  const int L = profile.layers();
  const auto zones = classify_zones(L, boundary);
  PrunePlan plan{Strategy::ZoneAware, {}, k, boundary, min_gap, std::nullopt};
  if (k <= 0) return plan;

  std::vector<int> candidates;
  for (int l = 0; l < L; ++l) {
    if (zones.is_core(l)) candidates.push_back(l);
  }
  std::stable_sort(candidates.begin(), candidates.end(), [&](int a, int b) {
    return profile.alphas[static_cast<std::size_t>(a)] < profile.alphas[static_cast<std::size_t>(b)];
  });
  for (int l : candidates) {
    const bool spaced = std::all_of(plan.removed_layers.begin(), plan.removed_layers.end(),
                                    [&](int r) { return std::abs(r - l) >= min_gap; });
    if (!spaced) continue;
    plan.removed_layers.push_back(l);
    if (static_cast<int>(plan.removed_layers.size()) == k) break;
  }
  std::sort(plan.removed_layers.begin(), plan.removed_layers.end());
  if (static_cast<int>(plan.removed_layers.size()) < k) {
    throw InfeasibleSelectionError("only " + std::to_string(plan.removed_layers.size()) + " of " + std::to_string(k) +
                                       " layers satisfy the gap constraint",
                                   plan.removed_layers);
  }
  return plan;
}

struct BaselineInputs {
  std::optional<AlphaProfile> profile;          // SPECTRAL_WORST
  std::optional<std::vector<double>> frob_norms;  // MAGNITUDE, per layer
  std::optional<std::uint64_t> seed;            // RANDOM
};

namespace detail {

/// Indices of the k smallest (or largest) scores; ties go to the lower index.
inline std::vector<int> select_extreme(const std::vector<double>& scores, int k, bool largest) {
  std::vector<int> idx(scores.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](int a, int b) {
    return largest ? scores[static_cast<std::size_t>(a)] > scores[static_cast<std::size_t>(b)]
                   : scores[static_cast<std::size_t>(a)] < scores[static_cast<std::size_t>(b)];
  });
  idx.resize(static_cast<std::size_t>(k));
  std::sort(idx.begin(), idx.end());
  return idx;
}

}  // namespace detail

inline PrunePlan baseline_select(Strategy strategy, int layers, int k, const BaselineInputs& in = {}) {
  if (k < 0 || k > layers) {
    throw SpectralError(ErrorCode::InvalidConfig, "k = " + std::to_string(k) + " outside [0, " + std::to_string(layers) + "]");
  }
  PrunePlan plan{strategy, {}, k, std::nullopt, std::nullopt, std::nullopt};
  switch (strategy) {
    case Strategy::LastN:
      for (int l = layers - k; l < layers; ++l) plan.removed_layers.push_back(l);
      break;
    case Strategy::Random: {
      if (!in.seed) throw SpectralError(ErrorCode::MissingInput, "random strategy needs a seed");
      plan.seed = in.seed;
      std::vector<int> idx(static_cast<std::size_t>(layers));
      std::iota(idx.begin(), idx.end(), 0);
      std::mt19937_64 rng(*in.seed);
      std::shuffle(idx.begin(), idx.end(), rng);
      plan.removed_layers.assign(idx.begin(), idx.begin() + k);
      std::sort(plan.removed_layers.begin(), plan.removed_layers.end());
      break;
    }
    case Strategy::Magnitude:
      if (!in.frob_norms || static_cast<int>(in.frob_norms->size()) != layers) {
        throw SpectralError(ErrorCode::MissingInput, "magnitude strategy needs one Frobenius norm per layer");
      }
      plan.removed_layers = detail::select_extreme(*in.frob_norms, k, false);
      break;
    case Strategy::SpectralWorst:
      if (!in.profile || in.profile->layers() != layers) {
        throw SpectralError(ErrorCode::MissingInput, "spectral_worst strategy needs a full alpha profile");
      }
      plan.removed_layers = detail::select_extreme(in.profile->alphas, k, true);
      break;
    case Strategy::ZoneAware:
      throw SpectralError(ErrorCode::InvalidConfig, "zone_aware is not a baseline; use zone_aware_select");
  }
  return plan;
}

enum class LayerFilter { CoreOnly, All };

/// Spearman rho between per-layer alpha and per-layer importance (e.g. loss
/// increase when the layer is ablated), over core layers or all layers.
inline RankCorr importance_correlation(const AlphaProfile& profile, const std::map<int, double>& importance,
                                       const ZoneMap& zones, LayerFilter filter, std::uint64_t permutations = 100000,
                                       std::uint64_t seed = 0) {
  std::vector<double> a, imp;
  for (const auto& [layer, value] : importance) {
    if (layer < 0 || layer >= profile.layers()) continue;
    if (filter == LayerFilter::CoreOnly && !zones.is_core(layer)) continue;
    a.push_back(profile.alphas[static_cast<std::size_t>(layer)]);
    imp.push_back(value);
  }
  if (a.size() < 3) throw SpectralError(ErrorCode::TooFewPoints, "fewer than 3 layers after filtering");
  return spearman(a, imp, permutations, seed);
}

/// FNV-1a 64 over the 9-significant-digit rendering of the profile.
inline std::string profile_digest(const AlphaProfile& p) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  auto feed = [&](const std::string& s) {
    for (unsigned char c : s) {
      h ^= c;
      h *= 0x100000001b3ULL;
    }
  };
  for (double a : p.alphas) feed(format_real(a) + ";");
  char buf[32];
  std::snprintf(buf, sizeof buf, "fnv1a64:%016llx", static_cast<unsigned long long>(h));
  return buf;
}

inline nlohmann::json to_json(const PrunePlan& plan, const std::optional<AlphaProfile>& profile = {}) {
  auto opt = [](const auto& v) { return v ? nlohmann::json(*v) : nlohmann::json(nullptr); };
  return {{"strategy", to_string(plan.strategy)},
          {"removed_layers", plan.removed_layers},
          {"k", plan.k},
          {"b", opt(plan.boundary)},
          {"min_gap", opt(plan.min_gap)},
          {"seed", opt(plan.seed)},
          {"alpha_profile_digest", profile ? nlohmann::json(profile_digest(*profile)) : nlohmann::json(nullptr)}};
}

}  // namespace spectral
