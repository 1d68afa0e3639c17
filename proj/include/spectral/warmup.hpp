#pragma once

// Spectral-warmup synthesis: W0 = U diag(s * sigma*) V^T with Haar-random
// orthogonal U, V.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "spectral/error.hpp"
#include "spectral/parallel.hpp"
#include "spectral/tensor_io.hpp"
#include "spectral/timelapse.hpp"

namespace spectral {

/// Haar-distributed n x n orthogonal matrix: QR of a seeded standard-Gaussian
/// matrix with the sign of each R diagonal entry folded into the matching Q column.
inline Eigen::MatrixXd random_orthogonal(std::size_t n, std::uint64_t seed) {
  if (n == 0) throw SpectralError(ErrorCode::InvalidConfig, "orthogonal dimension must be positive");
  const auto N = static_cast<Eigen::Index>(n);
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  Eigen::MatrixXd g(N, N);
  for (Eigen::Index j = 0; j < N; ++j) {
    for (Eigen::Index i = 0; i < N; ++i) g(i, j) = normal(rng);
  }
  Eigen::HouseholderQR<Eigen::MatrixXd> qr(g);
  Eigen::MatrixXd q = qr.householderQ();
  const auto& r = qr.matrixQR();
  for (Eigen::Index j = 0; j < N; ++j) {
    if (r(j, j) < 0.0) q.col(j) = -q.col(j);
  }
  return q;
}

struct WarmupSpec {
  std::size_t rows = 1;
  std::size_t cols = 1;
  std::vector<double> target_sigma;  // descending, length min(rows, cols)
  double scale = 1.0;
  std::uint64_t seed = 0;
  std::string name = "warmup";
};

inline void validate(const WarmupSpec& spec) {
  if (spec.rows == 0 || spec.cols == 0) throw SpectralError(ErrorCode::InvalidConfig, "empty warmup shape");
  if (spec.target_sigma.size() != std::min(spec.rows, spec.cols)) {
    throw SpectralError(ErrorCode::DimensionMismatch, "target spectrum length must equal min(rows, cols)");
  }
  if (!(spec.scale > 0.0)) throw SpectralError(ErrorCode::InvalidConfig, "scale must be positive");
  for (std::size_t i = 0; i < spec.target_sigma.size(); ++i) {
    if (!(spec.target_sigma[i] >= 0.0) || (i > 0 && spec.target_sigma[i] > spec.target_sigma[i - 1])) {
      throw SpectralError(ErrorCode::InvalidConfig, "target spectrum must be nonnegative and descending");
    }
  }
}

/// Thin construction for rectangular shapes: the leading min(m, n) columns of
/// independent m x m and n x n orthogonal factors (seeds derived from spec.seed).
inline TensorView spectral_warmup_matrix(const WarmupSpec& spec) {
  validate(spec);
  const auto k = static_cast<Eigen::Index>(spec.target_sigma.size());
  const Eigen::MatrixXd u = random_orthogonal(spec.rows, mix_seed(spec.seed, 0)).leftCols(k);
  const Eigen::MatrixXd v = random_orthogonal(spec.cols, mix_seed(spec.seed, 1)).leftCols(k);
  const Eigen::VectorXd s = spec.scale * Eigen::Map<const Eigen::VectorXd>(spec.target_sigma.data(), k);
  const Eigen::MatrixXd w = u * s.asDiagonal() * v.transpose();
  return TensorView::from_matrix(spec.name, w);
}

/// Power-law spectrum sigma_i = c * i^(-alpha), i = 1..k, with c chosen so that
/// sqrt(sum sigma_i^2) equals `frob_norm`. Used when only summary metrics of a
/// reference matrix are available.
inline std::vector<double> power_law_spectrum(std::size_t k, double alpha, double frob_norm) {
  std::vector<double> s(k);
  double ss = 0.0;
  for (std::size_t i = 0; i < k; ++i) {
    s[i] = std::pow(static_cast<double>(i + 1), -alpha);
    ss += s[i] * s[i];
  }
  const double c = ss > 0.0 ? frob_norm / std::sqrt(ss) : 0.0;
  for (auto& v : s) v *= c;
  std::sort(s.begin(), s.end(), std::greater<>());
  return s;
}

/// Per-matrix seed: one independent (U, V) pair for every (layer, type).
inline std::uint64_t warmup_seed(std::uint64_t seed, int layer, MatrixType type) {
  return mix_seed(mix_seed(seed, static_cast<std::uint64_t>(layer)), static_cast<std::uint64_t>(type));
}

/// Target spectrum for (layer, type) from the final step of a reference log
/// that carries a record for it. Exact singular values come from `spectra`
/// when available; otherwise a power law is rebuilt from the record's alpha and
/// Frobenius norm. Returns the record (for its shape) and the spectrum.
inline std::pair<SpectralRecord, std::vector<double>> target_sigma_from_log(const SpectralLog& log, int layer,
                                                                           MatrixType type,
                                                                           const SpectraTable* spectra = nullptr) {
  const SpectralRecord* found = nullptr;
  for (const auto& r : log.records()) {
    if (r.coord.layer == layer && r.coord.matrix_type == type && (!found || r.step >= found->step)) found = &r;
  }
  if (!found) {
    throw SpectralError(ErrorCode::MissingInput, "no " + std::string(to_string(type)) + " record for layer " +
                                                     std::to_string(layer) + " in reference log");
  }
  const std::size_t k = std::min(found->rows, found->cols);
  if (spectra) {
    if (auto it = spectra->find(record_key(*found)); it != spectra->end()) {
      if (it->second.size() != k) {
        throw SpectralError(ErrorCode::DimensionMismatch, "stored spectrum length does not match record shape");
      }
      return {*found, it->second};
    }
  }
  if (!found->alpha) {
    throw SpectralError(ErrorCode::MissingInput, "record for layer " + std::to_string(layer) +
                                                     " has no alpha and no stored spectrum");
  }
  return {*found, power_law_spectrum(k, *found->alpha, found->frob_norm)};
}

/// Parameter name in the custom scheme, used for warmup output files.
inline std::string warmup_parameter_name(int layer, MatrixType type) {
  const std::string prefix = "layers." + std::to_string(layer) + ".";
  switch (type) {
    case MatrixType::Q: return prefix + "attn.q_proj.weight";
    case MatrixType::K: return prefix + "attn.k_proj.weight";
    case MatrixType::V: return prefix + "attn.v_proj.weight";
    case MatrixType::O: return prefix + "attn.o_proj.weight";
    case MatrixType::MlpUp: return prefix + "mlp.up_proj.weight";
    case MatrixType::MlpDown: return prefix + "mlp.down_proj.weight";
    case MatrixType::FusedQkv: return prefix + "attn.qkv.weight";
    case MatrixType::Other: break;
  }
  throw SpectralError(ErrorCode::InvalidConfig, "no parameter name for matrix type OTHER");
}

}  // namespace spectral
