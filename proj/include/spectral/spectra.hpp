#pragma once

// Singular values of a weight matrix and the metrics derived from them:
// stable rank, power-law alpha, normalized spectral entropy, spectral gap.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <Eigen/SVD>

#include "spectral/error.hpp"
#include "spectral/fits.hpp"
#include "spectral/tensor_io.hpp"

namespace spectral {

/// Singular values in descending order, k = min(rows, cols).
class SpectrumVec {
 public:
  explicit SpectrumVec(std::vector<double> sigma) : sigma_(std::move(sigma)) {
    if (sigma_.empty()) throw SpectralError(ErrorCode::TooFewValues, "empty spectrum");
    for (std::size_t i = 0; i < sigma_.size(); ++i) {
      if (!(sigma_[i] >= 0.0) || !std::isfinite(sigma_[i])) {
        throw SpectralError(ErrorCode::NonFiniteValue, "singular values must be finite and nonnegative");
      }
      if (i > 0 && sigma_[i] > sigma_[i - 1]) {
        throw SpectralError(ErrorCode::DimensionMismatch, "singular values must be descending");
      }
    }
  }

  std::size_t k() const noexcept { return sigma_.size(); }
  const std::vector<double>& sigma() const noexcept { return sigma_; }
  double operator[](std::size_t i) const { return sigma_[i]; }
  double leading() const noexcept { return sigma_.front(); }

  double sum_squares() const {
    double s = 0.0;
    for (double v : sigma_) s += v * v;
    return s;
  }

 private:
  std::vector<double> sigma_;
};

inline SpectrumVec singular_values(const Eigen::Ref<const Eigen::MatrixXd>& m) {
  Eigen::BDCSVD<Eigen::MatrixXd> svd(m, 0);
  if (svd.info() != Eigen::Success) {
    throw SpectralError(ErrorCode::ConvergenceFailure, "SVD did not converge");
  }
  const auto& s = svd.singularValues();
  std::vector<double> sigma(s.data(), s.data() + s.size());
  for (double v : sigma) {
    if (!std::isfinite(v)) throw SpectralError(ErrorCode::ConvergenceFailure, "SVD produced non-finite values");
  }
  std::sort(sigma.begin(), sigma.end(), std::greater<>());
  for (auto& v : sigma) v = std::max(v, 0.0);
  return SpectrumVec(std::move(sigma));
}

inline SpectrumVec singular_values(const TensorView& t) {
  return singular_values(Eigen::MatrixXd(t.matrix()));
}

/// sum(sigma^2) / sigma_1^2
inline double stable_rank(const SpectrumVec& s) {
  if (!(s.leading() > 0.0)) throw SpectralError(ErrorCode::ZeroMatrix, "stable rank of a zero matrix");
  const double lead = s.leading();
  double acc = 0.0;
  for (double v : s.sigma()) acc += (v / lead) * (v / lead);
  return acc;
}

struct AlphaFit {
  double alpha = 0.0;
  double intercept_c = 0.0;  // natural-log units
  double fit_r2 = 0.0;
  std::size_t n_points = 0;
  double tail_fraction = 0.2;
  bool low_confidence = false;  // floor(tail_fraction * k) < 2, fell back to 2 points
};

inline std::size_t alpha_fit_points(std::size_t k, double tail_fraction) {
  const auto n = static_cast<std::size_t>(std::floor(tail_fraction * static_cast<double>(k) + 1e-9));
  return std::min(k, std::max<std::size_t>(2, n));
}

/// OLS of ln(sigma_i) on ln(i) over i = 1..n_points; alpha is the negated slope.
inline AlphaFit fit_alpha(const SpectrumVec& s, double tail_fraction = 0.2) {
  if (!(tail_fraction > 0.0 && tail_fraction <= 1.0)) {
    throw SpectralError(ErrorCode::InvalidConfig, "tail_fraction must be in (0, 1]");
  }
  if (s.k() < 2) throw SpectralError(ErrorCode::TooFewValues, "alpha fit needs k >= 2");
  AlphaFit fit;
  fit.tail_fraction = tail_fraction;
  fit.n_points = alpha_fit_points(s.k(), tail_fraction);
  fit.low_confidence = std::floor(tail_fraction * static_cast<double>(s.k()) + 1e-9) < 2.0;

  std::vector<double> lx(fit.n_points), ly(fit.n_points);
  for (std::size_t i = 0; i < fit.n_points; ++i) {
    if (!(s[i] > 0.0)) {
      throw SpectralError(ErrorCode::ZeroInFitRange,
                          "sigma_" + std::to_string(i + 1) + " is zero inside the fit window");
    }
    lx[i] = std::log(static_cast<double>(i + 1));
    ly[i] = std::log(s[i]);
  }
  const auto line = ols(lx, ly);
  fit.alpha = -line.slope;
  fit.intercept_c = line.intercept;
  fit.fit_r2 = line.r2;
  return fit;
}

/// Shannon entropy of p_i = sigma_i^2 / sum(sigma^2), normalized by log2(k).
inline double spectral_entropy(const SpectrumVec& s) {
  if (s.k() < 2) throw SpectralError(ErrorCode::SingleValue, "entropy normalizer log2(1) is zero");
  const double total = s.sum_squares();
  if (!(total > 0.0)) throw SpectralError(ErrorCode::ZeroMatrix, "entropy of a zero matrix");
  double h = 0.0;
  for (double v : s.sigma()) {
    const double p = v * v / total;
    if (p > 0.0) h -= p * std::log2(p);
  }
  return std::clamp(h / std::log2(static_cast<double>(s.k())), 0.0, 1.0);
}

inline double spectral_gap(const SpectrumVec& s) {
  if (s.k() < 2) throw SpectralError(ErrorCode::TooFewValues, "spectral gap needs k >= 2");
  if (!(s[1] > 0.0)) throw SpectralError(ErrorCode::DegenerateGap, "sigma_2 is zero");
  return s[0] / s[1];
}

/// One (step, layer, type) measurement. Metric fields that could not be
/// computed are left empty and the reason is appended to `notes` as
/// "<field>:<ErrorCode>".
struct SpectralRecord {
  std::int64_t step = 0;
  ParamCoord coord;
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::optional<double> stable_rank;
  std::optional<double> alpha;
  std::optional<double> alpha_r2;
  std::optional<double> entropy;
  std::optional<double> spectral_gap;
  double frob_norm = 0.0;
  std::vector<std::string> notes;
};

inline SpectralRecord analyze_spectrum(const SpectrumVec& s, std::size_t rows, std::size_t cols, std::int64_t step,
                                       const ParamCoord& coord, double tail_fraction = 0.2) {
  SpectralRecord rec;
  rec.step = step;
  rec.coord = coord;
  rec.rows = rows;
  rec.cols = cols;
  rec.frob_norm = std::sqrt(s.sum_squares());

  auto attempt = [&](const char* field, auto&& fn) {
    try {
      fn();
    } catch (const SpectralError& e) {
      rec.notes.push_back(std::string(field) + ":" + std::string(to_string(e.code())));
    }
  };
  attempt("stable_rank", [&] { rec.stable_rank = stable_rank(s); });
  if (!rec.stable_rank && rec.frob_norm == 0.0) rec.stable_rank = 0.0;
  attempt("alpha", [&] {
    const auto fit = fit_alpha(s, tail_fraction);
    rec.alpha = fit.alpha;
    rec.alpha_r2 = fit.fit_r2;
    if (fit.low_confidence) rec.notes.emplace_back("alpha:low_confidence");
  });
  attempt("entropy", [&] { rec.entropy = spectral_entropy(s); });
  attempt("spectral_gap", [&] { rec.spectral_gap = spectral_gap(s); });
  return rec;
}

inline SpectralRecord analyze_matrix(const TensorView& t, std::int64_t step, const ParamCoord& coord,
                                     double tail_fraction = 0.2) {
  return analyze_spectrum(singular_values(t), t.rows(), t.cols(), step, coord, tail_fraction);
}

}  // namespace spectral
