#pragma once

// Test-only oracles, deliberately independent of the library's numerical paths.

#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

#include <Eigen/Dense>

namespace spectral::oracle {

/// One-sided Jacobi (Hestenes) singular values: orthogonalize the columns of
/// the tall orientation by plane rotations until every pair is orthogonal;
/// the column norms are then the singular values.
inline std::vector<double> jacobi_singular_values(const Eigen::MatrixXd& input, double tol = 1e-15,
                                                  int max_sweeps = 100) {
  Eigen::MatrixXd a = input.rows() >= input.cols() ? input : Eigen::MatrixXd(input.transpose());
  const Eigen::Index n = a.cols();
  for (int sweep = 0; sweep < max_sweeps; ++sweep) {
    bool rotated = false;
    for (Eigen::Index p = 0; p < n - 1; ++p) {
      for (Eigen::Index q = p + 1; q < n; ++q) {
        const double alpha = a.col(p).squaredNorm();
        const double beta = a.col(q).squaredNorm();
        const double gamma = a.col(p).dot(a.col(q));
        if (std::abs(gamma) <= tol * std::sqrt(alpha * beta) || gamma == 0.0) continue;
        rotated = true;
        const double zeta = (beta - alpha) / (2.0 * gamma);
        const double t = (zeta >= 0 ? 1.0 : -1.0) / (std::abs(zeta) + std::sqrt(1.0 + zeta * zeta));
        const double c = 1.0 / std::sqrt(1.0 + t * t);
        const double s = c * t;
        const Eigen::VectorXd cp = a.col(p);
        a.col(p) = c * cp - s * a.col(q);
        a.col(q) = s * cp + c * a.col(q);
      }
    }
    if (!rotated) break;
  }
  std::vector<double> sv(static_cast<std::size_t>(n));
  for (Eigen::Index j = 0; j < n; ++j) sv[static_cast<std::size_t>(j)] = a.col(j).norm();
  std::sort(sv.begin(), sv.end(), std::greater<>());
  return sv;
}

struct Line {
  double slope;
  double intercept;
  double r2;
};

/// Least squares through a QR solve of the design matrix [1, x].
inline Line qr_least_squares(const std::vector<double>& x, const std::vector<double>& y) {
  const auto n = static_cast<Eigen::Index>(x.size());
  Eigen::MatrixXd design(n, 2);
  Eigen::VectorXd rhs(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    design(i, 0) = 1.0;
    design(i, 1) = x[static_cast<std::size_t>(i)];
    rhs(i) = y[static_cast<std::size_t>(i)];
  }
  const Eigen::VectorXd beta = design.colPivHouseholderQr().solve(rhs);
  const double mean = rhs.mean();
  const double ss_tot = (rhs.array() - mean).square().sum();
  const double ss_res = (rhs - design * beta).squaredNorm();
  return {beta(1), beta(0), ss_tot > 0 ? 1.0 - ss_res / ss_tot : 1.0};
}

/// Direct evaluation of the normalized entropy of p_i = s_i^2 / sum s^2.
inline double entropy_direct(const std::vector<double>& s) {
  double total = 0.0;
  for (double v : s) total += v * v;
  double h = 0.0;
  for (double v : s) {
    const double p = v * v / total;
    if (p > 0) h += -p * std::log(p) / std::log(2.0);
  }
  return h * std::log(2.0) / std::log(static_cast<double>(s.size()));
}

}  // namespace spectral::oracle
