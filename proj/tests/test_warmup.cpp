#include <gtest/gtest.h>

#include <random>
#include <sstream>

#include "spectral/spectra.hpp"
#include "spectral/warmup.hpp"
#include "support/reference_svd.hpp"

using namespace spectral;

namespace {

double max_orthogonality_residual(const Eigen::MatrixXd& q) {
  return (q.transpose() * q - Eigen::MatrixXd::Identity(q.cols(), q.cols())).cwiseAbs().maxCoeff();
}

std::vector<double> random_descending(std::size_t k, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(0.1, 10.0);
  std::vector<double> s(k);
  for (auto& v : s) v = u(rng);
  std::sort(s.begin(), s.end(), std::greater<>());
  return s;
}

}  // namespace

TEST(RandomOrthogonal, OneByOne) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const auto q = random_orthogonal(1, seed);
    EXPECT_EQ(std::abs(q(0, 0)), 1.0);
  }
  EXPECT_THROW(random_orthogonal(0, 1), SpectralError);
}

TEST(RandomOrthogonal, OrthogonalToTolerance) {
  for (std::size_t n : {2u, 5u, 17u, 64u, 200u}) {
    for (std::uint64_t seed = 0; seed < 3; ++seed) {
      EXPECT_LT(max_orthogonality_residual(random_orthogonal(n, seed)), 1e-10) << n;
    }
  }
}

TEST(RandomOrthogonal, HaarEntryMeansVanish) {
  constexpr int kDraws = 10000;
  Eigen::Matrix4d corrected = Eigen::Matrix4d::Zero();
  Eigen::Matrix4d uncorrected = Eigen::Matrix4d::Zero();
  for (int i = 0; i < kDraws; ++i) {
    corrected += random_orthogonal(4, static_cast<std::uint64_t>(i));

    // Same Gaussian draw, orthonormalized without the sign folding.
    std::mt19937_64 rng(static_cast<std::uint64_t>(i));
    std::normal_distribution<double> normal;
    Eigen::Matrix4d g;
    for (int c = 0; c < 4; ++c) {
      for (int r = 0; r < 4; ++r) g(r, c) = normal(rng);
    }
    Eigen::HouseholderQR<Eigen::Matrix4d> qr(g);
    uncorrected += Eigen::Matrix4d(qr.householderQ());
  }
  corrected /= kDraws;
  uncorrected /= kDraws;
  EXPECT_LT(corrected.cwiseAbs().maxCoeff(), 0.02);
  EXPECT_LT((corrected.colwise().sum()).cwiseAbs().maxCoeff(), 0.04);
  EXPECT_GT(uncorrected.cwiseAbs().maxCoeff(), 0.1);
}

TEST(Warmup, Examples) {
  WarmupSpec spec;
  spec.rows = spec.cols = 3;
  spec.target_sigma = {3, 2, 1};
  spec.seed = 4;
  auto s = singular_values(spectral_warmup_matrix(spec));
  for (std::size_t i = 0; i < 3; ++i) EXPECT_NEAR(s[i], spec.target_sigma[i], 1e-8 * spec.target_sigma[i]);

  spec.scale = 0.5;
  s = singular_values(spectral_warmup_matrix(spec));
  const std::vector<double> half = {1.5, 1.0, 0.5};
  for (std::size_t i = 0; i < 3; ++i) EXPECT_NEAR(s[i], half[i], 1e-8 * half[i]);

  std::mt19937_64 rng(1);
  WarmupSpec wide{4, 6, random_descending(4, rng), 1.0, 99, "w"};
  const auto w = spectral_warmup_matrix(wide);
  EXPECT_EQ(w.rows(), 4u);
  EXPECT_EQ(w.cols(), 6u);
  const auto ref = oracle::jacobi_singular_values(w.matrix());
  for (std::size_t i = 0; i < 4; ++i) EXPECT_NEAR(ref[i], wide.target_sigma[i], 1e-8 * wide.target_sigma[i]);
}

TEST(Warmup, ValidatesSpec) {
  WarmupSpec bad{3, 2, {1, 2}, 1.0, 0, "x"};
  EXPECT_THROW(spectral_warmup_matrix(bad), SpectralError);
  bad.target_sigma = {2, 1, 0.5};
  EXPECT_THROW(spectral_warmup_matrix(bad), SpectralError);
  bad.target_sigma = {2, 1};
  bad.scale = 0;
  EXPECT_THROW(spectral_warmup_matrix(bad), SpectralError);
}

TEST(Warmup, RoundTripAcrossShapes) {
  std::mt19937_64 rng(77);
  std::uniform_int_distribution<int> dim(1, 48);
  for (int trial = 0; trial < 100; ++trial) {
    std::size_t m = static_cast<std::size_t>(dim(rng));
    std::size_t n = static_cast<std::size_t>(dim(rng));
    if (trial % 3 == 0) n = m;
    if (trial % 3 == 1 && n < m) std::swap(m, n);  // wide
    if (trial % 3 == 2 && m < n) std::swap(m, n);  // tall
    WarmupSpec spec{m, n, random_descending(std::min(m, n), rng), 0.25 + trial * 0.01, static_cast<std::uint64_t>(trial), "t"};
    const auto w = spectral_warmup_matrix(spec);
    const auto s = singular_values(w);
    ASSERT_EQ(s.k(), spec.target_sigma.size());
    for (std::size_t i = 0; i < s.k(); ++i) {
      const double want = spec.scale * spec.target_sigma[i];
      EXPECT_NEAR(s[i], want, 1e-8 * want) << trial << " " << i;
    }
  }
}

TEST(Warmup, DeterministicPerSeed) {
  WarmupSpec spec{8, 5, {5, 4, 3, 2, 1}, 1.0, 11, "d"};
  const auto a = spectral_warmup_matrix(spec);
  const auto b = spectral_warmup_matrix(spec);
  EXPECT_TRUE(std::equal(a.values().begin(), a.values().end(), b.values().begin()));
  spec.seed = 12;
  const auto c = spectral_warmup_matrix(spec);
  EXPECT_FALSE(std::equal(a.values().begin(), a.values().end(), c.values().begin()));
  EXPECT_NE(warmup_seed(1, 0, MatrixType::Q), warmup_seed(1, 0, MatrixType::K));
  EXPECT_NE(warmup_seed(1, 0, MatrixType::Q), warmup_seed(1, 1, MatrixType::Q));
}

TEST(Warmup, MetricsTransferFromSpectrum) {
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t k = 2 + static_cast<std::size_t>(trial);
    WarmupSpec spec{k + 3, k, random_descending(k, rng), 1.7, static_cast<std::uint64_t>(trial), "m"};
    std::vector<double> scaled = spec.target_sigma;
    for (auto& v : scaled) v *= spec.scale;
    const SpectrumVec target(scaled);
    const auto rec = analyze_matrix(spectral_warmup_matrix(spec), 0, {});
    EXPECT_NEAR(*rec.stable_rank, stable_rank(target), 1e-9 * stable_rank(target));
    EXPECT_NEAR(*rec.entropy, spectral_entropy(target), 1e-9);
  }
}

TEST(Warmup, PowerLawFallbackSpectrum) {
  const auto s = power_law_spectrum(50, 0.4, 12.0);
  double ss = 0;
  for (double v : s) ss += v * v;
  EXPECT_NEAR(std::sqrt(ss), 12.0, 1e-12);
  const auto fit = fit_alpha(SpectrumVec(s));
  EXPECT_NEAR(fit.alpha, 0.4, 1e-12);
}

TEST(Warmup, TargetFromReferenceLog) {
  SpectralLog log("ref", 2);
  for (Step step : {0, 100}) {
    for (int l = 0; l < 2; ++l) {
      SpectralRecord r;
      r.step = step;
      r.coord = {l, MatrixType::Q, std::nullopt};
      r.rows = 6;
      r.cols = 4;
      r.alpha = 0.3 + 0.1 * l + (step ? 0.05 : 0.0);
      r.stable_rank = 2;
      r.frob_norm = 5.0;
      log.add(r);
    }
  }
  const auto [rec, sigma] = target_sigma_from_log(log, 1, MatrixType::Q);
  EXPECT_EQ(rec.step, 100);
  ASSERT_EQ(sigma.size(), 4u);
  EXPECT_NEAR(fit_alpha(SpectrumVec(sigma), 1.0).alpha, 0.45, 1e-12);

  SpectraTable table;
  table[record_key(rec)] = {4, 3, 2, 1};
  std::ostringstream out;
  write_spectra_csv(out, table);
  std::istringstream in(out.str());
  const auto back = read_spectra_csv(in);
  EXPECT_EQ(back, table);
  EXPECT_EQ(target_sigma_from_log(log, 1, MatrixType::Q, &back).second, (std::vector<double>{4, 3, 2, 1}));

  table[record_key(rec)] = {4, 3};
  EXPECT_THROW(target_sigma_from_log(log, 1, MatrixType::Q, &table), SpectralError);
  EXPECT_THROW(target_sigma_from_log(log, 1, MatrixType::K), SpectralError);
  EXPECT_EQ(warmup_parameter_name(3, MatrixType::MlpDown), "layers.3.mlp.down_proj.weight");
  EXPECT_EQ(map_parameter_name(warmup_parameter_name(3, MatrixType::MlpDown), NamingScheme::Custom)->matrix_type,
            MatrixType::MlpDown);
}
