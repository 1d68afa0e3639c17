#include <gtest/gtest.h>

#include <cmath>
#include <random>
#include <sstream>

#include "spectral/parallel.hpp"
#include "spectral/twotimescale.hpp"

using namespace spectral;

namespace {

// Straight-line Euler-Maruyama integrator written against the model equations.
struct Reference {
  std::vector<std::vector<double>> R, a;
};

Reference reference_integrate(const SimParams& p) {
  Reference out;
  std::vector<double> R = p.R_init, a = p.alpha_init;
  out.R.push_back(R);
  out.a.push_back(a);
  std::mt19937_64 rng(p.seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  for (int n = 0; n < p.steps; ++n) {
    const double t = n * p.dt;
    for (int l = 0; l < p.layers; ++l) {
      const double xr = normal(rng);
      const double xa = normal(rng);
      const double phi = 1.0 / (1.0 + std::exp(-(t - p.phi.offset - p.phi.tau_per_layer * l) / p.phi.width));
      const double target = p.R_star_per_layer ? (*p.R_star_per_layer)[l] : p.R_star;
      R[l] = R[l] - p.dt * p.lambda_R * phi * (R[l] - target) + p.noise_sigma_R * std::sqrt(p.dt) * xr;
      a[l] = a[l] + p.dt * p.lambda_alpha * p.psi[l] * (p.alpha_star[l] - a[l]) + p.noise_sigma_alpha * std::sqrt(p.dt) * xa;
    }
    out.R.push_back(R);
    out.a.push_back(a);
  }
  return out;
}

SimParams with_ratio(double ratio) {
  auto p = default_sim_params();
  p.lambda_alpha = p.lambda_R / ratio;
  p.steps = static_cast<int>(std::ceil(std::max(5000.0, 10.0 / p.lambda_alpha)));
  return p;
}

Eigen::Index first_row(const Eigen::MatrixXd& m, Eigen::Index col, auto pred) {
  for (Eigen::Index n = 0; n < m.rows(); ++n) {
    if (pred(m(n, col))) return n;
  }
  return -1;
}

double spread(const Eigen::MatrixXd& m, Eigen::Index row) { return m.row(row).maxCoeff() - m.row(row).minCoeff(); }

}  // namespace

TEST(Phi, LogisticFront) {
  const PhiSpec spec{100, 20, 0};
  EXPECT_DOUBLE_EQ(default_phi(3, 300, spec), 0.5);
  EXPECT_NEAR(default_phi(0, 1e6, spec), 1.0, 1e-15);
  EXPECT_NEAR(default_phi(7, -1e6, spec), 0.0, 1e-15);
  for (int l = 0; l < 8; ++l) {
    for (double t = 0; t < 1000; t += 10) {
      EXPECT_LE(default_phi(l, t, spec), default_phi(l, t + 10, spec));
      EXPECT_GE(default_phi(l, t, spec), default_phi(l + 1, t, spec));
    }
  }
}

TEST(Phi, NarrowFrontApproachesHardThreshold) {
  const PhiSpec spec{50, 1e-6, 0};
  for (int l = 0; l < 6; ++l) {
    for (double t = 0.5; t < 400; t += 7.25) {
      const double hard = t > 50.0 * l ? 1.0 : 0.0;
      EXPECT_NEAR(default_phi(l, t, spec), hard, 1e-12) << l << " " << t;
    }
  }
}

TEST(AlphaStar, TentExamples) {
  EXPECT_EQ(default_alpha_star(3, 0.5, 0.1, 0.9), (std::vector<double>{0.1, 0.9, 0.1}));
  const auto down = default_alpha_star(5, 0.0, 0.2, 0.6);
  EXPECT_DOUBLE_EQ(down.front(), 0.6);
  EXPECT_DOUBLE_EQ(down.back(), 0.2);
  for (std::size_t i = 1; i < down.size(); ++i) EXPECT_LT(down[i], down[i - 1]);

  const auto d16 = default_alpha_star(16, 0.13, 0.256, 0.567);
  EXPECT_EQ(std::max_element(d16.begin(), d16.end()) - d16.begin(), 2);
  EXPECT_DOUBLE_EQ(d16[2], 0.567);
  EXPECT_THROW(default_alpha_star(4, 1.5, 0.1, 0.2), SpectralError);
  EXPECT_THROW(default_alpha_star(4, 0.5, 0.2, 0.2), SpectralError);
}

TEST(Simulate, FrozenDynamics) {
  auto p = default_sim_params();
  p.steps = 300;
  p.lambda_R = 0.0;
  auto traj = simulate(p);
  for (Eigen::Index n = 0; n < traj.R.rows(); ++n) EXPECT_EQ(traj.R.row(n), traj.R.row(0));

  p = default_sim_params();
  p.steps = 300;
  p.lambda_alpha = 0.0;
  traj = simulate(p);
  for (Eigen::Index n = 0; n < traj.alpha.rows(); ++n) EXPECT_EQ(traj.alpha.row(n), traj.alpha.row(0));
}

TEST(Simulate, MatchesReferenceIntegrator) {
  for (double noise : {0.0, 0.3}) {
    auto p = default_sim_params();
    p.noise_sigma_R = noise;
    p.noise_sigma_alpha = noise / 100;
    p.seed = 77;
    p.dt = 0.5;
    p.psi = {1, 0.5, 2, 1, 1, 0.25, 1, 3};
    const auto traj = simulate(p);
    const auto ref = reference_integrate(p);
    double worst = 0.0;
    for (int n = 0; n <= p.steps; ++n) {
      EXPECT_DOUBLE_EQ(traj.times[static_cast<std::size_t>(n)], n * p.dt);
      for (int l = 0; l < p.layers; ++l) {
        worst = std::max(worst, std::abs(traj.R(n, l) - ref.R[n][l]));
        worst = std::max(worst, std::abs(traj.alpha(n, l) - ref.a[n][l]));
      }
    }
    EXPECT_LT(worst, 1e-10) << "noise " << noise;
  }
}

TEST(Simulate, ExponentialDecayWithUniformFront) {
  auto p = default_sim_params();
  p.phi.offset = -1e4;  // phi = 1 throughout
  p.lambda_R = 0.01;
  p.dt = 0.1;  // dt * lambda_R = 0.001
  p.steps = 60000;
  const auto traj = simulate(p);
  double worst = 0.0;
  for (Eigen::Index n = 0; n < traj.R.rows(); n += 10) {
    const double t = traj.times[static_cast<std::size_t>(n)];
    for (int l = 0; l < p.layers; ++l) {
      const double exact = p.R_star + (p.R_init[l] - p.R_star) * std::exp(-p.lambda_R * t);
      worst = std::max(worst, std::abs(traj.R(n, l) - exact) / exact);
    }
  }
  EXPECT_LT(worst, 1e-3);
}

TEST(Simulate, MonotoneConvergenceWithoutNoise) {
  const auto p = default_sim_params();
  const auto traj = simulate(p);
  for (int l = 0; l < p.layers; ++l) {
    for (Eigen::Index n = 1; n < traj.R.rows(); ++n) EXPECT_LE(traj.R(n, l), traj.R(n - 1, l));
    EXPECT_NEAR(traj.R(traj.R.rows() - 1, l), p.R_star, 1e-6);
  }
}

TEST(Simulate, StabilityGuardAndValidation) {
  auto p = default_sim_params();
  p.dt = 40.0;  // dt * lambda_R = 2
  try {
    simulate(p);
    FAIL();
  } catch (const SpectralError& e) {
    EXPECT_EQ(e.code(), ErrorCode::InvalidConfig);
  }
  p = default_sim_params();
  p.psi.pop_back();
  EXPECT_THROW(simulate(p), SpectralError);
  p = default_sim_params();
  p.lambda_alpha = p.lambda_R;
  EXPECT_EQ(validate(p).size(), 1u);
  EXPECT_TRUE(validate(default_sim_params()).empty());
}

TEST(Simulate, InstabilityReportsStep) {
  auto p = default_sim_params();
  p.lambda_R = -1.0;  // rejected by validation
  EXPECT_THROW(simulate(p), SpectralError);
  p = default_sim_params();
  p.R_init[2] = 1e308;
  p.R_star = -1e308;
  p.phi.offset = -1e4;
  try {
    simulate(p);
    FAIL();
  } catch (const SpectralError& e) {
    EXPECT_EQ(e.code(), ErrorCode::Instability);
    EXPECT_NE(std::string(e.what()).find("step 1"), std::string::npos);
  }
}

TEST(Simulate, DeterministicAcrossRunsAndThreads) {
  auto p = default_sim_params();
  p.noise_sigma_R = 1.0;
  p.noise_sigma_alpha = 0.01;
  p.seed = 5;
  const auto a = simulate(p);
  const auto b = simulate(p);
  EXPECT_EQ(a.R, b.R);
  EXPECT_EQ(a.alpha, b.alpha);

  // A concurrent parameter sweep gives the same trajectories as a serial one.
  std::vector<SimParams> sweep(6, p);
  for (std::size_t i = 0; i < sweep.size(); ++i) sweep[i].seed = i;
  std::vector<SimTrajectory> parallel(sweep.size()), serial(sweep.size());
  parallel_for(sweep.size(), [&](std::size_t lo, std::size_t hi) {
    for (std::size_t i = lo; i < hi; ++i) parallel[i] = simulate(sweep[i]);
  }, 3);
  for (std::size_t i = 0; i < sweep.size(); ++i) {
    serial[i] = simulate(sweep[i]);
    EXPECT_EQ(parallel[i].R, serial[i].R);
  }
  p.seed = 6;
  EXPECT_NE(simulate(p).R, a.R);
}

TEST(Predictions, DefaultsHold) {
  const auto p = default_sim_params();
  const auto rep = check_predictions(simulate(p), p);
  EXPECT_TRUE(rep.transient_sr_gradient);
  EXPECT_TRUE(rep.persistent_alpha_gradient);
  EXPECT_TRUE(rep.forward_wave);
  EXPECT_TRUE(rep.all());
  EXPECT_TRUE(rep.flags.empty());
  EXPECT_DOUBLE_EQ(rep.sr_initial_span, 80.0);
  EXPECT_GT(rep.sr_peak_abs_gradient, 10.0);
  EXPECT_FALSE(rep.notes.empty());
  for (std::size_t l = 1; l < rep.onset_steps.size(); ++l) EXPECT_GT(*rep.onset_steps[l], *rep.onset_steps[l - 1]);
  const auto j = to_json(rep);
  EXPECT_TRUE(j["all_hold"].get<bool>());
}

TEST(Predictions, NoWaveIsFlagged) {
  auto p = default_sim_params();
  p.phi.tau_per_layer = 0.0;
  const auto rep = check_predictions(simulate(p), p);
  EXPECT_TRUE(rep.forward_wave);
  for (const auto& o : rep.onset_steps) EXPECT_EQ(o, rep.onset_steps.front());
  EXPECT_NE(std::find(rep.flags.begin(), rep.flags.end(), "no wave configured"), rep.flags.end());
}

TEST(Predictions, ConstantTargetIsFlagged) {
  auto p = default_sim_params();
  p.alpha_star.assign(8, 0.35);
  const auto traj = simulate(p);
  const auto rep = check_predictions(traj, p);
  EXPECT_NEAR(rep.alpha_final_spread, 0.0, 1e-12);
  EXPECT_NE(std::find(rep.flags.begin(), rep.flags.end(), "persistent gradient absent by construction"), rep.flags.end());
}

TEST(Predictions, RejectNoisyTrajectory) {
  auto p = default_sim_params();
  p.steps = 10;
  p.noise_sigma_R = 0.1;
  try {
    check_predictions(simulate(p), p);
    FAIL();
  } catch (const SpectralError& e) {
    EXPECT_EQ(e.code(), ErrorCode::NoisyTrajectory);
  }
}

TEST(Predictions, PerLayerTargetProducesPositiveFinalGradient) {
  auto p = default_sim_params();
  p.R_star_per_layer = std::vector<double>{30, 28, 26, 24, 22, 20, 18, 16};
  const auto rep = check_predictions(simulate(p), p);
  EXPECT_NEAR(rep.sr_final_gradient, 14.0, 1e-6);
  EXPECT_FALSE(rep.transient_sr_gradient);
  EXPECT_TRUE(rep.notes.empty());
}

TEST(Predictions, AlphaSpreadMonotoneAcrossRateRatios) {
  for (double ratio : {10.0, 50.0, 100.0}) {
    const auto p = with_ratio(ratio);
    const auto rep = check_predictions(simulate(p), p);
    EXPECT_TRUE(rep.alpha_spread_monotone) << ratio;
    EXPECT_TRUE(rep.persistent_alpha_gradient) << ratio;
  }
}

// SR relaxation time once a layer's compression starts (onset at 0.9 to half
// of the initial excess) versus the time for the alpha spread to reach half
// its final value.
TEST(Predictions, TimescaleOrdering) {
  for (double ratio : {10.0, 25.0, 50.0, 100.0}) {
    const auto p = with_ratio(ratio);
    const auto traj = simulate(p);
    Eigen::Index sr_time = 0;
    for (int l = 0; l < p.layers; ++l) {
      const double excess = p.R_init[l] - p.R_star;
      const auto onset = first_row(traj.R, l, [&](double r) { return r < 0.9 * p.R_init[l]; });
      const auto half = first_row(traj.R, l, [&](double r) { return r - p.R_star <= 0.5 * excess; });
      ASSERT_GE(onset, 0);
      ASSERT_GE(half, onset);
      sr_time = std::max(sr_time, half - onset);
    }
    const double final_spread = spread(traj.alpha, traj.alpha.rows() - 1);
    Eigen::Index alpha_time = -1;
    for (Eigen::Index n = 0; n < traj.alpha.rows() && alpha_time < 0; ++n) {
      if (spread(traj.alpha, n) >= 0.5 * final_spread) alpha_time = n;
    }
    EXPECT_LT(sr_time, alpha_time) << "ratio " << ratio;
  }
}

TEST(SimParamsJson, RoundTripAndShorthands) {
  auto p = default_sim_params();
  p.seed = 9;
  p.phi.offset = -5;
  p.R_star_per_layer = std::vector<double>(8, 3.0);
  const auto back = sim_params_from_json(to_json(p));
  EXPECT_EQ(to_json(back), to_json(p));

  const auto q = sim_params_from_json({{"layers", 4}, {"R_init", 50.0}, {"alpha_star_tent", {{"peak_ratio", 0.5}, {"alpha_lo", 0.1}, {"alpha_hi", 0.3}}}});
  EXPECT_EQ(q.layers, 4);
  EXPECT_EQ(q.R_init, std::vector<double>(4, 50.0));
  EXPECT_EQ(q.alpha_star.size(), 4u);
  EXPECT_EQ(q.psi.size(), 4u);
  EXPECT_THROW(sim_params_from_json({{"steps", "many"}}), SpectralError);
}

TEST(TrajectoryCsv, LongForm) {
  auto p = default_sim_params();
  p.layers = 2;
  p.steps = 1;
  p.alpha_star = {0.2, 0.3};
  p.psi = {1, 1};
  p.R_init = {100, 100};
  p.alpha_init = {0.1, 0.1};
  std::ostringstream out;
  write_trajectory_csv(out, simulate(p));
  std::istringstream in(out.str());
  std::string line;
  std::getline(in, line);
  EXPECT_EQ(line, "time,layer,R,alpha");
  int rows = 0;
  while (std::getline(in, line)) ++rows;
  EXPECT_EQ(rows, 4);
}
