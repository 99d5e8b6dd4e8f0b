#include <gtest/gtest.h>

#include <cmath>
#include <numbers>
#include <vector>

#include "tinyman/envsim.hpp"

namespace tinyman {
namespace {

std::vector<double> flat(double v, std::size_t n = 24) { return std::vector<double>(n, v); }

TEST(EnvReset, NormalizesByCapacity) {
  const EnergyEnv env{DeviceConfig{}};
  const auto profile = default_cluster_profile(2);
  auto r = env.reset(profile, 16.0, 7);
  EXPECT_DOUBLE_EQ(r.obs.battery_norm, 0.1);
  EXPECT_DOUBLE_EQ(r.obs.initial_battery_norm, 0.1);
  EXPECT_EQ(r.state.t, 0u);
  EXPECT_EQ(r.state.prev_harvest_j, 0.0);
  EXPECT_EQ(r.state.cum_harvest_j, 0.0);
  EXPECT_EQ(r.state.target_j, 16.0);
  EXPECT_EQ(r.obs.time_norm, 0.0);

  EXPECT_DOUBLE_EQ(env.reset(profile, 160.0, 7).obs.battery_norm, 1.0);
}

TEST(EnvReset, RejectsOutOfRangeInitialBattery) {
  const EnergyEnv env{DeviceConfig{}};
  const auto profile = default_cluster_profile(2);
  EXPECT_THROW(env.reset(profile, 8.0, 7), RangeError);
  EXPECT_THROW(env.reset(profile, 160.5, 7), RangeError);
}

TEST(EnvReset, RandomInitialBatteryInEnvelope) {
  const EnergyEnv env{DeviceConfig{}};
  const auto profile = default_cluster_profile(3);
  double lo = 1e9, hi = -1e9;
  for (std::uint64_t s = 0; s < 2000; ++s) {
    const auto r = env.reset(profile, std::nullopt, s);
    lo = std::min(lo, r.state.battery_j);
    hi = std::max(hi, r.state.battery_j);
    EXPECT_EQ(r.state.target_j, r.state.initial_battery_j);
  }
  EXPECT_GE(lo, kRandomInitLowJ);
  EXPECT_LE(hi, kRandomInitHighJ);
  EXPECT_LT(lo, 20.0);
  EXPECT_GT(hi, 140.0);
}

TEST(EnvReset, ParametricProfileResampledPerSeed) {
  const EnergyEnv env{DeviceConfig{}};
  const auto profile = default_cluster_profile(2);
  const auto a = env.reset(profile, 50.0, 1).state.harvest_j;
  const auto b = env.reset(profile, 50.0, 2).state.harvest_j;
  const auto a2 = env.reset(profile, 50.0, 1).state.harvest_j;
  EXPECT_NE(a, b);
  EXPECT_EQ(a, a2);
}

TEST(EnvStep, BatteryDynamics) {
  const EnergyEnv env{DeviceConfig{}};
  auto [s, obs] = env.reset_with_trace(flat(5.0), 100.0);
  const auto out = env.step_alloc(s, 20.0);
  EXPECT_DOUBLE_EQ(out.info.battery_after_j, 85.0);
  EXPECT_DOUBLE_EQ(s.battery_j, 85.0);
  EXPECT_EQ(s.t, 1u);
  EXPECT_DOUBLE_EQ(out.next_obs.prev_harvest_norm, 5.0 / 160.0);
  EXPECT_DOUBLE_EQ(out.next_obs.cum_harvest_norm, 5.0 / 160.0);
  EXPECT_DOUBLE_EQ(out.next_obs.time_norm, 1.0 / 24.0);
}

TEST(EnvStep, EfficienciesScaleHarvestAndConsumption) {
  DeviceConfig cfg;
  cfg.alpha = 0.5;
  cfg.beta = 0.8;
  const EnergyEnv env{cfg};
  auto [s, obs] = env.reset_with_trace(flat(10.0), 100.0);
  const auto out = env.step_alloc(s, 20.0);
  EXPECT_DOUBLE_EQ(out.info.battery_after_j, 100.0 + 8.0 - 10.0);
}

TEST(EnvStep, UtilityRewardAboveReservoir) {
  const EnergyEnv env{DeviceConfig{}};
  auto [s, obs] = env.reset_with_trace(flat(0.0), 50.0);
  const auto out = env.step_alloc(s, 1.28);
  EXPECT_NEAR(out.reward, std::log(2.0), 1e-12);
  EXPECT_NEAR(out.reward, 0.6931, 1e-4);
}

TEST(EnvStep, ReservoirPenaltyBelowFloor) {
  const EnergyEnv env{DeviceConfig{}};
  // 8.64 - 0.64 = 8 J after the step
  auto [s, obs] = env.reset_with_trace(flat(0.0), 10.0);
  s.battery_j = 8.64;
  const auto out = env.step_alloc(s, 0.64);
  EXPECT_NEAR(out.info.battery_after_j, 8.0, 1e-12);
  EXPECT_NEAR(out.reward, -4.0, 1e-9);
  EXPECT_FALSE(out.done);
}

TEST(EnvStep, RewardContinuousAtReservoirBoundary) {
  const EnergyEnv env{DeviceConfig{}};
  auto [s, obs] = env.reset_with_trace(flat(0.0), 12.0);
  const auto out = env.step_alloc(s, 2.0);  // lands exactly on 10 J
  EXPECT_DOUBLE_EQ(out.info.battery_after_j, 10.0);
  EXPECT_NEAR(out.reward, log_utility(2.0, 0.64), 1e-12);

  // Slightly below: the penalty is second order.
  auto r2 = env.reset_with_trace(flat(0.0), 12.0);
  const auto below = env.step_alloc(r2.state, 2.0 + 1e-6);
  EXPECT_NEAR(below.reward, out.reward, 1e-6);
}

TEST(EnvStep, FinalStepCombinedAndLiteral) {
  for (auto mode : {FinalRewardMode::kCombined, FinalRewardMode::kLiteral}) {
    const EnergyEnv env{DeviceConfig{}, mode};
    auto [s, obs] = env.reset_with_trace(flat(0.0), 16.0);
    s.t = 23;
    s.battery_j = 20.64;
    const auto out = env.step_alloc(s, 0.64);  // battery_T = 20, target 16
    ASSERT_TRUE(out.done);
    EXPECT_NEAR(*out.info.terminal_deviation_j, 4.0, 1e-12);
    const double expected = mode == FinalRewardMode::kCombined ? -16.0 + 0.0 : -16.0;
    EXPECT_NEAR(out.reward, expected, 1e-9);
  }
  const EnergyEnv env{DeviceConfig{}};
  auto [s, obs] = env.reset_with_trace(flat(0.0), 16.0);
  s.t = 23;
  s.battery_j = 21.28;
  const auto out = env.step_alloc(s, 1.28);
  EXPECT_NEAR(out.reward, std::log(2.0) - 16.0, 1e-9);
}

TEST(EnvStep, CapacityClipWastesOverflow) {
  const EnergyEnv env{DeviceConfig{}};
  auto [s, obs] = env.reset_with_trace(flat(10.0), 158.0);
  const auto out = env.step_alloc(s, 0.64);
  EXPECT_DOUBLE_EQ(out.info.battery_after_j, 160.0);
}

TEST(EnvStep, DrainTerminatesWithPenalty) {
  const EnergyEnv env{DeviceConfig{}};
  auto [s, obs] = env.reset_with_trace(flat(0.0), 16.0);
  const auto out = env.step(s, 1.0);  // allocate everything
  EXPECT_TRUE(out.done);
  EXPECT_DOUBLE_EQ(out.info.alloc_applied_j, 16.0);
  EXPECT_EQ(out.info.battery_after_j, 0.0);
  const double expected = log_utility(16.0, 0.64) - 100.0 - 256.0;
  EXPECT_NEAR(out.reward, expected, 1e-9);
  EXPECT_THROW(env.step(s, 0.0), UsageError);
}

TEST(EnvStep, ForcedDrainBelowMinimumAllocation) {
  const EnergyEnv env{DeviceConfig{}};
  auto [s, obs] = env.reset_with_trace(flat(0.0), 16.0);
  s.battery_j = 0.3;
  const auto out = env.step(s, -1.0);
  EXPECT_DOUBLE_EQ(out.info.alloc_applied_j, 0.3);
  EXPECT_TRUE(out.done);
}

TEST(EnvStep, ActionMappingEndpoints) {
  EXPECT_DOUBLE_EQ(allocation_from_action(-1.0, 50.0, 0.64), 0.64);
  EXPECT_DOUBLE_EQ(allocation_from_action(-7.0, 50.0, 0.64), 0.64);
  EXPECT_DOUBLE_EQ(allocation_from_action(1.0, 50.0, 0.64), 50.0);
  EXPECT_DOUBLE_EQ(allocation_from_action(3.0, 50.0, 0.64), 50.0);
  EXPECT_NEAR(allocation_from_action(0.0, 50.0, 0.64), 25.32, 1e-12);
  EXPECT_DOUBLE_EQ(allocation_from_action(0.9, 0.64, 0.64), 0.64);
}

TEST(EnvStep, GeometricMappingIsLogLinear) {
  constexpr auto g = ActionMapping::kGeometric;
  EXPECT_DOUBLE_EQ(allocation_from_action(-1.0, 50.0, 0.64, g), 0.64);
  EXPECT_NEAR(allocation_from_action(1.0, 50.0, 0.64, g), 50.0, 1e-12);
  EXPECT_NEAR(allocation_from_action(0.0, 64.0, 0.64, g), 6.4, 1e-12);
  EXPECT_DOUBLE_EQ(allocation_from_action(0.2, 0.5, 0.64, g), 0.5);
  double prev = 0.0;
  for (double a = -1.0; a <= 1.0; a += 0.125) {
    const double alloc = allocation_from_action(a, 90.0, 0.64, g);
    EXPECT_GT(alloc, prev);
    EXPECT_LE(alloc, 90.0);
    prev = alloc;
  }
}

TEST(EnvStep, EpisodeLengthAndDone) {
  const EnergyEnv env{DeviceConfig{}};
  auto [s, obs] = env.reset_with_trace(flat(1.0), 80.0);
  int steps = 0;
  StepOutcome out;
  while (!s.done) {
    out = env.step(s, -0.95);
    ++steps;
  }
  EXPECT_EQ(steps, 24);
  EXPECT_EQ(s.t, 24u);
  EXPECT_DOUBLE_EQ(out.next_obs.time_norm, 1.0);
  ASSERT_TRUE(out.info.terminal_deviation_j.has_value());
}

TEST(EnvFuzz, BatteryBoundedAndAllocationInRange) {
  const EnergyEnv env{DeviceConfig{}};
  Rng rng(derive_seed(1, Stream::kTest));
  const auto profile = default_cluster_profile(4, 1.5);
  for (int ep = 0; ep < 2000; ++ep) {
    auto [s, obs] = env.reset(profile, std::nullopt, rng.next_u64());
    while (!s.done) {
      const double before = s.battery_j;
      const auto out = env.step(s, rng.uniform(-3.0, 3.0));
      ASSERT_GE(s.battery_j, 0.0);
      ASSERT_LE(s.battery_j, 160.0);
      ASSERT_GE(out.info.alloc_applied_j, std::min(0.64, before) - 1e-15);
      ASSERT_LE(out.info.alloc_applied_j, before + 1e-15);
      ASSERT_TRUE(std::isfinite(out.reward));
      ASSERT_EQ(out.done, s.t == 24 || s.battery_j == 0.0);
    }
  }
}

TEST(EnvFuzz, EnergyConservationWithoutClipping) {
  const EnergyEnv env{DeviceConfig{}};
  Rng rng(derive_seed(2, Stream::kTest));
  for (int ep = 0; ep < 500; ++ep) {
    std::vector<double> trace(24);
    for (double& h : trace) h = rng.uniform(0.0, 3.0);
    auto [s, obs] = env.reset_with_trace(trace, 80.0);
    double harvest = 0.0, spent = 0.0;
    while (!s.done) {
      const auto out = env.step_alloc(s, rng.uniform(0.64, 3.0));
      harvest += out.info.harvest_j;
      spent += out.info.alloc_applied_j;
      ASSERT_NEAR(s.battery_j, 80.0 + harvest - spent, 1e-9);
      ASSERT_NEAR(s.cum_harvest_j, harvest, 1e-12);
    }
  }
}

TEST(Utility, LogarithmicValues) {
  EXPECT_EQ(log_utility(0.64, 0.64), 0.0);
  EXPECT_NEAR(log_utility(0.64 * std::numbers::e, 0.64), 1.0, 1e-12);
  EXPECT_NEAR(log_utility(2.0, 0.64), std::log(3.125), 1e-12);
  EXPECT_NEAR(log_utility(2.0, 0.64), 1.1394, 1e-4);
  EXPECT_THROW(log_utility(0.0, 0.64), DomainError);
  EXPECT_THROW(log_utility(-1.0, 0.64), DomainError);
}

TEST(Utility, Pluggable) {
  EnergyEnv env{DeviceConfig{}};
  env.set_utility([](double a) { return std::sqrt(a) - std::sqrt(0.64); });
  auto [s, obs] = env.reset_with_trace(flat(0.0), 50.0);
  const auto out = env.step_alloc(s, 4.0);
  EXPECT_NEAR(out.reward, 2.0 - 0.8, 1e-12);
}

TEST(SampleProfile, ZeroProfileIsZero) {
  const auto p = HarvestProfile::parametric(flat(0.0), flat(0.0));
  EXPECT_EQ(sample_profile(p, 3), flat(0.0));
}

TEST(SampleProfile, DeterministicUnderSeed) {
  const auto p = default_cluster_profile(2);
  EXPECT_EQ(sample_profile(p, 11), sample_profile(p, 11));
  EXPECT_NE(sample_profile(p, 11), sample_profile(p, 12));
}

TEST(SampleProfile, TraceKindRejected) {
  const auto p = HarvestProfile::from_trace(flat(1.0));
  EXPECT_THROW(sample_profile(p, 1), UsageError);
}

TEST(SampleProfile, TruncatedNormalMeanMatchesAnalytic) {
  // E[X | X >= 0] for X ~ N(mu, sigma^2): mu + sigma * phi(a) / (1 - Phi(a)),
  // a = -mu / sigma.
  const double mu = 5.0, sigma = 2.0;
  const double a = -mu / sigma;
  const double phi = std::exp(-0.5 * a * a) / std::sqrt(2.0 * std::numbers::pi);
  const double tail = 0.5 * std::erfc(a / std::numbers::sqrt2);
  const double analytic = mu + sigma * phi / tail;

  const auto p = HarvestProfile::parametric(flat(mu, 1), flat(sigma, 1));
  double sum = 0.0;
  const int n = 100000;
  for (int i = 0; i < n; ++i) sum += sample_profile(p, static_cast<std::uint64_t>(i))[0];
  EXPECT_NEAR(sum / n, analytic, 0.01 * analytic);
}

TEST(SampleProfile, NegativeParametersRejected) {
  EXPECT_THROW(HarvestProfile::parametric(flat(-1.0), flat(0.0)), RangeError);
  EXPECT_THROW(HarvestProfile::parametric(flat(1.0), flat(0.0, 23)), ShapeError);
  EXPECT_THROW(HarvestProfile::from_trace(flat(-0.1)), RangeError);
}

TEST(ClusterProfiles, OrderedByDailyTotal) {
  double prev = 0.0;
  for (int c = 1; c <= 4; ++c) {
    const auto p = default_cluster_profile(c);
    double total = 0.0;
    for (double m : p.hourly_mean_j) total += m;
    EXPECT_GT(total, prev);
    prev = total;
    EXPECT_EQ(p.hourly_mean_j[0], 0.0);  // midnight is dark
    EXPECT_EQ(p.hourly_mean_j[23], 0.0);
  }
  EXPECT_THROW(default_cluster_profile(5), RangeError);
  EXPECT_THROW(default_cluster_profile(1, -1.0), RangeError);
  const auto zero = default_cluster_profile(3, 0.0);
  EXPECT_EQ(sample_profile(zero, 9), flat(0.0));
}

TEST(DeviceConfig, Validation) {
  DeviceConfig c;
  EXPECT_NO_THROW(c.validate());
  c.min_alloc_j = 20.0;
  EXPECT_THROW(c.validate(), RangeError);
  c = {};
  c.alpha = 0.0;
  EXPECT_THROW(c.validate(), RangeError);
  c = {};
  c.horizon_steps = 0;
  EXPECT_THROW(c.validate(), RangeError);
}

}  // namespace
}  // namespace tinyman
