#pragma once

// Episodic simulator of one day of a battery-powered, energy-harvesting
// wearable. One step is one hour: the manager allocates energy from the
// battery, the harvester refills it, and the reward scores device utility
// against the emergency-reservoir and energy-neutral (end-of-day) targets.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <numbers>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "tinyman/errors.hpp"
#include "tinyman/rng.hpp"

namespace tinyman {

inline constexpr std::size_t kObservationSize = 5;
// Envelope for random initial battery levels (10% .. 90% of 160 J).
inline constexpr double kRandomInitLowJ = 16.0;
inline constexpr double kRandomInitHighJ = 144.0;

// How a clipped raw action a in [-1, 1] spreads over [min_alloc, battery].
// kLinear is affine; kGeometric is affine in log(alloc), so equal action
// steps give equal utility steps.
enum class ActionMapping : std::uint8_t { kLinear = 0, kGeometric = 1 };

struct DeviceConfig {
  double capacity_j = 160.0;
  double reservoir_j = 10.0;
  double min_alloc_j = 0.64;
  double alpha = 1.0;  // fraction of the allocation actually consumed
  double beta = 1.0;   // harvester efficiency
  int horizon_steps = 24;
  ActionMapping action_mapping = ActionMapping::kLinear;

  void validate() const {
    if (!(min_alloc_j > 0.0 && min_alloc_j < reservoir_j &&
          reservoir_j < capacity_j)) {
      throw RangeError(
          "min_alloc_j must satisfy 0 < min_alloc_j < reservoir_j < capacity_j");
    }
    if (!(alpha > 0.0 && alpha <= 1.0)) throw RangeError("alpha must be in (0, 1]");
    if (!(beta > 0.0 && beta <= 1.0)) throw RangeError("beta must be in (0, 1]");
    if (horizon_steps < 1) throw RangeError("horizon_steps must be >= 1");
  }

  std::size_t horizon() const { return static_cast<std::size_t>(horizon_steps); }
};

// Logarithmic utility relative to the idle floor: u(min_alloc) = 0.
inline double log_utility(double alloc_j, double min_alloc_j) {
  if (!(alloc_j > 0.0)) {
    throw DomainError("utility is undefined for allocation <= 0 J");
  }
  return std::log(alloc_j / min_alloc_j);
}

// Maps a raw policy output to an allocation in [min_alloc, battery]. A battery
// below the idle floor is drained completely.
inline double allocation_from_action(double action_raw, double battery_j,
                                     double min_alloc_j,
                                     ActionMapping mapping = ActionMapping::kLinear) {
  if (battery_j < min_alloc_j) return battery_j;
  const double frac = 0.5 * (std::clamp(action_raw, -1.0, 1.0) + 1.0);
  if (mapping == ActionMapping::kGeometric) {
    return std::min(battery_j, min_alloc_j * std::pow(battery_j / min_alloc_j, frac));
  }
  return min_alloc_j + frac * (battery_j - min_alloc_j);
}

inline const char* to_string(ActionMapping m) {
  return m == ActionMapping::kGeometric ? "geometric" : "linear";
}

// ---------------------------------------------------------------------------
// Harvest source

enum class ProfileKind { kParametric, kTrace };

struct HarvestProfile {
  ProfileKind kind = ProfileKind::kParametric;
  std::vector<double> hourly_mean_j;
  std::vector<double> hourly_std_j;
  std::vector<double> trace_j;
  std::string cluster_label;

  static HarvestProfile parametric(std::vector<double> mean,
                                   std::vector<double> stddev,
                                   std::string label = {}) {
    HarvestProfile p;
    p.kind = ProfileKind::kParametric;
    p.hourly_mean_j = std::move(mean);
    p.hourly_std_j = std::move(stddev);
    p.cluster_label = std::move(label);
    p.validate();
    return p;
  }

  static HarvestProfile from_trace(std::vector<double> trace,
                                   std::string label = {}) {
    HarvestProfile p;
    p.kind = ProfileKind::kTrace;
    p.trace_j = std::move(trace);
    p.cluster_label = std::move(label);
    p.validate();
    return p;
  }

  // Hours covered by the profile.
  std::size_t length() const {
    return kind == ProfileKind::kTrace ? trace_j.size() : hourly_mean_j.size();
  }

  // Expected per-hour harvest: the means, or the trace itself.
  std::vector<double> expected() const {
    return kind == ProfileKind::kTrace ? trace_j : hourly_mean_j;
  }

  void validate() const {
    const auto nonneg = [](const std::vector<double>& v) {
      return std::all_of(v.begin(), v.end(),
                         [](double x) { return std::isfinite(x) && x >= 0.0; });
    };
    if (kind == ProfileKind::kParametric) {
      if (hourly_mean_j.size() != hourly_std_j.size()) {
        throw ShapeError("hourly_mean_j and hourly_std_j differ in length");
      }
      if (!nonneg(hourly_mean_j) || !nonneg(hourly_std_j)) {
        throw RangeError("harvest means and stds must be finite and >= 0");
      }
    } else if (!nonneg(trace_j)) {
      throw RangeError("harvest trace values must be finite and >= 0");
    }
  }
};

// Independent per-hour draws from normals truncated below at zero.
inline std::vector<double> sample_profile(const HarvestProfile& profile,
                                          std::uint64_t seed) {
  if (profile.kind != ProfileKind::kParametric) {
    throw UsageError("trace profiles replay verbatim and cannot be sampled");
  }
  Rng rng(seed);
  std::vector<double> out(profile.hourly_mean_j.size());
  for (std::size_t h = 0; h < out.size(); ++h) {
    out[h] = rng.truncated_normal_nonneg(profile.hourly_mean_j[h],
                                         profile.hourly_std_j[h]);
  }
  return out;
}

// Built-in diurnal cluster templates, 1 (darkest) .. 4 (brightest). Harvest
// is zero at night and follows a sine-power daylight bump; the daily
// expected totals increase strictly with the cluster index.
inline HarvestProfile default_cluster_profile(int cluster, double scale = 1.0,
                                              int horizon = 24) {
  struct Template {
    double daily_total_j;
    double first_hour;
    double last_hour;
    double cv;
  };
  static constexpr std::array<Template, 4> kTemplates{{
      {55.0, 7.0, 19.0, 0.50},
      {90.0, 6.0, 20.0, 0.45},
      {135.0, 6.0, 21.0, 0.40},
      {200.0, 5.0, 21.0, 0.35},
  }};
  if (cluster < 1 || cluster > 4) throw RangeError("cluster must be 1..4");
  if (!(scale >= 0.0) || !std::isfinite(scale)) {
    throw RangeError("profile scale must be >= 0");
  }
  if (horizon != 24) throw ShapeError("cluster templates describe a 24 h day");
  const Template& tpl = kTemplates[static_cast<std::size_t>(cluster - 1)];

  std::vector<double> shape(24, 0.0);
  double shape_sum = 0.0;
  for (std::size_t h = 0; h < 24; ++h) {
    const double mid = static_cast<double>(h) + 0.5;
    if (mid > tpl.first_hour && mid < tpl.last_hour) {
      const double x = (mid - tpl.first_hour) / (tpl.last_hour - tpl.first_hour);
      shape[h] = std::pow(std::sin(std::numbers::pi * x), 1.5);
      shape_sum += shape[h];
    }
  }
  std::vector<double> mean(24), stddev(24);
  for (std::size_t h = 0; h < 24; ++h) {
    mean[h] = scale * tpl.daily_total_j * shape[h] / shape_sum;
    stddev[h] = tpl.cv * mean[h];
  }
  return HarvestProfile::parametric(std::move(mean), std::move(stddev),
                                    "cluster" + std::to_string(cluster));
}

// ---------------------------------------------------------------------------
// Environment

struct Observation {
  double battery_norm = 0.0;
  double prev_harvest_norm = 0.0;
  double initial_battery_norm = 0.0;
  double time_norm = 0.0;
  double cum_harvest_norm = 0.0;

  std::array<double, kObservationSize> to_array() const {
    return {battery_norm, prev_harvest_norm, initial_battery_norm, time_norm,
            cum_harvest_norm};
  }
};

struct EnvState {
  double battery_j = 0.0;
  std::size_t t = 0;
  double initial_battery_j = 0.0;
  double prev_harvest_j = 0.0;
  double cum_harvest_j = 0.0;
  double target_j = 0.0;
  bool done = false;
  std::vector<double> harvest_j;  // the day's trace, revealed hour by hour
};

struct StepInfo {
  double alloc_applied_j = 0.0;
  double harvest_j = 0.0;
  double battery_after_j = 0.0;
  std::optional<double> terminal_deviation_j;  // battery_T - target, when done
};

struct StepOutcome {
  Observation next_obs;
  double reward = 0.0;
  bool done = false;
  StepInfo info;
};

// How the last hour of the day is rewarded. kCombined keeps the utility of
// the final allocation and adds the end-of-day penalty; kLiteral scores the
// final hour by the penalty alone.
enum class FinalRewardMode { kCombined, kLiteral };

struct ResetResult {
  EnvState state;
  Observation obs;
};

class EnergyEnv {
 public:
  using UtilityFn = std::function<double(double alloc_j)>;

  explicit EnergyEnv(DeviceConfig config,
                     FinalRewardMode final_mode = FinalRewardMode::kCombined)
      : config_(config), final_mode_(final_mode) {
    config_.validate();
    const double floor = config_.min_alloc_j;
    utility_ = [floor](double a) { return log_utility(a, floor); };
  }

  // Any monotone utility with u(min_alloc) = 0 may replace the default.
  void set_utility(UtilityFn fn) { utility_ = std::move(fn); }
  double utility(double alloc_j) const { return utility_(alloc_j); }

  const DeviceConfig& config() const { return config_; }
  FinalRewardMode final_mode() const { return final_mode_; }

  // Starts a day. `init_battery_j == nullopt` draws the initial level
  // uniformly from [16, 144] J; parametric profiles are sampled into a fresh
  // trace. Both draws come from `seed`.
  ResetResult reset(const HarvestProfile& profile,
                    std::optional<double> init_battery_j,
                    std::uint64_t seed) const {
    if (profile.length() != config_.horizon()) {
      throw ShapeError("harvest profile length differs from horizon_steps");
    }
    Rng rng(seed);
    double init = 0.0;
    if (init_battery_j) {
      init = *init_battery_j;
    } else {
      init = rng.uniform(kRandomInitLowJ, kRandomInitHighJ);
    }
    std::vector<double> trace =
        profile.kind == ProfileKind::kTrace
            ? profile.trace_j
            : sample_profile(profile, rng.next_u64());
    return reset_with_trace(std::move(trace), init);
  }

  ResetResult reset_with_trace(std::vector<double> trace,
                               double init_battery_j) const {
    if (trace.size() != config_.horizon()) {
      throw ShapeError("harvest trace length differs from horizon_steps");
    }
    if (!(init_battery_j >= config_.reservoir_j &&
          init_battery_j <= config_.capacity_j)) {
      throw RangeError("initial battery must lie in [reservoir_j, capacity_j]");
    }
    EnvState s;
    s.battery_j = init_battery_j;
    s.initial_battery_j = init_battery_j;
    s.target_j = init_battery_j;
    s.harvest_j = std::move(trace);
    Observation obs = observe(s);
    return {std::move(s), obs};
  }

  Observation observe(const EnvState& s) const {
    const double cap = config_.capacity_j;
    return {s.battery_j / cap, s.prev_harvest_j / cap, s.initial_battery_j / cap,
            static_cast<double>(s.t) / static_cast<double>(config_.horizon_steps),
            s.cum_harvest_j / cap};
  }

  // Advances one hour with a raw policy action (clipped to [-1, 1]).
  StepOutcome step(EnvState& s, double action_raw) const {
    if (s.done) throw UsageError("step called on a finished episode");
    return apply(s, allocation_from_action(action_raw, s.battery_j,
                                           config_.min_alloc_j,
                                           config_.action_mapping));
  }

  // Advances one hour with an explicit allocation request. The request is
  // clamped to [min_alloc, battery], or the whole battery if it holds less
  // than min_alloc.
  StepOutcome step_alloc(EnvState& s, double alloc_j) const {
    if (s.done) throw UsageError("step called on a finished episode");
    double alloc = s.battery_j;
    if (s.battery_j >= config_.min_alloc_j) {
      alloc = std::clamp(alloc_j, config_.min_alloc_j, s.battery_j);
    }
    return apply(s, alloc);
  }

 private:
  StepOutcome apply(EnvState& s, double alloc) const {
    const double harvest = s.harvest_j[s.t];
    const double next_battery =
        std::clamp(s.battery_j + config_.beta * harvest - config_.alpha * alloc,
                   0.0, config_.capacity_j);
    const bool last_step = s.t + 1 == config_.horizon();
    const bool drained = next_battery <= 0.0;

    double reward = 0.0;
    const double dev = next_battery - s.target_j;
    if (last_step) {
      reward = -(dev * dev);
      if (final_mode_ == FinalRewardMode::kCombined) reward += utility_(alloc);
    } else {
      reward = utility_(alloc);
      if (next_battery < config_.reservoir_j) {
        const double short_j = config_.reservoir_j - next_battery;
        reward -= short_j * short_j;
      }
      if (drained) reward -= dev * dev;
    }

    s.battery_j = next_battery;
    s.prev_harvest_j = harvest;
    s.cum_harvest_j += harvest;
    s.t += 1;
    s.done = last_step || drained;

    StepOutcome out;
    out.next_obs = observe(s);
    out.reward = reward;
    out.done = s.done;
    out.info.alloc_applied_j = alloc;
    out.info.harvest_j = harvest;
    out.info.battery_after_j = next_battery;
    if (s.done) out.info.terminal_deviation_j = dev;
    return out;
  }

  DeviceConfig config_;
  FinalRewardMode final_mode_;
  UtilityFn utility_;
};

}  // namespace tinyman
