#pragma once

// Comparison anchors for the learned manager:
//  * oracle(): the clairvoyant offline optimum of the day's allocation
//    problem, given the full harvest trace;
//  * uniform_predicted(): a prediction-based heuristic that spreads the
//    expected energy-neutral budget evenly over the day and replays it
//    against the real trace.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "tinyman/envsim.hpp"
#include "tinyman/errors.hpp"

namespace tinyman {

struct AllocationPlan {
  std::vector<double> alloc_j;    // one value per hour
  std::vector<double> battery_j;  // level at the end of each hour
  bool feasible = false;
  double achieved_terminal_j = 0.0;
  double total_utility = 0.0;
  std::size_t steps_executed = 0;
};

namespace detail {

inline void check_trace(const DeviceConfig& config, std::span<const double> trace) {
  if (trace.size() != config.horizon()) {
    throw ShapeError("harvest trace has " + std::to_string(trace.size()) +
                     " hours, horizon is " + std::to_string(config.horizon()));
  }
}

// Replays requested allocations through the simulator and records what was
// actually applied. Stops early if the battery drains.
inline AllocationPlan replay(const DeviceConfig& config,
                             std::span<const double> trace, double init_battery_j,
                             std::span<const double> requested) {
  const EnergyEnv env(config);
  auto [state, obs] =
      env.reset_with_trace(std::vector<double>(trace.begin(), trace.end()),
                           init_battery_j);
  AllocationPlan plan;
  plan.alloc_j.assign(config.horizon(), 0.0);
  plan.battery_j.assign(config.horizon(), 0.0);
  bool violated = false;
  while (!state.done) {
    const std::size_t t = state.t;
    const StepOutcome out = env.step_alloc(state, requested[t]);
    plan.alloc_j[t] = out.info.alloc_applied_j;
    plan.battery_j[t] = out.info.battery_after_j;
    plan.total_utility += env.utility(out.info.alloc_applied_j);
    if (out.info.battery_after_j < config.reservoir_j) violated = true;
    ++plan.steps_executed;
  }
  plan.achieved_terminal_j = state.battery_j;
  plan.feasible = !violated && state.t == config.horizon();
  return plan;
}

}  // namespace detail

// Bounds on the cumulative "excess" allocation D_t = sum_{s<t} (a_s - min_alloc)
// implied by the battery box, the action range a_t <= battery_t, and the
// end-of-day equality. D is nondecreasing because every a_t >= min_alloc, so
// the bounds are tightened to their monotone envelopes; the instance is
// feasible iff lower <= upper everywhere.
struct AllocationTube {
  std::vector<double> lower;  // t = 0..T
  std::vector<double> upper;
  bool feasible = false;
};

inline AllocationTube allocation_tube(const DeviceConfig& config,
                                      std::span<const double> trace,
                                      double init_battery_j, double target_j) {
  const std::size_t horizon = config.horizon();
  const double m = config.min_alloc_j;
  const double a = config.alpha;
  const double b = config.beta;
  constexpr double kInf = std::numeric_limits<double>::infinity();

  AllocationTube tube;
  tube.lower.assign(horizon + 1, -kInf);
  tube.upper.assign(horizon + 1, kInf);
  tube.lower[0] = tube.upper[0] = 0.0;

  double harvest_before = 0.0;  // H_{t-1}: harvest of hours < t-1
  double harvest_cum = 0.0;     // H_t
  for (std::size_t t = 1; t <= horizon; ++t) {
    harvest_before = harvest_cum;
    harvest_cum += trace[t - 1];
    const double mt = m * static_cast<double>(t);
    const double level = init_battery_j + b * harvest_cum;  // battery if C_t = 0
    double hi = (level - config.reservoir_j) / a;
    // a_{t-1} <= battery_{t-1}. Exact for alpha = 1; for alpha < 1 this is a
    // slightly conservative version of the same bound.
    hi = std::min(hi, init_battery_j + b * harvest_before);
    double lo = (level - config.capacity_j) / a;
    if (t == horizon) {
      const double terminal = (level - target_j) / a;
      hi = std::min(hi, terminal);
      lo = std::max(lo, terminal);
    }
    tube.upper[t] = hi - mt;
    tube.lower[t] = lo - mt;
  }
  for (std::size_t t = 1; t <= horizon; ++t) {
    tube.lower[t] = std::max(tube.lower[t], tube.lower[t - 1]);
  }
  for (std::size_t t = horizon; t-- > 0;) {
    tube.upper[t] = std::min(tube.upper[t], tube.upper[t + 1]);
  }
  tube.feasible = true;
  for (std::size_t t = 0; t <= horizon; ++t) {
    if (tube.lower[t] > tube.upper[t] + 1e-12) tube.feasible = false;
  }
  return tube;
}

// Shortest ("taut") string through the tube from (0, 0) to (T, D_T). It
// minimizes sum_t phi(D_{t+1} - D_t) for every convex phi, in particular
// -log(min_alloc + x), so it is the exact optimum of the log-utility problem.
inline std::vector<double> taut_string(const std::vector<double>& lower,
                                       const std::vector<double>& upper) {
  const std::size_t n = lower.size() - 1;
  std::vector<double> path(n + 1, 0.0);
  std::size_t i0 = 0;
  double y0 = lower[0];
  path[0] = y0;
  constexpr double kInf = std::numeric_limits<double>::infinity();
  while (i0 < n) {
    double smax = kInf, smin = -kInf;
    std::size_t iu = i0, il = i0;
    std::size_t bend = n;
    double slope = 0.0;
    double bend_value = 0.0;
    for (std::size_t k = i0 + 1; k <= n; ++k) {
      const double dk = static_cast<double>(k - i0);
      const double su = (upper[k] - y0) / dk;
      const double sl = (lower[k] - y0) / dk;
      if (su < smin) {  // the string must turn up at the lower contact
        bend = il;
        slope = smin;
        bend_value = lower[il];
        break;
      }
      if (sl > smax) {  // the string must turn down at the upper contact
        bend = iu;
        slope = smax;
        bend_value = upper[iu];
        break;
      }
      if (su <= smax) {
        smax = su;
        iu = k;
      }
      if (sl >= smin) {
        smin = sl;
        il = k;
      }
      if (k == n) {
        bend = n;
        bend_value = 0.5 * (lower[n] + upper[n]);
        slope = (bend_value - y0) / dk;
      }
    }
    for (std::size_t k = i0 + 1; k < bend; ++k) {
      path[k] = y0 + slope * static_cast<double>(k - i0);
    }
    path[bend] = bend_value;
    y0 = bend_value;
    i0 = bend;
  }
  return path;
}

inline double plan_utility(const DeviceConfig& config,
                           std::span<const double> alloc_j) {
  double u = 0.0;
  for (double a : alloc_j) u += log_utility(a, config.min_alloc_j);
  return u;
}

// Clairvoyant optimum: maximize sum_t ln(a_t / min_alloc) subject to the
// battery recursion, reservoir_j <= battery <= capacity_j, a_t in
// [min_alloc, battery_t] and battery_T == target_j. Infeasible days fall back
// to allocating min_alloc every hour (feasible = false).
inline AllocationPlan oracle(const DeviceConfig& config,
                             std::span<const double> harvest_trace,
                             double init_battery_j, double target_j) {
  config.validate();
  detail::check_trace(config, harvest_trace);
  if (!(target_j >= config.reservoir_j && target_j <= config.capacity_j)) {
    throw RangeError("oracle target must lie in [reservoir_j, capacity_j]");
  }
  if (!(init_battery_j >= config.reservoir_j &&
        init_battery_j <= config.capacity_j)) {
    throw RangeError("initial battery must lie in [reservoir_j, capacity_j]");
  }
  const std::size_t horizon = config.horizon();
  const AllocationTube tube =
      allocation_tube(config, harvest_trace, init_battery_j, target_j);
  if (!tube.feasible) {
    std::vector<double> floor(horizon, config.min_alloc_j);
    AllocationPlan plan =
        detail::replay(config, harvest_trace, init_battery_j, floor);
    plan.feasible = false;
    return plan;
  }
  const std::vector<double> excess = taut_string(tube.lower, tube.upper);

  AllocationPlan plan;
  plan.alloc_j.resize(horizon);
  plan.battery_j.resize(horizon);
  double battery = init_battery_j;
  for (std::size_t t = 0; t < horizon; ++t) {
    const double a = config.min_alloc_j + std::max(0.0, excess[t + 1] - excess[t]);
    plan.alloc_j[t] = a;
    battery += config.beta * harvest_trace[t] - config.alpha * a;
    plan.battery_j[t] = battery;
  }
  plan.feasible = true;
  plan.achieved_terminal_j = battery;
  plan.total_utility = plan_utility(config, plan.alloc_j);
  plan.steps_executed = horizon;
  return plan;
}

// Even split of the expected energy-neutral budget, floored at min_alloc,
// applied hour by hour against the actual trace (the simulator clamps the
// request to the available battery).
inline AllocationPlan uniform_predicted(const DeviceConfig& config,
                                        std::span<const double> expected_profile,
                                        std::span<const double> actual_trace,
                                        double init_battery_j, double target_j) {
  config.validate();
  detail::check_trace(config, expected_profile);
  detail::check_trace(config, actual_trace);
  double expected_total = 0.0;
  for (double e : expected_profile) expected_total += e;
  const double per_hour =
      std::max(config.min_alloc_j,
               (init_battery_j - target_j + config.beta * expected_total) /
                   (config.alpha * static_cast<double>(config.horizon())));
  const std::vector<double> requested(config.horizon(), per_hour);
  return detail::replay(config, actual_trace, init_battery_j, requested);
}

}  // namespace tinyman
