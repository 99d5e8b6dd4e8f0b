#pragma once

// Deterministic evaluation of energy managers over (trace, initial battery)
// pairs, normalized against the clairvoyant optimum, plus a method-by-cluster
// comparison table.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstring>
#include <functional>
#include <limits>
#include <map>
#include <memory>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include <fmt/format.h>

#include "tinyman/baselines.hpp"
#include "tinyman/envsim.hpp"
#include "tinyman/errors.hpp"
#include "tinyman/ppo.hpp"
#include "tinyman/rng.hpp"
#include "tinyman/tinynet.hpp"

namespace tinyman {

inline const std::vector<double>& default_init_levels() {
  static const std::vector<double> levels{16.0, 48.0, 112.0, 144.0};
  return levels;
}

struct LabeledTrace {
  std::string profile;
  std::vector<double> harvest_j;
};

// Maps the current state to a requested allocation in J.
using Controller = std::function<double(const EnvState&, const Observation&)>;
// Builds a controller for one day; plan-based methods need the trace.
using ControllerFactory =
    std::function<Controller(const LabeledTrace&, double init_battery_j)>;

struct Method {
  std::string name;
  ControllerFactory factory;
};

inline Method greedy_policy_method(std::string name, PolicyParams policy,
                                   DeviceConfig config) {
  auto shared = std::make_shared<const PolicyParams>(std::move(policy));
  return {std::move(name), [shared, config](const LabeledTrace&, double) -> Controller {
            auto cache = std::make_shared<ForwardCache>();
            return [shared, config, cache](const EnvState& s, const Observation& obs) {
              const auto x = obs.to_array();
              const double mean = scalar_forward(shared->trunk, x, *cache);
              return allocation_from_action(mean, s.battery_j, config.min_alloc_j,
                                            config.action_mapping);
            };
          }};
}

// Diagnostic mode: actions sampled from the Gaussian head.
inline Method sampling_policy_method(std::string name, PolicyParams policy,
                                     DeviceConfig config, std::uint64_t seed) {
  auto shared = std::make_shared<const PolicyParams>(std::move(policy));
  auto counter = std::make_shared<std::uint64_t>(0);
  return {std::move(name),
          [shared, config, seed, counter](const LabeledTrace&, double) -> Controller {
            auto rng = std::make_shared<Rng>(
                derive_seed(seed, Stream::kEvalTrace, (*counter)++));
            auto cache = std::make_shared<ForwardCache>();
            return [shared, config, rng, cache](const EnvState& s, const Observation& obs) {
              const auto x = obs.to_array();
              const double mean = scalar_forward(shared->trunk, x, *cache);
              const double a = mean + shared->stddev() * rng->normal();
              return allocation_from_action(a, s.battery_j, config.min_alloc_j,
                                            config.action_mapping);
            };
          }};
}

inline Method oracle_method(DeviceConfig config) {
  return {"oracle", [config](const LabeledTrace& tr, double init) -> Controller {
            auto plan = std::make_shared<AllocationPlan>(
                oracle(config, tr.harvest_j, init, init));
            return [plan](const EnvState& s, const Observation&) {
              return plan->alloc_j[s.t];
            };
          }};
}

// `expected` maps profile label -> expected hourly harvest.
inline Method uniform_predicted_method(
    DeviceConfig config, std::map<std::string, std::vector<double>> expected) {
  return {"uniform_predicted",
          [config, expected = std::move(expected)](const LabeledTrace& tr,
                                                   double init) -> Controller {
            const auto it = expected.find(tr.profile);
            if (it == expected.end()) {
              throw UsageError("no expected harvest pattern for profile '" +
                               tr.profile + "'");
            }
            auto plan = std::make_shared<AllocationPlan>(
                uniform_predicted(config, it->second, tr.harvest_j, init, init));
            return [plan](const EnvState& s, const Observation&) {
              return plan->alloc_j[s.t];
            };
          }};
}

inline Method min_allocation_method(DeviceConfig config) {
  return {"min_alloc", [config](const LabeledTrace&, double) -> Controller {
            return [config](const EnvState&, const Observation&) {
              return config.min_alloc_j;
            };
          }};
}

struct EpisodeRecord {
  std::string profile;
  std::size_t trace_index = 0;
  double init_j = 0.0;
  double utility = 0.0;
  double oracle_utility = 0.0;
  bool oracle_feasible = false;
  double terminal_battery_j = 0.0;
  double terminal_dev_j = 0.0;  // |battery_T - battery_0|
  int violations = 0;           // hours ending below the reservoir
  bool drained = false;
  std::vector<double> hourly_utility;
};

struct EvalRow {
  std::string profile;
  double init_j = 0.0;
  std::string method;
  std::size_t episodes = 0;
  double utility = 0.0;     // mean U
  double normalized = 0.0;  // sum U / sum U_oracle over oracle-feasible days
  double terminal_dev_j = 0.0;
  double violations = 0.0;  // mean reservoir-violation hours per day
  std::size_t drained = 0;  // drained days
};

struct EvalReport {
  std::string method;
  std::vector<std::string> profiles;  // first-appearance order
  std::vector<double> init_levels;
  std::uint64_t trace_set_hash = 0;
  std::vector<EpisodeRecord> episodes;
  std::vector<EvalRow> rows;

  double mean_utility() const {
    double s = 0.0;
    for (const auto& e : episodes) s += e.utility;
    return episodes.empty() ? 0.0 : s / static_cast<double>(episodes.size());
  }
  // Average over rows of the per-row normalized utility.
  double mean_normalized() const {
    double s = 0.0;
    std::size_t n = 0;
    for (const auto& r : rows) {
      if (std::isfinite(r.normalized)) {
        s += r.normalized;
        ++n;
      }
    }
    return n ? s / static_cast<double>(n) : std::numeric_limits<double>::quiet_NaN();
  }
};

inline std::uint64_t hash_trace_set(std::span<const LabeledTrace> traces,
                                    std::span<const double> init_levels) {
  std::uint64_t h = 0x84222325CBF29CE4ULL;
  const auto mix = [&h](std::uint64_t v) { h = splitmix64(h ^ v); };
  const auto mix_double = [&mix](double d) {
    std::uint64_t bits = 0;
    std::memcpy(&bits, &d, sizeof bits);
    mix(bits);
  };
  for (const auto& tr : traces) {
    for (char c : tr.profile) mix(static_cast<unsigned char>(c));
    for (double v : tr.harvest_j) mix_double(v);
  }
  for (double v : init_levels) mix_double(v);
  return h;
}

struct EvalOptions {
  std::vector<double> init_levels = default_init_levels();
  // Repetitions per (trace, init) cell; only meaningful for stochastic
  // controllers.
  int repetitions = 1;
};

inline EpisodeRecord run_episode(const EnergyEnv& env, const Method& method,
                                 const LabeledTrace& trace, double init) {
  EpisodeRecord rec;
  rec.profile = trace.profile;
  rec.init_j = init;
  auto [state, obs] = env.reset_with_trace(trace.harvest_j, init);
  const Controller ctl = method.factory(trace, init);
  while (!state.done) {
    const StepOutcome out = env.step_alloc(state, ctl(state, obs));
    const double u = env.utility(out.info.alloc_applied_j);
    rec.hourly_utility.push_back(u);
    rec.utility += u;
    if (out.info.battery_after_j < env.config().reservoir_j) ++rec.violations;
    obs = out.next_obs;
  }
  rec.terminal_battery_j = state.battery_j;
  rec.terminal_dev_j = std::abs(state.battery_j - init);
  rec.drained = state.battery_j <= 0.0;
  return rec;
}

inline EvalReport evaluate(const Method& method, const DeviceConfig& config,
                           std::span<const LabeledTrace> traces,
                           const EvalOptions& options = {}) {
  config.validate();
  if (traces.empty()) throw UsageError("evaluate: no traces");
  for (const auto& tr : traces) {
    if (tr.harvest_j.size() != config.horizon()) {
      throw ShapeError("evaluate: trace of profile '" + tr.profile + "' has " +
                       std::to_string(tr.harvest_j.size()) + " hours, horizon is " +
                       std::to_string(config.horizon()));
    }
  }
  const EnergyEnv env(config);
  EvalReport report;
  report.method = method.name;
  report.init_levels = options.init_levels;
  report.trace_set_hash = hash_trace_set(traces, options.init_levels);
  for (const auto& tr : traces) {
    if (std::find(report.profiles.begin(), report.profiles.end(), tr.profile) ==
        report.profiles.end()) {
      report.profiles.push_back(tr.profile);
    }
  }
  const int reps = std::max(1, options.repetitions);
  for (std::size_t i = 0; i < traces.size(); ++i) {
    for (double init : options.init_levels) {
      const AllocationPlan best =
          oracle(config, traces[i].harvest_j, init, init);
      for (int r = 0; r < reps; ++r) {
        EpisodeRecord rec = run_episode(env, method, traces[i], init);
        rec.trace_index = i;
        rec.oracle_utility = best.total_utility;
        rec.oracle_feasible = best.feasible;
        report.episodes.push_back(std::move(rec));
      }
    }
  }
  for (const auto& profile : report.profiles) {
    for (double init : options.init_levels) {
      EvalRow row;
      row.profile = profile;
      row.init_j = init;
      row.method = method.name;
      double u_feasible = 0.0, u_oracle = 0.0, dev = 0.0, viol = 0.0, util = 0.0;
      for (const auto& e : report.episodes) {
        if (e.profile != profile || e.init_j != init) continue;
        ++row.episodes;
        util += e.utility;
        dev += e.terminal_dev_j;
        viol += e.violations;
        if (e.drained) ++row.drained;
        if (e.oracle_feasible) {
          u_feasible += e.utility;
          u_oracle += e.oracle_utility;
        }
      }
      const double n = static_cast<double>(row.episodes);
      row.utility = util / n;
      row.terminal_dev_j = dev / n;
      row.violations = viol / n;
      row.normalized = u_oracle > 0.0 ? u_feasible / u_oracle
                                      : std::numeric_limits<double>::quiet_NaN();
      report.rows.push_back(row);
    }
  }
  return report;
}

// ---------------------------------------------------------------------------
// Comparison table

struct ComparisonTable {
  std::vector<std::string> columns;  // profiles in input order, then "average"
  std::vector<std::string> methods;
  std::vector<std::vector<double>> utility;     // [method][column]
  std::vector<std::vector<double>> normalized;  // [method][column]
};

inline ComparisonTable compare(std::span<const EvalReport> reports) {
  if (reports.empty()) throw UsageError("compare: no reports");
  const EvalReport& first = reports.front();
  for (const auto& r : reports) {
    if (r.trace_set_hash != first.trace_set_hash || r.profiles != first.profiles) {
      throw UsageError("compare: report '" + r.method +
                       "' was evaluated on a different trace set");
    }
  }
  ComparisonTable table;
  table.columns = first.profiles;
  table.columns.push_back("average");
  for (const auto& r : reports) {
    table.methods.push_back(r.method);
    std::vector<double> u_row, n_row;
    double u_sum = 0.0, n_sum = 0.0;
    for (const auto& profile : first.profiles) {
      double u = 0.0, nz = 0.0;
      std::size_t k = 0;
      for (const auto& row : r.rows) {
        if (row.profile != profile) continue;
        u += row.utility;
        nz += row.normalized;
        ++k;
      }
      u_row.push_back(u / static_cast<double>(k));
      n_row.push_back(nz / static_cast<double>(k));
      u_sum += u_row.back();
      n_sum += n_row.back();
    }
    const double np = static_cast<double>(first.profiles.size());
    u_row.push_back(u_sum / np);
    n_row.push_back(n_sum / np);
    table.utility.push_back(std::move(u_row));
    table.normalized.push_back(std::move(n_row));
  }
  return table;
}

inline std::string comparison_csv(const ComparisonTable& t) {
  std::string out = "method";
  for (const auto& c : t.columns) out += "," + c;
  out += "\n";
  for (std::size_t m = 0; m < t.methods.size(); ++m) {
    out += t.methods[m];
    for (double v : t.utility[m]) out += fmt::format(",{:.6f}", v);
    out += "\n";
  }
  return out;
}

inline std::string comparison_text(const ComparisonTable& t) {
  std::vector<std::vector<std::string>> cells(t.methods.size());
  std::size_t name_w = 6, col_w = 0;
  for (const auto& c : t.columns) col_w = std::max(col_w, c.size());
  for (std::size_t m = 0; m < t.methods.size(); ++m) {
    name_w = std::max(name_w, t.methods[m].size());
    for (std::size_t c = 0; c < t.columns.size(); ++c) {
      cells[m].push_back(fmt::format("{:.2f} ({:.2f})", t.utility[m][c], t.normalized[m][c]));
      col_w = std::max(col_w, cells[m].back().size());
    }
  }
  std::string out = fmt::format("{:<{}}", "method", name_w);
  for (const auto& c : t.columns) out += fmt::format("  {:>{}}", c, col_w);
  out += "\n";
  for (std::size_t m = 0; m < t.methods.size(); ++m) {
    out += fmt::format("{:<{}}", t.methods[m], name_w);
    for (const auto& cell : cells[m]) out += fmt::format("  {:>{}}", cell, col_w);
    out += "\n";
  }
  return out;
}

inline std::string report_csv(std::span<const EvalReport> reports) {
  std::string out = "profile,init_j,method,utility,normalized,terminal_dev_j,violations,drained\n";
  for (const auto& rep : reports) {
    for (const auto& r : rep.rows) {
      out += fmt::format("{},{:g},{},{:.6f},{:.6f},{:.6f},{:.4f},{}\n", r.profile,
                         r.init_j, r.method, r.utility, r.normalized,
                         r.terminal_dev_j, r.violations, r.drained);
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Trace sets

inline std::vector<LabeledTrace> generate_traces(const HarvestProfile& profile,
                                                 std::size_t count,
                                                 std::uint64_t seed) {
  std::vector<LabeledTrace> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    out.push_back({profile.cluster_label,
                   sample_profile(profile, derive_seed(seed, Stream::kEvalTrace, i))});
  }
  return out;
}

struct TraceSplit {
  std::vector<LabeledTrace> train;
  std::vector<LabeledTrace> heldout;
};

// Holds out round(fraction * n) traces per profile, chosen by a seeded
// permutation.
inline TraceSplit split_heldout(std::span<const LabeledTrace> traces,
                                double fraction, std::uint64_t seed) {
  if (!(fraction >= 0.0 && fraction <= 1.0)) {
    throw RangeError("held-out fraction must be in [0, 1]");
  }
  std::map<std::string, std::vector<std::size_t>> by_profile;
  std::vector<std::string> order;
  for (std::size_t i = 0; i < traces.size(); ++i) {
    if (!by_profile.contains(traces[i].profile)) order.push_back(traces[i].profile);
    by_profile[traces[i].profile].push_back(i);
  }
  std::vector<bool> held(traces.size(), false);
  Rng rng(seed);
  for (const auto& name : order) {
    auto idx = by_profile[name];
    rng.shuffle(idx.begin(), idx.end());
    const auto k = static_cast<std::size_t>(
        std::llround(fraction * static_cast<double>(idx.size())));
    for (std::size_t j = 0; j < k; ++j) held[idx[j]] = true;
  }
  TraceSplit split;
  for (std::size_t i = 0; i < traces.size(); ++i) {
    (held[i] ? split.heldout : split.train).push_back(traces[i]);
  }
  return split;
}

}  // namespace tinyman
