// tinyman command-line front end: train, eval, compare, export, infer,
// gen-profile.

#include <algorithm>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <fmt/format.h>

#include "tinyman/tinyman.hpp"

namespace fs = std::filesystem;
using namespace tinyman;

namespace {

constexpr const char* kPrecedence =
    "Precedence: command-line flags override config-file fields, which override "
    "built-in defaults.";

std::string hex64(std::uint64_t v) { return fmt::format("{:016x}", v); }

RunConfig load_run_config(const std::string& path) {
  if (path.empty()) return run_config_from_doc(ConfigDoc::parse("", "<defaults>"));
  if (!fs::exists(path)) throw IoError("config file not found: '" + path + "'");
  return run_config_from_doc(ConfigDoc::load(path), fs::path(path).parent_path());
}

std::vector<HarvestProfile> resolve_profiles(const RunConfig& rc) {
  std::vector<HarvestProfile> out;
  if (!rc.profile_paths.empty()) {
    for (const auto& p : rc.profile_paths) {
      if (!fs::exists(p)) throw IoError("profile file not found: '" + p.string() + "'");
    }
    for (const auto& p : rc.profile_paths) out.push_back(load_profile(p));
  } else {
    const std::vector<int> clusters = rc.clusters.empty() ? std::vector<int>{2} : rc.clusters;
    for (int c : clusters) out.push_back(default_cluster_profile(c, rc.cluster_scale));
  }
  for (const auto& p : out) {
    if (p.length() != rc.device.horizon()) {
      throw ShapeError("profile '" + p.cluster_label + "' has " +
                       std::to_string(p.length()) + " hours, horizon_steps is " +
                       std::to_string(rc.device.horizon_steps));
    }
  }
  return out;
}

// `cluster2_007.csv` -> "cluster2".
std::string trace_label(const fs::path& file) {
  std::string stem = file.stem().string();
  const auto us = stem.find_last_of('_');
  if (us != std::string::npos && us + 1 < stem.size() &&
      std::all_of(stem.begin() + static_cast<std::ptrdiff_t>(us) + 1, stem.end(),
                  [](unsigned char c) { return std::isdigit(c); })) {
    stem.resize(us);
  }
  return stem;
}

std::vector<LabeledTrace> load_trace_dir(const std::string& dir) {
  if (!fs::is_directory(dir)) throw IoError("trace directory not found: '" + dir + "'");
  std::vector<fs::path> files;
  for (const auto& e : fs::directory_iterator(dir)) {
    if (e.is_regular_file() && e.path().extension() == ".csv") files.push_back(e.path());
  }
  if (files.empty()) throw UsageError("no data: trace directory '" + dir + "' has no .csv traces");
  std::sort(files.begin(), files.end());
  std::vector<LabeledTrace> out;
  for (const auto& f : files) out.push_back({trace_label(f), load_trace(f)});
  return out;
}

std::vector<double> parse_levels(const std::string& text) {
  const auto doc = ConfigDoc::parse("levels = " + text, "--init-levels");
  auto v = *doc.get_list("levels");
  for (double x : v) {
    if (!std::isfinite(x)) throw RangeError("init levels must be finite");
  }
  return v;
}

DeviceConfig config_from_bundle(const PolicyBundle& b) {
  DeviceConfig d;
  d.capacity_j = b.capacity_j;
  d.min_alloc_j = b.min_alloc_j;
  d.reservoir_j = b.reservoir_j;
  d.horizon_steps = static_cast<int>(b.horizon_steps);
  d.action_mapping = b.action_mapping;
  return d;
}

void ensure_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create '" + dir.string() + "': " + ec.message());
}

std::string stamp(std::uint64_t config_hash, std::uint64_t seed) {
  return fmt::format("config={} seed={}", hex64(config_hash), seed);
}

// ---------------------------------------------------------------------------

struct TrainArgs {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::optional<long long> episodes;
  std::optional<long long> updates;
  std::optional<int> buffer_size;
  std::optional<int> hidden_neurons;
  std::optional<double> learning_rate;
  std::optional<std::string> out;
  bool quiet = false;
};

int cmd_train(const TrainArgs& a) {
  RunConfig rc = load_run_config(a.config);
  if (a.seed) rc.seed = *a.seed;
  if (a.episodes) rc.hp.episodes = *a.episodes;
  if (a.buffer_size) rc.hp.buffer_size = *a.buffer_size;
  if (a.hidden_neurons) rc.hp.hidden_neurons = *a.hidden_neurons;
  if (a.learning_rate) rc.hp.learning_rate = *a.learning_rate;
  if (a.out) rc.output_dir = *a.out;
  rc.device.validate();
  rc.hp.validate();
  const auto profiles = resolve_profiles(rc);

  const std::uint64_t hash = rc.hash();
  const long long total = a.updates ? *a.updates : rc.hp.updates(rc.device.horizon_steps);
  if (total < 1) throw RangeError("updates must be >= 1");
  fmt::print("train: {} profile(s), {} updates of {} steps, {}\n", profiles.size(), total,
             rc.hp.buffer_size, stamp(hash, rc.seed));

  PpoTrainer trainer(EnergyEnv(rc.device, rc.final_mode), profiles, rc.hp, rc.seed);
  TrainOptions opt;
  opt.updates = total;
  const long long every = std::max(1LL, total / 10);
  if (!a.quiet) {
    opt.on_update = [&](const UpdateLog& e) {
      if ((e.update_idx + 1) % every == 0 || e.update_idx + 1 == total) {
        fmt::print("  update {:>5}/{}  mean_return {:>10.3f}  terminal_dev {:>7.3f} J\n",
                   e.update_idx + 1, total, e.mean_return, e.mean_terminal_deviation_j);
      }
    };
  }
  const TrainResult result = trainer.train(opt);

  ensure_dir(rc.output_dir);
  const fs::path dir = rc.output_dir;
  write_bundle_file(make_bundle(result.policy, rc.device), dir / "policy.tman");
  write_bundle_file(make_bundle(PolicyParams{result.value.net, 0.0}, rc.device),
                    dir / "value.tman");
  write_text_file(dir / "training_log.csv", training_log_csv(result.log, stamp(hash, rc.seed)));
  write_text_file(dir / "run.cfg", "# " + stamp(hash, rc.seed) + "\n" + rc.canonical() +
                                       fmt::format("seed = {}\n", rc.seed));
  write_text_file(dir / "manifest.csv",
                  fmt::format("file,config_hash,seed\npolicy.tman,{0},{1}\nvalue.tman,{0},{1}\n"
                              "training_log.csv,{0},{1}\nrun.cfg,{0},{1}\n",
                              hex64(hash), rc.seed));
  fmt::print("final mean return: {:.4f}\nwrote {}\n", result.log.back().mean_return,
             dir.string());
  return 0;
}

// ---------------------------------------------------------------------------

struct EvalArgs {
  std::vector<std::string> policies;
  std::vector<std::string> profiles;
  std::string traces;
  std::string init_levels;
  std::string config;
  std::string out = "eval_out";
  bool sample = false;
  int repetitions = 20;
  std::uint64_t seed = 0;
};

struct EvalSetup {
  DeviceConfig device;
  std::uint64_t config_hash = 0;
  std::vector<LabeledTrace> traces;
  EvalOptions options;
  std::vector<std::pair<std::string, PolicyBundle>> bundles;
};

EvalSetup prepare_eval(const EvalArgs& a) {
  EvalSetup s;
  for (const auto& p : a.policies) {
    s.bundles.emplace_back(fs::path(p).stem().string(), import_bundle(p));
  }
  const RunConfig rc = load_run_config(a.config);
  if (!a.config.empty() || s.bundles.empty()) {
    s.device = rc.device;
  } else {
    s.device = config_from_bundle(s.bundles.front().second);
  }
  s.device.validate();
  RunConfig effective = rc;
  effective.device = s.device;
  s.config_hash = effective.hash();
  s.traces = load_trace_dir(a.traces);
  for (const auto& t : s.traces) {
    if (t.harvest_j.size() != s.device.horizon()) {
      throw ShapeError("trace of '" + t.profile + "' has " +
                       std::to_string(t.harvest_j.size()) + " hours, horizon is " +
                       std::to_string(s.device.horizon_steps));
    }
  }
  if (!a.init_levels.empty()) s.options.init_levels = parse_levels(a.init_levels);
  for (double v : s.options.init_levels) {
    if (v < s.device.reservoir_j || v > s.device.capacity_j) {
      throw RangeError(fmt::format("init level {} J outside [{}, {}]", v,
                                   s.device.reservoir_j, s.device.capacity_j));
    }
  }
  return s;
}

Method policy_method(const std::string& name, const PolicyBundle& b,
                     const DeviceConfig& device, const EvalArgs& a) {
  if (b.horizon_steps != static_cast<std::uint32_t>(device.horizon_steps)) {
    throw ShapeError("policy '" + name + "' was trained for a " +
                     std::to_string(b.horizon_steps) + " h horizon");
  }
  const PolicyParams p = to_policy_params(b);
  return a.sample ? sampling_policy_method(name, p, device, a.seed)
                  : greedy_policy_method(name, p, device);
}

int cmd_eval(const EvalArgs& a) {
  if (a.policies.empty()) throw UsageError("eval needs at least one --policy");
  EvalSetup s = prepare_eval(a);
  EvalOptions opt = s.options;
  if (a.sample) opt.repetitions = a.repetitions;
  ensure_dir(a.out);
  for (const auto& [name, bundle] : s.bundles) {
    const DeviceConfig device = a.config.empty() ? config_from_bundle(bundle) : s.device;
    const std::vector<EvalReport> rep{
        evaluate(policy_method(name, bundle, device, a), device, s.traces, opt)};
    const fs::path file = fs::path(a.out) / ("eval_" + name + ".csv");
    write_text_file(file, fmt::format("# {} traces={}\n", stamp(s.config_hash, a.seed),
                                      hex64(rep[0].trace_set_hash)) +
                              report_csv(rep));
    fmt::print("{}: mean utility {:.4f}, mean normalized {:.4f} -> {}\n", name,
               rep[0].mean_utility(), rep[0].mean_normalized(), file.string());
  }
  return 0;
}

int cmd_compare(const EvalArgs& a) {
  EvalSetup s = prepare_eval(a);
  std::map<std::string, std::vector<double>> expected;
  for (const auto& path : a.profiles) {
    if (!fs::exists(path)) throw IoError("profile file not found: '" + path + "'");
    const auto p = load_profile(path);
    expected[p.cluster_label] =
        p.kind == ProfileKind::kParametric ? p.hourly_mean_j : p.trace_j;
  }
  // Labels without a profile fall back to the hourly mean of their traces.
  std::map<std::string, std::pair<std::vector<double>, int>> sums;
  for (const auto& t : s.traces) {
    auto& [sum, n] = sums[t.profile];
    sum.resize(t.harvest_j.size(), 0.0);
    for (std::size_t h = 0; h < sum.size(); ++h) sum[h] += t.harvest_j[h];
    ++n;
  }
  for (auto& [label, entry] : sums) {
    if (expected.contains(label)) continue;
    for (double& v : entry.first) v /= entry.second;
    expected[label] = entry.first;
  }

  std::vector<EvalReport> reports;
  reports.push_back(evaluate(oracle_method(s.device), s.device, s.traces, s.options));
  reports.push_back(evaluate(uniform_predicted_method(s.device, expected), s.device,
                             s.traces, s.options));
  EvalOptions opt = s.options;
  if (a.sample) opt.repetitions = a.repetitions;
  for (const auto& [name, bundle] : s.bundles) {
    reports.push_back(
        evaluate(policy_method(name, bundle, s.device, a), s.device, s.traces, opt));
  }
  const ComparisonTable table = compare(reports);
  const std::string header = fmt::format("# {} traces={}\n", stamp(s.config_hash, a.seed),
                                         hex64(reports.front().trace_set_hash));
  ensure_dir(a.out);
  const fs::path dir = a.out;
  write_text_file(dir / "report.csv", header + report_csv(reports));
  write_text_file(dir / "comparison.csv", header + comparison_csv(table));
  const std::string text = comparison_text(table);
  write_text_file(dir / "comparison.txt", header + text);
  fmt::print("mean daily utility (normalized):\n{}", text);
  return 0;
}

// ---------------------------------------------------------------------------

int cmd_export(const std::string& in, const std::string& out, const std::string& params_csv) {
  const PolicyBundle b = import_bundle(in);
  const OpCounts c = count_ops(b);
  std::string dims;
  for (std::size_t i = 0; i < b.dims.size(); ++i) dims += (i ? "-" : "") + std::to_string(b.dims[i]);
  fmt::print("policy {}: dims {}, params {}, macs {}, activations {}, {} bytes\n", in, dims,
             c.params, c.macs, c.activations, encode(b).size());
  if (!out.empty()) {
    write_bundle_file(b, out);
    fmt::print("wrote {}\n", out);
  }
  if (!params_csv.empty()) {
    std::string csv = "layer,kind,row,col,value\n";
    const float* p = b.params.data();
    for (std::size_t l = 0; l + 1 < b.dims.size(); ++l) {
      const std::size_t n_in = b.dims[l], n_out = b.dims[l + 1];
      for (std::size_t o = 0; o < n_out; ++o) {
        for (std::size_t i = 0; i < n_in; ++i) {
          csv += fmt::format("{},weight,{},{},{}\n", l, o, i, *p++);
        }
      }
      for (std::size_t o = 0; o < n_out; ++o) csv += fmt::format("{},bias,{},0,{}\n", l, o, *p++);
    }
    csv += fmt::format("-1,log_std,0,0,{}\n", b.log_std);
    write_text_file(params_csv, csv);
    fmt::print("wrote {}\n", params_csv);
  }
  return 0;
}

int cmd_infer(const std::string& policy, const std::vector<std::string>& observations) {
  if (observations.empty()) throw UsageError("infer needs at least one --obs");
  InferenceKernel kernel(import_bundle(policy));
  std::vector<std::array<double, kObservationSize>> rows;
  for (const auto& text : observations) {
    const auto v = *ConfigDoc::parse("obs = " + text, "--obs").get_list("obs");
    if (v.size() != kObservationSize) {
      throw ShapeError("observation must have 5 values, got " + std::to_string(v.size()));
    }
    rows.push_back({v[0], v[1], v[2], v[3], v[4]});
  }
  fmt::print("obs_index,mean_action,alloc_j\n");
  for (std::size_t i = 0; i < rows.size(); ++i) {
    fmt::print("{},{:.9g},{:.9g}\n", i, kernel.mean_action(rows[i]), kernel.infer(rows[i]));
  }
  return 0;
}

int cmd_gen_profile(int cluster, double scale, std::uint64_t seed, int traces,
                    const std::string& out) {
  const HarvestProfile p = default_cluster_profile(cluster, scale);
  const std::uint64_t hash = RunConfig{}.hash();
  const std::string tag = stamp(hash, seed) + fmt::format(" cluster={} scale={}", cluster, scale);
  std::vector<LabeledTrace> sampled;
  if (traces > 0) sampled = generate_traces(p, static_cast<std::size_t>(traces), seed);
  ensure_dir(out);
  const fs::path dir = out;
  write_text_file(dir / (p.cluster_label + ".profile"), "# " + tag + "\n" + profile_to_text(p));
  for (std::size_t i = 0; i < sampled.size(); ++i) {
    write_text_file(dir / fmt::format("{}_{:03}.csv", p.cluster_label, i),
                    trace_to_csv(sampled[i].harvest_j, tag));
  }
  fmt::print("wrote {} and {} trace(s) to {}\n", p.cluster_label + ".profile", sampled.size(),
             dir.string());
  return 0;
}

void add_eval_options(CLI::App* cmd, EvalArgs& a, bool policies_required) {
  auto* pol = cmd->add_option("--policy", a.policies, "Policy bundle (repeatable)");
  if (policies_required) pol->required();
  cmd->add_option("--traces", a.traces, "Directory of hour,harvest_j trace CSVs")->required();
  cmd->add_option("--init-levels", a.init_levels,
                  "Comma-separated initial battery levels in J (default 16,48,112,144)");
  cmd->add_option("--config", a.config,
                  "Run config; its [device] section replaces the bundle's config echo");
  cmd->add_option("--out", a.out, "Output directory")->capture_default_str();
  cmd->add_flag("--sample", a.sample, "Sample actions instead of using the mean");
  cmd->add_option("--repetitions", a.repetitions, "Repetitions per cell with --sample")
      ->capture_default_str()
      ->check(CLI::PositiveNumber);
  cmd->add_option("--seed", a.seed, "Seed for --sample")->capture_default_str();
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"tinyman: reinforcement-learning energy manager for energy-harvesting wearables"};
  app.require_subcommand(1);
  app.footer(kPrecedence);

  TrainArgs train;
  auto* c_train = app.add_subcommand("train", "Train a policy with PPO");
  c_train->add_option("--config", train.config, "Run config file (key = value, [sections])");
  c_train->add_option("--seed", train.seed, "Root seed (overrides run.seed)");
  c_train->add_option("--episodes", train.episodes, "Training days N (overrides ppo.episodes)")
      ->check(CLI::PositiveNumber);
  c_train->add_option("--updates", train.updates, "Update rounds; replaces the N-derived count")
      ->check(CLI::PositiveNumber);
  c_train->add_option("--buffer-size", train.buffer_size, "Trajectory buffer size D")
      ->check(CLI::PositiveNumber);
  c_train->add_option("--hidden-neurons", train.hidden_neurons, "Hidden layer width")
      ->check(CLI::PositiveNumber);
  c_train->add_option("--learning-rate", train.learning_rate, "Adam learning rate");
  c_train->add_option("--out", train.out, "Output directory (overrides run.output_dir)");
  c_train->add_flag("--quiet", train.quiet, "No per-update progress");
  c_train->footer(kPrecedence);

  EvalArgs eval;
  auto* c_eval = app.add_subcommand("eval", "Evaluate policies on a trace directory");
  add_eval_options(c_eval, eval, true);

  EvalArgs cmp;
  auto* c_cmp = app.add_subcommand(
      "compare", "Compare oracle, uniform_predicted and policies on one trace set");
  add_eval_options(c_cmp, cmp, false);
  c_cmp->add_option("--profile", cmp.profiles,
                    "Profile whose hourly means feed uniform_predicted (repeatable); "
                    "labels without one use the mean of their traces");

  std::string ex_in, ex_out, ex_csv;
  auto* c_export = app.add_subcommand("export", "Validate, summarize and copy a policy bundle");
  c_export->add_option("--policy", ex_in, "Input bundle")->required();
  c_export->add_option("--out", ex_out, "Output bundle path");
  c_export->add_option("--params-csv", ex_csv, "Also write parameters as CSV");

  std::string inf_policy;
  std::vector<std::string> inf_obs;
  auto* c_infer = app.add_subcommand("infer", "Allocation for normalized observations");
  c_infer->add_option("--policy", inf_policy, "Policy bundle")->required();
  c_infer->add_option("--obs", inf_obs,
                      "battery/cap, prev_harvest/cap, init_battery/cap, t/T, "
                      "cum_harvest/cap (repeatable)")
      ->required();

  int gp_cluster = 2, gp_traces = 0;
  double gp_scale = 1.0;
  std::uint64_t gp_seed = 0;
  std::string gp_out = "profiles";
  auto* c_gen = app.add_subcommand("gen-profile", "Write a cluster profile and sampled traces");
  c_gen->add_option("--cluster", gp_cluster, "Template 1 (darkest) .. 4 (brightest)")
      ->capture_default_str();
  c_gen->add_option("--scale", gp_scale, "Multiplier on the template's energy")
      ->capture_default_str();
  c_gen->add_option("--seed", gp_seed, "Seed for sampled traces")->capture_default_str();
  c_gen->add_option("--traces", gp_traces, "Number of sampled traces")
      ->capture_default_str()
      ->check(CLI::NonNegativeNumber);
  c_gen->add_option("--out", gp_out, "Output directory")->capture_default_str();

  CLI11_PARSE(app, argc, argv);

  try {
    if (c_train->parsed()) return cmd_train(train);
    if (c_eval->parsed()) return cmd_eval(eval);
    if (c_cmp->parsed()) return cmd_compare(cmp);
    if (c_export->parsed()) return cmd_export(ex_in, ex_out, ex_csv);
    if (c_infer->parsed()) return cmd_infer(inf_policy, inf_obs);
    if (c_gen->parsed()) return cmd_gen_profile(gp_cluster, gp_scale, gp_seed, gp_traces, gp_out);
  } catch (const std::exception& e) {
    fmt::print(stderr, "error: {}\n", e.what());
    return 1;
  }
  return 1;
}
