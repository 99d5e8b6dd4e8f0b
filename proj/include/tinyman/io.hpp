#pragma once

// Text formats: key = value configs with [sections], harvest profiles,
// hourly trace CSVs, training logs and allocation plans.

#include <cctype>
#include <charconv>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include <fmt/format.h>

#include "tinyman/baselines.hpp"
#include "tinyman/envsim.hpp"
#include "tinyman/errors.hpp"
#include "tinyman/ppo.hpp"
#include "tinyman/rng.hpp"

namespace tinyman {

inline std::string read_text_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path.string() + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline void write_text_file(const std::filesystem::path& path, std::string_view text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  if (!out) throw IoError("failed writing '" + path.string() + "'");
}

namespace detail {

inline std::string_view trim(std::string_view s) {
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.front()))) s.remove_prefix(1);
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.back()))) s.remove_suffix(1);
  return s;
}

inline std::optional<double> parse_double(std::string_view s) {
  s = trim(s);
  double v = 0.0;
  const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || ptr != s.data() + s.size()) return std::nullopt;
  return v;
}

inline std::optional<long long> parse_int(std::string_view s) {
  s = trim(s);
  long long v = 0;
  const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || ptr != s.data() + s.size()) return std::nullopt;
  return v;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// key = value documents

class ConfigDoc {
 public:
  struct Entry {
    std::string value;
    int line = 0;
  };

  static ConfigDoc parse(std::string_view text, std::string source = "<config>") {
    ConfigDoc doc;
    doc.source_ = std::move(source);
    std::string section;
    int line_no = 0;
    std::size_t pos = 0;
    while (pos <= text.size()) {
      const std::size_t eol = std::min(text.find('\n', pos), text.size());
      std::string_view line = text.substr(pos, eol - pos);
      pos = eol + 1;
      ++line_no;
      if (const auto hash = line.find_first_of("#;"); hash != std::string_view::npos) {
        line = line.substr(0, hash);
      }
      line = detail::trim(line);
      if (line.empty()) continue;
      if (line.front() == '[') {
        if (line.back() != ']') doc.fail(line_no, "unterminated section header");
        section = std::string(detail::trim(line.substr(1, line.size() - 2)));
        continue;
      }
      const auto eq = line.find('=');
      if (eq == std::string_view::npos) doc.fail(line_no, "expected 'key = value'");
      const std::string key(detail::trim(line.substr(0, eq)));
      if (key.empty()) doc.fail(line_no, "empty key");
      const std::string qualified = section.empty() ? key : section + "." + key;
      if (doc.entries_.contains(qualified)) {
        doc.fail(line_no, "duplicate field '" + qualified + "'");
      }
      doc.entries_[qualified] = {std::string(detail::trim(line.substr(eq + 1))), line_no};
    }
    return doc;
  }

  static ConfigDoc load(const std::filesystem::path& path) {
    return parse(read_text_file(path), path.string());
  }

  const std::string& source() const { return source_; }
  bool has(const std::string& key) const { return entries_.contains(key); }

  std::optional<std::string> get_string(const std::string& key) const {
    const auto it = entries_.find(key);
    if (it == entries_.end()) return std::nullopt;
    used_.insert(key);
    return it->second.value;
  }

  std::optional<double> get_double(const std::string& key) const {
    const auto it = entries_.find(key);
    if (it == entries_.end()) return std::nullopt;
    used_.insert(key);
    const auto v = detail::parse_double(it->second.value);
    if (!v) fail(it->second.line, "field '" + key + "' expects a number, got '" + it->second.value + "'");
    return v;
  }

  std::optional<long long> get_int(const std::string& key) const {
    const auto it = entries_.find(key);
    if (it == entries_.end()) return std::nullopt;
    used_.insert(key);
    const auto v = detail::parse_int(it->second.value);
    if (!v) fail(it->second.line, "field '" + key + "' expects an integer, got '" + it->second.value + "'");
    return v;
  }

  std::optional<bool> get_bool(const std::string& key) const {
    const auto s = get_string(key);
    if (!s) return std::nullopt;
    if (*s == "true" || *s == "1" || *s == "yes" || *s == "on") return true;
    if (*s == "false" || *s == "0" || *s == "no" || *s == "off") return false;
    fail(line_of(key), "field '" + key + "' expects true/false, got '" + *s + "'");
  }

  std::optional<std::vector<double>> get_list(const std::string& key) const {
    const auto s = get_string(key);
    if (!s) return std::nullopt;
    std::vector<double> out;
    std::string_view rest(*s);
    while (!rest.empty()) {
      const auto comma = rest.find(',');
      const auto item = rest.substr(0, comma);
      const auto v = detail::parse_double(item);
      if (!v) fail(line_of(key), "field '" + key + "' has a non-numeric item '" + std::string(detail::trim(item)) + "'");
      out.push_back(*v);
      if (comma == std::string_view::npos) break;
      rest = rest.substr(comma + 1);
    }
    return out;
  }

  int line_of(const std::string& key) const {
    const auto it = entries_.find(key);
    return it == entries_.end() ? 0 : it->second.line;
  }

  // Fails on the first key that no getter has consumed.
  void reject_unknown() const {
    for (const auto& [key, entry] : entries_) {
      if (!used_.contains(key)) fail(entry.line, "unknown field '" + key + "'");
    }
  }

  [[noreturn]] void fail(int line, const std::string& what) const {
    throw FormatError(source_ + ":" + std::to_string(line) + ": " + what);
  }

  // Runs `check`. Validation messages start with the offending field name;
  // a RangeError is reported as "<section>.<field>" with that field's line.
  template <typename F>
  void check_section(const std::string& section, F&& check) const {
    try {
      check();
    } catch (const RangeError& e) {
      const std::string msg = e.what();
      const std::string key = section + "." + msg.substr(0, msg.find(' '));
      fail(line_of(key), "invalid field '" + key + "': " + msg);
    }
  }

 private:
  std::string source_;
  std::map<std::string, Entry> entries_;
  mutable std::set<std::string> used_;
};

// ---------------------------------------------------------------------------
// Harvest profiles and traces

inline std::string format_list(const std::vector<double>& v) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (i) out += ", ";
    out += fmt::format("{}", v[i]);
  }
  return out;
}

inline std::string profile_to_text(const HarvestProfile& p) {
  std::string out = "[profile]\n";
  out += "kind = " + std::string(p.kind == ProfileKind::kTrace ? "trace" : "parametric") + "\n";
  out += "cluster_label = " + p.cluster_label + "\n";
  if (p.kind == ProfileKind::kParametric) {
    out += "hourly_mean_j = " + format_list(p.hourly_mean_j) + "\n";
    out += "hourly_std_j = " + format_list(p.hourly_std_j) + "\n";
  } else {
    out += "trace_j = " + format_list(p.trace_j) + "\n";
  }
  return out;
}

inline HarvestProfile profile_from_doc(const ConfigDoc& doc) {
  HarvestProfile p;
  const auto kind = doc.get_string("profile.kind").value_or("parametric");
  if (kind == "parametric") {
    p.kind = ProfileKind::kParametric;
  } else if (kind == "trace") {
    p.kind = ProfileKind::kTrace;
  } else {
    doc.fail(doc.line_of("profile.kind"), "field 'profile.kind' must be parametric or trace");
  }
  p.cluster_label = doc.get_string("profile.cluster_label").value_or("profile");
  if (p.kind == ProfileKind::kParametric) {
    if (!doc.has("profile.hourly_mean_j") || !doc.has("profile.hourly_std_j")) {
      doc.fail(0, "parametric profile needs hourly_mean_j and hourly_std_j");
    }
    p.hourly_mean_j = *doc.get_list("profile.hourly_mean_j");
    p.hourly_std_j = *doc.get_list("profile.hourly_std_j");
  } else {
    if (!doc.has("profile.trace_j")) doc.fail(0, "trace profile needs trace_j");
    p.trace_j = *doc.get_list("profile.trace_j");
  }
  doc.reject_unknown();
  try {
    p.validate();
  } catch (const std::exception& e) {
    doc.fail(0, e.what());
  }
  return p;
}

inline HarvestProfile load_profile(const std::filesystem::path& path) {
  return profile_from_doc(ConfigDoc::load(path));
}

inline std::string trace_to_csv(const std::vector<double>& trace,
                                std::string_view header_comment = {}) {
  std::string out;
  if (!header_comment.empty()) out += fmt::format("# {}\n", header_comment);
  out += "hour,harvest_j\n";
  for (std::size_t h = 0; h < trace.size(); ++h) out += fmt::format("{},{}\n", h, trace[h]);
  return out;
}

// Parses `hour,harvest_j` rows. Lines starting with '#' are comments; hours
// must be 0, 1, 2, ... in order.
inline std::vector<double> trace_from_csv(std::string_view text,
                                          const std::string& source = "<trace>") {
  std::vector<double> out;
  bool header_seen = false;
  int line_no = 0;
  std::size_t pos = 0;
  const auto fail = [&](const std::string& what) {
    throw FormatError(source + ":" + std::to_string(line_no) + ": " + what);
  };
  while (pos < text.size()) {
    const std::size_t eol = std::min(text.find('\n', pos), text.size());
    std::string_view line = detail::trim(text.substr(pos, eol - pos));
    pos = eol + 1;
    ++line_no;
    if (line.empty() || line.front() == '#') continue;
    if (!header_seen) {
      if (line != "hour,harvest_j") fail("expected header 'hour,harvest_j'");
      header_seen = true;
      continue;
    }
    const auto comma = line.find(',');
    if (comma == std::string_view::npos) fail("expected 'hour,harvest_j'");
    const auto hour = detail::parse_int(line.substr(0, comma));
    const auto value = detail::parse_double(line.substr(comma + 1));
    if (!hour || !value) fail("non-numeric field");
    if (*hour != static_cast<long long>(out.size())) fail("hours must be consecutive from 0");
    if (!(*value >= 0.0)) fail("harvest must be >= 0");
    out.push_back(*value);
  }
  if (!header_seen) fail("missing header");
  return out;
}

inline std::vector<double> load_trace(const std::filesystem::path& path) {
  return trace_from_csv(read_text_file(path), path.string());
}

// `hour,alloc_j,battery_j`; battery_j is the level at the end of the hour.
inline std::string plan_to_csv(const AllocationPlan& plan) {
  std::string out = "hour,alloc_j,battery_j\n";
  for (std::size_t h = 0; h < plan.alloc_j.size(); ++h) {
    out += fmt::format("{},{:.9g},{:.9g}\n", h, plan.alloc_j[h], plan.battery_j[h]);
  }
  return out;
}

inline std::string training_log_csv(const std::vector<UpdateLog>& log,
                                    std::string_view header_comment = {}) {
  std::string out;
  if (!header_comment.empty()) out += fmt::format("# {}\n", header_comment);
  out += "update_idx,mean_return,policy_loss,value_loss,entropy,mean_terminal_deviation_j\n";
  for (const auto& e : log) {
    out += fmt::format("{},{:.10g},{:.10g},{:.10g},{:.10g},{:.10g}\n", e.update_idx,
                       e.mean_return, e.policy_loss, e.value_loss, e.entropy,
                       e.mean_terminal_deviation_j);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Run configuration

struct RunConfig {
  DeviceConfig device;
  HyperParams hp;
  FinalRewardMode final_mode = FinalRewardMode::kCombined;
  std::vector<std::filesystem::path> profile_paths;
  std::vector<int> clusters;  // built-in templates, used when no paths given
  double cluster_scale = 1.0;
  std::uint64_t seed = 0;
  std::filesystem::path output_dir = "out";

  // Canonical text form; its hash identifies the run.
  std::string canonical() const {
    std::string s;
    s += fmt::format("[device]\ncapacity_j = {}\nreservoir_j = {}\nmin_alloc_j = {}\n"
                     "alpha = {}\nbeta = {}\nhorizon_steps = {}\n",
                     device.capacity_j, device.reservoir_j, device.min_alloc_j,
                     device.alpha, device.beta, device.horizon_steps);
    s += fmt::format("final_reward_mode = {}\naction_mapping = {}\n",
                     final_mode == FinalRewardMode::kCombined ? "combined" : "literal",
                     to_string(device.action_mapping));
    s += fmt::format("[ppo]\ngamma = {}\nclip_eps = {}\nvalue_coef = {}\nentropy_coef = {}\n"
                     "epochs = {}\nminibatch = {}\nbuffer_size = {}\nepisodes = {}\n"
                     "learning_rate = {}\nadvantage_normalize = {}\nhidden_neurons = {}\n"
                     "hidden_layers = {}\nreward_scale = {}\nadvantage_mode = {}\n",
                     hp.gamma, hp.clip_eps, hp.value_coef, hp.entropy_coef, hp.epochs,
                     hp.minibatch, hp.buffer_size, hp.episodes, hp.learning_rate,
                     hp.advantage_normalize, hp.hidden_neurons, hp.hidden_layers,
                     hp.reward_scale, to_string(hp.advantage_mode));
    s += "[run]\nprofiles = ";
    for (std::size_t i = 0; i < profile_paths.size(); ++i) {
      s += (i ? "," : "") + profile_paths[i].generic_string();
    }
    s += "\nclusters = ";
    for (std::size_t i = 0; i < clusters.size(); ++i) s += (i ? "," : "") + std::to_string(clusters[i]);
    s += fmt::format("\ncluster_scale = {}\n", cluster_scale);
    return s;
  }

  std::uint64_t hash() const {
    std::uint64_t h = 0xCBF29CE484222325ULL;
    for (unsigned char c : canonical()) h = (h ^ c) * 0x100000001B3ULL;
    return h;
  }
};

inline RunConfig run_config_from_doc(const ConfigDoc& doc,
                                     const std::filesystem::path& base_dir = {}) {
  RunConfig rc;
  auto& d = rc.device;
  if (auto v = doc.get_double("device.capacity_j")) d.capacity_j = *v;
  if (auto v = doc.get_double("device.reservoir_j")) d.reservoir_j = *v;
  if (auto v = doc.get_double("device.min_alloc_j")) d.min_alloc_j = *v;
  if (auto v = doc.get_double("device.alpha")) d.alpha = *v;
  if (auto v = doc.get_double("device.beta")) d.beta = *v;
  if (auto v = doc.get_int("device.horizon_steps")) d.horizon_steps = static_cast<int>(*v);
  if (auto v = doc.get_string("device.final_reward_mode")) {
    if (*v == "combined") {
      rc.final_mode = FinalRewardMode::kCombined;
    } else if (*v == "literal") {
      rc.final_mode = FinalRewardMode::kLiteral;
    } else {
      doc.fail(doc.line_of("device.final_reward_mode"),
               "field 'device.final_reward_mode' must be combined or literal");
    }
  }
  if (auto v = doc.get_string("device.action_mapping")) {
    if (*v == "linear") {
      d.action_mapping = ActionMapping::kLinear;
    } else if (*v == "geometric") {
      d.action_mapping = ActionMapping::kGeometric;
    } else {
      doc.fail(doc.line_of("device.action_mapping"),
               "field 'device.action_mapping' must be linear or geometric");
    }
  }
  auto& hp = rc.hp;
  if (auto v = doc.get_double("ppo.gamma")) hp.gamma = *v;
  if (auto v = doc.get_double("ppo.clip_eps")) hp.clip_eps = *v;
  if (auto v = doc.get_double("ppo.value_coef")) hp.value_coef = *v;
  if (auto v = doc.get_double("ppo.entropy_coef")) hp.entropy_coef = *v;
  if (auto v = doc.get_int("ppo.epochs")) hp.epochs = static_cast<int>(*v);
  if (auto v = doc.get_int("ppo.minibatch")) hp.minibatch = static_cast<int>(*v);
  if (auto v = doc.get_int("ppo.buffer_size")) hp.buffer_size = static_cast<int>(*v);
  if (auto v = doc.get_int("ppo.episodes")) hp.episodes = *v;
  if (auto v = doc.get_double("ppo.learning_rate")) hp.learning_rate = *v;
  if (auto v = doc.get_bool("ppo.advantage_normalize")) hp.advantage_normalize = *v;
  if (auto v = doc.get_int("ppo.hidden_neurons")) hp.hidden_neurons = static_cast<int>(*v);
  if (auto v = doc.get_int("ppo.hidden_layers")) hp.hidden_layers = static_cast<int>(*v);
  if (auto v = doc.get_double("ppo.reward_scale")) hp.reward_scale = *v;
  if (auto v = doc.get_string("ppo.advantage_mode")) {
    if (*v == "one_step") {
      hp.advantage_mode = AdvantageMode::kOneStep;
    } else if (*v == "monte_carlo") {
      hp.advantage_mode = AdvantageMode::kMonteCarlo;
    } else {
      doc.fail(doc.line_of("ppo.advantage_mode"),
               "field 'ppo.advantage_mode' must be one_step or monte_carlo");
    }
  }
  if (auto v = doc.get_string("run.profiles")) {
    std::string_view rest(*v);
    while (!rest.empty()) {
      const auto comma = rest.find(',');
      const auto item = detail::trim(rest.substr(0, comma));
      if (!item.empty()) {
        std::filesystem::path p{std::string(item)};
        rc.profile_paths.push_back(p.is_relative() && !base_dir.empty() ? base_dir / p : p);
      }
      if (comma == std::string_view::npos) break;
      rest = rest.substr(comma + 1);
    }
  }
  if (auto v = doc.get_list("run.clusters")) {
    for (double c : *v) {
      if (c != static_cast<int>(c) || c < 1 || c > 4) {
        doc.fail(doc.line_of("run.clusters"), "field 'run.clusters' expects integers 1..4");
      }
      rc.clusters.push_back(static_cast<int>(c));
    }
  }
  if (auto v = doc.get_double("run.cluster_scale")) rc.cluster_scale = *v;
  if (auto v = doc.get_int("run.seed")) rc.seed = static_cast<std::uint64_t>(*v);
  if (auto v = doc.get_string("run.output_dir")) rc.output_dir = *v;
  doc.reject_unknown();

  doc.check_section("device", [&] { d.validate(); });
  doc.check_section("ppo", [&] { hp.validate(); });
  if (!(rc.cluster_scale >= 0.0)) {
    doc.fail(doc.line_of("run.cluster_scale"), "field 'run.cluster_scale' must be >= 0");
  }
  return rc;
}

}  // namespace tinyman
