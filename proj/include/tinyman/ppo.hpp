#pragma once

// On-policy PPO trainer: fill a fixed-size trajectory buffer with whole
// episodes, freeze one-step advantages / value targets / behaviour
// log-probabilities, then run K epochs of clipped-surrogate minibatch
// updates with Adam and clear the buffer.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "tinyman/envsim.hpp"
#include "tinyman/errors.hpp"
#include "tinyman/rng.hpp"
#include "tinyman/tinynet.hpp"

namespace tinyman {

// kOneStep: A = r + gamma V(s') - V(s).
// kMonteCarlo: A = discounted return-to-go - V(s), bootstrapped only where the
// buffer cuts an episode.
enum class AdvantageMode : std::uint8_t { kOneStep, kMonteCarlo };

inline const char* to_string(AdvantageMode m) {
  return m == AdvantageMode::kMonteCarlo ? "monte_carlo" : "one_step";
}

struct HyperParams {
  double gamma = 1.0;
  double clip_eps = 0.3;
  double value_coef = 0.5;     // c1
  double entropy_coef = 0.01;  // c2
  int epochs = 10;             // K
  int minibatch = 64;          // d
  int buffer_size = 2048;      // D
  long long episodes = 25600;  // N; 300 updates at D = 2048, T = 24
  double learning_rate = 1e-4;
  bool advantage_normalize = true;
  int hidden_neurons = 64;
  int hidden_layers = 1;
  // Multiplies rewards before they reach the critic and the advantages.
  // Reported returns and utilities are never scaled.
  double reward_scale = 1.0;
  AdvantageMode advantage_mode = AdvantageMode::kOneStep;

  void validate() const {
    if (!(gamma >= 0.0 && gamma <= 1.0)) throw RangeError("gamma must be in [0, 1]");
    if (!(clip_eps > 0.0)) throw RangeError("clip_eps must be > 0");
    if (epochs < 1) throw RangeError("epochs must be >= 1");
    if (!(minibatch > 0 && minibatch <= buffer_size)) {
      throw RangeError("minibatch must satisfy 0 < minibatch <= buffer_size");
    }
    if (episodes < 1) throw RangeError("episodes must be >= 1");
    if (!(learning_rate > 0.0)) throw RangeError("learning_rate must be > 0");
    if (hidden_neurons < 1) throw RangeError("hidden_neurons must be >= 1");
    if (hidden_layers < 1) throw RangeError("hidden_layers must be >= 1");
    if (!(reward_scale > 0.0)) throw RangeError("reward_scale must be > 0");
  }

  // Update rounds needed to consume `episodes` full-length days.
  long long updates(int horizon) const {
    const long long steps = episodes * horizon;
    return (steps + buffer_size - 1) / buffer_size;
  }
};

struct Transition {
  std::array<double, kObservationSize> obs{};
  double action_raw = 0.0;
  double reward = 0.0;  // already multiplied by reward_scale
  std::array<double, kObservationSize> next_obs{};
  bool done = false;
  double old_logprob = 0.0;
  double value = 0.0;
  double next_value = 0.0;
  double advantage = 0.0;
  double target = 0.0;
};

// Fixed-capacity on-policy store. Cleared after every update round; never
// sampled across rounds.
class TrajectoryBuffer {
 public:
  explicit TrajectoryBuffer(std::size_t capacity) : capacity_(capacity) {
    items_.reserve(capacity);
  }

  std::size_t capacity() const { return capacity_; }
  std::size_t size() const { return items_.size(); }
  bool empty() const { return items_.empty(); }
  bool full() const { return items_.size() >= capacity_; }

  void push(const Transition& tr) {
    if (full()) throw UsageError("trajectory buffer is full");
    items_.push_back(tr);
  }
  void clear() { items_.clear(); }

  std::span<Transition> items() { return items_; }
  std::span<const Transition> items() const { return items_; }
  Transition& operator[](std::size_t i) { return items_[i]; }
  const Transition& operator[](std::size_t i) const { return items_[i]; }

 private:
  std::size_t capacity_;
  std::vector<Transition> items_;
};

// Scalar network output. `cache` is reused across calls.
inline double scalar_forward(const MlpParams& net,
                             std::span<const double> input, ForwardCache& cache) {
  forward_into(net, input, cache);
  return cache.post.back()[0];
}

inline double policy_mean(const PolicyParams& policy,
                          std::span<const double> obs) {
  ForwardCache cache;
  return scalar_forward(policy.trunk, obs, cache);
}

inline double value_of(const ValueParams& value, std::span<const double> obs) {
  ForwardCache cache;
  return scalar_forward(value.net, obs, cache);
}

// Statistics of the episodes that finished inside one collection round.
struct CollectStats {
  std::size_t episodes_started = 0;
  std::size_t episodes_completed = 0;
  std::size_t episodes_drained = 0;
  double sum_return = 0.0;  // unscaled rewards
  double sum_abs_terminal_dev = 0.0;
  double sum_utility = 0.0;

  double mean_return() const {
    return episodes_completed ? sum_return / static_cast<double>(episodes_completed)
                              : 0.0;
  }
  double mean_terminal_deviation() const {
    return episodes_completed
               ? sum_abs_terminal_dev / static_cast<double>(episodes_completed)
               : 0.0;
  }
};

// Source of training days: a profile and the episode's seed.
struct EpisodeSpec {
  const HarvestProfile* profile = nullptr;
  std::uint64_t seed = 0;
};

// Appends whole episodes until the buffer is full; the last episode is cut
// where the buffer ends and bootstraps from V(next_obs).
// Episode `first_episode + i` draws everything from
// derive_seed(seed, kTrainEpisode, first_episode + i), so the result does not
// depend on how episodes are distributed over collectors.
inline CollectStats collect(const EnergyEnv& env,
                            std::span<const HarvestProfile> profiles,
                            const PolicyParams& policy, const ValueParams& value,
                            TrajectoryBuffer& buffer, std::uint64_t seed,
                            std::uint64_t first_episode, double reward_scale = 1.0) {
  if (!buffer.empty()) throw UsageError("collect requires an empty buffer");
  if (profiles.empty()) throw UsageError("collect requires at least one profile");
  CollectStats stats;
  ForwardCache pcache, vcache;
  std::uint64_t episode = first_episode;
  while (!buffer.full()) {
    const std::uint64_t ep_seed = derive_seed(seed, Stream::kTrainEpisode, episode++);
    Rng ep_rng(ep_seed);
    const HarvestProfile& profile =
        profiles[profiles.size() == 1 ? 0 : ep_rng.below(profiles.size())];
    auto [state, obs] = env.reset(profile, std::nullopt, ep_rng.next_u64());
    Rng noise(ep_rng.next_u64());
    ++stats.episodes_started;
    double ret = 0.0, util = 0.0;
    while (!state.done && !buffer.full()) {
      Transition tr;
      tr.obs = obs.to_array();
      const double mean = scalar_forward(policy.trunk, tr.obs, pcache);
      tr.value = scalar_forward(value.net, tr.obs, vcache);
      tr.action_raw = mean + policy.stddev() * noise.normal();
      tr.old_logprob = gaussian_logprob(mean, policy.log_std, tr.action_raw);
      const StepOutcome out = env.step(state, tr.action_raw);
      tr.reward = reward_scale * out.reward;
      tr.done = out.done;
      tr.next_obs = out.next_obs.to_array();
      buffer.push(tr);
      ret += out.reward;
      util += env.utility(out.info.alloc_applied_j);
      obs = out.next_obs;
      if (out.done) {
        ++stats.episodes_completed;
        stats.sum_return += ret;
        stats.sum_utility += util;
        stats.sum_abs_terminal_dev += std::abs(*out.info.terminal_deviation_j);
        if (out.info.battery_after_j <= 0.0) ++stats.episodes_drained;
      }
    }
  }
  return stats;
}

// One-step advantages A = r + gamma V(s') (1 - done) - V(s) and targets
// r + gamma V(s') (1 - done), optionally standardized over the buffer.
inline void compute_advantages(TrajectoryBuffer& buffer, const ValueParams& value,
                               double gamma, bool normalize,
                               AdvantageMode mode = AdvantageMode::kOneStep) {
  ForwardCache cache;
  const auto items = buffer.items();
  for (Transition& tr : items) {
    tr.next_value = tr.done ? 0.0 : scalar_forward(value.net, tr.next_obs, cache);
  }
  // Episodes are contiguous, so return-to-go accumulates backwards and
  // restarts at every terminal transition.
  const double trace = mode == AdvantageMode::kMonteCarlo ? gamma : 0.0;
  double carry = 0.0;
  for (std::size_t k = items.size(); k-- > 0;) {
    Transition& tr = items[k];
    if (tr.done) carry = 0.0;
    carry = tr.reward + gamma * tr.next_value - tr.value + trace * carry;
    tr.advantage = carry;
    tr.target = tr.advantage + tr.value;
  }
  if (normalize && buffer.size() > 1) {
    double mean = 0.0;
    for (const Transition& tr : buffer.items()) mean += tr.advantage;
    mean /= static_cast<double>(buffer.size());
    double var = 0.0;
    for (const Transition& tr : buffer.items()) {
      var += (tr.advantage - mean) * (tr.advantage - mean);
    }
    const double inv_std =
        1.0 / (std::sqrt(var / static_cast<double>(buffer.size())) + 1e-8);
    for (Transition& tr : buffer.items()) tr.advantage = (tr.advantage - mean) * inv_std;
  }
}

// min(rho A, clip(rho, 1-eps, 1+eps) A)
inline double clipped_surrogate(double ratio, double advantage, double clip_eps) {
  const double clipped = std::clamp(ratio, 1.0 - clip_eps, 1.0 + clip_eps);
  return std::min(ratio * advantage, clipped * advantage);
}

// d surrogate / d ratio: the unclipped slope when that branch is selected.
inline double clipped_surrogate_slope(double ratio, double advantage,
                                      double clip_eps) {
  const double clipped = std::clamp(ratio, 1.0 - clip_eps, 1.0 + clip_eps);
  return ratio * advantage <= clipped * advantage ? advantage : 0.0;
}

struct LossGradients {
  MlpParams policy;
  double log_std = 0.0;
  MlpParams value;
};

struct LossResult {
  double total = 0.0;
  double policy_loss = 0.0;  // -mean surrogate
  double value_loss = 0.0;   // mean (V(s) - target)^2
  double entropy = 0.0;
  double mean_ratio = 0.0;
  LossGradients grads;
};

// Scratch storage for ppo_loss; reuse across minibatches to avoid
// reallocating.
struct LossWorkspace {
  ForwardCache pcache, vcache;
  std::vector<double> scratch;
};

// L = -mean(surrogate) + c1 * L_value - c2 * entropy, with analytic gradients.
inline LossResult ppo_loss(std::span<const Transition* const> batch,
                           const PolicyParams& policy, const ValueParams& value,
                           const HyperParams& hp, LossWorkspace& ws) {
  if (batch.empty()) throw UsageError("ppo_loss on an empty batch");
  LossResult r;
  r.grads.policy = MlpParams(policy.trunk.dims());
  r.grads.value = MlpParams(value.net.dims());
  const double n = static_cast<double>(batch.size());
  const double inv_var = std::exp(-2.0 * policy.log_std);
  double surrogate_sum = 0.0, value_sum = 0.0, ratio_sum = 0.0;
  for (const Transition* tr : batch) {
    const double mean = scalar_forward(policy.trunk, tr->obs, ws.pcache);
    const double logp = gaussian_logprob(mean, policy.log_std, tr->action_raw);
    const double ratio = std::exp(logp - tr->old_logprob);
    surrogate_sum += clipped_surrogate(ratio, tr->advantage, hp.clip_eps);
    ratio_sum += ratio;
    // dL/dlogp = -(1/n) * slope * ratio
    const double dlogp =
        -clipped_surrogate_slope(ratio, tr->advantage, hp.clip_eps) * ratio / n;
    if (dlogp != 0.0) {
      const double diff = tr->action_raw - mean;
      const double dmean = dlogp * diff * inv_var;
      backward_accumulate(policy.trunk, ws.pcache, std::span<const double>(&dmean, 1),
                          r.grads.policy, &ws.scratch);
      r.grads.log_std += dlogp * (diff * diff * inv_var - 1.0);
    }
    const double v = scalar_forward(value.net, tr->obs, ws.vcache);
    const double err = v - tr->target;
    value_sum += err * err;
    const double dv = hp.value_coef * 2.0 * err / n;
    backward_accumulate(value.net, ws.vcache, std::span<const double>(&dv, 1),
                        r.grads.value, &ws.scratch);
  }
  r.policy_loss = -surrogate_sum / n;
  r.value_loss = value_sum / n;
  r.entropy = gaussian_entropy(policy.log_std);
  r.mean_ratio = ratio_sum / n;
  r.grads.log_std -= hp.entropy_coef;
  r.total = r.policy_loss + hp.value_coef * r.value_loss - hp.entropy_coef * r.entropy;
  if (!std::isfinite(r.total)) throw NumericError("ppo_loss: non-finite loss");
  return r;
}

inline LossResult ppo_loss(std::span<const Transition> batch,
                           const PolicyParams& policy, const ValueParams& value,
                           const HyperParams& hp) {
  std::vector<const Transition*> ptrs;
  ptrs.reserve(batch.size());
  for (const Transition& tr : batch) ptrs.push_back(&tr);
  LossWorkspace ws;
  return ppo_loss(ptrs, policy, value, hp, ws);
}

// ---------------------------------------------------------------------------
// Training loop

struct UpdateLog {
  long long update_idx = 0;
  double mean_return = 0.0;
  double policy_loss = 0.0;
  double value_loss = 0.0;
  double entropy = 0.0;
  double mean_terminal_deviation_j = 0.0;
  std::size_t episodes_completed = 0;
  std::size_t episodes_drained = 0;
};

struct TrainResult {
  PolicyParams policy;
  ValueParams value;
  std::vector<UpdateLog> log;
};

struct TrainOptions {
  // Overrides hp.updates(); 0 keeps the episode-derived count.
  long long updates = 0;
  std::function<void(const UpdateLog&)> on_update;
};

class PpoTrainer {
 public:
  PpoTrainer(EnergyEnv env, std::vector<HarvestProfile> profiles, HyperParams hp,
             std::uint64_t seed)
      : env_(std::move(env)),
        profiles_(std::move(profiles)),
        hp_(hp),
        seed_(seed),
        buffer_(static_cast<std::size_t>(hp.buffer_size)) {
    hp_.validate();
    if (profiles_.empty()) throw UsageError("training needs at least one profile");
    for (const auto& p : profiles_) {
      p.validate();
      if (p.length() != env_.config().horizon()) {
        throw ShapeError("profile '" + p.cluster_label +
                         "' length differs from horizon_steps");
      }
    }
    const auto dims = network_dims(kObservationSize,
                                   static_cast<std::size_t>(hp_.hidden_neurons),
                                   static_cast<std::size_t>(hp_.hidden_layers));
    policy_ = init_policy(dims, derive_seed(seed_, Stream::kInit, 0));
    value_ = init_value(dims, derive_seed(seed_, Stream::kInit, 1));
    policy_adam_ = AdamState(policy_.trunk.size(), hp_.learning_rate);
    log_std_adam_ = AdamState(1, hp_.learning_rate);
    value_adam_ = AdamState(value_.net.size(), hp_.learning_rate);
  }

  const PolicyParams& policy() const { return policy_; }
  const ValueParams& value() const { return value_; }
  const HyperParams& hyper_params() const { return hp_; }
  const TrajectoryBuffer& buffer() const { return buffer_; }
  long long updates_done() const { return update_idx_; }

  // One round of Algorithm-style training: collect, freeze targets, K epochs.
  UpdateLog update() {
    const CollectStats stats = collect(env_, profiles_, policy_, value_, buffer_,
                                       seed_, next_episode_, hp_.reward_scale);
    next_episode_ += stats.episodes_started;
    compute_advantages(buffer_, value_, hp_.gamma, hp_.advantage_normalize,
                       hp_.advantage_mode);

    std::vector<std::size_t> order(buffer_.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng shuffle_rng(derive_seed(seed_, Stream::kShuffle,
                                static_cast<std::uint64_t>(update_idx_)));
    const std::size_t d = static_cast<std::size_t>(hp_.minibatch);
    const std::size_t batches = buffer_.size() / d;
    std::vector<const Transition*> batch(d);

    double policy_loss = 0.0, value_loss = 0.0, entropy = 0.0;
    std::size_t n_loss = 0;
    for (int epoch = 0; epoch < hp_.epochs; ++epoch) {
      shuffle_rng.shuffle(order.begin(), order.end());
      for (std::size_t b = 0; b < batches; ++b) {
        for (std::size_t i = 0; i < d; ++i) batch[i] = &buffer_[order[b * d + i]];
        LossResult loss;
        try {
          loss = ppo_loss(batch, policy_, value_, hp_, workspace_);
          adam_step(policy_adam_, policy_.trunk, loss.grads.policy);
          adam_step(log_std_adam_, std::span<double>(&policy_.log_std, 1),
                    std::span<const double>(&loss.grads.log_std, 1));
          adam_step(value_adam_, value_.net, loss.grads.value);
        } catch (const NumericError& e) {
          throw NumericError("training diverged at update " +
                             std::to_string(update_idx_) + ": " + e.what());
        }
        policy_loss += loss.policy_loss;
        value_loss += loss.value_loss;
        entropy += loss.entropy;
        ++n_loss;
      }
    }
    buffer_.clear();
    if (!policy_.trunk.all_finite() || !value_.net.all_finite() ||
        !std::isfinite(policy_.log_std)) {
      throw NumericError("training diverged at update " + std::to_string(update_idx_) +
                         ": non-finite parameters");
    }

    UpdateLog entry;
    entry.update_idx = update_idx_++;
    entry.mean_return = stats.mean_return();
    const double k = n_loss ? static_cast<double>(n_loss) : 1.0;
    entry.policy_loss = policy_loss / k;
    entry.value_loss = value_loss / k;
    entry.entropy = entropy / k;
    entry.mean_terminal_deviation_j = stats.mean_terminal_deviation();
    entry.episodes_completed = stats.episodes_completed;
    entry.episodes_drained = stats.episodes_drained;
    return entry;
  }

  TrainResult train(const TrainOptions& options = {}) {
    const long long total =
        options.updates > 0 ? options.updates : hp_.updates(env_.config().horizon_steps);
    TrainResult result;
    result.log.reserve(static_cast<std::size_t>(total));
    for (long long u = 0; u < total; ++u) {
      result.log.push_back(update());
      if (options.on_update) options.on_update(result.log.back());
    }
    result.policy = policy_;
    result.value = value_;
    return result;
  }

 private:
  EnergyEnv env_;
  std::vector<HarvestProfile> profiles_;
  HyperParams hp_;
  std::uint64_t seed_;
  TrajectoryBuffer buffer_;
  PolicyParams policy_;
  ValueParams value_;
  AdamState policy_adam_, log_std_adam_, value_adam_;
  LossWorkspace workspace_;
  long long update_idx_ = 0;
  std::uint64_t next_episode_ = 0;
};

inline TrainResult train(const DeviceConfig& config,
                         std::vector<HarvestProfile> profiles,
                         const HyperParams& hp, std::uint64_t seed,
                         const TrainOptions& options = {},
                         FinalRewardMode final_mode = FinalRewardMode::kCombined) {
  PpoTrainer trainer(EnergyEnv(config, final_mode), std::move(profiles), hp, seed);
  return trainer.train(options);
}

}  // namespace tinyman
