#pragma once

// Minimal fully connected network with hand-written backpropagation, the
// Gaussian policy head, and Adam. Hidden layers use tanh, the output layer
// is affine. Everything is f64.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numbers>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "tinyman/errors.hpp"
#include "tinyman/rng.hpp"

namespace tinyman {

// Parameters of an MLP stored contiguously: for each layer the row-major
// (fan_out x fan_in) weight matrix followed by its bias vector. The same type
// holds gradients.
class MlpParams {
 public:
  MlpParams() = default;

  explicit MlpParams(std::vector<std::size_t> dims) : dims_(std::move(dims)) {
    if (dims_.size() < 2) throw ShapeError("an MLP needs at least 2 dims");
    std::size_t offset = 0;
    for (std::size_t l = 0; l + 1 < dims_.size(); ++l) {
      if (dims_[l] == 0 || dims_[l + 1] == 0) throw ShapeError("zero-width layer");
      weight_offset_.push_back(offset);
      offset += dims_[l] * dims_[l + 1];
      bias_offset_.push_back(offset);
      offset += dims_[l + 1];
    }
    values_.assign(offset, 0.0);
  }

  const std::vector<std::size_t>& dims() const { return dims_; }
  std::size_t num_layers() const { return weight_offset_.size(); }
  std::size_t fan_in(std::size_t layer) const { return dims_[layer]; }
  std::size_t fan_out(std::size_t layer) const { return dims_[layer + 1]; }
  std::size_t input_size() const { return dims_.front(); }
  std::size_t output_size() const { return dims_.back(); }
  std::size_t size() const { return values_.size(); }

  std::span<double> weights(std::size_t l) {
    return {values_.data() + weight_offset_[l], fan_in(l) * fan_out(l)};
  }
  std::span<const double> weights(std::size_t l) const {
    return {values_.data() + weight_offset_[l], fan_in(l) * fan_out(l)};
  }
  std::span<double> bias(std::size_t l) {
    return {values_.data() + bias_offset_[l], fan_out(l)};
  }
  std::span<const double> bias(std::size_t l) const {
    return {values_.data() + bias_offset_[l], fan_out(l)};
  }
  double& weight(std::size_t l, std::size_t out, std::size_t in) {
    return values_[weight_offset_[l] + out * fan_in(l) + in];
  }
  double weight(std::size_t l, std::size_t out, std::size_t in) const {
    return values_[weight_offset_[l] + out * fan_in(l) + in];
  }

  std::span<double> flat() { return values_; }
  std::span<const double> flat() const { return values_; }

  // Bumped by every optimizer update; forward caches remember it so a cache
  // computed before an update cannot be fed to backward afterwards.
  std::uint64_t revision() const { return revision_; }
  void touch() { ++revision_; }

  bool all_finite() const {
    return std::all_of(values_.begin(), values_.end(),
                       [](double v) { return std::isfinite(v); });
  }

  void set_zero() { std::fill(values_.begin(), values_.end(), 0.0); }

  bool same_shape(const MlpParams& other) const { return dims_ == other.dims_; }

  friend bool operator==(const MlpParams& a, const MlpParams& b) {
    return a.dims_ == b.dims_ && a.values_ == b.values_;
  }

 private:
  std::vector<std::size_t> dims_;
  std::vector<std::size_t> weight_offset_;
  std::vector<std::size_t> bias_offset_;
  std::vector<double> values_;
  std::uint64_t revision_ = 0;
};

// Optional instrumentation for forward passes.
struct OpCounter {
  std::uint64_t macs = 0;
  std::uint64_t activations = 0;
};

struct ForwardCache {
  // post[0] is the input, post[l + 1] the output of layer l (after tanh on
  // hidden layers). pre[l] holds the affine output of layer l.
  std::vector<std::vector<double>> pre;
  std::vector<std::vector<double>> post;
  const MlpParams* owner = nullptr;
  std::uint64_t revision = 0;

  std::span<const double> output() const { return post.back(); }
};

// Fills `cache` in place, reusing its storage.
inline void forward_into(const MlpParams& params, std::span<const double> input,
                         ForwardCache& cache, OpCounter* counter = nullptr) {
  if (input.size() != params.input_size()) {
    throw ShapeError("forward: input has " + std::to_string(input.size()) +
                     " values, network expects " +
                     std::to_string(params.input_size()));
  }
  const std::size_t n_layers = params.num_layers();
  cache.pre.resize(n_layers);
  cache.post.resize(n_layers + 1);
  cache.post[0].assign(input.begin(), input.end());
  for (std::size_t l = 0; l < n_layers; ++l) {
    const std::size_t n_in = params.fan_in(l);
    const std::size_t n_out = params.fan_out(l);
    const auto w = params.weights(l);
    const auto b = params.bias(l);
    const auto& x = cache.post[l];
    auto& z = cache.pre[l];
    z.resize(n_out);
    for (std::size_t o = 0; o < n_out; ++o) {
      double acc = b[o];
      const double* row = w.data() + o * n_in;
      for (std::size_t i = 0; i < n_in; ++i) acc += row[i] * x[i];
      z[o] = acc;
    }
    auto& y = cache.post[l + 1];
    y.resize(n_out);
    const bool hidden = l + 1 < n_layers;
    if (hidden) {
      std::transform(z.begin(), z.end(), y.begin(),
                     [](double v) { return std::tanh(v); });
    } else {
      std::copy(z.begin(), z.end(), y.begin());
    }
    if (counter) {
      counter->macs += n_in * n_out;
      if (hidden) counter->activations += n_out;
    }
  }
  cache.owner = &params;
  cache.revision = params.revision();
}

struct ForwardResult {
  std::vector<double> output;
  ForwardCache cache;
};

inline ForwardResult forward(const MlpParams& params,
                             std::span<const double> input) {
  ForwardResult r;
  forward_into(params, input, r.cache);
  r.output = r.cache.post.back();
  return r;
}

// Accumulates dLoss/dparams into `grads` (same shape as params) for one
// sample, given dLoss/doutput.
inline void backward_accumulate(const MlpParams& params,
                                const ForwardCache& cache,
                                std::span<const double> output_grad,
                                MlpParams& grads,
                                std::vector<double>* scratch = nullptr) {
  if (cache.owner != &params || cache.revision != params.revision() ||
      cache.post.size() != params.num_layers() + 1) {
    throw UsageError("backward: cache does not match the current parameters");
  }
  if (!grads.same_shape(params)) throw ShapeError("backward: gradient shape");
  if (output_grad.size() != params.output_size()) {
    throw ShapeError("backward: output gradient length mismatch");
  }
  std::vector<double> local;
  std::vector<double>& delta = scratch ? *scratch : local;
  std::vector<double> next;
  delta.assign(output_grad.begin(), output_grad.end());
  for (std::size_t l = params.num_layers(); l-- > 0;) {
    const std::size_t n_in = params.fan_in(l);
    const std::size_t n_out = params.fan_out(l);
    if (l + 1 < params.num_layers()) {
      // Through tanh: dy/dz = 1 - y^2.
      const auto& y = cache.post[l + 1];
      for (std::size_t o = 0; o < n_out; ++o) delta[o] *= 1.0 - y[o] * y[o];
    }
    const auto& x = cache.post[l];
    auto gw = grads.weights(l);
    auto gb = grads.bias(l);
    for (std::size_t o = 0; o < n_out; ++o) {
      const double d = delta[o];
      if (d == 0.0) continue;
      gb[o] += d;
      double* row = gw.data() + o * n_in;
      for (std::size_t i = 0; i < n_in; ++i) row[i] += d * x[i];
    }
    if (l > 0) {
      const auto w = params.weights(l);
      next.assign(n_in, 0.0);
      for (std::size_t o = 0; o < n_out; ++o) {
        const double d = delta[o];
        if (d == 0.0) continue;
        const double* row = w.data() + o * n_in;
        for (std::size_t i = 0; i < n_in; ++i) next[i] += d * row[i];
      }
      delta.swap(next);
    }
  }
}

inline MlpParams backward(const MlpParams& params, const ForwardCache& cache,
                          std::span<const double> output_grad) {
  MlpParams grads(params.dims());
  backward_accumulate(params, cache, output_grad, grads);
  return grads;
}

// Weights ~ U(-sqrt(1/fan_in), +sqrt(1/fan_in)), biases zero. The last
// layer's weights are multiplied by `output_scale`.
inline MlpParams init_params(const std::vector<std::size_t>& dims,
                             std::uint64_t seed, double output_scale = 1.0) {
  MlpParams p(dims);
  Rng rng(seed);
  for (std::size_t l = 0; l < p.num_layers(); ++l) {
    const double bound = std::sqrt(1.0 / static_cast<double>(p.fan_in(l)));
    const double scale = l + 1 == p.num_layers() ? output_scale : 1.0;
    for (double& w : p.weights(l)) w = scale * rng.uniform(-bound, bound);
  }
  return p;
}

// ---------------------------------------------------------------------------
// Gaussian head

inline constexpr double kHalfLog2Pi = 0.91893853320467274178;  // 0.5 ln(2 pi)

inline double gaussian_logprob(double mean, double log_std, double sample) {
  const double z = (sample - mean) * std::exp(-log_std);
  return -0.5 * z * z - log_std - kHalfLog2Pi;
}

inline double gaussian_entropy(double log_std) {
  return 0.5 + kHalfLog2Pi + log_std;
}

// Policy: MLP producing the action mean plus one state-independent log-std.
struct PolicyParams {
  MlpParams trunk;
  double log_std = 0.0;

  double stddev() const { return std::exp(log_std); }
  std::size_t hidden_width() const { return trunk.dims().at(1); }
};

struct ValueParams {
  MlpParams net;
};

inline std::vector<std::size_t> network_dims(std::size_t input,
                                             std::size_t hidden,
                                             std::size_t hidden_layers = 1) {
  std::vector<std::size_t> dims{input};
  for (std::size_t i = 0; i < hidden_layers; ++i) dims.push_back(hidden);
  dims.push_back(1);
  return dims;
}

inline PolicyParams init_policy(const std::vector<std::size_t>& dims,
                                std::uint64_t seed) {
  return {init_params(dims, seed, 0.01), 0.0};
}

inline ValueParams init_value(const std::vector<std::size_t>& dims,
                              std::uint64_t seed) {
  return {init_params(dims, seed)};
}

// ---------------------------------------------------------------------------
// Adam

struct AdamState {
  double learning_rate = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  std::uint64_t step = 0;
  std::vector<double> m;
  std::vector<double> v;

  AdamState() = default;
  AdamState(std::size_t n, double lr) : learning_rate(lr), m(n, 0.0), v(n, 0.0) {}
};

// One bias-corrected Adam descent step. Rejects the whole update, leaving
// params and moments untouched, if any gradient is non-finite.
inline void adam_step(AdamState& state, std::span<double> params,
                      std::span<const double> grads) {
  if (params.size() != grads.size()) throw ShapeError("adam: params/grads length");
  if (state.m.empty() && state.v.empty()) {
    state.m.assign(params.size(), 0.0);
    state.v.assign(params.size(), 0.0);
  }
  if (state.m.size() != params.size() || state.v.size() != params.size()) {
    throw ShapeError("adam: moment length differs from params");
  }
  for (double g : grads) {
    if (!std::isfinite(g)) throw NumericError("adam: non-finite gradient");
  }
  ++state.step;
  const double t = static_cast<double>(state.step);
  const double c1 = 1.0 - std::pow(state.beta1, t);
  const double c2 = 1.0 - std::pow(state.beta2, t);
  for (std::size_t i = 0; i < params.size(); ++i) {
    const double g = grads[i];
    state.m[i] = state.beta1 * state.m[i] + (1.0 - state.beta1) * g;
    state.v[i] = state.beta2 * state.v[i] + (1.0 - state.beta2) * g * g;
    const double m_hat = state.m[i] / c1;
    const double v_hat = state.v[i] / c2;
    params[i] -= state.learning_rate * m_hat / (std::sqrt(v_hat) + state.epsilon);
  }
}

inline void adam_step(AdamState& state, MlpParams& params,
                      const MlpParams& grads) {
  if (!params.same_shape(grads)) throw ShapeError("adam: gradient shape");
  adam_step(state, params.flat(), grads.flat());
  params.touch();
}

}  // namespace tinyman
