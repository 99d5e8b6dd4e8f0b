#pragma once

// Binary policy bundle and a standalone inference kernel.
//
// Layout (all integers and floats little-endian):
//
//   offset  size      field
//   0       4         magic "TMAN"
//   4       2         u16 format version (= 1)
//   6       2         u16 number of layer dims n
//   8       4n        u32 dims, input first
//   ...     4k        f32 parameters, per layer: weights row-major
//                     (fan_out x fan_in), then biases
//   ...     4         f32 log_std
//   ...     8 * 3     f64 capacity_j, min_alloc_j, reservoir_j
//   ...     4         u32 horizon_steps
//   ...     1         u8 action mapping (0 linear, 1 geometric)
//   end-4   4         u32 CRC-32 (IEEE) of every byte from offset 6 up to
//                     the checksum itself
//
// The kernel keeps the f32 parameters and accumulates in f64. It does not
// allocate after construction; give each thread its own kernel.

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <span>
#include <string>
#include <vector>

#include <zlib.h>

#include "tinyman/envsim.hpp"
#include "tinyman/errors.hpp"
#include "tinyman/tinynet.hpp"

namespace tinyman {

inline constexpr std::uint16_t kBundleVersion = 1;
inline constexpr char kBundleMagic[4] = {'T', 'M', 'A', 'N'};

struct PolicyBundle {
  std::uint16_t version = kBundleVersion;
  std::vector<std::uint32_t> dims;
  std::vector<float> params;  // MlpParams layout
  float log_std = 0.0f;
  double capacity_j = 0.0;
  double min_alloc_j = 0.0;
  double reservoir_j = 0.0;
  std::uint32_t horizon_steps = 0;
  ActionMapping action_mapping = ActionMapping::kLinear;

  std::size_t num_layers() const { return dims.size() - 1; }

  std::size_t expected_param_count() const {
    std::size_t n = 0;
    for (std::size_t l = 0; l + 1 < dims.size(); ++l) {
      n += static_cast<std::size_t>(dims[l]) * dims[l + 1] + dims[l + 1];
    }
    return n;
  }
};

namespace detail {

static_assert(std::endian::native == std::endian::little ||
                  std::endian::native == std::endian::big,
              "mixed-endian hosts are not supported");

class ByteWriter {
 public:
  template <typename T>
  void put(T value) {
    unsigned char raw[sizeof(T)];
    std::memcpy(raw, &value, sizeof(T));
    if constexpr (std::endian::native == std::endian::big) {
      std::reverse(std::begin(raw), std::end(raw));
    }
    bytes_.insert(bytes_.end(), std::begin(raw), std::end(raw));
  }
  void put_raw(const char* data, std::size_t n) {
    bytes_.insert(bytes_.end(), data, data + n);
  }
  std::vector<std::uint8_t>& bytes() { return bytes_; }

 private:
  std::vector<std::uint8_t> bytes_;
};

class ByteReader {
 public:
  explicit ByteReader(std::span<const std::uint8_t> bytes) : bytes_(bytes) {}

  template <typename T>
  T get() {
    if (pos_ + sizeof(T) > bytes_.size()) throw FormatError("policy bundle truncated");
    unsigned char raw[sizeof(T)];
    std::memcpy(raw, bytes_.data() + pos_, sizeof(T));
    if constexpr (std::endian::native == std::endian::big) {
      std::reverse(std::begin(raw), std::end(raw));
    }
    pos_ += sizeof(T);
    T value;
    std::memcpy(&value, raw, sizeof(T));
    return value;
  }
  std::size_t pos() const { return pos_; }

 private:
  std::span<const std::uint8_t> bytes_;
  std::size_t pos_ = 0;
};

inline std::uint32_t crc32_of(std::span<const std::uint8_t> bytes) {
  uLong crc = crc32(0L, Z_NULL, 0);
  crc = crc32(crc, bytes.data(), static_cast<uInt>(bytes.size()));
  return static_cast<std::uint32_t>(crc);
}

}  // namespace detail

inline PolicyBundle make_bundle(const PolicyParams& policy, const DeviceConfig& config) {
  if (!policy.trunk.all_finite() || !std::isfinite(policy.log_std)) {
    throw NumericError("cannot export a policy with non-finite parameters");
  }
  if (policy.trunk.output_size() != 1) throw ShapeError("policy must have one output");
  PolicyBundle b;
  for (std::size_t d : policy.trunk.dims()) b.dims.push_back(static_cast<std::uint32_t>(d));
  const auto flat = policy.trunk.flat();
  b.params.assign(flat.begin(), flat.end());
  b.log_std = static_cast<float>(policy.log_std);
  b.capacity_j = config.capacity_j;
  b.min_alloc_j = config.min_alloc_j;
  b.reservoir_j = config.reservoir_j;
  b.horizon_steps = static_cast<std::uint32_t>(config.horizon_steps);
  b.action_mapping = config.action_mapping;
  return b;
}

inline std::vector<std::uint8_t> encode(const PolicyBundle& b) {
  if (b.dims.size() < 2) throw ShapeError("bundle needs at least two dims");
  if (b.params.size() != b.expected_param_count()) {
    throw ShapeError("bundle parameter count does not match dims");
  }
  detail::ByteWriter w;
  w.put_raw(kBundleMagic, 4);
  w.put<std::uint16_t>(b.version);
  w.put<std::uint16_t>(static_cast<std::uint16_t>(b.dims.size()));
  for (auto d : b.dims) w.put<std::uint32_t>(d);
  for (float p : b.params) w.put<float>(p);
  w.put<float>(b.log_std);
  w.put<double>(b.capacity_j);
  w.put<double>(b.min_alloc_j);
  w.put<double>(b.reservoir_j);
  w.put<std::uint32_t>(b.horizon_steps);
  w.put<std::uint8_t>(static_cast<std::uint8_t>(b.action_mapping));
  auto& bytes = w.bytes();
  const std::uint32_t crc =
      detail::crc32_of(std::span<const std::uint8_t>(bytes).subspan(6));
  w.put<std::uint32_t>(crc);
  return std::move(bytes);
}

inline PolicyBundle decode(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < 10 || std::memcmp(bytes.data(), kBundleMagic, 4) != 0) {
    throw FormatError("not a policy bundle (bad magic)");
  }
  detail::ByteReader r(bytes.subspan(4));
  PolicyBundle b;
  b.version = r.get<std::uint16_t>();
  if (b.version != kBundleVersion) {
    throw FormatError("unsupported policy bundle version " + std::to_string(b.version) +
                      " (expected " + std::to_string(kBundleVersion) + ")");
  }
  const auto payload = bytes.subspan(6, bytes.size() - 6 - 4);
  detail::ByteReader tail(bytes.subspan(bytes.size() - 4));
  if (detail::crc32_of(payload) != tail.get<std::uint32_t>()) {
    throw FormatError("policy bundle checksum mismatch");
  }
  detail::ByteReader p(payload);
  const auto n_dims = p.get<std::uint16_t>();
  if (n_dims < 2) throw FormatError("policy bundle has fewer than two dims");
  for (std::uint16_t i = 0; i < n_dims; ++i) {
    const auto d = p.get<std::uint32_t>();
    if (d == 0) throw FormatError("policy bundle has a zero-width layer");
    b.dims.push_back(d);
  }
  const std::size_t n_params = b.expected_param_count();
  if (n_params * 4 > payload.size()) throw FormatError("policy bundle truncated");
  b.params.resize(n_params);
  for (auto& v : b.params) v = p.get<float>();
  b.log_std = p.get<float>();
  b.capacity_j = p.get<double>();
  b.min_alloc_j = p.get<double>();
  b.reservoir_j = p.get<double>();
  b.horizon_steps = p.get<std::uint32_t>();
  const auto mapping = p.get<std::uint8_t>();
  if (mapping > 1) throw FormatError("policy bundle has an unknown action mapping");
  b.action_mapping = static_cast<ActionMapping>(mapping);
  if (p.pos() != payload.size()) throw FormatError("policy bundle has trailing bytes");
  return b;
}

inline void write_bundle_file(const PolicyBundle& b, const std::filesystem::path& path) {
  const auto bytes = encode(b);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()),
            static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("failed writing '" + path.string() + "'");
}

inline PolicyBundle export_policy(const PolicyParams& policy, const DeviceConfig& config,
                                  const std::filesystem::path& path) {
  PolicyBundle b = make_bundle(policy, config);
  write_bundle_file(b, path);
  return b;
}

inline PolicyBundle import_bundle(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open policy bundle '" + path.string() + "'");
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)),
                                  std::istreambuf_iterator<char>());
  try {
    return decode(bytes);
  } catch (const FormatError& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

// Back to f64 training parameters (exact widening of the stored floats).
inline PolicyParams to_policy_params(const PolicyBundle& b) {
  std::vector<std::size_t> dims(b.dims.begin(), b.dims.end());
  PolicyParams p{MlpParams(dims), static_cast<double>(b.log_std)};
  std::copy(b.params.begin(), b.params.end(), p.trunk.flat().begin());
  return p;
}

struct OpCounts {
  std::uint64_t macs = 0;
  std::uint64_t activations = 0;
  std::uint64_t params = 0;  // weights + biases + log_std
};

inline OpCounts count_ops(const PolicyBundle& b) {
  OpCounts c;
  for (std::size_t l = 0; l + 1 < b.dims.size(); ++l) {
    const std::uint64_t in = b.dims[l], out = b.dims[l + 1];
    c.macs += in * out;
    c.params += in * out + out;
    if (l + 2 < b.dims.size()) c.activations += out;
  }
  c.params += 1;
  return c;
}

class InferenceKernel {
 public:
  explicit InferenceKernel(PolicyBundle bundle) : b_(std::move(bundle)) {
    if (b_.dims.size() < 2 || b_.params.size() != b_.expected_param_count()) {
      throw ShapeError("inconsistent policy bundle");
    }
    if (b_.dims.front() != kObservationSize || b_.dims.back() != 1) {
      throw ShapeError("policy bundle must map 5 observations to 1 action");
    }
    const auto widest = *std::max_element(b_.dims.begin(), b_.dims.end());
    a_.assign(widest, 0.0);
    z_.assign(widest, 0.0);
  }

  const PolicyBundle& bundle() const { return b_; }

  // Gaussian mean for a normalized observation.
  double mean_action(std::span<const double> obs, OpCounter* counter = nullptr) {
    if (obs.size() != kObservationSize) {
      throw ShapeError("observation must have 5 values, got " +
                       std::to_string(obs.size()));
    }
    std::copy(obs.begin(), obs.end(), a_.begin());
    const float* p = b_.params.data();
    const std::size_t n_layers = b_.num_layers();
    for (std::size_t l = 0; l < n_layers; ++l) {
      const std::size_t n_in = b_.dims[l], n_out = b_.dims[l + 1];
      const float* w = p;
      const float* bias = p + n_in * n_out;
      for (std::size_t o = 0; o < n_out; ++o) {
        double acc = bias[o];
        for (std::size_t i = 0; i < n_in; ++i) {
          acc += static_cast<double>(w[o * n_in + i]) * a_[i];
        }
        z_[o] = acc;
      }
      const bool hidden = l + 1 < n_layers;
      for (std::size_t o = 0; o < n_out; ++o) a_[o] = hidden ? std::tanh(z_[o]) : z_[o];
      if (counter) {
        counter->macs += n_in * n_out;
        if (hidden) counter->activations += n_out;
      }
      p = bias + n_out;
    }
    return a_[0];
  }

  // Allocated energy in J for the state `obs` (battery = obs[0] * capacity).
  double infer(std::span<const double> obs) {
    const double mean = mean_action(obs);
    const double battery = obs[0] * b_.capacity_j;
    return allocation_from_action(mean, battery, b_.min_alloc_j, b_.action_mapping);
  }

 private:
  PolicyBundle b_;
  std::vector<double> a_;
  std::vector<double> z_;
};

}  // namespace tinyman
