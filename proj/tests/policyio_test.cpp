#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <limits>
#include <string>
#include <vector>

#include "tinyman/tinyman.hpp"

using namespace tinyman;

namespace {

PolicyParams random_policy(std::size_t hidden, std::size_t layers, std::uint64_t seed) {
  PolicyParams p{init_params(network_dims(kObservationSize, hidden, layers), seed), -0.7};
  return p;
}

std::array<double, kObservationSize> random_obs(Rng& rng) {
  std::array<double, kObservationSize> x{};
  for (auto& v : x) v = rng.uniform();
  return x;
}

std::string error_of(std::span<const std::uint8_t> bytes) {
  try {
    decode(bytes);
  } catch (const FormatError& e) {
    return e.what();
  }
  return {};
}

std::filesystem::path temp_path(const std::string& name) {
  return std::filesystem::temp_directory_path() / ("tinyman_policyio_" + name);
}

}  // namespace

TEST(Bundle, ByteLayout) {
  const auto policy = random_policy(3, 1, 1);
  DeviceConfig cfg;
  cfg.horizon_steps = 24;
  const auto bytes = encode(make_bundle(policy, cfg));
  const std::size_t n_params = 5 * 3 + 3 + 3 * 1 + 1;
  EXPECT_EQ(bytes.size(), 4 + 2 + 2 + 3 * 4 + n_params * 4 + 4 + 3 * 8 + 4 + 1 + 4);
  EXPECT_EQ(std::string(bytes.begin(), bytes.begin() + 4), "TMAN");
  EXPECT_EQ(bytes[4], 1);  // version, little-endian
  EXPECT_EQ(bytes[5], 0);
  EXPECT_EQ(bytes[6], 3);  // three dims
  EXPECT_EQ(bytes[8], 5);
  EXPECT_EQ(bytes[12], 3);
  EXPECT_EQ(bytes[16], 1);
  float w0 = 0.0f;
  std::memcpy(&w0, bytes.data() + 20, 4);
  EXPECT_EQ(w0, static_cast<float>(policy.trunk.weight(0, 0, 0)));
  // CRC over offset 6 .. end-4, stored little-endian.
  const std::uint32_t crc = static_cast<std::uint32_t>(
      crc32(crc32(0L, Z_NULL, 0), bytes.data() + 6, static_cast<uInt>(bytes.size() - 10)));
  const std::size_t e = bytes.size() - 4;
  EXPECT_EQ(bytes[e] | bytes[e + 1] << 8 | bytes[e + 2] << 16 |
                static_cast<std::uint32_t>(bytes[e + 3]) << 24,
            crc);
}

TEST(Bundle, RoundTripMeanActions) {
  const auto policy = random_policy(32, 2, 2);
  const auto bundle = decode(encode(make_bundle(policy, DeviceConfig{})));
  InferenceKernel kernel(bundle);
  Rng rng(derive_seed(3, Stream::kTest, 0));
  for (int i = 0; i < 100; ++i) {
    const auto x = random_obs(rng);
    const double ref = policy_mean(policy, x);
    // Relative to the [-1, 1] action scale; pointwise relative error is
    // unbounded where the mean action crosses zero.
    EXPECT_LE(std::abs(kernel.mean_action(x) - ref), 1e-6 * std::max(1.0, std::abs(ref)))
        << i;
  }
  EXPECT_FLOAT_EQ(bundle.log_std, -0.7f);
  const auto back = to_policy_params(bundle);
  EXPECT_EQ(back.trunk.dims(), policy.trunk.dims());
}

TEST(Bundle, ConfigEcho) {
  DeviceConfig cfg;
  cfg.capacity_j = 200.0;
  cfg.min_alloc_j = 0.5;
  cfg.reservoir_j = 12.5;
  cfg.horizon_steps = 48;
  cfg.action_mapping = ActionMapping::kGeometric;
  const auto b = decode(encode(make_bundle(random_policy(4, 1, 3), cfg)));
  EXPECT_EQ(b.capacity_j, 200.0);
  EXPECT_EQ(b.min_alloc_j, 0.5);
  EXPECT_EQ(b.reservoir_j, 12.5);
  EXPECT_EQ(b.horizon_steps, 48u);
  EXPECT_EQ(b.action_mapping, ActionMapping::kGeometric);
}

TEST(Bundle, CorruptPayloadByteRejected) {
  auto bytes = encode(make_bundle(random_policy(8, 1, 4), DeviceConfig{}));
  for (std::size_t pos : {std::size_t{6}, std::size_t{30}, bytes.size() - 5}) {
    auto copy = bytes;
    copy[pos] ^= 0x10;
    EXPECT_NE(error_of(copy).find("checksum mismatch"), std::string::npos) << pos;
  }
}

TEST(Bundle, VersionBumpRejected) {
  auto bytes = encode(make_bundle(random_policy(8, 1, 4), DeviceConfig{}));
  bytes[4] = 2;
  EXPECT_NE(error_of(bytes).find("unsupported policy bundle version 2"), std::string::npos);
}

TEST(Bundle, BadMagicAndTruncation) {
  auto bytes = encode(make_bundle(random_policy(8, 1, 4), DeviceConfig{}));
  auto bad = bytes;
  bad[0] = 'X';
  EXPECT_NE(error_of(bad).find("bad magic"), std::string::npos);
  EXPECT_FALSE(error_of(std::span(bytes).first(9)).empty());
  EXPECT_FALSE(error_of(std::span(bytes).first(bytes.size() - 7)).empty());
}

TEST(Bundle, NonFinitePolicyNotExported) {
  auto p = random_policy(4, 1, 5);
  p.trunk.flat()[3] = std::numeric_limits<double>::quiet_NaN();
  EXPECT_THROW(make_bundle(p, DeviceConfig{}), NumericError);
}

TEST(Bundle, FileRoundTripAndErrors) {
  const auto path = temp_path("roundtrip.tman");
  const auto policy = random_policy(16, 1, 6);
  const auto written = export_policy(policy, DeviceConfig{}, path);
  const auto read = import_bundle(path);
  EXPECT_EQ(read.params, written.params);
  EXPECT_EQ(read.dims, written.dims);
  std::filesystem::remove(path);

  try {
    import_bundle(temp_path("missing.tman"));
    FAIL() << "expected IoError";
  } catch (const IoError& e) {
    EXPECT_NE(std::string(e.what()).find("missing.tman"), std::string::npos);
  }
  try {
    export_policy(policy, DeviceConfig{}, temp_path("no/such/dir/p.tman"));
    FAIL() << "expected IoError";
  } catch (const IoError& e) {
    EXPECT_NE(std::string(e.what()).find("p.tman"), std::string::npos);
  }
}

TEST(Infer, ZeroWeightsGiveMidpoint) {
  PolicyParams zero{MlpParams(network_dims(kObservationSize, 64, 1)), 0.0};
  DeviceConfig cfg;
  InferenceKernel kernel(make_bundle(zero, cfg));
  const std::array<double, 5> obs{50.0 / cfg.capacity_j, 0.3, 0.1, 0.1, 0.5};
  EXPECT_NEAR(kernel.infer(obs), 25.32, 1e-9);
  const std::array<double, 5> at_floor{cfg.min_alloc_j / cfg.capacity_j, 0.3, 0.1, 0.1, 0.5};
  EXPECT_NEAR(kernel.infer(at_floor), cfg.min_alloc_j, 1e-12);
}

TEST(Infer, BatteryAtFloorIgnoresPolicy) {
  DeviceConfig cfg;
  auto p = random_policy(8, 1, 7);
  p.trunk.flat().back() = 3.0;
  InferenceKernel kernel(make_bundle(p, cfg));
  Rng rng(8);
  for (int i = 0; i < 20; ++i) {
    auto x = random_obs(rng);
    x[0] = cfg.min_alloc_j / cfg.capacity_j;
    EXPECT_NEAR(kernel.infer(x), cfg.min_alloc_j, 1e-12);
  }
}

TEST(Infer, MatchesTrainingGreedyAction) {
  for (auto mapping : {ActionMapping::kLinear, ActionMapping::kGeometric}) {
    DeviceConfig cfg;
    cfg.action_mapping = mapping;
    auto policy = random_policy(16, 1, 9);
    for (auto& w : policy.trunk.flat()) w *= 3.0;
    InferenceKernel kernel(make_bundle(policy, cfg));
    Rng rng(10);
    for (int i = 0; i < 200; ++i) {
      const auto x = random_obs(rng);
      const double battery = x[0] * cfg.capacity_j;
      const double ref = allocation_from_action(policy_mean(policy, x), battery,
                                                cfg.min_alloc_j, mapping);
      EXPECT_NEAR(kernel.infer(x), ref, 1e-6 * std::max(1.0, ref));
      EXPECT_EQ(kernel.infer(x), kernel.infer(x));
    }
  }
}

TEST(Infer, ObservationLengthChecked) {
  InferenceKernel kernel(make_bundle(random_policy(4, 1, 11), DeviceConfig{}));
  const std::vector<double> four(4, 0.5), six(6, 0.5);
  EXPECT_THROW(kernel.infer(four), ShapeError);
  EXPECT_THROW(kernel.mean_action(six), ShapeError);
}

TEST(CountOps, AnalyticCounts) {
  const auto c64 = count_ops(make_bundle(random_policy(64, 1, 1), DeviceConfig{}));
  EXPECT_EQ(c64.params, 450u);
  EXPECT_EQ(c64.macs, 384u);
  EXPECT_EQ(c64.activations, 64u);
  const auto c16 = count_ops(make_bundle(random_policy(16, 1, 1), DeviceConfig{}));
  const auto c32 = count_ops(make_bundle(random_policy(32, 1, 1), DeviceConfig{}));
  EXPECT_EQ(c16.macs, 96u);
  EXPECT_LT(c16.macs, c32.macs);
  EXPECT_LT(c32.macs, c64.macs);
}

TEST(CountOps, MatchesInstrumentedForward) {
  for (std::size_t layers : {1u, 2u, 3u}) {
    for (std::size_t width : {16u, 32u, 64u}) {
      const auto policy = random_policy(width, layers, width + layers);
      const auto bundle = make_bundle(policy, DeviceConfig{});
      const auto counts = count_ops(bundle);
      InferenceKernel kernel(bundle);
      const std::array<double, 5> x{0.5, 0.1, 0.2, 0.3, 0.4};
      OpCounter kc, tc;
      kernel.mean_action(x, &kc);
      ForwardCache cache;
      forward_into(policy.trunk, x, cache, &tc);
      EXPECT_EQ(kc.macs, counts.macs);
      EXPECT_EQ(kc.activations, counts.activations);
      EXPECT_EQ(tc.macs, counts.macs);
      EXPECT_EQ(tc.activations, counts.activations);
      EXPECT_EQ(counts.params, policy.trunk.flat().size() + 1);
    }
  }
}
