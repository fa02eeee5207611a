#pragma once

// Simulated target device. Stands in for wall-clock measurement of a stacked
// cell network; latency depends on the cell topology, not just the op mix.

#include <array>
#include <cstdint>
#include <iosfwd>
#include <vector>

#include <json.hpp>

#include "lcnas/search_space.hpp"

namespace lcnas {

struct DeviceModel {
  std::array<double, kNumOps> base_cost_ms{};
  double fixed_overhead_ms = 0.0;
  double overlap_gamma = 0.0;
  double heavy_threshold_ms = 0.0;
  double contention_kappa_ms = 0.0;
  int cells = 1;
  double noise_sigma_ms = 0.0;

  /// Default device, calibrated to a 5.4 - 25 ms latency spread.
  static DeviceModel calibrated();

  /// Throws InvalidInput naming the offending field.
  void validate() const;

  friend bool operator==(const DeviceModel&, const DeviceModel&) = default;
};

nlohmann::json device_to_json(const DeviceModel& dev);
/// Missing keys keep `base`'s values; unknown keys are an error.
DeviceModel device_from_json(const nlohmann::json& j, const DeviceModel& base = DeviceModel::calibrated());

double noiseless_latency(const Architecture& arch, const DeviceModel& dev);
double simulate_latency(const Architecture& arch, const DeviceModel& dev, std::uint64_t noise_seed);

enum class Split : std::uint8_t { Train, Val, Test };
std::string_view split_name(Split s);

struct LatencySample {
  Encoding encoding;
  double latency_ms;
  Split split;
};

struct LatencyDataset {
  std::vector<LatencySample> samples;
  double mu_ms = 0.0;     // train split mean
  double sigma_ms = 0.0;  // train split standard deviation
  DeviceModel device;
  std::uint64_t seed = 0;

  std::vector<std::size_t> indices(Split s) const;
};

/// n >= 10 samples; deterministic in `seed` for any `jobs`.
LatencyDataset generate_dataset(std::size_t n, const DeviceModel& dev, std::uint64_t seed, int jobs = 1);

/// Recomputes mu/sigma over the train split. Throws DegenerateDataset on an
/// empty train split.
void compute_train_stats(LatencyDataset& ds);

void write_dataset_jsonl(const LatencyDataset& ds, std::ostream& out);
/// Throws InvalidInput with the offending line number.
LatencyDataset read_dataset_jsonl(std::istream& in);

}  // namespace lcnas
