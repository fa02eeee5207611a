#include "lcnas/device_sim.hpp"

#include <algorithm>
#include <cmath>
#include <istream>
#include <numeric>
#include <ostream>
#include <string>
#include <thread>

#include <fmt/format.h>

#include "lcnas/errors.hpp"

namespace lcnas {

namespace {

constexpr std::uint64_t kSplitStream = 0x73706c6974ULL;  // "split"
constexpr std::uint64_t kNoiseStream = 0x6e6f697365ULL;  // "noise"

}  // namespace

DeviceModel DeviceModel::calibrated() {
  DeviceModel d;
  d.base_cost_ms[index(Op::SkipConnect)] = 0.10;
  d.base_cost_ms[index(Op::Conv1x1)] = 0.225;
  d.base_cost_ms[index(Op::SemiGCN)] = 0.475;
  d.base_cost_ms[index(Op::SAGE)] = 0.55;
  d.base_cost_ms[index(Op::GIN)] = 0.625;
  d.base_cost_ms[index(Op::RelSAGE)] = 0.725;
  d.base_cost_ms[index(Op::GAT)] = 0.875;
  d.base_cost_ms[index(Op::EdgeConv)] = 1.05;
  d.base_cost_ms[index(Op::MRConv)] = 1.20;
  d.base_cost_ms[index(Op::Zero)] = 0.0;
  d.fixed_overhead_ms = 4.0;
  d.overlap_gamma = 0.6;
  d.heavy_threshold_ms = 0.75;
  d.contention_kappa_ms = 0.1;
  d.cells = 3;
  d.noise_sigma_ms = 0.05;
  return d;
}

void DeviceModel::validate() const {
  if (base_cost_ms[index(Op::Zero)] != 0.0) throw InvalidInput("device.base_cost_ms: Zero must cost 0");
  for (int i = 0; i < kNumOps; ++i)
    if (!(base_cost_ms[i] >= 0.0) || !std::isfinite(base_cost_ms[i]))
      throw InvalidInput(fmt::format("device.base_cost_ms[{}] must be finite and >= 0", i));
  const double skip = base_cost_ms[index(Op::SkipConnect)];
  const double conv = base_cost_ms[index(Op::Conv1x1)];
  if (!(skip < conv)) throw InvalidInput("device.base_cost_ms: Skip-Connect must be cheaper than Conv-1x1");
  for (int i = index(Op::EdgeConv); i <= index(Op::RelSAGE); ++i)
    if (!(conv < base_cost_ms[i]))
      throw InvalidInput(fmt::format("device.base_cost_ms: {} must cost more than Conv-1x1", op_name(static_cast<Op>(i))));
  if (!(overlap_gamma >= 0.0 && overlap_gamma <= 1.0)) throw InvalidInput("device.overlap_gamma must be in [0,1]");
  if (!(noise_sigma_ms >= 0.0)) throw InvalidInput("device.noise_sigma_ms must be >= 0");
  if (!(fixed_overhead_ms > 0.0)) throw InvalidInput("device.fixed_overhead_ms must be > 0");
  if (!(contention_kappa_ms >= 0.0)) throw InvalidInput("device.contention_kappa_ms must be >= 0");
  if (cells < 1) throw InvalidInput("device.cells must be >= 1");
}

nlohmann::json device_to_json(const DeviceModel& dev) {
  nlohmann::json costs = nlohmann::json::object();
  for (int i = 0; i < kNumOps; ++i) costs[std::string(op_name(static_cast<Op>(i)))] = dev.base_cost_ms[i];
  return {{"base_cost_ms", costs},
          {"fixed_overhead_ms", dev.fixed_overhead_ms},
          {"overlap_gamma", dev.overlap_gamma},
          {"heavy_threshold_ms", dev.heavy_threshold_ms},
          {"contention_kappa_ms", dev.contention_kappa_ms},
          {"cells", dev.cells},
          {"noise_sigma_ms", dev.noise_sigma_ms}};
}

DeviceModel device_from_json(const nlohmann::json& j, const DeviceModel& base) {
  if (!j.is_object()) throw InvalidInput("device: expected a JSON object");
  DeviceModel d = base;
  auto number = [](const nlohmann::json& v, const std::string& key) {
    if (!v.is_number()) throw InvalidInput(fmt::format("device.{} must be a number", key));
    return v.get<double>();
  };
  for (const auto& [key, v] : j.items()) {
    if (key == "base_cost_ms") {
      if (!v.is_object()) throw InvalidInput("device.base_cost_ms must be an object keyed by op name");
      for (const auto& [name, c] : v.items()) {
        const auto op = op_from_name(name);
        if (!op) throw InvalidInput(fmt::format("device.base_cost_ms: unknown op \"{}\"", name));
        d.base_cost_ms[index(*op)] = number(c, "base_cost_ms." + name);
      }
    } else if (key == "fixed_overhead_ms") {
      d.fixed_overhead_ms = number(v, key);
    } else if (key == "overlap_gamma") {
      d.overlap_gamma = number(v, key);
    } else if (key == "heavy_threshold_ms") {
      d.heavy_threshold_ms = number(v, key);
    } else if (key == "contention_kappa_ms") {
      d.contention_kappa_ms = number(v, key);
    } else if (key == "cells") {
      if (!v.is_number_integer()) throw InvalidInput("device.cells must be an integer");
      d.cells = v.get<int>();
    } else if (key == "noise_sigma_ms") {
      d.noise_sigma_ms = number(v, key);
    } else {
      throw InvalidInput(fmt::format("device: unknown key \"{}\"", key));
    }
  }
  d.validate();
  return d;
}

double noiseless_latency(const Architecture& arch, const DeviceModel& dev) {
  double nodes = 0.0;
  int heavy = 0;
  for (int node = 0; node < kNumIntermediate; ++node) {
    std::array<double, kEdgesPerNode> c{};
    int k = 0;
    for (int e : incoming_edges(node))
      if (auto op = arch.op_on(e)) c[k++] = dev.base_cost_ms[index(*op)];
    nodes += std::max(c[0], c[1]) + dev.overlap_gamma * std::min(c[0], c[1]);
    for (double x : c)
      if (x >= dev.heavy_threshold_ms) ++heavy;
  }
  const double contention = dev.contention_kappa_ms * heavy * (heavy - 1) / 2.0;
  return dev.fixed_overhead_ms + dev.cells * (nodes + contention);
}

double simulate_latency(const Architecture& arch, const DeviceModel& dev, std::uint64_t noise_seed) {
  double lat = noiseless_latency(arch, dev);
  if (dev.noise_sigma_ms > 0.0) {
    Rng rng(noise_seed);
    lat += dev.noise_sigma_ms * standard_normal(rng);
  }
  return lat;
}

std::string_view split_name(Split s) {
  switch (s) {
    case Split::Train: return "train";
    case Split::Val: return "val";
    case Split::Test: return "test";
  }
  return "?";
}

std::vector<std::size_t> LatencyDataset::indices(Split s) const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < samples.size(); ++i)
    if (samples[i].split == s) out.push_back(i);
  return out;
}

void compute_train_stats(LatencyDataset& ds) {
  double sum = 0.0;
  std::size_t n = 0;
  for (const auto& s : ds.samples)
    if (s.split == Split::Train) {
      sum += s.latency_ms;
      ++n;
    }
  if (n == 0) throw DegenerateDataset("dataset has an empty train split");
  const double mu = sum / static_cast<double>(n);
  double ss = 0.0;
  for (const auto& s : ds.samples)
    if (s.split == Split::Train) ss += (s.latency_ms - mu) * (s.latency_ms - mu);
  ds.mu_ms = mu;
  ds.sigma_ms = std::sqrt(ss / static_cast<double>(n));
}

LatencyDataset generate_dataset(std::size_t n, const DeviceModel& dev, std::uint64_t seed, int jobs) {
  if (n < 10) throw InvalidInput(fmt::format("dataset size must be >= 10, got {}", n));
  dev.validate();
  jobs = std::max(1, jobs);

  std::vector<std::optional<LatencySample>> slots(n);
  auto work = [&](std::size_t begin, std::size_t end) {
    for (std::size_t i = begin; i < end; ++i) {
      const auto arch = random_architecture(derive_seed(seed, i));
      const double lat = simulate_latency(arch, dev, derive_seed(seed ^ kNoiseStream, i));
      slots[i].emplace(LatencySample{encode(arch), lat, Split::Train});
    }
  };
  if (jobs == 1) {
    work(0, n);
  } else {
    std::vector<std::jthread> pool;
    const std::size_t chunk = (n + jobs - 1) / jobs;
    for (std::size_t b = 0; b < n; b += chunk) pool.emplace_back(work, b, std::min(n, b + chunk));
  }

  LatencyDataset ds;
  ds.device = dev;
  ds.seed = seed;
  ds.samples.reserve(n);
  for (auto& s : slots) ds.samples.push_back(std::move(*s));

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  Rng rng(derive_seed(seed, kSplitStream));
  shuffle(order.begin(), order.end(), rng);
  const std::size_t n_train = n * 6 / 10;
  const std::size_t n_val = n * 2 / 10;
  for (std::size_t k = 0; k < n; ++k)
    ds.samples[order[k]].split = k < n_train ? Split::Train : (k < n_train + n_val ? Split::Val : Split::Test);
  compute_train_stats(ds);
  return ds;
}

void write_dataset_jsonl(const LatencyDataset& ds, std::ostream& out) {
  nlohmann::json header = {
      {"mu", ds.mu_ms}, {"sigma", ds.sigma_ms}, {"device", device_to_json(ds.device)}, {"seed", ds.seed}};
  out << header.dump() << '\n';
  for (const auto& s : ds.samples) {
    nlohmann::json rec = {
        {"enc", s.encoding.to_bitstring()}, {"lat_ms", s.latency_ms}, {"split", split_name(s.split)}};
    out << rec.dump() << '\n';
  }
}

LatencyDataset read_dataset_jsonl(std::istream& in) {
  LatencyDataset ds;
  std::string line;
  std::size_t lineno = 0;
  bool have_header = false;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::parse_error& e) {
      throw InvalidInput(fmt::format("dataset line {}: {}", lineno, e.what()));
    }
    try {
      if (!have_header) {
        if (!j.contains("mu") || !j.contains("sigma") || !j.contains("device") || !j.contains("seed"))
          throw InvalidInput("header needs mu, sigma, device, seed");
        ds.mu_ms = j.at("mu").get<double>();
        ds.sigma_ms = j.at("sigma").get<double>();
        ds.device = device_from_json(j.at("device"));
        ds.seed = j.at("seed").get<std::uint64_t>();
        have_header = true;
        continue;
      }
      const auto split = j.at("split").get<std::string>();
      Split s;
      if (split == "train")
        s = Split::Train;
      else if (split == "val")
        s = Split::Val;
      else if (split == "test")
        s = Split::Test;
      else
        throw InvalidInput(fmt::format("unknown split \"{}\"", split));
      const double lat = j.at("lat_ms").get<double>();
      if (!(lat > 0.0)) throw InvalidInput("lat_ms must be > 0");
      ds.samples.push_back({Encoding::from_bitstring(j.at("enc").get<std::string>()), lat, s});
    } catch (const nlohmann::json::exception& e) {
      throw InvalidInput(fmt::format("dataset line {}: {}", lineno, e.what()));
    } catch (const InvalidEncoding& e) {
      throw InvalidInput(fmt::format("dataset line {}: {}", lineno, e.what()));
    } catch (const InvalidInput& e) {
      throw InvalidInput(fmt::format("dataset line {}: {}", lineno, e.what()));
    }
  }
  if (!have_header) throw InvalidInput("dataset: missing header line");
  return ds;
}

}  // namespace lcnas
