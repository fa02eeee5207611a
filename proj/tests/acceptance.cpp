// Acceptance run: one PASS/FAIL line per criterion, nonzero exit on any failure.
// Usage: acceptance <path to lcnas cli> <work dir>

#include <sys/wait.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <numeric>
#include <set>
#include <string>
#include <vector>

#include <fmt/format.h>

#include "lcnas/gradcheck.hpp"
#include "lcnas/report.hpp"

using namespace lcnas;
namespace fs = std::filesystem;

namespace {

int failures = 0;

void report(int id, bool ok, const std::string& what, const std::string& detail) {
  failures += !ok;
  std::cout << fmt::format("{} [{}] {}: {}", ok ? "PASS" : "FAIL", id, what, detail) << std::endl;
}

class Stopwatch {
 public:
  double seconds() const {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
  }

 private:
  std::chrono::steady_clock::time_point start_ = std::chrono::steady_clock::now();
};

std::vector<double> ranks(const std::vector<double>& v) {
  std::vector<std::size_t> order(v.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
  std::vector<double> r(v.size());
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j + 1 < order.size() && v[order[j + 1]] == v[order[i]]) ++j;
    for (std::size_t k = i; k <= j; ++k) r[order[k]] = 0.5 * static_cast<double>(i + j) + 1.0;
    i = j + 1;
  }
  return r;
}

double spearman(const std::vector<double>& x, const std::vector<double>& y) {
  const auto rx = ranks(x), ry = ranks(y);
  const double n = static_cast<double>(x.size());
  const double mx = std::accumulate(rx.begin(), rx.end(), 0.0) / n;
  const double my = std::accumulate(ry.begin(), ry.end(), 0.0) / n;
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sxy += (rx[i] - mx) * (ry[i] - my);
    sxx += (rx[i] - mx) * (rx[i] - mx);
    syy += (ry[i] - my) * (ry[i] - my);
  }
  return sxx > 0.0 && syy > 0.0 ? sxy / std::sqrt(sxx * syy) : 0.0;
}

double mean_op_cost(const Architecture& a, const DeviceModel& d) {
  double s = 0.0;
  for (const auto& e : a.edges()) s += d.base_cost_ms[static_cast<std::size_t>(index(e.op))];
  return s / kRetainedEdges;
}

bool only_cheap_ops(const Architecture& a) {
  for (const auto& e : a.edges())
    if (e.op != Op::SkipConnect && e.op != Op::Conv1x1) return false;
  return true;
}

std::string join(const std::vector<double>& v, int precision) {
  std::string s;
  for (double x : v) s += fmt::format("{}{:.{}f}", s.empty() ? "" : ",", x, precision);
  return s;
}

int run_cli(const std::string& cli, const std::string& args) {
  const int status = std::system(fmt::format("\"{}\" {} >/dev/null 2>&1", cli, args).c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

// Empty string when the two trees hold the same files with the same bytes.
std::string tree_difference(const fs::path& a, const fs::path& b) {
  std::set<std::string> names;
  for (const auto& root : {a, b})
    for (const auto& e : fs::recursive_directory_iterator(root))
      if (e.is_regular_file()) names.insert(fs::relative(e.path(), root).string());
  for (const auto& n : names) {
    if (!fs::exists(a / n) || !fs::exists(b / n)) return n + " missing";
    if (read_file(a / n) != read_file(b / n)) return n + " differs";
  }
  return names.empty() ? "no files" : "";
}

void criterion_gradients() {
  const Stopwatch t;
  bool ok = true;
  long probes = 0, bad = 0;
  double row_sum = 0.0;
  for (auto mode : {LossMode::Hinge, LossMode::Mse, LossMode::NonTargeted}) {
    const auto r = check_latency_gradient(mode, 1, 200);
    probes += r.probes;
    bad += r.failures;
    row_sum = std::max(row_sum, r.max_row_sum);
    ok = ok && r.failures == 0 && r.max_row_sum < 1e-10;
  }
  const double s = t.seconds();
  report(1, ok && s < 30.0, "closed-form latency gradient vs finite differences",
         fmt::format("3 modes x 200 instances, {} probes, {} failures, max row sum {:.2e}, {:.1f} s", probes, bad,
                     row_sum, s));
}

void criterion_hinge_zero() {
  const Stopwatch t;
  Rng rng(2);
  int below = 0, above = 0, bad = 0;
  for (int i = 0; i < 1000; ++i) {
    const auto p = random_regressor(static_cast<std::uint64_t>(i % 10));
    const auto a = random_alpha(rng, 1.5, i % 2 == 0);
    const double pred = latreg_forward(p, binarize(a).encoding);
    const double target = pred + uniform_real(rng, -2.0, 2.0);
    const auto g = latency_loss_grad_alpha({LossMode::Hinge, 0.5, target}, p, a);
    if (pred <= target) {
      ++below;
      bad += !(g.loss == 0.0 && g.grad.isZero(0.0));
    } else {
      ++above;
      bad += !(g.loss > 0.0);
    }
  }
  const double s = t.seconds();
  report(2, bad == 0 && below > 0 && above > 0 && s < 10.0, "hinge zero region",
         fmt::format("1000 instances ({} at or below target, {} above), {} violations, {:.1f} s", below, above, bad, s));
}

void criterion_mse_sign() {
  Rng rng(3);
  int bad = 0;
  double worst = 0.0;
  for (int i = 0; i < 100; ++i) {
    const auto p = random_regressor(static_cast<std::uint64_t>(50 + i % 10));
    const auto a = random_alpha(rng, 1.5, i % 3 == 0);
    const double pred = latreg_forward(p, binarize(a).encoding);
    const double target = pred + uniform_real(rng, 0.1, 5.0);
    const auto mse = latency_loss_grad_alpha({LossMode::Mse, 0.5, target}, p, a);
    const auto unit = latency_loss_grad_alpha({LossMode::NonTargeted, 1.0, 0.0}, p, a);
    const double c = 2.0 * 0.5 * (pred - target);
    const double scale = 1.0 + (c * unit.grad).cwiseAbs().maxCoeff();
    const double err = (mse.grad - c * unit.grad).cwiseAbs().maxCoeff() / scale;
    worst = std::max(worst, err);
    bad += !(c < 0.0 && err <= 1e-12);
  }
  report(3, bad == 0, "MSE gradient sign flip below the prediction",
         fmt::format("100 instances, grad = c * d(pred)/d(alpha) with c < 0, max rel residual {:.2e}", worst));
}

RegressorParams criterion_regressor() {
  const Stopwatch t;
  const auto ds = generate_dataset(20000, DeviceModel::calibrated(), 1);
  TrainOptions opt;
  opt.seed = 1;
  const auto r = train_latreg(ds, opt);
  const auto test = eval_latreg(r.params, ds, Split::Test);
  const double s = t.seconds();
  const bool ok = test.mae_ms < 0.25 * ds.sigma_ms && test.slope >= 0.9 && test.slope <= 1.1 && s < 300.0;
  report(4, ok, "latency regressor quality",
         fmt::format("test MAE {:.4f} ms < {:.4f} ms (0.25 sigma_train), slope {:.4f}, {:.1f} s", test.mae_ms,
                     0.25 * ds.sigma_ms, test.slope, s));
  return r.params;
}

std::uint64_t reduced_brute_force(const std::vector<int>& incoming, int keep, int ops) {
  int edges = 0;
  for (int k : incoming) edges += k;
  std::vector<int> state(static_cast<std::size_t>(edges), 0);
  std::uint64_t count = 0;
  while (true) {
    bool ok = true;
    int base = 0;
    for (int k : incoming) {
      int live = 0;
      for (int e = 0; e < k; ++e) live += state[static_cast<std::size_t>(base + e)] > 0;
      ok = ok && live == keep;
      base += k;
    }
    count += ok;
    int i = 0;
    while (i < edges && ++state[static_cast<std::size_t>(i)] > ops) state[static_cast<std::size_t>(i++)] = 0;
    if (i == edges) break;
  }
  return count;
}

void criterion_count() {
  const auto full = count_architectures();
  const std::vector<int> incoming{2, 3, 4};
  const auto reduced = count_architectures(incoming, 2, 3);
  const auto brute = reduced_brute_force(incoming, 2, 3);
  report(5, full.with_zero == 18000000ULL && reduced.with_zero == brute, "search-space count",
         fmt::format("count = {}, reduced space (3 labels) {} vs brute force {}", full.with_zero, reduced.with_zero,
                     brute));
}

void criteria_sweep(const RegressorParams& reg, const SyntheticTask& task, const DeviceModel& dev) {
  const Stopwatch t;
  const std::vector<double> targets{8, 10, 12, 14, 16, 18};
  std::vector<double> acc(targets.size(), 0.0), cost(targets.size(), 0.0), lat(targets.size(), 0.0);
  int met = 0, runs = 0;
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    SearchConfig cfg;
    cfg.seed = seed;
    const auto rows = sweep_targets(cfg, targets, task, dev, reg);
    for (std::size_t i = 0; i < rows.size(); ++i) {
      ++runs;
      met += rows[i].achieved_ms <= targets[i] + 1.0;
      acc[i] += rows[i].accuracy / 5.0;
      lat[i] += rows[i].achieved_ms / 5.0;
      cost[i] += mean_op_cost(rows[i].result.architecture, dev) / 5.0;
    }
  }
  const double s = t.seconds();
  report(6, met >= (4 * runs + 4) / 5 && s < 900.0, "target attainment",
         fmt::format("{}/{} runs within target + 1 ms; mean latency per target {}, {:.0f} s", met, runs, join(lat, 2),
                     s));

  const double rho = spearman(targets, acc);
  bool monotone = true;
  for (std::size_t i = 1; i < cost.size(); ++i) monotone = monotone && cost[i] >= cost[i - 1];
  report(7, rho >= 0.0 && monotone, "accuracy/latency trade-off trend",
         fmt::format("Spearman(target, mean acc) = {:.3f}; mean acc {}; mean op cost {}", rho, join(acc, 4),
                     join(cost, 3)));
}

void criterion_non_targeted(const RegressorParams& reg, const SyntheticTask& task, const DeviceModel& dev) {
  int cheap_strong = 0, rich_weak = 0;
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    SearchConfig cfg;
    cfg.seed = seed;
    cfg.evaluate_derived = false;
    cfg.loss = {LossMode::NonTargeted, 0.5, 0.0};
    cheap_strong += only_cheap_ops(search(cfg, task, dev, reg).architecture);
    cfg.loss.lambda = 1e-4;
    rich_weak += !only_cheap_ops(search(cfg, task, dev, reg).architecture);
  }
  report(8, cheap_strong >= 4 && rich_weak >= 4, "non-targeted collapse",
         fmt::format("lambda 0.5: {}/5 seeds only Skip/Conv; lambda 1e-4: {}/5 seeds use another op", cheap_strong,
                     rich_weak));
}

void criterion_hinge_robust(const RegressorParams& reg, const SyntheticTask& task, const DeviceModel& dev) {
  std::vector<double> means;
  for (double lambda : {0.5, 0.8, 1.0}) {
    double sum = 0.0;
    for (std::uint64_t seed = 1; seed <= 5; ++seed) {
      SearchConfig cfg;
      cfg.seed = seed;
      cfg.evaluate_derived = false;
      cfg.loss = {LossMode::Hinge, lambda, 12.0};
      sum += search(cfg, task, dev, reg).simulated_ms;
    }
    means.push_back(sum / 5.0);
  }
  const double spread = *std::max_element(means.begin(), means.end()) - *std::min_element(means.begin(), means.end());
  report(9, spread <= 0.8, "hinge robustness to lambda",
         fmt::format("mean latency at target 12 for lambda 0.5/0.8/1.0: {} ms, spread {:.3f} ms", join(means, 3),
                     spread));
}

void criterion_schedule(const RegressorParams& reg, const SyntheticTask& task, const DeviceModel& dev) {
  SearchConfig cfg;
  cfg.seed = 1;
  cfg.evaluate_derived = false;
  const auto r = search(cfg, task, dev, reg);
  std::vector<int> epochs, sizes;
  for (const auto& d : r.decisions) epochs.push_back(d.epoch);
  int last = -1;
  for (const auto& l : r.log)
    if (l.batch_size != last) sizes.push_back(last = l.batch_size);
  const bool ok = epochs == std::vector<int>{9, 16, 23, 30, 37, 44} &&
                  sizes == std::vector<int>{28, 32, 36, 40, 44, 48, 52};
  std::string e, b;
  for (int x : epochs) e += fmt::format("{} ", x);
  for (int x : sizes) b += fmt::format("{} ", x);
  report(10, ok, "decision schedule", fmt::format("decision epochs {}; batch sizes {}", e, b));
}

void criterion_determinism(const std::string& cli, const fs::path& work) {
  fs::remove_all(work / "det");
  std::vector<std::string> problems;
  const auto data = work / "det" / "data";
  auto three_runs = [&](const std::string& name, const std::string& args) {
    const auto a = work / "det" / (name + "_a"), b = work / "det" / (name + "_b"), c = work / "det" / (name + "_c");
    int rc = run_cli(cli, fmt::format("{} --out {}", args, a.string()));
    rc |= run_cli(cli, fmt::format("{} --out {}", args, b.string()));
    rc |= run_cli(cli, fmt::format("{} --jobs 4 --out {}", args, c.string()));
    if (rc != 0) problems.push_back(name + " exited nonzero");
    for (const auto& other : {b, c})
      if (const auto d = tree_difference(a, other); !d.empty())
        problems.push_back(fmt::format("{}: {}", name, d));
  };
  if (run_cli(cli, fmt::format("sample --n 3000 --seed 7 --out {}", data.string())) != 0)
    problems.push_back("sample exited nonzero");
  const auto dataset = (data / "dataset.jsonl").string();
  three_runs("sample", "sample --n 3000 --seed 7");
  three_runs("train-latreg", fmt::format("train-latreg --dataset {} --epochs 5 --seed 3", dataset));
  const auto ckpt = (work / "det" / "train-latreg_a" / "latreg.json").string();
  three_runs("search", fmt::format("search --checkpoint {} --target 11 --seed 2 --derived-epochs 5", ckpt));
  three_runs("sweep", fmt::format("sweep --checkpoint {} --targets 9,13 --seed 2 --derived-epochs 5", ckpt));
  std::string detail = "sample, train-latreg, search, sweep byte-identical across 2 runs and --jobs 4";
  if (!problems.empty()) {
    detail.clear();
    for (const auto& p : problems) detail += p + "; ";
  }
  report(11, problems.empty(), "determinism", detail);
}

}  // namespace

int main(int argc, char** argv) {
  if (argc != 3) {
    std::cerr << "usage: acceptance <lcnas cli> <work dir>\n";
    return 2;
  }
  const std::string cli = argv[1];
  const fs::path work = argv[2];
  fs::create_directories(work);

  criterion_gradients();
  criterion_hinge_zero();
  criterion_mse_sign();
  const auto reg = criterion_regressor();
  criterion_count();
  const auto task = SyntheticTask::generate(TaskConfig{});
  const auto dev = DeviceModel::calibrated();
  criteria_sweep(reg, task, dev);
  criterion_non_targeted(reg, task, dev);
  criterion_hinge_robust(reg, task, dev);
  criterion_schedule(reg, task, dev);
  criterion_determinism(cli, work);

  std::cout << fmt::format("{} of 11 criteria passed", 11 - failures) << std::endl;
  return failures == 0 ? 0 : 1;
}
