// lcnas: command-line front end for latency-constrained cell search.
//
// Exit codes: 0 ok, 1 failure (including a failed gradcheck), 2 usage error,
// 3 invalid input file or configuration value.

#include <chrono>
#include <filesystem>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <fmt/format.h>
#include <json.hpp>

#include "lcnas/constraint.hpp"
#include "lcnas/device_sim.hpp"
#include "lcnas/errors.hpp"
#include "lcnas/gradcheck.hpp"
#include "lcnas/hash.hpp"
#include "lcnas/latreg.hpp"
#include "lcnas/report.hpp"
#include "lcnas/search_engine.hpp"
#include "lcnas/supernet.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace lcnas;

namespace {

struct Globals {
  std::optional<std::uint64_t> seed;
  std::string config_path;
  std::string out_dir = ".";
  int jobs = 1;
};

/// Sections of the --config document.
struct Config {
  json doc = json::object();

  const json& section(const char* name) const {
    static const json empty = json::object();
    return doc.contains(name) ? doc[name] : empty;
  }
};

Config load_config(const std::string& path) {
  Config c;
  if (path.empty()) return c;
  try {
    c.doc = json::parse(read_file(path));
  } catch (const json::parse_error& e) {
    throw InvalidInput(fmt::format("config {}: {}", path, e.what()));
  }
  if (!c.doc.is_object()) throw InvalidInput("config: expected a JSON object");
  static const std::vector<std::string> known = {"device", "task", "latreg", "sample", "search", "sweep", "derived"};
  for (const auto& [key, v] : c.doc.items()) {
    if (std::find(known.begin(), known.end(), key) == known.end())
      throw InvalidInput(fmt::format("config: unknown key \"{}\"", key));
    if (!v.is_object()) throw InvalidInput(fmt::format("config.{}: expected an object", key));
  }
  return c;
}

json parse_json_file(const std::string& path, const char* what) {
  try {
    return json::parse(read_file(path));
  } catch (const json::parse_error& e) {
    throw InvalidInput(fmt::format("{} {}: {}", what, path, e.what()));
  }
}

/// Reads {"key": number} from a config section, strictly.
template <typename T>
void take(const json& section, const char* sec_name, const char* key, T& value) {
  if (!section.contains(key)) return;
  const auto& v = section[key];
  if constexpr (std::is_integral_v<T>) {
    if (!v.is_number_integer()) throw InvalidInput(fmt::format("config.{}.{} must be an integer", sec_name, key));
  } else {
    if (!v.is_number()) throw InvalidInput(fmt::format("config.{}.{} must be a number", sec_name, key));
  }
  value = v.get<T>();
}

void only_keys(const json& section, const char* sec_name, std::initializer_list<const char*> keys) {
  for (const auto& [key, v] : section.items())
    if (std::find_if(keys.begin(), keys.end(), [&](const char* k) { return key == k; }) == keys.end())
      throw InvalidInput(fmt::format("config.{}: unknown key \"{}\"", sec_name, key));
}

DeviceModel device_from(const Config& cfg) { return device_from_json(cfg.section("device")); }

TaskConfig task_from(const Config& cfg) { return task_config_from_json(cfg.section("task")); }

RegressorParams load_checkpoint(const std::string& path) {
  return checkpoint_from_json(parse_json_file(path, "checkpoint"));
}

LatencyDataset load_dataset(const std::string& path) {
  std::istringstream in(read_file(path));
  return read_dataset_jsonl(in);
}

class Timer {
 public:
  double seconds() const {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
  }

 private:
  std::chrono::steady_clock::time_point start_ = std::chrono::steady_clock::now();
};

void finish(const fs::path& out, RunManifest m, const Timer& t) {
  m.duration_s = t.seconds();
  write_manifest(out, m);
  std::cerr << fmt::format("{} finished in {:.2f} s\n", m.command, m.duration_s);
}

std::vector<double> parse_targets(const std::string& s) {
  std::vector<double> out;
  std::stringstream ss(s);
  std::string tok;
  while (std::getline(ss, tok, ',')) {
    try {
      std::size_t used = 0;
      out.push_back(std::stod(tok, &used));
      if (used != tok.size()) throw std::invalid_argument(tok);
    } catch (const std::exception&) {
      throw CLI::ValidationError("--targets", fmt::format("\"{}\" is not a number", tok));
    }
  }
  return out;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Latency-constrained differentiable cell search"};
  app.require_subcommand(1);
  app.fallthrough();
  app.set_version_flag("--version",
                       fmt::format("lcnas {} (dataset format {}, checkpoint format {}, search log format {})",
                                   kToolVersion, kDatasetFormatVersion, kCheckpointVersion, kSearchLogFormatVersion));

  Globals g;
  std::uint64_t seed_value = 0;
  auto* seed_opt = app.add_option("--seed", seed_value, "Random seed")->capture_default_str();
  app.add_option("--config", g.config_path, "JSON config file")->check(CLI::ExistingFile);
  app.add_option("--out", g.out_dir, "Output directory")->capture_default_str();
  app.add_option("--jobs", g.jobs, "Worker threads for sample and sweep")->check(CLI::PositiveNumber);

  // sample
  auto* sample = app.add_subcommand("sample", "Generate a simulated latency dataset");
  std::optional<std::size_t> sample_n;
  sample->add_option("--n", sample_n, "Number of architectures (default 20000)");

  // train-latreg
  auto* train = app.add_subcommand("train-latreg", "Train the latency regressor");
  std::string train_dataset;
  std::optional<int> train_epochs, train_batch;
  std::optional<double> train_lr;
  train->add_option("--dataset", train_dataset, "Dataset JSONL")->required()->check(CLI::ExistingFile);
  train->add_option("--epochs", train_epochs, "Epochs (default 70)");
  train->add_option("--batch-size", train_batch, "Batch size (default 256)");
  train->add_option("--lr", train_lr, "Adam learning rate (default 0.001)");

  // eval-latreg
  auto* evalc = app.add_subcommand("eval-latreg", "Evaluate the regressor: MAE, scatter CSV and slope");
  std::string eval_dataset, eval_ckpt, eval_split = "test";
  evalc->add_option("--dataset", eval_dataset)->required()->check(CLI::ExistingFile);
  evalc->add_option("--checkpoint", eval_ckpt)->required()->check(CLI::ExistingFile);
  evalc->add_option("--split", eval_split)->check(CLI::IsMember({"train", "val", "test"}))->capture_default_str();

  // search / sweep shared options
  std::string search_ckpt, search_mode;
  std::optional<double> search_target, search_lambda;
  std::optional<int> search_epochs, derived_epochs;
  auto add_search_opts = [&](CLI::App* sc) {
    sc->add_option("--checkpoint", search_ckpt, "Regressor checkpoint")->required()->check(CLI::ExistingFile);
    sc->add_option("--mode", search_mode, "hinge | mse | non_targeted")
        ->check(CLI::IsMember({"hinge", "mse", "non_targeted"}));
    sc->add_option("--lambda", search_lambda, "Latency loss weight (default 0.5)");
    sc->add_option("--epochs", search_epochs, "Search epochs (default 50)");
    sc->add_option("--derived-epochs", derived_epochs, "Epochs for training the derived cell");
  };
  auto* searchc = app.add_subcommand("search", "Search a cell for one latency target");
  add_search_opts(searchc);
  searchc->add_option("--target", search_target, "Target latency in ms");
  auto* sweepc = app.add_subcommand("sweep", "Search one cell per target latency");
  add_search_opts(sweepc);
  std::string targets_arg;
  sweepc->add_option("--targets", targets_arg, "Comma-separated targets in ms (default 6,8,...,18)");

  // derive
  auto* derive = app.add_subcommand("derive", "Train a given architecture on the toy task");
  std::string derive_arch;
  derive->add_option("--arch", derive_arch, "Architecture JSON")->required()->check(CLI::ExistingFile);
  derive->add_option("--epochs", derived_epochs, "Training epochs (default 30)");

  // predict-latency
  auto* predict = app.add_subcommand("predict-latency", "Predict latency for an architecture");
  std::string predict_arch, predict_ckpt;
  predict->add_option("--arch", predict_arch)->required()->check(CLI::ExistingFile);
  predict->add_option("--checkpoint", predict_ckpt)->required()->check(CLI::ExistingFile);

  // gradviz
  auto* gradviz = app.add_subcommand("gradviz", "Export alpha, beta, mask, encoding and latency gradient CSVs");
  std::string viz_alpha, viz_ckpt, viz_mode = "hinge";
  double viz_target = 0.0, viz_lambda = 0.5;
  gradviz->add_option("--alpha", viz_alpha, "Alpha JSON")->required()->check(CLI::ExistingFile);
  gradviz->add_option("--checkpoint", viz_ckpt)->required()->check(CLI::ExistingFile);
  gradviz->add_option("--mode", viz_mode)->check(CLI::IsMember({"hinge", "mse", "non_targeted"}))->capture_default_str();
  gradviz->add_option("--target", viz_target, "Target latency in ms");
  gradviz->add_option("--lambda", viz_lambda)->capture_default_str();

  // gradcheck
  auto* gradcheck = app.add_subcommand("gradcheck", "Run every finite-difference gradient check");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }
  if (*seed_opt) g.seed = seed_value;

  const Timer timer;
  const fs::path out = g.out_dir;
  try {
    const Config cfg = load_config(g.config_path);

    if (*sample) {
      const auto& sec = cfg.section("sample");
      only_keys(sec, "sample", {"n", "seed"});
      std::size_t n = 20000;
      std::uint64_t seed = 0;
      take(sec, "sample", "n", n);
      take(sec, "sample", "seed", seed);
      if (sample_n) n = *sample_n;
      if (g.seed) seed = *g.seed;
      const auto dev = device_from(cfg);
      const auto ds = generate_dataset(n, dev, seed, g.jobs);
      std::ostringstream s;
      write_dataset_jsonl(ds, s);
      write_file(out / "dataset.jsonl", s.str());
      finish(out, {"sample", {{"n", n}, {"device", device_to_json(dev)}}, {}, seed}, timer);
      std::cout << fmt::format("wrote {} samples, mu={:.4f} ms sigma={:.4f} ms\n", n, ds.mu_ms, ds.sigma_ms);
      return 0;
    }

    if (*train) {
      const auto& sec = cfg.section("latreg");
      only_keys(sec, "latreg", {"epochs", "batch_size", "lr", "seed"});
      TrainOptions opt;
      take(sec, "latreg", "epochs", opt.epochs);
      take(sec, "latreg", "batch_size", opt.batch_size);
      take(sec, "latreg", "lr", opt.lr);
      take(sec, "latreg", "seed", opt.seed);
      if (train_epochs) opt.epochs = *train_epochs;
      if (train_batch) opt.batch_size = *train_batch;
      if (train_lr) opt.lr = *train_lr;
      if (g.seed) opt.seed = *g.seed;
      const auto ds = load_dataset(train_dataset);
      const auto res = train_latreg(ds, opt);
      const std::string hash = file_hash(train_dataset);
      write_file(out / "latreg.json",
                 checkpoint_to_json(res.params, {opt.seed, opt.epochs, opt.batch_size, opt.lr, hash}).dump() + "\n");
      std::ostringstream s;
      write_train_report_csv(s, res.report);
      write_file(out / "train_report.csv", s.str());
      finish(out,
             {"train-latreg",
              {{"epochs", opt.epochs}, {"batch_size", opt.batch_size}, {"lr", opt.lr}},
              {{"dataset", hash}},
              opt.seed},
             timer);
      std::cout << fmt::format("test MAE {:.4f} ms (sigma_train {:.4f} ms)\n", res.report.test_mae_ms, ds.sigma_ms);
      return 0;
    }

    if (*evalc) {
      const auto ds = load_dataset(eval_dataset);
      const auto p = load_checkpoint(eval_ckpt);
      const Split split = eval_split == "train" ? Split::Train : eval_split == "val" ? Split::Val : Split::Test;
      const auto r = eval_latreg(p, ds, split);
      std::ostringstream s;
      write_scatter_csv(s, r);
      write_file(out / "scatter.csv", s.str());
      const json summary = {{"split", eval_split}, {"mae_ms", r.mae_ms}, {"slope", r.slope}, {"intercept", r.intercept},
                            {"n", r.pairs.size()}};
      write_file(out / "eval.json", summary.dump(2) + "\n");
      finish(out, {"eval-latreg", {{"split", eval_split}},
                   {{"dataset", file_hash(eval_dataset)}, {"checkpoint", file_hash(eval_ckpt)}}, 0},
             timer);
      std::cout << fmt::format("{} MAE {:.4f} ms, slope {:.4f}\n", eval_split, r.mae_ms, r.slope);
      return 0;
    }

    if (*searchc || *sweepc) {
      SearchConfig sc = search_config_from_json(cfg.section("search"));
      if (!search_mode.empty()) sc.loss.mode = *loss_mode_from_name(search_mode);
      if (search_lambda) sc.loss.lambda = *search_lambda;
      if (search_target) sc.loss.target_ms = *search_target;
      if (search_epochs) sc.epochs = *search_epochs;
      if (derived_epochs) sc.derived.epochs = *derived_epochs;
      if (g.seed) sc.seed = *g.seed;
      const auto task = SyntheticTask::generate(task_from(cfg));
      const auto dev = device_from(cfg);
      const auto reg = load_checkpoint(search_ckpt);
      const std::map<std::string, std::string> hashes = {{"checkpoint", file_hash(search_ckpt)}};
      json config = {{"search", search_config_to_json(sc)},
                     {"task", task_config_to_json(task.config)},
                     {"device", device_to_json(dev)}};

      if (*searchc) {
        if (sc.loss.mode != LossMode::NonTargeted && !search_target && !cfg.section("search").contains("target_ms"))
          throw CLI::RequiredError("--target");
        sc.validate();
        const auto r = search(sc, task, dev, reg);
        std::ostringstream s;
        write_search_log_csv(s, r);
        write_file(out / "search_log.csv", s.str());
        write_file(out / "search_result.json", search_result_to_json(r, sc).dump(2) + "\n");
        finish(out, {"search", config, hashes, sc.seed}, timer);
        std::cout << fmt::format("target {} ms: simulated {:.3f} ms, predicted {:.3f} ms, accuracy {:.4f}\n",
                                 sc.loss.target_ms, r.simulated_ms, r.predicted_ms, r.accuracy);
        return 0;
      }

      const auto& sw = cfg.section("sweep");
      only_keys(sw, "sweep", {"targets"});
      std::vector<double> targets = {6, 8, 10, 12, 14, 16, 18};
      if (sw.contains("targets")) {
        if (!sw["targets"].is_array()) throw InvalidInput("config.sweep.targets must be an array of numbers");
        targets.clear();
        for (const auto& t : sw["targets"]) {
          if (!t.is_number()) throw InvalidInput("config.sweep.targets must be an array of numbers");
          targets.push_back(t.get<double>());
        }
      }
      if (!targets_arg.empty()) targets = parse_targets(targets_arg);
      const auto rows = sweep_targets(sc, targets, task, dev, reg, g.jobs);
      std::ostringstream s;
      write_sweep_csv(s, rows);
      write_file(out / "sweep.csv", s.str());
      for (const auto& r : rows) {
        std::ostringstream log;
        write_search_log_csv(log, r.result);
        write_file(out / fmt::format("search_log_target_{}.csv", r.target_ms), log.str());
      }
      config["targets"] = targets;
      finish(out, {"sweep", config, hashes, sc.seed}, timer);
      for (const auto& r : rows)
        std::cout << fmt::format("target {:>5} ms: simulated {:.3f} ms, predicted {:.3f} ms, accuracy {:.4f}\n",
                                 r.target_ms, r.achieved_ms, r.predicted_ms, r.accuracy);
      return 0;
    }

    if (*derive) {
      const auto& sec = cfg.section("derived");
      only_keys(sec, "derived", {"epochs", "batch_size", "lr"});
      DerivedOptions opt;
      take(sec, "derived", "epochs", opt.epochs);
      take(sec, "derived", "batch_size", opt.batch_size);
      take(sec, "derived", "lr", opt.lr);
      if (derived_epochs) opt.epochs = *derived_epochs;
      opt.seed = g.seed.value_or(0);
      const auto arch = architecture_from_json(parse_json_file(derive_arch, "architecture"));
      const auto task = SyntheticTask::generate(task_from(cfg));
      const auto r = train_derived(arch, task, opt);
      std::ostringstream s;
      write_derived_csv(s, r);
      write_file(out / "derived.csv", s.str());
      write_file(out / "derived.json",
                 json({{"architecture", architecture_to_json(arch)}, {"best_val_accuracy", r.best_val_accuracy}})
                         .dump(2) +
                     "\n");
      finish(out, {"derive", {{"epochs", opt.epochs}, {"task", task_config_to_json(task.config)}},
                   {{"architecture", file_hash(derive_arch)}}, opt.seed},
             timer);
      std::cout << fmt::format("best val accuracy {:.4f}\n", r.best_val_accuracy);
      return 0;
    }

    if (*predict) {
      const auto arch = architecture_from_json(parse_json_file(predict_arch, "architecture"));
      const auto p = load_checkpoint(predict_ckpt);
      const double ms = latreg_forward(p, encode(arch).bits());
      std::cout << json({{"predicted_ms", ms}, {"encoding", encode(arch).to_bitstring()}}).dump() << "\n";
      return 0;
    }

    if (*gradviz) {
      LatencyLossSpec spec{*loss_mode_from_name(viz_mode), viz_lambda, viz_target};
      spec.validate();
      const auto a = alpha_from_json(parse_json_file(viz_alpha, "alpha"));
      const auto p = load_checkpoint(viz_ckpt);
      LatencyGradient lg;
      write_gradviz(out, spec, p, a, &lg);
      finish(out, {"gradviz", {{"mode", viz_mode}, {"lambda", viz_lambda}, {"target_ms", viz_target}},
                   {{"alpha", file_hash(viz_alpha)}, {"checkpoint", file_hash(viz_ckpt)}}, 0},
             timer);
      std::cout << fmt::format("predicted {:.4f} ms, latency loss {:.6f}, max |grad| {:.6g}\n", lg.prediction_ms,
                               lg.loss, lg.grad.cwiseAbs().maxCoeff());
      return 0;
    }

    if (*gradcheck) {
      bool ok = true;
      for (const auto& r : run_all_gradchecks(g.seed.value_or(0))) {
        std::cout << fmt::format("{:<34} {:>8} probes  {:>4} failures  max rel err {:.3g}{}  {}\n", r.name, r.probes,
                                 r.failures, r.max_rel_error,
                                 r.max_row_sum > 0.0 ? fmt::format("  max row sum {:.3g}", r.max_row_sum) : "",
                                 r.ok ? "PASS" : "FAIL");
        ok = ok && r.ok;
      }
      return ok ? 0 : 1;
    }
  } catch (const CLI::Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const InvalidInput& e) {
    std::cerr << "invalid input: " << e.what() << "\n";
    return 3;
  } catch (const InvalidEncoding& e) {
    std::cerr << "invalid input: " << e.what() << "\n";
    return 3;
  } catch (const InvalidArchitecture& e) {
    std::cerr << "invalid input: " << e.what() << "\n";
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 2;
}
