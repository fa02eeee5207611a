#include "lcnas/search_engine.hpp"

#include <algorithm>
#include <atomic>
#include <limits>
#include <mutex>
#include <cmath>
#include <numbers>
#include <numeric>
#include <stdexcept>
#include <thread>

#include <fmt/format.h>

#include "lcnas/errors.hpp"
#include "lcnas/random.hpp"

namespace lcnas {

using Eigen::Index;
using Eigen::MatrixXd;

void SearchConfig::validate() const {
  loss.validate();
  if (epochs < 1) throw InvalidInput("search.epochs must be >= 1");
  if (warmup_epochs < 0) throw InvalidInput("search.warmup_epochs must be >= 0");
  if (decision_period < 1) throw InvalidInput("search.decision_period must be >= 1");
  if (history_window < 1) throw InvalidInput("search.history_window must be >= 1");
  if (batch_size < 1) throw InvalidInput("search.batch_size must be >= 1");
  if (batch_growth < 0) throw InvalidInput("search.batch_growth must be >= 0");
  if (warmup_epochs + (kRetainedEdges - 1) * decision_period > epochs - 1)
    throw InvalidInput(fmt::format("search.epochs: {} epochs cannot fit warm-up {} plus 6 decisions every {}", epochs,
                                   warmup_epochs, decision_period));
  if (!(w_optimizer.lr > 0.0)) throw InvalidInput("search.w_lr must be > 0");
  if (!(alpha_optimizer.lr > 0.0)) throw InvalidInput("search.alpha_lr must be > 0");
  if (!(alpha_weight_decay >= 0.0)) throw InvalidInput("search.alpha_weight_decay must be >= 0");
}

std::vector<int> SearchConfig::decision_epochs() const {
  std::vector<int> e;
  for (int k = 0; k < kRetainedEdges; ++k) e.push_back(warmup_epochs + k * decision_period);
  return e;
}

nlohmann::json search_config_to_json(const SearchConfig& c) {
  return {{"loss_mode", loss_mode_name(c.loss.mode)},
          {"lambda", c.loss.lambda},
          {"target_ms", c.loss.target_ms},
          {"epochs", c.epochs},
          {"warmup_epochs", c.warmup_epochs},
          {"decision_period", c.decision_period},
          {"history_window", c.history_window},
          {"batch_size", c.batch_size},
          {"batch_growth", c.batch_growth},
          {"w_lr", c.w_optimizer.lr},
          {"w_lr_min", c.w_lr_min},
          {"w_momentum", c.w_optimizer.momentum},
          {"w_weight_decay", c.w_optimizer.weight_decay},
          {"w_grad_clip", c.w_grad_clip},
          {"alpha_lr", c.alpha_optimizer.lr},
          {"alpha_beta1", c.alpha_optimizer.beta1},
          {"alpha_beta2", c.alpha_optimizer.beta2},
          {"alpha_weight_decay", c.alpha_weight_decay},
          {"seed", c.seed},
          {"evaluate_derived", c.evaluate_derived},
          {"derived_epochs", c.derived.epochs},
          {"derived_batch_size", c.derived.batch_size},
          {"derived_lr", c.derived.lr}};
}

SearchConfig search_config_from_json(const nlohmann::json& j, const SearchConfig& base) {
  if (!j.is_object()) throw InvalidInput("search: expected a JSON object");
  SearchConfig c = base;
  auto number = [](const nlohmann::json& v, const std::string& key) {
    if (!v.is_number()) throw InvalidInput(fmt::format("search.{} must be a number", key));
    return v.get<double>();
  };
  auto integer = [](const nlohmann::json& v, const std::string& key) {
    if (!v.is_number_integer()) throw InvalidInput(fmt::format("search.{} must be an integer", key));
    return v.get<int>();
  };
  for (const auto& [key, v] : j.items()) {
    if (key == "loss_mode") {
      const auto m = v.is_string() ? loss_mode_from_name(v.get<std::string>()) : std::nullopt;
      if (!m) throw InvalidInput("search.loss_mode must be one of hinge, mse, non_targeted");
      c.loss.mode = *m;
    } else if (key == "lambda") c.loss.lambda = number(v, key);
    else if (key == "target_ms") c.loss.target_ms = number(v, key);
    else if (key == "epochs") c.epochs = integer(v, key);
    else if (key == "warmup_epochs") c.warmup_epochs = integer(v, key);
    else if (key == "decision_period") c.decision_period = integer(v, key);
    else if (key == "history_window") c.history_window = integer(v, key);
    else if (key == "batch_size") c.batch_size = integer(v, key);
    else if (key == "batch_growth") c.batch_growth = integer(v, key);
    else if (key == "w_lr") c.w_optimizer.lr = number(v, key);
    else if (key == "w_lr_min") c.w_lr_min = number(v, key);
    else if (key == "w_momentum") c.w_optimizer.momentum = number(v, key);
    else if (key == "w_weight_decay") c.w_optimizer.weight_decay = number(v, key);
    else if (key == "w_grad_clip") c.w_grad_clip = number(v, key);
    else if (key == "alpha_lr") c.alpha_optimizer.lr = number(v, key);
    else if (key == "alpha_beta1") c.alpha_optimizer.beta1 = number(v, key);
    else if (key == "alpha_beta2") c.alpha_optimizer.beta2 = number(v, key);
    else if (key == "alpha_weight_decay") c.alpha_weight_decay = number(v, key);
    else if (key == "seed") {
      if (!v.is_number_unsigned()) throw InvalidInput("search.seed must be a non-negative integer");
      c.seed = v.get<std::uint64_t>();
    } else if (key == "evaluate_derived") {
      if (!v.is_boolean()) throw InvalidInput("search.evaluate_derived must be a boolean");
      c.evaluate_derived = v.get<bool>();
    } else if (key == "derived_epochs") c.derived.epochs = integer(v, key);
    else if (key == "derived_batch_size") c.derived.batch_size = integer(v, key);
    else if (key == "derived_lr") c.derived.lr = number(v, key);
    else throw InvalidInput(fmt::format("search: unknown key \"{}\"", key));
  }
  c.validate();
  return c;
}

SearchState init_search(const SearchConfig& cfg, const SyntheticTask& task) {
  SearchState s;
  s.weights = init_supernet(task.config.dim, task.config.classes, derive_seed(cfg.seed, 0x77));
  Rng rng(derive_seed(cfg.seed, 0x61));
  for (Index i = 0; i < s.alpha.alpha.size(); ++i) s.alpha.alpha(i) = 1e-3 * standard_normal(rng);
  s.w_opt = SgdState(cfg.w_optimizer, s.weights.layout.size());
  s.alpha_opt = AdamState(cfg.alpha_optimizer, s.alpha.alpha.size());
  s.batch_size = cfg.batch_size;
  return s;
}

namespace {

std::array<double, kNumOps - 1> renormalized(const CellMatrixd& beta, int m) {
  std::array<double, kNumOps - 1> p{};
  double z = 0.0;
  for (int n = 0; n < kNumOps - 1; ++n) z += beta(m, n);
  for (int n = 0; n < kNumOps - 1; ++n) p[n] = z > 0.0 ? beta(m, n) / z : 1.0 / (kNumOps - 1);
  return p;
}

bool open_for_decision(const AlphaMatrix& a, int m) { return !a.decided[m] && !a.pruned(m); }

void min_max_normalize(std::array<std::optional<double>, kNumEdges>& v) {
  double lo = std::numeric_limits<double>::infinity();
  double hi = -lo;
  for (const auto& x : v)
    if (x) {
      lo = std::min(lo, *x);
      hi = std::max(hi, *x);
    }
  for (auto& x : v)
    if (x) x = hi > lo ? (*x - lo) / (hi - lo) : 1.0;
}

}  // namespace

void record_history(SearchState& s, int window) {
  const CellMatrixd beta = softmax_rows(s.alpha);
  EdgeHistogram h{};
  for (int m = 0; m < kNumEdges; ++m) h[m] = renormalized(beta, m);
  s.history.push_back(h);
  while (static_cast<int>(s.history.size()) > window) s.history.pop_front();
}

std::array<std::optional<EdgeScore>, kNumEdges> sgas_scores(const SearchState& s) {
  if (s.history.empty()) throw std::logic_error("sgas_scores needs at least one history entry");
  const CellMatrixd beta = softmax_rows(s.alpha);
  std::array<std::optional<EdgeScore>, kNumEdges> out;
  std::array<std::optional<double>, kNumEdges> ei, sc;
  for (int m = 0; m < kNumEdges; ++m) {
    if (!open_for_decision(s.alpha, m)) continue;
    EdgeScore e{};
    e.importance = 1.0 - beta(m, index(Op::Zero));
    const auto p = renormalized(beta, m);
    double h = 0.0;
    for (double x : p)
      if (x > 0.0) h -= x * std::log(x);
    e.certainty = 1.0 - h / std::log(static_cast<double>(kNumOps - 1));
    double ss = 0.0;
    int pairs = 0;
    for (std::size_t t = 0; t + 1 < s.history.size(); ++t, ++pairs)
      for (int n = 0; n < kNumOps - 1; ++n) ss += std::min(s.history[t][m][n], s.history[t + 1][m][n]);
    e.stability = pairs > 0 ? ss / pairs : 1.0;
    ei[m] = e.importance;
    sc[m] = e.certainty;
    out[m] = e;
  }
  min_max_normalize(ei);
  min_max_normalize(sc);
  for (int m = 0; m < kNumEdges; ++m)
    if (out[m]) out[m]->score = *ei[m] * *sc[m] * out[m]->stability;
  return out;
}

Decision decide_edge(SearchState& s, int epoch, int batch_growth) {
  const auto scores = sgas_scores(s);
  int best = -1;
  for (int m = 0; m < kNumEdges; ++m)
    if (scores[m] && (best < 0 || scores[m]->score > scores[best]->score)) best = m;
  if (best < 0) throw std::logic_error("decide_edge: no edge is open for a decision");
  const CellMatrixd beta = softmax_rows(s.alpha);
  int op = 0;
  for (int n = 1; n < index(Op::Zero); ++n)
    if (beta(best, n) > beta(best, op)) op = n;
  const Decision d{epoch, best, static_cast<Op>(op)};
  s.alpha.decided[best] = d.op;
  s.decisions.push_back(d);
  s.batch_size += batch_growth;
  return d;
}

StepStats search_step(SearchState& s, const SearchConfig& cfg, const RegressorParams& reg, const MatrixXd& train_x,
                      std::span<const int> train_y, const MatrixXd& val_x, std::span<const int> val_y, double w_lr) {
  StepStats st;
  // (i) weights on the training batch
  {
    auto g = supernet_backward(s.weights, s.alpha, train_x, train_y, Wrt::Weights);
    const double norm = g.weights.norm();
    if (cfg.w_grad_clip > 0.0 && norm > cfg.w_grad_clip) g.weights *= cfg.w_grad_clip / norm;
    sgd_step(s.w_opt, s.weights.flat, g.weights, w_lr);
  }
  // (ii) alpha on the validation batch plus the latency constraint
  const auto ce = supernet_backward(s.weights, s.alpha, val_x, val_y, Wrt::Alpha);
  const auto lat = latency_loss_grad_alpha(cfg.loss, reg, s.alpha);
  st.val_loss = ce.loss;
  st.pred_lat_ms = lat.prediction_ms;
  st.lat_loss = lat.loss;
  st.alpha_grad = ce.alpha + lat.grad;

  const CellMatrixd before = s.alpha.alpha;
  const double decay = cfg.alpha_optimizer.lr * cfg.alpha_weight_decay;
  for (int m = 0; m < kNumEdges; ++m)
    if (open_for_decision(s.alpha, m)) s.alpha.alpha.row(m) *= (1.0 - decay);
  Eigen::Map<Eigen::VectorXd> flat(s.alpha.alpha.data(), s.alpha.alpha.size());
  const Eigen::Map<const Eigen::VectorXd> grad(st.alpha_grad.data(), st.alpha_grad.size());
  adam_step(s.alpha_opt, flat, grad);
  for (int m = 0; m < kNumEdges; ++m)
    if (!open_for_decision(s.alpha, m)) s.alpha.alpha.row(m) = before.row(m);
  ++s.step;
  return st;
}

namespace {

void gather(const TaskData& d, std::span<const Index> idx, MatrixXd& x, std::vector<int>& y) {
  x.resize(d.x.rows(), static_cast<Index>(idx.size()));
  y.resize(idx.size());
  for (std::size_t k = 0; k < idx.size(); ++k) {
    x.col(static_cast<Index>(k)) = d.x.col(idx[k]);
    y[k] = d.y[static_cast<std::size_t>(idx[k])];
  }
}

}  // namespace

SearchResult search(const SearchConfig& cfg, const SyntheticTask& task, const DeviceModel& device,
                    const RegressorParams& reg) {
  cfg.validate();
  auto s = init_search(cfg, task);
  const auto schedule = cfg.decision_epochs();

  const Index n_train = task.train.size();
  const Index n_val = task.val.size();
  std::vector<Index> train_order(static_cast<std::size_t>(n_train));
  std::vector<Index> val_order(static_cast<std::size_t>(n_val));
  MatrixXd xt, xv;
  std::vector<int> yt, yv;

  SearchResult res{Architecture({{0, Op::SkipConnect},
                                 {1, Op::SkipConnect},
                                 {2, Op::SkipConnect},
                                 {3, Op::SkipConnect},
                                 {5, Op::SkipConnect},
                                 {6, Op::SkipConnect}}),
                   {},
                   {},
                   0.0,
                   0.0,
                   0.0};

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    s.epoch = epoch;
    std::iota(train_order.begin(), train_order.end(), Index{0});
    std::iota(val_order.begin(), val_order.end(), Index{0});
    Rng rng(derive_seed(cfg.seed, 0x1000 + static_cast<std::uint64_t>(epoch)));
    shuffle(train_order.begin(), train_order.end(), rng);
    shuffle(val_order.begin(), val_order.end(), rng);
    const double w_lr = cfg.w_lr_min + 0.5 * (cfg.w_optimizer.lr - cfg.w_lr_min) *
                                           (1.0 + std::cos(std::numbers::pi * epoch / cfg.epochs));

    const CellMatrixd frozen = s.alpha.alpha;
    const auto decided_before = s.alpha.decided;
    const int bs = s.batch_size;
    double val_loss = 0.0, pred = 0.0, lat_loss = 0.0;
    int steps = 0;
    Index vpos = 0;
    for (Index start = 0; start + bs <= n_train || (start == 0 && n_train > 0); start += bs) {
      const Index b = std::min<Index>(bs, n_train - start);
      gather(task.train, std::span(train_order).subspan(static_cast<std::size_t>(start), static_cast<std::size_t>(b)),
             xt, yt);
      std::vector<Index> vidx(static_cast<std::size_t>(b));
      for (auto& v : vidx) {
        v = val_order[static_cast<std::size_t>(vpos)];
        vpos = (vpos + 1) % n_val;
      }
      gather(task.val, vidx, xv, yv);
      const auto st = search_step(s, cfg, reg, xt, yt, xv, yv, w_lr);
      val_loss += st.val_loss;
      pred += st.pred_lat_ms;
      lat_loss += st.lat_loss;
      ++steps;
    }
    for (int m = 0; m < kNumEdges; ++m)
      if (decided_before[m] && s.alpha.alpha.row(m) != frozen.row(m))
        throw std::logic_error(fmt::format("decided alpha row {} changed during epoch {}", m, epoch));

    record_history(s, cfg.history_window);
    EpochLog log{epoch, s.step, val_loss / steps, pred / steps, lat_loss / steps, std::nullopt, bs};
    if (std::find(schedule.begin(), schedule.end(), epoch) != schedule.end() &&
        s.alpha.decided_count() < kRetainedEdges)
      log.decision = decide_edge(s, epoch, cfg.batch_growth);
    res.log.push_back(log);
  }

  std::vector<ArchEdge> edges;
  for (const auto& d : s.decisions) edges.push_back({d.edge, d.op});
  res.architecture = Architecture(std::move(edges));
  res.decisions = s.decisions;
  res.predicted_ms = latreg_forward(reg, encode(res.architecture).bits());
  res.simulated_ms = noiseless_latency(res.architecture, device);
  if (cfg.evaluate_derived) {
    DerivedOptions opt = cfg.derived;
    opt.seed = derive_seed(cfg.seed, 0xde);
    res.accuracy = train_derived(res.architecture, task, opt).best_val_accuracy;
  }
  return res;
}

std::vector<SweepRow> sweep_targets(const SearchConfig& base, std::span<const double> targets,
                                    const SyntheticTask& task, const DeviceModel& device, const RegressorParams& reg,
                                    int jobs) {
  if (targets.empty()) throw InvalidInput("sweep needs at least one target");
  std::vector<std::optional<SweepRow>> rows(targets.size());
  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  std::mutex failure_mu;
  auto worker = [&] {
    for (std::size_t i = next++; i < targets.size(); i = next++) {
      try {
        SearchConfig cfg = base;
        cfg.loss.target_ms = targets[i];
        auto r = search(cfg, task, device, reg);
        rows[i].emplace(SweepRow{targets[i], r.simulated_ms, r.predicted_ms, r.accuracy, std::move(r)});
      } catch (...) {
        std::lock_guard lock(failure_mu);
        if (!failure) failure = std::current_exception();
      }
    }
  };
  {
    std::vector<std::jthread> pool;
    for (int k = 1; k < std::max(1, jobs); ++k) pool.emplace_back(worker);
    worker();
  }
  if (failure) std::rethrow_exception(failure);
  std::vector<SweepRow> out;
  for (auto& r : rows) out.push_back(std::move(*r));
  return out;
}

nlohmann::json search_result_to_json(const SearchResult& r, const SearchConfig& cfg) {
  nlohmann::json decisions = nlohmann::json::array();
  for (const auto& d : r.decisions)
    decisions.push_back({{"epoch", d.epoch}, {"edge", d.edge}, {"op", index(d.op)}, {"op_name", op_name(d.op)}});
  return {{"config", search_config_to_json(cfg)},
          {"architecture", architecture_to_json(r.architecture)},
          {"encoding", encode(r.architecture).to_bitstring()},
          {"decisions", decisions},
          {"predicted_ms", r.predicted_ms},
          {"simulated_ms", r.simulated_ms},
          {"accuracy", r.accuracy}};
}

}  // namespace lcnas
