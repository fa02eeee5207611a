#include <doctest.h>

#include <cmath>
#include <stdexcept>

#include "lcnas/errors.hpp"
#include "lcnas/gradcheck.hpp"
#include "lcnas/search_engine.hpp"

using namespace lcnas;

namespace {

SyntheticTask small_task() {
  TaskConfig c;
  c.n_train = 200;
  c.n_val = 100;
  c.seed = 3;
  return SyntheticTask::generate(c);
}

SearchConfig fast_config() {
  SearchConfig c;
  c.epochs = 13;
  c.warmup_epochs = 2;
  c.decision_period = 2;
  c.derived.epochs = 2;
  return c;
}

SearchState state_with_alpha(const CellMatrixd& alpha) {
  SearchState s;
  s.alpha.alpha = alpha;
  s.batch_size = 28;
  return s;
}

}  // namespace

TEST_CASE("default decision schedule") {
  const SearchConfig c;
  CHECK(c.decision_epochs() == std::vector<int>{9, 16, 23, 30, 37, 44});
  CHECK(c.decision_epochs().back() < c.epochs);
  CHECK_NOTHROW(c.validate());
}

TEST_CASE("config validation and json strictness") {
  SearchConfig c;
  c.epochs = 40;
  CHECK_THROWS_WITH_AS(c.validate(), doctest::Contains("epochs"), InvalidInput);
  c = SearchConfig{};
  c.decision_period = 0;
  CHECK_THROWS_AS(c.validate(), InvalidInput);

  const auto j = search_config_to_json(fast_config());
  const auto back = search_config_from_json(j);
  CHECK(search_config_to_json(back) == j);
  CHECK_THROWS_WITH_AS(search_config_from_json({{"epoch", 3}}), doctest::Contains("epoch"), InvalidInput);
  CHECK_THROWS_AS(search_config_from_json({{"lambda", "big"}}), InvalidInput);
  CHECK_THROWS_AS(search_config_from_json({{"loss_mode", "l1"}}), InvalidInput);
  CHECK(search_config_from_json({{"lambda", 0.8}}).loss.lambda == 0.8);
}

TEST_CASE("sgas certainty of a one-hot edge is one") {
  CellMatrixd a = CellMatrixd::Zero();
  a(0, 3) = 1000.0;
  auto s = state_with_alpha(a);
  record_history(s, 4);
  const auto sc = sgas_scores(s);
  REQUIRE(sc[0]);
  CHECK(sc[0]->certainty == doctest::Approx(1.0).epsilon(1e-12));
  REQUIRE(sc[1]);
  CHECK(std::abs(sc[1]->certainty) < 1e-12);  // uniform over non-Zero ops
}

TEST_CASE("sgas stability of an unchanged history is one") {
  Rng rng(4);
  auto s = state_with_alpha(random_alpha(rng, 2.0, false).alpha);
  for (int t = 0; t < 4; ++t) record_history(s, 4);
  CHECK(s.history.size() == 4);
  for (const auto& e : sgas_scores(s))
    if (e) CHECK(e->stability == doctest::Approx(1.0).epsilon(1e-12));

  record_history(s, 4);
  CHECK(s.history.size() == 4);
}

TEST_CASE("sgas stability matches histogram intersection") {
  auto s = state_with_alpha(CellMatrixd::Zero());
  record_history(s, 2);
  s.alpha.alpha(2, 0) = std::log(3.0);  // renormalized: 3/11 on op 0, 1/11 elsewhere
  record_history(s, 2);
  const auto sc = sgas_scores(s);
  const double expected = 1.0 / 9.0 + 8.0 / 11.0;  // min(1/9, 3/11) + 8 * min(1/9, 1/11)
  CHECK(sc[2]->stability == doctest::Approx(expected).epsilon(1e-12));
  CHECK(sc[3]->stability == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("sgas importance is one minus the Zero weight") {
  const double eps = 1e-3;
  CellMatrixd a = CellMatrixd::Zero();
  // beta[Zero] = 1 - eps with the rest split over the nine non-Zero ops.
  a(5, index(Op::Zero)) = std::log((1.0 - eps) * 9.0 / eps);
  auto s = state_with_alpha(a);
  record_history(s, 4);
  const auto sc = sgas_scores(s);
  CHECK(sc[5]->importance == doctest::Approx(eps).epsilon(1e-9));
  CHECK(sc[0]->importance == doctest::Approx(0.9).epsilon(1e-12));
}

TEST_CASE("decide_edge picks the top score, argmax op, and grows the batch") {
  CellMatrixd a = CellMatrixd::Zero();
  a(6, index(Op::GIN)) = 8.0;
  a(6, index(Op::Zero)) = -8.0;
  auto s = state_with_alpha(a);
  for (int t = 0; t < 3; ++t) record_history(s, 4);
  const auto d = decide_edge(s, 9, 4);
  CHECK(d.edge == 6);
  CHECK(d.op == Op::GIN);
  CHECK(d.epoch == 9);
  CHECK(s.batch_size == 32);
  CHECK(s.alpha.decided[6] == Op::GIN);
  CHECK_FALSE(sgas_scores(s)[6].has_value());
}

TEST_CASE("decide_edge breaks ties toward the lowest index") {
  auto s = state_with_alpha(CellMatrixd::Zero());
  record_history(s, 4);
  const auto d = decide_edge(s, 0, 0);
  CHECK(d.edge == 0);
  CHECK(d.op == Op::SkipConnect);
}

TEST_CASE("decisions respect the two-per-node quota") {
  auto s = state_with_alpha(CellMatrixd::Zero());
  record_history(s, 4);
  for (int k = 0; k < kRetainedEdges; ++k) decide_edge(s, k, 4);
  CHECK(s.alpha.decided_count() == kRetainedEdges);
  for (int node = 0; node < kNumIntermediate; ++node) CHECK(s.alpha.decided_into(node) == 2);
  CHECK_NOTHROW(s.alpha.validate());
  CHECK(s.batch_size == 28 + 4 * kRetainedEdges);
  CHECK_THROWS_AS(decide_edge(s, 6, 4), std::logic_error);

  auto t = state_with_alpha(CellMatrixd::Zero());
  t.alpha.decided[2] = Op::SAGE;
  t.alpha.decided[4] = Op::GAT;
  record_history(t, 4);
  const auto sc = sgas_scores(t);
  CHECK_FALSE(sc[3].has_value());
  CHECK(sc[5].has_value());
}

TEST_CASE("hinge below target leaves the alpha step equal to lambda 0") {
  const auto task = small_task();
  const auto reg = random_regressor(2, 10.0, 2.0);
  SearchConfig on = fast_config();
  on.loss = {LossMode::Hinge, 0.7, 1000.0};
  SearchConfig off = on;
  off.loss.lambda = 0.0;
  auto a = init_search(on, task);
  auto b = init_search(off, task);
  const Eigen::MatrixXd x = task.train.x.leftCols(28);
  const std::vector<int> y(task.train.y.begin(), task.train.y.begin() + 28);
  const Eigen::MatrixXd vx = task.val.x.leftCols(28);
  const std::vector<int> vy(task.val.y.begin(), task.val.y.begin() + 28);
  for (int k = 0; k < 5; ++k) {
    const auto sa = search_step(a, on, reg, x, y, vx, vy, 0.005);
    const auto sb = search_step(b, off, reg, x, y, vx, vy, 0.005);
    CHECK(sa.lat_loss == 0.0);
    CHECK(sa.alpha_grad == sb.alpha_grad);
  }
  CHECK(a.alpha.alpha == b.alpha.alpha);
  CHECK(a.weights.flat == b.weights.flat);
}

TEST_CASE("search step never moves decided or pruned rows") {
  const auto task = small_task();
  const auto reg = random_regressor(3, 12.0, 2.0);
  SearchConfig cfg = fast_config();
  auto s = init_search(cfg, task);
  s.alpha.decided[0] = Op::GAT;
  s.alpha.decided[3] = Op::Conv1x1;
  s.alpha.decided[4] = Op::SAGE;
  const CellMatrixd before = s.alpha.alpha;
  const Eigen::MatrixXd x = task.train.x.leftCols(28);
  const std::vector<int> y(task.train.y.begin(), task.train.y.begin() + 28);
  for (int k = 0; k < 10; ++k) search_step(s, cfg, reg, x, y, x, y, 0.005);
  for (int m : {0, 2, 3, 4}) CHECK(s.alpha.alpha.row(m) == before.row(m));
  CHECK(s.alpha.alpha.row(5) != before.row(5));
}

TEST_CASE("search is deterministic and follows the schedule") {
  const auto task = small_task();
  const auto reg = random_regressor(5, 12.0, 2.0);
  const auto device = DeviceModel::calibrated();
  const auto cfg = fast_config();
  const auto a = search(cfg, task, device, reg);
  const auto b = search(cfg, task, device, reg);
  CHECK(a.architecture == b.architecture);
  CHECK(a.accuracy == b.accuracy);
  CHECK(search_result_to_json(a, cfg).dump() == search_result_to_json(b, cfg).dump());

  REQUIRE(a.decisions.size() == kRetainedEdges);
  const auto epochs = cfg.decision_epochs();
  for (std::size_t k = 0; k < epochs.size(); ++k) CHECK(a.decisions[k].epoch == epochs[k]);
  REQUIRE(a.log.size() == static_cast<std::size_t>(cfg.epochs));
  int bs = cfg.batch_size;
  for (const auto& l : a.log) {
    CHECK(l.batch_size == bs);
    if (l.decision) bs += cfg.batch_growth;
  }
  CHECK(a.simulated_ms == noiseless_latency(a.architecture, device));
  CHECK(a.predicted_ms == latreg_forward(reg, encode(a.architecture).bits()));
}

TEST_CASE("lambda 0 logs a zero latency loss") {
  const auto task = small_task();
  auto cfg = fast_config();
  cfg.loss = {LossMode::NonTargeted, 0.0, 12.0};
  cfg.evaluate_derived = false;
  const auto r = search(cfg, task, DeviceModel::calibrated(), random_regressor(6, 12.0, 2.0));
  for (const auto& l : r.log) CHECK(l.lat_loss == 0.0);
  CHECK(r.accuracy == 0.0);
}

TEST_CASE("sweep keeps target order and is thread-count independent") {
  const auto task = small_task();
  const auto reg = random_regressor(7, 12.0, 2.0);
  auto cfg = fast_config();
  cfg.evaluate_derived = false;
  const std::vector<double> targets{14.0, 8.0, 11.0};
  const auto one = sweep_targets(cfg, targets, task, DeviceModel::calibrated(), reg, 1);
  const auto three = sweep_targets(cfg, targets, task, DeviceModel::calibrated(), reg, 3);
  REQUIRE(one.size() == 3);
  REQUIRE(three.size() == 3);
  for (std::size_t i = 0; i < 3; ++i) {
    CHECK(one[i].target_ms == targets[i]);
    CHECK(one[i].achieved_ms == three[i].achieved_ms);
    CHECK(one[i].result.architecture == three[i].result.architecture);
  }
  CHECK_THROWS_AS(sweep_targets(cfg, std::vector<double>{}, task, DeviceModel::calibrated(), reg), InvalidInput);
}
