#include "lcnas/report.hpp"

#include <fstream>
#include <ostream>
#include <sstream>

#include <fmt/format.h>

#include "lcnas/errors.hpp"
#include "lcnas/hash.hpp"

namespace lcnas {

std::string edge_label(int m) {
  const auto& e = canonical_edges()[m];
  return fmt::format("e{}:{}->{}", m, node_name(e.src), node_name(e.dst));
}

void write_cell_csv(std::ostream& out, const CellMatrixd& m) {
  out << "edge";
  for (int n = 0; n < kNumOps; ++n) out << ',' << op_name(static_cast<Op>(n));
  out << '\n';
  for (int r = 0; r < kNumEdges; ++r) {
    out << edge_label(r);
    for (int n = 0; n < kNumOps; ++n) out << ',' << fmt::format("{}", m(r, n));
    out << '\n';
  }
}

void write_scatter_csv(std::ostream& out, const EvalResult& r) {
  out << "measured_ms,predicted_ms\n";
  for (const auto& [m, p] : r.pairs) out << fmt::format("{},{}\n", m, p);
}

void write_train_report_csv(std::ostream& out, const TrainReport& r) {
  out << "epoch,train_mse,val_mse\n";
  for (std::size_t e = 0; e < r.train_mse.size(); ++e) out << fmt::format("{},{},{}\n", e, r.train_mse[e], r.val_mse[e]);
}

void write_derived_csv(std::ostream& out, const DerivedResult& r) {
  out << "epoch,train_loss,val_acc\n";
  for (const auto& h : r.history) out << fmt::format("{},{},{}\n", h.epoch, h.train_loss, h.val_accuracy);
}

void write_search_log_csv(std::ostream& out, const SearchResult& r) {
  out << "epoch,step,val_loss,pred_lat_ms,lat_loss,decision_edge,decision_op,batch_size\n";
  for (const auto& l : r.log) {
    out << fmt::format("{},{},{},{},{},", l.epoch, l.step, l.val_loss, l.pred_lat_ms, l.lat_loss);
    if (l.decision)
      out << fmt::format("{},{},", l.decision->edge, op_name(l.decision->op));
    else
      out << ",,";
    out << l.batch_size << '\n';
  }
}

void write_sweep_csv(std::ostream& out, const std::vector<SweepRow>& rows) {
  out << "target_ms,achieved_ms,predicted_ms,accuracy\n";
  for (const auto& r : rows) out << fmt::format("{},{},{},{}\n", r.target_ms, r.achieved_ms, r.predicted_ms, r.accuracy);
}

AlphaMatrix alpha_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw InvalidInput("alpha: expected a JSON object");
  for (const auto& [key, v] : j.items())
    if (key != "alpha" && key != "decided") throw InvalidInput(fmt::format("alpha: unknown key \"{}\"", key));
  if (!j.contains("alpha") || !j["alpha"].is_array() || j["alpha"].size() != kNumEdges)
    throw InvalidInput("alpha.alpha: expected 9 rows");
  AlphaMatrix a;
  for (int m = 0; m < kNumEdges; ++m) {
    const auto& row = j["alpha"][static_cast<std::size_t>(m)];
    if (!row.is_array() || row.size() != kNumOps) throw InvalidInput(fmt::format("alpha.alpha[{}]: expected 10 numbers", m));
    for (int n = 0; n < kNumOps; ++n) {
      if (!row[static_cast<std::size_t>(n)].is_number())
        throw InvalidInput(fmt::format("alpha.alpha[{}][{}]: not a number", m, n));
      a.alpha(m, n) = row[static_cast<std::size_t>(n)].get<double>();
    }
  }
  if (j.contains("decided")) {
    const auto& d = j["decided"];
    if (!d.is_array() || d.size() != kNumEdges) throw InvalidInput("alpha.decided: expected 9 entries");
    for (int m = 0; m < kNumEdges; ++m) {
      const auto& v = d[static_cast<std::size_t>(m)];
      if (v.is_null()) continue;
      if (!v.is_number_integer() || v.get<int>() < 0 || v.get<int>() >= index(Op::Zero))
        throw InvalidInput(fmt::format("alpha.decided[{}]: expected null or a non-Zero op index", m));
      a.decided[m] = static_cast<Op>(v.get<int>());
    }
  }
  try {
    a.validate();
  } catch (const InvalidArchitecture& e) {
    throw InvalidInput(fmt::format("alpha.decided: {}", e.what()));
  }
  return a;
}

nlohmann::json alpha_to_json(const AlphaMatrix& a) {
  nlohmann::json rows = nlohmann::json::array();
  nlohmann::json decided = nlohmann::json::array();
  for (int m = 0; m < kNumEdges; ++m) {
    nlohmann::json row = nlohmann::json::array();
    for (int n = 0; n < kNumOps; ++n) row.push_back(a.alpha(m, n));
    rows.push_back(row);
    decided.push_back(a.decided[m] ? nlohmann::json(index(*a.decided[m])) : nlohmann::json(nullptr));
  }
  return {{"alpha", rows}, {"decided", decided}};
}

GradvizFiles write_gradviz(const std::filesystem::path& dir, const LatencyLossSpec& spec, const RegressorParams& reg,
                           const AlphaMatrix& a, LatencyGradient* out) {
  std::filesystem::create_directories(dir);
  const auto g = latency_loss_grad_alpha(spec, reg, a);
  GradvizFiles f{dir / "alpha.csv", dir / "beta.csv", dir / "zeta.csv", dir / "encoding.csv", dir / "grad.csv"};
  auto emit = [](const std::filesystem::path& p, const CellMatrixd& m) {
    std::ostringstream s;
    write_cell_csv(s, m);
    write_file(p, s.str());
  };
  emit(f.alpha, a.alpha);
  emit(f.beta, g.beta);
  emit(f.zeta, g.zeta);
  emit(f.encoding, g.binarization.encoding);
  emit(f.grad, g.grad);
  if (out) *out = g;
  return f;
}

nlohmann::json RunManifest::to_json() const {
  nlohmann::json hashes = nlohmann::json::object();
  for (const auto& [k, v] : input_hashes) hashes[k] = v;
  return {{"command", command},
          {"config", config},
          {"input_hashes", hashes},
          {"seed", seed},
          {"tool_version", kToolVersion},
          {"duration_s", duration_s}};
}

void write_manifest(const std::filesystem::path& dir, const RunManifest& m, bool deterministic) {
  auto j = m.to_json();
  if (deterministic) j.erase("duration_s");
  write_file(dir / "manifest.json", j.dump(2) + "\n");
}

std::string read_file(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw InvalidInput(fmt::format("cannot open {}", p.string()));
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

void write_file(const std::filesystem::path& p, const std::string& contents) {
  if (p.has_parent_path()) std::filesystem::create_directories(p.parent_path());
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(fmt::format("cannot write {}", p.string()));
  out << contents;
}

std::string file_hash(const std::filesystem::path& p) { return hex_digest(fnv1a64(read_file(p))); }

}  // namespace lcnas
