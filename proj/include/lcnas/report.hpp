#pragma once

// Tabular exports (CSV) and run manifests for the command-line tool.

#include <filesystem>
#include <iosfwd>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "lcnas/constraint.hpp"
#include "lcnas/latreg.hpp"
#include "lcnas/search_engine.hpp"
#include "lcnas/supernet.hpp"

namespace lcnas {

inline constexpr const char* kToolVersion = "1.0.0";
inline constexpr int kDatasetFormatVersion = 1;
inline constexpr int kSearchLogFormatVersion = 1;

/// Row label for edge m, e.g. "e4:n0->n1".
std::string edge_label(int m);

/// 9x10 matrix with edge labels as rows and op names as columns.
void write_cell_csv(std::ostream& out, const CellMatrixd& m);
void write_scatter_csv(std::ostream& out, const EvalResult& r);
void write_train_report_csv(std::ostream& out, const TrainReport& r);
void write_derived_csv(std::ostream& out, const DerivedResult& r);
void write_search_log_csv(std::ostream& out, const SearchResult& r);
void write_sweep_csv(std::ostream& out, const std::vector<SweepRow>& rows);

/// {"alpha": 9x10 nested array, "decided": [null | op index, ...9]} ("decided" optional).
AlphaMatrix alpha_from_json(const nlohmann::json& j);
nlohmann::json alpha_to_json(const AlphaMatrix& a);

struct GradvizFiles {
  std::filesystem::path alpha, beta, zeta, encoding, grad;
};

/// Writes alpha/beta/zeta/encoding/gradient CSVs into `dir`.
GradvizFiles write_gradviz(const std::filesystem::path& dir, const LatencyLossSpec& spec, const RegressorParams& reg,
                           const AlphaMatrix& a, LatencyGradient* out = nullptr);

struct RunManifest {
  std::string command;
  nlohmann::json config = nlohmann::json::object();
  std::map<std::string, std::string> input_hashes;  // role -> fnv1a64 hex
  std::uint64_t seed = 0;
  double duration_s = 0.0;

  nlohmann::json to_json() const;
};

/// Writes `<dir>/manifest.json`. The wall-clock duration is kept out of the
/// file when `deterministic` is set so reruns stay byte-identical.
void write_manifest(const std::filesystem::path& dir, const RunManifest& m, bool deterministic = true);

std::string read_file(const std::filesystem::path& p);
/// Writes atomically enough for our purposes: truncate + write.
void write_file(const std::filesystem::path& p, const std::string& contents);
std::string file_hash(const std::filesystem::path& p);

}  // namespace lcnas
