#pragma once

// The searchable graph-convolution cell: two input nodes, three intermediate
// nodes and an implicit concatenating output node, joined by nine candidate
// edges with ten candidate operations each.

#include <array>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Core>
#include <json.hpp>

#include "lcnas/random.hpp"

namespace lcnas {

inline constexpr int kNumEdges = 9;
inline constexpr int kNumOps = 10;
inline constexpr int kNumIntermediate = 3;
inline constexpr int kEdgesPerNode = 2;
inline constexpr int kRetainedEdges = kNumIntermediate * kEdgesPerNode;
inline constexpr int kEncodingBits = kNumEdges * kNumOps;

/// One row per edge, one column per candidate op.
template <typename Scalar>
using CellMatrix = Eigen::Matrix<Scalar, kNumEdges, kNumOps, Eigen::RowMajor>;
using CellMatrixd = CellMatrix<double>;

enum class Op : int {
  SkipConnect = 0,
  Conv1x1 = 1,
  EdgeConv = 2,
  MRConv = 3,
  GAT = 4,
  SemiGCN = 5,
  GIN = 6,
  SAGE = 7,
  RelSAGE = 8,
  Zero = 9,
};

constexpr int index(Op op) { return static_cast<int>(op); }
Op op_from_index(int i);
std::string_view op_name(Op op);
std::optional<Op> op_from_name(std::string_view name);

enum class Node : int { In0, In1, N0, N1, N2 };

std::string_view node_name(Node node);
/// 0..2 for N0..N2; -1 for input nodes.
constexpr int intermediate_index(Node node) {
  return node == Node::In0 || node == Node::In1 ? -1 : static_cast<int>(node) - 2;
}

struct EdgeId {
  int index;
  Node src;
  Node dst;
};

/// The nine edges in canonical order (edge i feeds node dst).
const std::array<EdgeId, kNumEdges>& canonical_edges();

/// Canonical indices of the edges entering intermediate node `node` (0..2).
std::span<const int> incoming_edges(int node);

struct ArchEdge {
  int edge;
  Op op;
  friend bool operator==(const ArchEdge&, const ArchEdge&) = default;
};

/// A discrete cell: six retained edges, two per intermediate node, no Zero op.
class Architecture {
 public:
  /// Validates and sorts; throws InvalidArchitecture.
  explicit Architecture(std::vector<ArchEdge> edges);

  const std::array<ArchEdge, kRetainedEdges>& edges() const { return edges_; }
  /// Op on canonical edge `edge`, or nullopt if the edge is dropped.
  std::optional<Op> op_on(int edge) const;

  friend bool operator==(const Architecture&, const Architecture&) = default;

 private:
  std::array<ArchEdge, kRetainedEdges> edges_{};
};

/// 9x10 binary encoding of an Architecture; construction validates.
class Encoding {
 public:
  explicit Encoding(const CellMatrixd& bits);

  const CellMatrixd& bits() const { return bits_; }
  /// 90 characters, row-major.
  std::string to_bitstring() const;
  static Encoding from_bitstring(std::string_view s);

  friend bool operator==(const Encoding& a, const Encoding& b) { return a.bits_ == b.bits_; }

 private:
  CellMatrixd bits_;
};

Encoding encode(const Architecture& arch);
/// Throws InvalidEncoding when the matrix breaks the encoding invariants.
Architecture decode(const CellMatrixd& bits);
inline Architecture decode(const Encoding& enc) { return decode(enc.bits()); }

Architecture random_architecture(Rng& rng);
Architecture random_architecture(std::uint64_t seed);

struct ArchitectureCount {
  std::uint64_t edge_subsets;      // ways to pick the retained edges
  std::uint64_t with_zero;         // every candidate op choosable per retained edge
  std::uint64_t non_zero;          // Zero excluded
};

/// Count for an arbitrary cell: incoming[i] candidate edges for node i, `keep`
/// retained per node, `ops` candidates of which one is Zero.
ArchitectureCount count_architectures(std::span<const int> incoming, int keep, int ops);
ArchitectureCount count_architectures();

/// {"edges":[{"edge","src","dst","op","op_name"} x6]}
nlohmann::json architecture_to_json(const Architecture& arch);
/// Throws InvalidInput on malformed JSON, InvalidArchitecture on a bad cell.
Architecture architecture_from_json(const nlohmann::json& j);

}  // namespace lcnas
