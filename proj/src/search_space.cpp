#include "lcnas/search_space.hpp"

#include <algorithm>
#include <fmt/format.h>

#include "lcnas/errors.hpp"

namespace lcnas {

namespace {

constexpr std::array<std::string_view, kNumOps> kOpNames = {
    "Skip-Connect", "Conv-1x1", "EdgeConv", "MRConv", "GAT",
    "SemiGCN",      "GIN",      "SAGE",     "RelSAGE", "Zero"};

constexpr std::array<EdgeId, kNumEdges> kEdges = {{
    {0, Node::In0, Node::N0},
    {1, Node::In1, Node::N0},
    {2, Node::In0, Node::N1},
    {3, Node::In1, Node::N1},
    {4, Node::N0, Node::N1},
    {5, Node::In0, Node::N2},
    {6, Node::In1, Node::N2},
    {7, Node::N0, Node::N2},
    {8, Node::N1, Node::N2},
}};

constexpr std::array<int, 2> kIncomingN0 = {0, 1};
constexpr std::array<int, 3> kIncomingN1 = {2, 3, 4};
constexpr std::array<int, 4> kIncomingN2 = {5, 6, 7, 8};

int dst_node(int edge) { return intermediate_index(kEdges[edge].dst); }

}  // namespace

Op op_from_index(int i) {
  if (i < 0 || i >= kNumOps) throw InvalidInput(fmt::format("op index {} out of range 0..9", i));
  return static_cast<Op>(i);
}

std::string_view op_name(Op op) { return kOpNames[index(op)]; }

std::optional<Op> op_from_name(std::string_view name) {
  for (int i = 0; i < kNumOps; ++i)
    if (kOpNames[i] == name) return static_cast<Op>(i);
  return std::nullopt;
}

std::string_view node_name(Node node) {
  switch (node) {
    case Node::In0: return "in0";
    case Node::In1: return "in1";
    case Node::N0: return "n0";
    case Node::N1: return "n1";
    case Node::N2: return "n2";
  }
  return "?";
}

const std::array<EdgeId, kNumEdges>& canonical_edges() { return kEdges; }

std::span<const int> incoming_edges(int node) {
  switch (node) {
    case 0: return kIncomingN0;
    case 1: return kIncomingN1;
    case 2: return kIncomingN2;
    default: throw InvalidInput(fmt::format("intermediate node {} out of range 0..2", node));
  }
}

Architecture::Architecture(std::vector<ArchEdge> edges) {
  if (edges.size() != static_cast<std::size_t>(kRetainedEdges))
    throw InvalidArchitecture(fmt::format("expected {} edges, got {}", kRetainedEdges, edges.size()));
  std::sort(edges.begin(), edges.end(), [](auto& a, auto& b) { return a.edge < b.edge; });
  std::array<int, kNumIntermediate> per_node{};
  for (std::size_t i = 0; i < edges.size(); ++i) {
    const auto& e = edges[i];
    if (e.edge < 0 || e.edge >= kNumEdges)
      throw InvalidArchitecture(fmt::format("edge index {} out of range", e.edge));
    if (i > 0 && edges[i - 1].edge == e.edge)
      throw InvalidArchitecture(fmt::format("edge {} listed twice", e.edge));
    if (index(e.op) < 0 || index(e.op) >= kNumOps)
      throw InvalidArchitecture(fmt::format("edge {} has invalid op", e.edge));
    if (e.op == Op::Zero) throw InvalidArchitecture(fmt::format("edge {} uses the Zero op", e.edge));
    ++per_node[dst_node(e.edge)];
  }
  for (int n = 0; n < kNumIntermediate; ++n)
    if (per_node[n] != kEdgesPerNode)
      throw InvalidArchitecture(
          fmt::format("node n{} has {} incoming edges, expected {}", n, per_node[n], kEdgesPerNode));
  std::copy(edges.begin(), edges.end(), edges_.begin());
}

std::optional<Op> Architecture::op_on(int edge) const {
  for (const auto& e : edges_)
    if (e.edge == edge) return e.op;
  return std::nullopt;
}

Encoding::Encoding(const CellMatrixd& bits) : bits_(bits) { decode(bits_); }

std::string Encoding::to_bitstring() const {
  std::string s(kEncodingBits, '0');
  for (int m = 0; m < kNumEdges; ++m)
    for (int n = 0; n < kNumOps; ++n)
      if (bits_(m, n) != 0.0) s[m * kNumOps + n] = '1';
  return s;
}

Encoding Encoding::from_bitstring(std::string_view s) {
  if (s.size() != static_cast<std::size_t>(kEncodingBits))
    throw InvalidEncoding(fmt::format("bitstring has {} characters, expected {}", s.size(), kEncodingBits));
  CellMatrixd bits = CellMatrixd::Zero();
  for (int i = 0; i < kEncodingBits; ++i) {
    if (s[i] == '1')
      bits(i / kNumOps, i % kNumOps) = 1.0;
    else if (s[i] != '0')
      throw InvalidEncoding(fmt::format("bitstring character {} is not 0/1", i));
  }
  return Encoding(bits);
}

Encoding encode(const Architecture& arch) {
  CellMatrixd bits = CellMatrixd::Zero();
  for (const auto& e : arch.edges()) bits(e.edge, index(e.op)) = 1.0;
  return Encoding(bits);
}

Architecture decode(const CellMatrixd& bits) {
  std::vector<ArchEdge> edges;
  int ones = 0;
  for (int m = 0; m < kNumEdges; ++m) {
    int row_ones = 0;
    for (int n = 0; n < kNumOps; ++n) {
      const double b = bits(m, n);
      if (b == 1.0) {
        ++row_ones;
        edges.push_back({m, static_cast<Op>(n)});
      } else if (b != 0.0) {
        throw InvalidEncoding(fmt::format("entry ({},{}) is not binary", m, n));
      }
    }
    if (row_ones > 1) throw InvalidEncoding(fmt::format("row {} has {} ones", m, row_ones));
    ones += row_ones;
  }
  if (ones != kRetainedEdges)
    throw InvalidEncoding(fmt::format("encoding has {} ones, expected {}", ones, kRetainedEdges));
  try {
    return Architecture(std::move(edges));
  } catch (const InvalidArchitecture& e) {
    throw InvalidEncoding(e.what());
  }
}

Architecture random_architecture(Rng& rng) {
  std::vector<ArchEdge> edges;
  edges.reserve(kRetainedEdges);
  for (int node = 0; node < kNumIntermediate; ++node) {
    const auto in = incoming_edges(node);
    // uniform 2-subset: first pick, then a distinct second pick
    const auto first = uniform_index(rng, in.size());
    auto second = uniform_index(rng, in.size() - 1);
    if (second >= first) ++second;
    for (auto k : {first, second}) {
      const auto op = static_cast<Op>(uniform_index(rng, kNumOps - 1));
      edges.push_back({in[k], op});
    }
  }
  return Architecture(std::move(edges));
}

Architecture random_architecture(std::uint64_t seed) {
  Rng rng(seed);
  return random_architecture(rng);
}

ArchitectureCount count_architectures(std::span<const int> incoming, int keep, int ops) {
  auto choose = [](std::uint64_t n, std::uint64_t k) -> std::uint64_t {
    if (k > n) return 0;
    std::uint64_t r = 1;
    for (std::uint64_t i = 1; i <= k; ++i) r = r * (n - k + i) / i;
    return r;
  };
  auto power = [](std::uint64_t b, int e) {
    std::uint64_t r = 1;
    while (e-- > 0) r *= b;
    return r;
  };
  ArchitectureCount c{1, 0, 0};
  for (int in : incoming) c.edge_subsets *= choose(static_cast<std::uint64_t>(in), keep);
  const int retained = keep * static_cast<int>(incoming.size());
  c.with_zero = c.edge_subsets * power(ops, retained);
  c.non_zero = c.edge_subsets * power(ops - 1, retained);
  return c;
}

ArchitectureCount count_architectures() {
  constexpr std::array<int, kNumIntermediate> incoming = {2, 3, 4};
  return count_architectures(incoming, kEdgesPerNode, kNumOps);
}

nlohmann::json architecture_to_json(const Architecture& arch) {
  nlohmann::json edges = nlohmann::json::array();
  for (const auto& e : arch.edges()) {
    const auto& id = kEdges[e.edge];
    edges.push_back({{"edge", e.edge},
                     {"src", node_name(id.src)},
                     {"dst", node_name(id.dst)},
                     {"op", index(e.op)},
                     {"op_name", op_name(e.op)}});
  }
  return {{"edges", edges}};
}

Architecture architecture_from_json(const nlohmann::json& j) {
  if (!j.is_object() || !j.contains("edges") || !j["edges"].is_array())
    throw InvalidInput("architecture: missing \"edges\" array");
  std::vector<ArchEdge> edges;
  for (const auto& e : j["edges"]) {
    if (!e.is_object() || !e.contains("edge") || !e["edge"].is_number_integer() || !e.contains("op") ||
        !e["op"].is_number_integer())
      throw InvalidInput("architecture: each edge needs integer \"edge\" and \"op\"");
    const int edge = e["edge"].get<int>();
    const int op = e["op"].get<int>();
    if (op < 0 || op >= kNumOps) throw InvalidArchitecture(fmt::format("edge {}: op {} out of range", edge, op));
    if (e.contains("op_name") && e["op_name"].is_string() &&
        op_from_name(e["op_name"].get<std::string>()) != static_cast<Op>(op))
      throw InvalidInput(fmt::format("edge {}: op_name does not match op {}", edge, op));
    edges.push_back({edge, static_cast<Op>(op)});
  }
  return Architecture(std::move(edges));
}

}  // namespace lcnas
