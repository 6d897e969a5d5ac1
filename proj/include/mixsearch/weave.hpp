#pragma once

#include <array>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <boost/multiprecision/cpp_int.hpp>

#include "mixsearch/autodiff.hpp"
#include "mixsearch/ops.hpp"
#include "mixsearch/rng.hpp"

namespace mixsearch::weave {

using ops::CellType;
using ops::EdgeClass;
using ops::OpKind;

/// The three fusion directions a grid node can take its value from.
enum class Branch : int { Down = 0, Normal = 1, Up = 2 };
inline constexpr std::array<Branch, 3> kBranches{Branch::Down, Branch::Normal, Branch::Up};

std::string_view branch_name(Branch b);
Branch branch_from_name(std::string_view name);
inline CellType cell_type_of(Branch b) {
  return b == Branch::Down ? CellType::Down : b == Branch::Up ? CellType::Up : CellType::Normal;
}

/// Enabled directions indexed by Branch.
using BranchSet = std::array<bool, 3>;
inline constexpr BranchSet kAllBranches{true, true, true};

struct Node {
  int d = 0;
  int l = 0;
  auto operator<=>(const Node&) const = default;
  std::string str() const;
};

/// Weaved grid: the stem (0,0) plus every (d, l) with 1 <= d < depth,
/// 1 <= l < layers, d + l even and d <= l. Channels double with depth.
struct GridSpec {
  int depth = 5;
  int layers = 8;
  int base_channels = 8;
  int num_classes = 2;
  /// Intermediate maps per cell.
  int steps = 4;
  int in_channels = 1;

  int channels(int d) const { return base_channels << d; }
  bool contains(Node n) const;
  /// Stem first, then nodes by increasing layer and depth (an evaluation order).
  std::vector<Node> nodes() const;
  /// Throws InfeasibleGrid for unusable dimensions.
  void validate() const;
  /// Throws ShapeMismatch unless h, w are divisible by 2^(depth-1).
  void check_input(int h, int w) const;
  bool operator==(const GridSpec&) const = default;
};

/// Edge of a cell DAG. Sources 0 and 1 are the two cell inputs; source
/// 2 + j is intermediate map z^j. Targets index intermediate maps.
struct CellEdge {
  int source = 0;
  int target = 0;
  EdgeClass cls = EdgeClass::Normal;
};

/// Edges grouped by target, sources ascending: 2M + M(M-1)/2 in total.
/// Edges leaving input 1 are special in Down and Up cells.
std::vector<CellEdge> cell_edges(CellType type, int steps);
std::string slot_name(int source);

/// Candidate lists for the three op families, indexed 0 = Down-ops,
/// 1 = Normal-ops, 2 = Up-ops.
struct OpSets {
  std::array<std::vector<OpKind>, 3> sets;

  static OpSets full();
  const std::vector<OpKind>& for_edge(CellType type, EdgeClass cls) const {
    return sets[ops::op_set_index(type, cls)];
  }
  bool operator==(const OpSets&) const = default;
};

/// Grid node feeding a cell input slot, resampled from source.d to depth.
struct Slot {
  Node source;
  int depth = 0;
};

struct BranchPlan {
  bool feasible = false;
  std::array<Slot, 2> slots;
};

/// Branch feasibility and wiring of a grid.
///
/// A branch is feasible when at least one of its inputs is a live node;
/// a missing input is replaced by the surviving one, resampled to the
/// missing slot's resolution. A missing slot deeper than the grid makes the
/// branch infeasible. Diagonal nodes (d, d) form the encoder backbone and
/// keep their down branch whatever the enabled set.
class Topology {
 public:
  explicit Topology(GridSpec grid, BranchSet enabled = kAllBranches);
  /// Discrete wiring: each listed node may use only its chosen branch and
  /// unlisted nodes are dead.
  Topology(GridSpec grid, const std::map<Node, Branch>& choice);

  const GridSpec& grid() const { return grid_; }
  /// Searchable nodes (stem excluded) in evaluation order.
  const std::vector<Node>& nodes() const { return nodes_; }
  const BranchPlan& plan(Node n, Branch b) const;
  BranchSet mask(Node n) const;
  bool alive(Node n) const;
  /// Deep-supervision nodes: the three largest-layer depth-1 nodes,
  /// in increasing layer.
  const std::vector<Node>& heads() const { return heads_; }
  /// Nodes the heads depend on, in evaluation order. With `choice`, only
  /// the chosen branch of each node is followed.
  std::vector<Node> required_nodes(const std::map<Node, Branch>* choice = nullptr) const;

 private:
  void build(const std::map<Node, BranchSet>& allowed);

  GridSpec grid_;
  std::vector<Node> nodes_;
  std::map<Node, std::array<BranchPlan, 3>> plans_;
  std::vector<Node> heads_;
};

/// Per-node feasibility after restricting to `enabled`. Throws
/// InfeasibleGrid when `enabled` is empty or a head becomes unreachable.
std::map<Node, BranchSet> branch_mask(const GridSpec& grid, BranchSet enabled);

/// One cell: input preprocessing, the edge DAG and the output projection.
class Cell {
 public:
  struct Edge {
    int index = 0;  // position in cell_edges()
    CellEdge spec;
    std::vector<ops::OpInstance> ops;
  };

  /// `edge_ops[e]` lists the ops of edge e; empty entries drop the edge.
  Cell(std::string prefix, CellType type, int channels, const std::array<int, 2>& src_channels,
       const std::array<int, 2>& resample, int steps,
       const std::vector<std::vector<OpKind>>& edge_ops, Rng& rng);

  /// `edge_weights[e]` holds the (1, K, 1, 1) mixture weights of edge e;
  /// null means every kept edge has a single op.
  Var forward(Tape& tape, Var in0, Var in1, const std::vector<Var>* edge_weights) const;

  CellType type() const { return type_; }
  const std::vector<Edge>& edges() const { return edges_; }
  std::vector<ParamPtr> parameters() const;

 private:
  Var preprocess(Tape& tape, Var x, int slot) const;

  std::string prefix_;
  CellType type_;
  int channels_;
  int steps_;
  std::array<int, 2> resample_;
  std::array<ParamPtr, 2> pre_w_, pre_gamma_, pre_beta_;
  std::vector<Edge> edges_;
  ParamPtr proj_w_;
};

/// Discretized architecture: one cell per type plus a branch per node.
struct GenotypeEdge {
  int source = 0;
  int target = 0;
  OpKind op = OpKind::Identity;
  bool operator==(const GenotypeEdge&) const = default;
};

struct Genotype {
  static constexpr int kSchemaVersion = 1;
  GridSpec grid;
  std::array<std::vector<GenotypeEdge>, 3> cells;  // indexed by CellType
  std::map<Node, Branch> branches;
  bool operator==(const Genotype&) const = default;
};

/// Architecture logits in plain form.
struct ArchLogits {
  int steps = 4;
  std::array<std::vector<std::vector<double>>, 3> alpha;  // [cell type][edge][candidate]
  std::map<Node, std::array<double, 3>> beta;
  std::map<Node, BranchSet> mask;
};

enum class EdgeMode { Top2, AllEdges };

/// Argmax op per edge; in Top2 mode the two incoming edges with the largest
/// winning probability per intermediate map; argmax feasible branch per node.
/// Ties go to the lowest index.
Genotype discretize(const ArchLogits& logits, const OpSets& sets, const GridSpec& grid,
                    EdgeMode mode = EdgeMode::Top2);

/// The relaxed super-network or a realized discrete network.
class WeaveNet {
 public:
  /// One logit map per head, heads in increasing layer; the last is the
  /// final prediction.
  std::vector<Var> forward(Tape& tape, Var x) const;

  const GridSpec& grid() const { return topo_.grid(); }
  const Topology& topology() const { return topo_; }
  bool relaxed() const { return relaxed_; }
  const std::vector<Node>& heads() const { return topo_.heads(); }
  /// Nodes actually evaluated, in order.
  const std::vector<Node>& active_nodes() const { return active_; }

  std::vector<ParamPtr> parameters() const;
  std::vector<ParamPtr> parameters(ParamGroup group) const;
  std::size_t parameter_count(ParamGroup group = ParamGroup::Weight) const;

  // Relaxed networks only.
  const OpSets& op_sets() const { return sets_; }
  const ParamPtr& alpha(CellType type, int edge) const;
  const ParamPtr& beta(Node n) const;
  ArchLogits arch_logits() const;

  /// Realized networks only.
  const std::optional<Genotype>& genotype() const { return genotype_; }

 private:
  friend WeaveNet build_supernet(const GridSpec&, const OpSets&, Rng&, BranchSet);
  friend WeaveNet realize(const Genotype&, const GridSpec&, Rng&);

  explicit WeaveNet(Topology topo) : topo_(std::move(topo)) {}
  Cell make_cell(Node n, Branch b, const std::vector<std::vector<OpKind>>& edge_ops, Rng& rng) const;

  Topology topo_;
  bool relaxed_ = true;
  OpSets sets_;
  std::optional<Genotype> genotype_;
  std::vector<Node> active_;
  ParamPtr stem_w_, stem_gamma_, stem_beta_;
  std::map<std::pair<Node, Branch>, Cell> cells_;
  std::array<std::vector<ParamPtr>, 3> alpha_;
  std::map<Node, ParamPtr> beta_;
  std::vector<std::pair<ParamPtr, ParamPtr>> heads_;  // (1x1 weight, bias)
};

/// Builds the relaxed network: every feasible branch of every node the
/// heads depend on gets a cell whose edges mix their full candidate list.
/// Alpha (shared per cell type) and beta start at zero.
WeaveNet build_supernet(const GridSpec& grid, const OpSets& sets, Rng& rng,
                        BranchSet enabled = kAllBranches);

/// Discrete network for a genotype. Depth, layers and steps must match the
/// genotype; channel widths and class count come from `grid`. Throws
/// IncompatibleGenotype otherwise or when a chosen branch is infeasible.
WeaveNet realize(const Genotype& genotype, const GridSpec& grid, Rng& rng);
inline WeaveNet realize(const Genotype& genotype, Rng& rng) {
  return realize(genotype, genotype.grid, rng);
}

/// Copies values between parameters of equal name and shape; returns the
/// number copied.
std::size_t copy_parameters(const WeaveNet& from, WeaveNet& to);

/// n_normal^normal_edges * (n_down^s + n_up^s + n_normal_special^s) with
/// s = special_edges, exactly. sizes = (n_normal, n_down, n_up,
/// n_normal_special). Throws InvalidQuery on negative edge counts or
/// non-positive sizes.
boost::multiprecision::cpp_int count_cell_space(int normal_edges, int special_edges,
                                                const std::array<int, 4>& sizes);

}  // namespace mixsearch::weave
