#include "mixsearch/weave.hpp"

#include <algorithm>
#include <cmath>
#include <set>
#include <unordered_map>

#include "mixsearch/error.hpp"

namespace mixsearch::weave {

namespace {

int norm_groups_for(int c) {
  for (int g = std::min(c, 8); g > 1; --g) {
    if (c % g == 0) return g;
  }
  return 1;
}

Tensor uniform_kernel(Shape s, int fan_in, Rng& rng) {
  const double bound = std::sqrt(6.0 / fan_in);
  Tensor t(s);
  for (double& v : t.values()) v = rng.uniform(-bound, bound);
  return t;
}

// Probabilities of a logit vector; masked entries are zero.
std::vector<double> softmax(const std::vector<double>& logits, const std::vector<bool>& mask = {}) {
  double top = -INFINITY;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    if (mask.empty() || mask[i]) top = std::max(top, logits[i]);
  }
  std::vector<double> p(logits.size(), 0.0);
  double total = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    if (mask.empty() || mask[i]) {
      p[i] = std::exp(logits[i] - top);
      total += p[i];
    }
  }
  for (double& v : p) v /= total;
  return p;
}

// First index of the maximum among allowed entries, or -1.
int argmax(const std::vector<double>& v, const std::vector<bool>& mask = {}) {
  int best = -1;
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (!mask.empty() && !mask[i]) continue;
    if (best < 0 || v[i] > v[best]) best = static_cast<int>(i);
  }
  return best;
}

std::string node_prefix(Node n) { return "n" + std::to_string(n.d) + "_" + std::to_string(n.l); }

}  // namespace

std::string_view branch_name(Branch b) {
  switch (b) {
    case Branch::Down: return "down";
    case Branch::Normal: return "normal";
    case Branch::Up: return "up";
  }
  throw Error(Errc::InvalidQuery, "unknown branch");
}

Branch branch_from_name(std::string_view name) {
  for (Branch b : kBranches) {
    if (branch_name(b) == name) return b;
  }
  throw Error(Errc::InvalidConfig, "unknown branch '" + std::string(name) + "'");
}

std::string Node::str() const { return "(" + std::to_string(d) + "," + std::to_string(l) + ")"; }

// ---------------------------------------------------------------------------
// Grid

bool GridSpec::contains(Node n) const {
  if (n.d == 0 && n.l == 0) return true;
  return n.d >= 1 && n.d < depth && n.l >= 1 && n.l < layers && (n.d + n.l) % 2 == 0 && n.d <= n.l;
}

std::vector<Node> GridSpec::nodes() const {
  std::vector<Node> out{{0, 0}};
  for (int l = 1; l < layers; ++l)
    for (int d = 1; d < depth; ++d)
      if (contains({d, l})) out.push_back({d, l});
  return out;
}

void GridSpec::validate() const {
  if (depth < 2 || depth > 12) throw Error(Errc::InfeasibleGrid, "depth must be in [2, 12]");
  if (layers < 4) throw Error(Errc::InfeasibleGrid, "layers must be at least 4");
  if (base_channels < 1 || num_classes < 2 || steps < 1 || in_channels < 1) {
    throw Error(Errc::InfeasibleGrid,
                "need base_channels >= 1, num_classes >= 2, steps >= 1, in_channels >= 1");
  }
}

void GridSpec::check_input(int h, int w) const {
  const int f = 1 << (depth - 1);
  if (h % f != 0 || w % f != 0) {
    throw Error(Errc::ShapeMismatch, "input " + std::to_string(h) + "x" + std::to_string(w) +
                                         " not divisible by " + std::to_string(f));
  }
}

std::vector<CellEdge> cell_edges(CellType type, int steps) {
  std::vector<CellEdge> out;
  for (int j = 0; j < steps; ++j) {
    for (int s = 0; s < 2 + j; ++s) {
      const bool special = s == 1 && type != CellType::Normal;
      out.push_back({s, j, special ? EdgeClass::Special : EdgeClass::Normal});
    }
  }
  return out;
}

std::string slot_name(int source) {
  return source < 2 ? "in" + std::to_string(source) : "z" + std::to_string(source - 2);
}

OpSets OpSets::full() {
  OpSets s;
  s.sets[0] = ops::candidate_set(CellType::Down, EdgeClass::Special);
  s.sets[1] = ops::candidate_set(CellType::Normal, EdgeClass::Normal);
  s.sets[2] = ops::candidate_set(CellType::Up, EdgeClass::Special);
  return s;
}

// ---------------------------------------------------------------------------
// Topology

Topology::Topology(GridSpec grid, BranchSet enabled) : grid_(grid) {
  grid_.validate();
  if (!enabled[0] && !enabled[1] && !enabled[2]) {
    throw Error(Errc::InfeasibleGrid, "no branch direction enabled");
  }
  std::map<Node, BranchSet> allowed;
  for (Node n : grid_.nodes()) {
    BranchSet a = enabled;
    if (n.d == n.l) a[static_cast<int>(Branch::Down)] = true;
    allowed[n] = a;
  }
  build(allowed);
}

Topology::Topology(GridSpec grid, const std::map<Node, Branch>& choice) : grid_(grid) {
  grid_.validate();
  std::map<Node, BranchSet> allowed;
  for (const auto& [n, b] : choice) {
    if (!grid_.contains(n) || (n.d == 0)) {
      throw Error(Errc::IncompatibleGenotype, "node " + n.str() + " is not in the grid");
    }
    BranchSet a{false, false, false};
    a[static_cast<int>(b)] = true;
    allowed[n] = a;
  }
  build(allowed);
}

void Topology::build(const std::map<Node, BranchSet>& allowed) {
  const auto all = grid_.nodes();
  nodes_.assign(all.begin() + 1, all.end());
  std::set<Node> live{{0, 0}};
  for (Node n : nodes_) {
    auto& plans = plans_[n];
    auto it = allowed.find(n);
    for (Branch b : kBranches) {
      BranchPlan& p = plans[static_cast<int>(b)];
      if (it == allowed.end() || !it->second[static_cast<int>(b)]) continue;
      std::array<Slot, 2> want;
      switch (b) {
        case Branch::Down: want = {Slot{{n.d, n.l - 2}, n.d}, Slot{{n.d - 1, n.l - 1}, n.d - 1}}; break;
        case Branch::Normal: want = {Slot{{n.d, n.l - 4}, n.d}, Slot{{n.d, n.l - 2}, n.d}}; break;
        case Branch::Up: want = {Slot{{n.d, n.l - 2}, n.d}, Slot{{n.d + 1, n.l - 1}, n.d + 1}}; break;
      }
      const bool have0 = grid_.contains(want[0].source) && live.count(want[0].source);
      const bool have1 = grid_.contains(want[1].source) && live.count(want[1].source);
      if (!have0 && !have1) continue;
      if (!have0 || !have1) {
        const int missing = have0 ? 1 : 0;
        if (want[missing].depth < 0 || want[missing].depth >= grid_.depth) continue;
        want[missing].source = want[1 - missing].source;
      }
      p.feasible = true;
      p.slots = want;
    }
    if (plans[0].feasible || plans[1].feasible || plans[2].feasible) live.insert(n);
  }

  std::vector<Node> depth1;
  for (Node n : nodes_)
    if (n.d == 1) depth1.push_back(n);
  std::sort(depth1.begin(), depth1.end(), [](Node a, Node b) { return a.l < b.l; });
  const std::size_t k = std::min<std::size_t>(3, depth1.size());
  heads_.assign(depth1.end() - k, depth1.end());
  for (Node h : heads_) {
    if (!live.count(h)) throw Error(Errc::InfeasibleGrid, "head " + h.str() + " is unreachable");
  }
}

const BranchPlan& Topology::plan(Node n, Branch b) const {
  auto it = plans_.find(n);
  if (it == plans_.end()) throw Error(Errc::InvalidQuery, "node " + n.str() + " not in grid");
  return it->second[static_cast<int>(b)];
}

BranchSet Topology::mask(Node n) const {
  BranchSet m{};
  for (Branch b : kBranches) m[static_cast<int>(b)] = plan(n, b).feasible;
  return m;
}

bool Topology::alive(Node n) const {
  if (n.d == 0 && n.l == 0) return true;
  const BranchSet m = mask(n);
  return m[0] || m[1] || m[2];
}

std::vector<Node> Topology::required_nodes(const std::map<Node, Branch>* choice) const {
  std::set<Node> need;
  std::vector<Node> stack(heads_.begin(), heads_.end());
  while (!stack.empty()) {
    const Node n = stack.back();
    stack.pop_back();
    if ((n.d == 0 && n.l == 0) || !need.insert(n).second) continue;
    for (Branch b : kBranches) {
      if (choice) {
        auto it = choice->find(n);
        if (it == choice->end()) {
          throw Error(Errc::IncompatibleGenotype, "no branch chosen for node " + n.str());
        }
        if (it->second != b) continue;
        if (!plan(n, b).feasible) {
          throw Error(Errc::IncompatibleGenotype, "branch " + std::string(branch_name(b)) +
                                                      " infeasible at " + n.str());
        }
      }
      const BranchPlan& p = plan(n, b);
      if (!p.feasible) continue;
      stack.push_back(p.slots[0].source);
      stack.push_back(p.slots[1].source);
    }
  }
  std::vector<Node> out;
  for (Node n : nodes_)
    if (need.count(n)) out.push_back(n);
  return out;
}

std::map<Node, BranchSet> branch_mask(const GridSpec& grid, BranchSet enabled) {
  const Topology topo(grid, enabled);
  std::map<Node, BranchSet> out;
  for (Node n : topo.nodes()) out[n] = topo.mask(n);
  return out;
}

// ---------------------------------------------------------------------------
// Cell

Cell::Cell(std::string prefix, CellType type, int channels, const std::array<int, 2>& src_channels,
           const std::array<int, 2>& resample, int steps,
           const std::vector<std::vector<OpKind>>& edge_ops, Rng& rng)
    : prefix_(std::move(prefix)), type_(type), channels_(channels), steps_(steps),
      resample_(resample) {
  const auto specs = cell_edges(type, steps);
  if (edge_ops.size() != specs.size()) {
    throw Error(Errc::UnsupportedConfig, prefix_ + ": expected ops for " +
                                             std::to_string(specs.size()) + " edges");
  }
  for (int s = 0; s < 2; ++s) {
    const std::string p = prefix_ + ".pre" + std::to_string(s);
    pre_w_[s] = make_param(p + ".w", uniform_kernel({channels, src_channels[s], 1, 1},
                                                    src_channels[s], rng));
    pre_gamma_[s] = make_param(p + ".gn_gamma", Tensor({1, channels, 1, 1}, 1.0));
    pre_beta_[s] = make_param(p + ".gn_beta", Tensor({1, channels, 1, 1}, 0.0));
  }
  for (std::size_t e = 0; e < specs.size(); ++e) {
    if (edge_ops[e].empty()) continue;
    Edge edge{static_cast<int>(e), specs[e], {}};
    const std::string p = prefix_ + ".e" + std::to_string(e);
    for (OpKind k : edge_ops[e]) {
      const auto sc = ops::stride_class(k);
      const auto want = specs[e].cls == EdgeClass::Normal ? ops::StrideClass::Normal
                        : type == CellType::Down          ? ops::StrideClass::Down
                                                          : ops::StrideClass::Up;
      if (sc != want) {
        throw Error(Errc::UnsupportedConfig, p + ": op " + std::string(ops::op_name(k)) +
                                                 " does not fit this edge");
      }
      edge.ops.push_back(ops::instantiate(k, channels, channels, rng, p));
    }
    edges_.push_back(std::move(edge));
  }
  proj_w_ = make_param(prefix_ + ".proj.w",
                       uniform_kernel({channels, steps * channels, 1, 1}, steps * channels, rng));
}

Var Cell::preprocess(Tape& tape, Var x, int slot) const {
  if (resample_[slot] > 0) x = ad::avg_pool2(x);
  if (resample_[slot] < 0) x = ad::upsample_bilinear2x(x);
  Var y = ad::conv2d(x, tape.leaf(pre_w_[slot]), nullptr, {});
  y = ad::group_norm(y, tape.leaf(pre_gamma_[slot]), tape.leaf(pre_beta_[slot]),
                     norm_groups_for(channels_));
  return ad::relu(y);
}

Var Cell::forward(Tape& tape, Var in0, Var in1, const std::vector<Var>* edge_weights) const {
  std::vector<Var> states{preprocess(tape, in0, 0), preprocess(tape, in1, 1)};
  const Shape s0 = states[0].shape();
  const Shape s1 = states[1].shape();
  const int f = type_ == CellType::Down ? 2 : 1;
  const int g = type_ == CellType::Up ? 2 : 1;
  if (s1.h * g != s0.h * f || s1.w * g != s0.w * f) {
    throw Error(Errc::ShapeMismatch, prefix_ + ": inputs " + s0.str() + " and " + s1.str() +
                                         " do not fit a " +
                                         std::string(ops::cell_type_name(type_)) + " cell");
  }
  std::size_t next = 0;
  for (int j = 0; j < steps_; ++j) {
    std::optional<Var> z;
    for (; next < edges_.size() && edges_[next].spec.target == j; ++next) {
      const Edge& e = edges_[next];
      const Var src = states[e.spec.source];
      Var out;
      if (edge_weights) {
        std::vector<Var> outs;
        outs.reserve(e.ops.size());
        for (const auto& op : e.ops) outs.push_back(op.apply(tape, src));
        out = ad::weighted_sum(outs, (*edge_weights)[e.index]);
      } else {
        out = e.ops.front().apply(tape, src);
      }
      z = z ? ad::add(*z, out) : out;
    }
    states.push_back(z ? *z : tape.constant(Tensor(s0)));
  }
  Var cat = ad::concat_channels(std::span<const Var>(states).subspan(2));
  Var y = ad::conv2d(cat, tape.leaf(proj_w_), nullptr, {});
  if (!(y.shape() == Shape{s0.n, channels_, s0.h, s0.w})) {
    throw Error(Errc::ShapeMismatch, prefix_ + ": output " + y.shape().str());
  }
  return y;
}

std::vector<ParamPtr> Cell::parameters() const {
  std::vector<ParamPtr> out;
  for (int s = 0; s < 2; ++s) {
    out.push_back(pre_w_[s]);
    out.push_back(pre_gamma_[s]);
    out.push_back(pre_beta_[s]);
  }
  for (const auto& e : edges_)
    for (const auto& op : e.ops)
      for (const auto& p : op.parameters()) out.push_back(p);
  out.push_back(proj_w_);
  return out;
}

// ---------------------------------------------------------------------------
// Discretization

Genotype discretize(const ArchLogits& logits, const OpSets& sets, const GridSpec& grid,
                    EdgeMode mode) {
  Genotype g;
  g.grid = grid;
  for (int t = 0; t < 3; ++t) {
    const auto type = static_cast<CellType>(t);
    const auto specs = cell_edges(type, logits.steps);
    const auto& alpha = logits.alpha[t];
    if (alpha.size() != specs.size()) {
      throw Error(Errc::InvalidQuery, "alpha for " + std::string(ops::cell_type_name(type)) +
                                          " has " + std::to_string(alpha.size()) + " edges");
    }
    std::vector<int> best(specs.size());
    std::vector<double> strength(specs.size());
    for (std::size_t e = 0; e < specs.size(); ++e) {
      const auto& cands = sets.for_edge(type, specs[e].cls);
      if (alpha[e].size() != cands.size() || cands.empty()) {
        throw Error(Errc::InvalidQuery, "alpha edge " + std::to_string(e) +
                                            " does not match its candidate list");
      }
      const auto p = softmax(alpha[e]);
      best[e] = argmax(p);
      strength[e] = p[best[e]];
    }
    std::size_t e0 = 0;
    for (int j = 0; j < logits.steps; ++j) {
      std::vector<std::size_t> incoming;
      for (std::size_t e = e0; e < specs.size() && specs[e].target == j; ++e) incoming.push_back(e);
      e0 += incoming.size();
      if (mode == EdgeMode::Top2 && incoming.size() > 2) {
        std::stable_sort(incoming.begin(), incoming.end(),
                         [&](std::size_t a, std::size_t b) { return strength[a] > strength[b]; });
        incoming.resize(2);
        std::sort(incoming.begin(), incoming.end());
      }
      for (std::size_t e : incoming) {
        g.cells[t].push_back({specs[e].source, specs[e].target,
                              sets.for_edge(type, specs[e].cls)[best[e]]});
      }
    }
  }
  for (const auto& [node, mask] : logits.mask) {
    const std::vector<bool> m(mask.begin(), mask.end());
    if (std::none_of(m.begin(), m.end(), [](bool v) { return v; })) continue;
    const auto it = logits.beta.find(node);
    const std::vector<double> b = it == logits.beta.end()
                                      ? std::vector<double>(3, 0.0)
                                      : std::vector<double>(it->second.begin(), it->second.end());
    g.branches[node] = static_cast<Branch>(argmax(softmax(b, m), m));
  }
  return g;
}

// ---------------------------------------------------------------------------
// Networks

Cell WeaveNet::make_cell(Node n, Branch b, const std::vector<std::vector<OpKind>>& edge_ops,
                         Rng& rng) const {
  const BranchPlan& p = topo_.plan(n, b);
  const GridSpec& g = topo_.grid();
  std::array<int, 2> src_c{}, resample{};
  for (int s = 0; s < 2; ++s) {
    src_c[s] = g.channels(p.slots[s].source.d);
    resample[s] = p.slots[s].depth - p.slots[s].source.d;
  }
  return Cell(node_prefix(n) + "." + std::string(branch_name(b)), cell_type_of(b), g.channels(n.d),
              src_c, resample, g.steps, edge_ops, rng);
}

WeaveNet build_supernet(const GridSpec& grid, const OpSets& sets, Rng& rng, BranchSet enabled) {
  for (int i = 0; i < 3; ++i) {
    if (sets.sets[i].empty()) throw Error(Errc::UnsupportedConfig, "empty candidate op set");
  }
  WeaveNet net{Topology(grid, enabled)};
  net.relaxed_ = true;
  net.sets_ = sets;
  net.active_ = net.topo_.required_nodes();
  const int c0 = grid.base_channels;
  net.stem_w_ = make_param("stem.w", uniform_kernel({c0, grid.in_channels, 3, 3}, grid.in_channels * 9, rng));
  net.stem_gamma_ = make_param("stem.gn_gamma", Tensor({1, c0, 1, 1}, 1.0));
  net.stem_beta_ = make_param("stem.gn_beta", Tensor({1, c0, 1, 1}, 0.0));

  for (Node n : net.active_) {
    for (Branch b : kBranches) {
      if (!net.topo_.plan(n, b).feasible) continue;
      const CellType type = cell_type_of(b);
      std::vector<std::vector<OpKind>> edge_ops;
      for (const auto& e : cell_edges(type, grid.steps)) edge_ops.push_back(sets.for_edge(type, e.cls));
      net.cells_.emplace(std::make_pair(n, b), net.make_cell(n, b, edge_ops, rng));
    }
    net.beta_[n] = make_param("beta." + node_prefix(n), Tensor({1, 3, 1, 1}, 0.0), ParamGroup::Beta);
  }
  for (int t = 0; t < 3; ++t) {
    const auto type = static_cast<CellType>(t);
    const auto specs = cell_edges(type, grid.steps);
    for (std::size_t e = 0; e < specs.size(); ++e) {
      const int k = static_cast<int>(sets.for_edge(type, specs[e].cls).size());
      net.alpha_[t].push_back(make_param(
          "alpha." + std::string(ops::cell_type_name(type)) + ".e" + std::to_string(e),
          Tensor({1, k, 1, 1}, 0.0), ParamGroup::Alpha));
    }
  }
  const int c1 = grid.channels(1);
  for (Node h : net.heads()) {
    const std::string p = "head." + node_prefix(h);
    net.heads_.emplace_back(make_param(p + ".w", uniform_kernel({grid.num_classes, c1, 1, 1}, c1, rng)),
                            make_param(p + ".b", Tensor({1, grid.num_classes, 1, 1}, 0.0)));
  }
  return net;
}

WeaveNet realize(const Genotype& genotype, const GridSpec& grid, Rng& rng) {
  const GridSpec& gg = genotype.grid;
  if (gg.depth != grid.depth || gg.layers != grid.layers || gg.steps != grid.steps) {
    throw Error(Errc::IncompatibleGenotype, "genotype grid (" + std::to_string(gg.depth) + "," +
                                                std::to_string(gg.layers) + "," +
                                                std::to_string(gg.steps) + ") vs configured (" +
                                                std::to_string(grid.depth) + "," +
                                                std::to_string(grid.layers) + "," +
                                                std::to_string(grid.steps) + ")");
  }
  // Per cell type, the single op of every kept edge.
  std::array<std::vector<std::vector<OpKind>>, 3> cell_ops;
  for (int t = 0; t < 3; ++t) {
    const auto type = static_cast<CellType>(t);
    const auto specs = cell_edges(type, grid.steps);
    cell_ops[t].assign(specs.size(), {});
    for (const auto& ge : genotype.cells[t]) {
      auto it = std::find_if(specs.begin(), specs.end(), [&](const CellEdge& c) {
        return c.source == ge.source && c.target == ge.target;
      });
      if (it == specs.end()) {
        throw Error(Errc::IncompatibleGenotype, "edge " + slot_name(ge.source) + "->z" +
                                                    std::to_string(ge.target) + " not in " +
                                                    std::string(ops::cell_type_name(type)) + " cell");
      }
      auto& slot = cell_ops[t][it - specs.begin()];
      if (!slot.empty()) throw Error(Errc::IncompatibleGenotype, "duplicate genotype edge");
      const auto want = it->cls == EdgeClass::Normal ? ops::StrideClass::Normal
                        : type == CellType::Down     ? ops::StrideClass::Down
                                                     : ops::StrideClass::Up;
      if (ops::stride_class(ge.op) != want) {
        throw Error(Errc::IncompatibleGenotype, std::string(ops::op_name(ge.op)) +
                                                    " cannot sit on edge " + slot_name(ge.source) +
                                                    "->z" + std::to_string(ge.target));
      }
      slot.push_back(ge.op);
    }
  }

  // The grid itself was valid, so an unreachable head is the genotype's fault.
  auto wiring = [&] {
    grid.validate();
    try {
      return Topology(grid, genotype.branches);
    } catch (const Error& e) {
      if (e.code() != Errc::InfeasibleGrid) throw;
      throw Error(Errc::IncompatibleGenotype, e.what());
    }
  };
  WeaveNet net{wiring()};
  net.relaxed_ = false;
  net.genotype_ = genotype;
  net.active_ = net.topo_.required_nodes(&genotype.branches);
  const int c0 = grid.base_channels;
  net.stem_w_ = make_param("stem.w", uniform_kernel({c0, grid.in_channels, 3, 3}, grid.in_channels * 9, rng));
  net.stem_gamma_ = make_param("stem.gn_gamma", Tensor({1, c0, 1, 1}, 1.0));
  net.stem_beta_ = make_param("stem.gn_beta", Tensor({1, c0, 1, 1}, 0.0));
  for (Node n : net.active_) {
    const Branch b = genotype.branches.at(n);
    net.cells_.emplace(std::make_pair(n, b),
                       net.make_cell(n, b, cell_ops[static_cast<int>(cell_type_of(b))], rng));
  }
  const int c1 = grid.channels(1);
  for (Node h : net.heads()) {
    const std::string p = "head." + node_prefix(h);
    net.heads_.emplace_back(make_param(p + ".w", uniform_kernel({grid.num_classes, c1, 1, 1}, c1, rng)),
                            make_param(p + ".b", Tensor({1, grid.num_classes, 1, 1}, 0.0)));
  }
  return net;
}

std::vector<Var> WeaveNet::forward(Tape& tape, Var x) const {
  const GridSpec& g = grid();
  const Shape s = x.shape();
  if (s.c != g.in_channels) {
    throw Error(Errc::ShapeMismatch, "network input " + s.str() + " needs " +
                                         std::to_string(g.in_channels) + " channels");
  }
  g.check_input(s.h, s.w);

  std::map<Node, Var> value;
  {
    Var y = ad::conv2d(x, tape.leaf(stem_w_), nullptr, {.stride = 1, .padding = 1});
    y = ad::group_norm(y, tape.leaf(stem_gamma_), tape.leaf(stem_beta_),
                       norm_groups_for(g.base_channels));
    value[{0, 0}] = ad::relu(y);
  }

  std::array<std::vector<Var>, 3> weights;
  if (relaxed_) {
    for (int t = 0; t < 3; ++t)
      for (const auto& a : alpha_[t]) weights[t].push_back(ad::softmax_channels(tape.leaf(a)));
  }

  for (Node n : active_) {
    const auto run = [&](Branch b) {
      const BranchPlan& p = topo_.plan(n, b);
      const Cell& cell = cells_.at({n, b});
      const auto* w = relaxed_ ? &weights[static_cast<int>(cell_type_of(b))] : nullptr;
      return cell.forward(tape, value.at(p.slots[0].source), value.at(p.slots[1].source), w);
    };
    if (!relaxed_) {
      value[n] = run(genotype_->branches.at(n));
      continue;
    }
    const BranchSet m = topo_.mask(n);
    const Shape want{s.n, g.channels(n.d), s.h >> n.d, s.w >> n.d};
    std::vector<Var> outs;
    for (Branch b : kBranches) {
      outs.push_back(m[static_cast<int>(b)] ? run(b) : tape.constant(Tensor(want)));
    }
    Var p = ad::softmax_channels(tape.leaf(beta_.at(n)), std::vector<bool>(m.begin(), m.end()));
    value[n] = ad::weighted_sum(outs, p);
  }

  std::vector<Var> logits;
  for (std::size_t i = 0; i < heads_.size(); ++i) {
    Var up = ad::upsample_bilinear2x(value.at(heads()[i]));
    Var b = tape.leaf(heads_[i].second);
    logits.push_back(ad::conv2d(up, tape.leaf(heads_[i].first), &b, {}));
  }
  return logits;
}

std::vector<ParamPtr> WeaveNet::parameters() const {
  std::vector<ParamPtr> out{stem_w_, stem_gamma_, stem_beta_};
  for (const auto& [key, cell] : cells_)
    for (const auto& p : cell.parameters()) out.push_back(p);
  for (const auto& [w, b] : heads_) {
    out.push_back(w);
    out.push_back(b);
  }
  for (const auto& set : alpha_)
    for (const auto& a : set) out.push_back(a);
  for (const auto& [n, b] : beta_) out.push_back(b);
  return out;
}

std::vector<ParamPtr> WeaveNet::parameters(ParamGroup group) const {
  std::vector<ParamPtr> out;
  for (auto& p : parameters())
    if (p->group() == group) out.push_back(p);
  return out;
}

std::size_t WeaveNet::parameter_count(ParamGroup group) const {
  std::size_t n = 0;
  for (const auto& p : parameters(group)) n += p->numel();
  return n;
}

const ParamPtr& WeaveNet::alpha(CellType type, int edge) const {
  const auto& set = alpha_.at(static_cast<int>(type));
  if (edge < 0 || edge >= static_cast<int>(set.size())) {
    throw Error(Errc::InvalidQuery, "no alpha for edge " + std::to_string(edge));
  }
  return set[edge];
}

const ParamPtr& WeaveNet::beta(Node n) const {
  auto it = beta_.find(n);
  if (it == beta_.end()) throw Error(Errc::InvalidQuery, "no beta for node " + n.str());
  return it->second;
}

ArchLogits WeaveNet::arch_logits() const {
  if (!relaxed_) throw Error(Errc::InvalidQuery, "a realized network has no architecture logits");
  ArchLogits out;
  out.steps = grid().steps;
  for (int t = 0; t < 3; ++t)
    for (const auto& a : alpha_[t]) out.alpha[t].push_back(a->value.vec());
  for (const auto& [n, b] : beta_) {
    out.beta[n] = {b->value[0], b->value[1], b->value[2]};
    out.mask[n] = topo_.mask(n);
  }
  return out;
}

std::size_t copy_parameters(const WeaveNet& from, WeaveNet& to) {
  std::unordered_map<std::string, ParamPtr> src;
  for (const auto& p : from.parameters()) src[p->name()] = p;
  std::size_t copied = 0;
  for (const auto& p : to.parameters()) {
    auto it = src.find(p->name());
    if (it != src.end() && it->second->value.shape() == p->value.shape()) {
      p->value = it->second->value;
      ++copied;
    }
  }
  return copied;
}

boost::multiprecision::cpp_int count_cell_space(int normal_edges, int special_edges,
                                                const std::array<int, 4>& sizes) {
  if (normal_edges < 0 || special_edges < 0) {
    throw Error(Errc::InvalidQuery, "edge counts must be non-negative");
  }
  for (int s : sizes)
    if (s < 1) throw Error(Errc::InvalidQuery, "op set sizes must be positive");
  using boost::multiprecision::cpp_int;
  using boost::multiprecision::pow;
  const auto s = static_cast<unsigned>(special_edges);
  const cpp_int special = pow(cpp_int(sizes[1]), s) + pow(cpp_int(sizes[2]), s) +
                          pow(cpp_int(sizes[3]), s);
  return pow(cpp_int(sizes[0]), static_cast<unsigned>(normal_edges)) * special;
}

}  // namespace mixsearch::weave
