#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>

#include "mixsearch/weave.hpp"
#include "test_util.hpp"

using namespace mixsearch;
using namespace mixsearch::weave;
using namespace mixsearch::testing;
using ops::OpKind;

namespace {

GridSpec small_grid(int depth, int layers, int c0 = 4, int steps = 2) {
  GridSpec g;
  g.depth = depth;
  g.layers = layers;
  g.base_channels = c0;
  g.steps = steps;
  return g;
}

// Sum of every head's logits contracted against fixed random maps.
Var head_loss(Tape& t, const std::vector<Var>& heads) {
  Var total = project(t, heads[0], 500);
  for (std::size_t i = 1; i < heads.size(); ++i) total = ad::add(total, project(t, heads[i], 500 + i));
  return total;
}

void set_all(const ParamPtr& p, double v) { p->value.fill(v); }

}  // namespace

// ---------------------------------------------------------------------------
// Grid and topology

TEST(Weave, NodeSetMatchesBruteForceEnumeration) {
  for (int depth = 2; depth <= 7; ++depth) {
    for (int layers = 4; layers <= 12; ++layers) {
      GridSpec g = small_grid(depth, layers);
      std::size_t count = 1;  // stem
      for (int d = 0; d < depth; ++d)
        for (int l = 0; l < layers; ++l) {
          const bool in = d >= 1 && l >= 1 && (d + l) % 2 == 0 && d <= l;
          count += in;
          EXPECT_EQ(g.contains({d, l}), in || (d == 0 && l == 0));
        }
      EXPECT_EQ(g.nodes().size(), count);
    }
  }
  EXPECT_EQ(small_grid(5, 8).nodes().size(), 13u);
}

TEST(Weave, NodesComeInEvaluationOrder) {
  const auto nodes = small_grid(6, 10).nodes();
  EXPECT_EQ(nodes.front(), (Node{0, 0}));
  for (std::size_t i = 1; i < nodes.size(); ++i) EXPECT_LE(nodes[i - 1].l, nodes[i].l);
}

TEST(Weave, HeadsAreTheLastThreeDepthOneNodes) {
  EXPECT_EQ(Topology(small_grid(6, 10)).heads(),
            (std::vector<Node>{{1, 5}, {1, 7}, {1, 9}}));
  EXPECT_EQ(Topology(small_grid(5, 8)).heads(), (std::vector<Node>{{1, 3}, {1, 5}, {1, 7}}));
  // Fewer than three depth-1 nodes: all of them.
  EXPECT_EQ(Topology(small_grid(2, 4)).heads(), (std::vector<Node>{{1, 1}, {1, 3}}));
}

TEST(Weave, CellGraphEdgeCounts) {
  for (int m = 1; m <= 6; ++m) {
    for (CellType t : {CellType::Normal, CellType::Down, CellType::Up}) {
      const auto edges = cell_edges(t, m);
      EXPECT_EQ(static_cast<int>(edges.size()), 2 * m + m * (m - 1) / 2);
      const auto special = std::count_if(edges.begin(), edges.end(), [](const CellEdge& e) {
        return e.cls == EdgeClass::Special;
      });
      EXPECT_EQ(special, t == CellType::Normal ? 0 : m);
      for (std::size_t i = 1; i < edges.size(); ++i) {
        const bool ordered = edges[i - 1].target < edges[i].target ||
                             (edges[i - 1].target == edges[i].target &&
                              edges[i - 1].source < edges[i].source);
        EXPECT_TRUE(ordered);
      }
      for (const auto& e : edges) EXPECT_LT(e.source, e.target + 2);
    }
  }
  EXPECT_EQ(cell_edges(CellType::Down, 4).size(), 14u);
}

TEST(Weave, FeasibilityAtTheBoundaries) {
  const Topology topo(small_grid(5, 8));
  // Diagonal nodes have no same-depth predecessor: only the down branch.
  for (int d = 1; d < 5; ++d) EXPECT_EQ(topo.mask({d, d}), (BranchSet{true, false, false}));
  // Up is impossible from the deepest row.
  EXPECT_FALSE(topo.plan({4, 6}, Branch::Up).feasible);
  EXPECT_TRUE(topo.plan({4, 6}, Branch::Down).feasible);
  EXPECT_TRUE(topo.plan({4, 6}, Branch::Normal).feasible);
  // (1,3) normal lacks (1,-1) and duplicates (1,1).
  const BranchPlan& p = topo.plan({1, 3}, Branch::Normal);
  ASSERT_TRUE(p.feasible);
  EXPECT_EQ(p.slots[0].source, (Node{1, 1}));
  EXPECT_EQ(p.slots[1].source, (Node{1, 1}));
  // (1,1) down: (1,-1) is missing, the stem feeds both slots and the first
  // slot is pooled to depth 1.
  const BranchPlan& q = topo.plan({1, 1}, Branch::Down);
  EXPECT_EQ(q.slots[0].source, (Node{0, 0}));
  EXPECT_EQ(q.slots[0].depth, 1);
  EXPECT_EQ(q.slots[1].depth, 0);
  for (Node n : topo.nodes()) EXPECT_TRUE(topo.alive(n)) << n.str();
}

TEST(Weave, BranchMaskAllBranchesIsIdentity) {
  const GridSpec g = small_grid(6, 10);
  const Topology topo(g);
  const auto mask = branch_mask(g, kAllBranches);
  for (Node n : topo.nodes()) EXPECT_EQ(mask.at(n), topo.mask(n));
}

TEST(Weave, BranchMaskNormalKeepsOnlyHorizontalFusion) {
  const GridSpec g = small_grid(5, 8);
  const auto mask = branch_mask(g, {false, true, false});
  for (const auto& [n, m] : mask) {
    EXPECT_FALSE(m[2]) << n.str();
    if (n.d == n.l) {
      EXPECT_EQ(m, (BranchSet{true, false, false})) << n.str();  // encoder backbone
    } else {
      EXPECT_EQ(m, (BranchSet{false, true, false})) << n.str();
    }
  }
}

TEST(Weave, BranchMaskErrors) {
  expect_throws_code([] { branch_mask(small_grid(5, 8), {false, false, false}); },
                     Errc::InfeasibleGrid);
  // A discrete wiring that leaves a head unreachable.
  std::map<Node, Branch> choice{{{1, 1}, Branch::Down}};
  expect_throws_code([&] { Topology(small_grid(2, 4), choice); }, Errc::InfeasibleGrid);
  GridSpec bad = small_grid(1, 8);
  expect_throws_code([&] { Topology{bad}; }, Errc::InfeasibleGrid);
}

// ---------------------------------------------------------------------------
// Supernet construction and forward

TEST(Weave, SupernetStartsUniformAndIsDeterministic) {
  const GridSpec g = small_grid(3, 6);
  Rng r1(5), r2(5);
  const WeaveNet a = build_supernet(g, OpSets::full(), r1);
  const WeaveNet b = build_supernet(g, OpSets::full(), r2);
  const auto pa = a.parameters(), pb = b.parameters();
  ASSERT_EQ(pa.size(), pb.size());
  for (std::size_t i = 0; i < pa.size(); ++i) {
    EXPECT_EQ(pa[i]->name(), pb[i]->name());
    EXPECT_EQ(pa[i]->value.vec(), pb[i]->value.vec());
  }
  for (CellType t : {CellType::Normal, CellType::Down, CellType::Up}) {
    for (std::size_t e = 0; e < cell_edges(t, g.steps).size(); ++e) {
      Tape tape;
      const Tensor p = ad::softmax_channels(tape.leaf(a.alpha(t, static_cast<int>(e)))).value();
      for (double v : p.values()) EXPECT_NEAR(v, 1.0 / p.size(), 1e-15);
    }
  }
}

TEST(Weave, ParameterGroupsAreDisjoint) {
  Rng rng(1);
  const WeaveNet net = build_supernet(small_grid(3, 6), OpSets::full(), rng);
  std::set<const Parameter*> seen;
  std::size_t total = 0;
  for (ParamGroup grp : {ParamGroup::Weight, ParamGroup::Alpha, ParamGroup::Beta}) {
    for (const auto& p : net.parameters(grp)) {
      EXPECT_TRUE(seen.insert(p.get()).second) << p->name();
      ++total;
    }
  }
  EXPECT_EQ(total, net.parameters().size());
  EXPECT_EQ(net.parameters(ParamGroup::Beta).size(), net.active_nodes().size());
  std::set<std::string> names;
  for (const auto& p : net.parameters()) EXPECT_TRUE(names.insert(p->name()).second) << p->name();
}

TEST(Weave, ForwardShapesAndResolutionInvariant) {
  GridSpec g = small_grid(4, 7);
  g.num_classes = 3;
  Rng rng(2);
  const WeaveNet net = build_supernet(g, OpSets::full(), rng);
  Tape t;
  const auto heads = net.forward(t, t.constant(random_tensor({2, 1, 16, 24}, 4)));
  ASSERT_EQ(heads.size(), 3u);
  for (const Var& h : heads) {
    EXPECT_EQ(h.shape(), (Shape{2, 3, 16, 24}));
    EXPECT_TRUE(h.value().all_finite());
  }
  expect_throws_code([&] { net.forward(t, t.constant(Tensor({1, 1, 12, 16}))); },
                     Errc::ShapeMismatch);
  expect_throws_code([&] { net.forward(t, t.constant(Tensor({1, 2, 16, 16}))); },
                     Errc::ShapeMismatch);
}

TEST(Weave, ZeroInputAndZeroHeadGiveZeroLogits) {
  Rng rng(3);
  const WeaveNet net = build_supernet(small_grid(3, 5), OpSets::full(), rng);
  for (const auto& p : net.parameters()) {
    if (p->name().starts_with("head.")) set_all(p, 0.0);
  }
  Tape t;
  for (const Var& h : net.forward(t, t.constant(Tensor({1, 1, 8, 8})))) {
    for (double v : h.value().values()) EXPECT_EQ(v, 0.0);
  }
}

// ---------------------------------------------------------------------------
// Cells

namespace {

// A normal cell with one intermediate map fed only by input 0.
Cell single_edge_cell(const std::vector<OpKind>& ops, std::uint64_t seed) {
  Rng rng(seed);
  return Cell("c", CellType::Normal, 4, {4, 4}, {0, 0}, 1, {ops, {}}, rng);
}

void copy_by_name(const Cell& from, const Cell& to) {
  for (const auto& p : to.parameters())
    for (const auto& q : from.parameters())
      if (p->name() == q->name() && p->value.shape() == q->value.shape()) p->value = q->value;
}

}  // namespace

TEST(Weave, OneHotMixtureEqualsTheHotOp) {
  const Cell mixed = single_edge_cell({OpKind::Identity, OpKind::Conv1}, 7);
  const Cell plain = single_edge_cell({OpKind::Identity}, 8);
  copy_by_name(mixed, plain);
  const Tensor x = random_tensor({2, 4, 8, 8}, 9);
  Tape t;
  std::vector<Var> w{t.constant(Tensor({1, 2, 1, 1}, std::vector<double>{1.0, 0.0}))};
  const Tensor a = mixed.forward(t, t.constant(x), t.constant(x), &w).value();
  const Tensor b = plain.forward(t, t.constant(x), t.constant(x), nullptr).value();
  EXPECT_LE(max_abs_diff(a, b), 1e-12);
}

TEST(Weave, UniformMixtureWithZeroConvHalvesTheIdentityPath) {
  const Cell mixed = single_edge_cell({OpKind::Identity, OpKind::Conv1}, 7);
  const Cell plain = single_edge_cell({OpKind::Identity}, 8);
  copy_by_name(mixed, plain);
  set_all(mixed.edges()[0].ops[1].find("conv"), 0.0);
  const Tensor x = random_tensor({1, 4, 8, 8}, 10);
  Tape t;
  std::vector<Var> w{ad::softmax_channels(t.constant(Tensor({1, 2, 1, 1})))};
  const Tensor a = mixed.forward(t, t.constant(x), t.constant(x), &w).value();
  Tensor b = plain.forward(t, t.constant(x), t.constant(x), nullptr).value();
  for (double& v : b.values()) v *= 0.5;
  EXPECT_LE(max_abs_diff(a, b), 1e-12);
}

TEST(Weave, DownAndUpCellShapes) {
  Rng rng(11);
  const OpSets sets = OpSets::full();
  auto ops_for = [&](CellType type) {
    std::vector<std::vector<OpKind>> out;
    for (const auto& e : cell_edges(type, 4)) out.push_back(sets.for_edge(type, e.cls));
    return out;
  };
  // Down cell at depth d: in0 already at depth d, in1 one level shallower.
  const Cell down("d", CellType::Down, 8, {8, 4}, {0, 0}, 4, ops_for(CellType::Down), rng);
  const Cell up("u", CellType::Up, 8, {8, 16}, {0, 0}, 4, ops_for(CellType::Up), rng);
  Tape t;
  std::vector<Var> wd, wu;
  for (const auto& e : cell_edges(CellType::Down, 4)) {
    wd.push_back(ad::softmax_channels(
        t.constant(Tensor({1, static_cast<int>(sets.for_edge(CellType::Down, e.cls).size()), 1, 1}))));
  }
  for (const auto& e : cell_edges(CellType::Up, 4)) {
    wu.push_back(ad::softmax_channels(
        t.constant(Tensor({1, static_cast<int>(sets.for_edge(CellType::Up, e.cls).size()), 1, 1}))));
  }
  const Var yd = down.forward(t, t.constant(random_tensor({1, 8, 8, 8}, 1)),
                              t.constant(random_tensor({1, 4, 16, 16}, 2)), &wd);
  EXPECT_EQ(yd.shape(), (Shape{1, 8, 8, 8}));
  const Var yu = up.forward(t, t.constant(random_tensor({1, 8, 8, 8}, 1)),
                            t.constant(random_tensor({1, 16, 4, 4}, 2)), &wu);
  EXPECT_EQ(yu.shape(), (Shape{1, 8, 8, 8}));
  expect_throws_code(
      [&] {
        down.forward(t, t.constant(random_tensor({1, 8, 8, 8}, 1)),
                     t.constant(random_tensor({1, 4, 8, 8}, 2)), &wd);
      },
      Errc::ShapeMismatch);
}

TEST(Weave, CellGradientsMatchFiniteDifferences) {
  Rng rng(12);
  const OpSets sets = OpSets::full();
  std::vector<std::vector<OpKind>> ops;
  for (const auto& e : cell_edges(CellType::Down, 2)) {
    // Smooth candidates keep central differences away from kinks.
    ops.push_back(e.cls == EdgeClass::Special
                      ? std::vector<OpKind>{OpKind::AvgPool2, OpKind::SepConv2}
                      : std::vector<OpKind>{OpKind::Identity, OpKind::AttIdentity});
  }
  const Cell cell("g", CellType::Down, 4, {4, 4}, {0, 0}, 2, ops, rng);
  std::vector<ParamPtr> alpha;
  for (std::size_t e = 0; e < ops.size(); ++e) {
    alpha.push_back(make_param("a" + std::to_string(e), random_tensor({1, 2, 1, 1}, 40 + e),
                               ParamGroup::Alpha));
  }
  const Tensor in0 = random_tensor({2, 4, 4, 4}, 13);
  const Tensor in1 = random_tensor({2, 4, 8, 8}, 14);
  auto fn = [&](Tape& t) {
    std::vector<Var> w;
    for (const auto& a : alpha) w.push_back(ad::softmax_channels(t.leaf(a)));
    return project(t, cell.forward(t, t.constant(in0), t.constant(in1), &w));
  };
  for (const auto& a : alpha) EXPECT_LE(finite_diff_check_param(fn, *a), 1e-5) << a->name();
  for (const auto& p : cell.parameters()) {
    EXPECT_LE(finite_diff_check_param(fn, *p), 1e-4) << p->name();
  }
  auto fn_x = [&](Tape& t, Var v) {
    std::vector<Var> w;
    for (const auto& a : alpha) w.push_back(ad::softmax_channels(t.leaf(a)));
    return project(t, cell.forward(t, t.constant(in0), v, &w));
  };
  EXPECT_LE(finite_diff_check(fn_x, in1), 1e-4);
}

TEST(Weave, GridArchitectureGradientsMatchFiniteDifferences) {
  GridSpec g = small_grid(3, 5, 4, 2);
  g.in_channels = 4;
  OpSets sets;
  sets.sets[0] = {OpKind::AvgPool2, OpKind::Conv2};
  sets.sets[1] = {OpKind::Identity, OpKind::Conv1};
  sets.sets[2] = {OpKind::ConvT2, OpKind::SepConvT2};
  Rng rng(15);
  const WeaveNet net = build_supernet(g, sets, rng);
  Rng perturb(16);
  for (const auto& p : net.parameters(ParamGroup::Alpha))
    for (double& v : p->value.values()) v = perturb.uniform(-1, 1);
  for (const auto& p : net.parameters(ParamGroup::Beta))
    for (double& v : p->value.values()) v = perturb.uniform(-1, 1);
  const Tensor x = random_tensor({2, 4, 8, 8}, 17);
  auto fn = [&](Tape& t) { return head_loss(t, net.forward(t, t.constant(x))); };
  for (ParamGroup grp : {ParamGroup::Alpha, ParamGroup::Beta}) {
    for (const auto& p : net.parameters(grp)) {
      EXPECT_LE(finite_diff_check_param(fn, *p), 1e-5) << p->name();
    }
  }
  auto fn_x = [&](Tape& t, Var v) { return head_loss(t, net.forward(t, v)); };
  EXPECT_LE(finite_diff_check(fn_x, x), 1e-4);
}

TEST(Weave, ArchitectureGradientsFlowEverywhere) {
  const GridSpec g = small_grid(4, 7, 4, 4);
  Rng rng(18);
  const WeaveNet net = build_supernet(g, OpSets::full(), rng);
  for (const auto& p : net.parameters()) p->zero_grad();
  Tape t;
  t.backward(head_loss(t, net.forward(t, t.constant(random_tensor({2, 1, 16, 16}, 19)))));

  std::size_t total = 0, nonzero = 0;
  for (const auto& p : net.parameters(ParamGroup::Alpha)) {
    for (double v : p->grad.values()) {
      ++total;
      nonzero += v != 0.0;
    }
  }
  for (Node n : net.active_nodes()) {
    const BranchSet m = net.topology().mask(n);
    // A single feasible branch has probability 1 whatever the logits.
    if (m[0] + m[1] + m[2] < 2) continue;
    const auto& grad = net.beta(n)->grad;
    for (int b = 0; b < 3; ++b) {
      if (!m[b]) {
        EXPECT_EQ(grad[b], 0.0) << n.str();
        continue;
      }
      ++total;
      nonzero += grad[b] != 0.0;
    }
  }
  ASSERT_GT(total, 0u);
  EXPECT_GE(static_cast<double>(nonzero) / total, 0.99) << nonzero << "/" << total;
}

// ---------------------------------------------------------------------------
// Discretization

namespace {

OpSets two_op_sets() {
  OpSets s;
  s.sets[0] = {OpKind::AvgPool2, OpKind::MaxPool2};
  s.sets[1] = {OpKind::Identity, OpKind::Conv1};
  s.sets[2] = {OpKind::ConvT2, OpKind::SepConvT2};
  return s;
}

ArchLogits random_logits(const GridSpec& g, const OpSets& sets, Rng& rng, double scale = 3.0) {
  ArchLogits out;
  out.steps = g.steps;
  for (int t = 0; t < 3; ++t) {
    const auto type = static_cast<CellType>(t);
    for (const auto& e : cell_edges(type, g.steps)) {
      std::vector<double> a(sets.for_edge(type, e.cls).size());
      for (double& v : a) v = rng.uniform(-scale, scale);
      out.alpha[t].push_back(a);
    }
  }
  const Topology topo(g);
  for (Node n : topo.nodes()) {
    out.mask[n] = topo.mask(n);
    out.beta[n] = {rng.uniform(-scale, scale), rng.uniform(-scale, scale),
                   rng.uniform(-scale, scale)};
  }
  return out;
}

ArchLogits transform(ArchLogits l, double mul, double add) {
  for (auto& per_type : l.alpha)
    for (auto& edge : per_type)
      for (double& v : edge) v = v * mul + add;
  for (auto& [n, b] : l.beta)
    for (double& v : b) v = v * mul + add;
  return l;
}

}  // namespace

TEST(Weave, DiscretizeMatchesBruteForceOracle) {
  const GridSpec g = small_grid(4, 7, 4, 2);
  const OpSets sets = two_op_sets();
  Rng rng(20);
  for (int trial = 0; trial < 1000; ++trial) {
    const ArchLogits logits = random_logits(g, sets, rng);
    const Genotype geno = discretize(logits, sets, g);
    for (int t = 0; t < 3; ++t) {
      const auto type = static_cast<CellType>(t);
      const auto specs = cell_edges(type, g.steps);
      // Oracle: raw-logit argmax per edge; per target, the pair of incoming
      // edges with the largest summed winning probability.
      std::vector<std::size_t> keep;
      std::vector<double> strength(specs.size());
      std::vector<OpKind> op(specs.size());
      for (std::size_t e = 0; e < specs.size(); ++e) {
        const auto& a = logits.alpha[t][e];
        const auto best = std::max_element(a.begin(), a.end()) - a.begin();
        op[e] = sets.for_edge(type, specs[e].cls)[best];
        double z = 0.0;
        for (double v : a) z += std::exp(v - a[best]);
        strength[e] = 1.0 / z;
      }
      for (int j = 0; j < g.steps; ++j) {
        std::vector<std::size_t> in;
        for (std::size_t e = 0; e < specs.size(); ++e)
          if (specs[e].target == j) in.push_back(e);
        std::pair<std::size_t, std::size_t> bestpair{in[0], in[1]};
        for (std::size_t a = 0; a < in.size(); ++a)
          for (std::size_t b = a + 1; b < in.size(); ++b)
            if (strength[in[a]] + strength[in[b]] >
                strength[bestpair.first] + strength[bestpair.second])
              bestpair = {in[a], in[b]};
        keep.push_back(bestpair.first);
        keep.push_back(bestpair.second);
      }
      ASSERT_EQ(geno.cells[t].size(), keep.size());
      for (std::size_t i = 0; i < keep.size(); ++i) {
        EXPECT_EQ(geno.cells[t][i].source, specs[keep[i]].source);
        EXPECT_EQ(geno.cells[t][i].target, specs[keep[i]].target);
        EXPECT_EQ(geno.cells[t][i].op, op[keep[i]]);
      }
    }
    for (const auto& [n, m] : logits.mask) {
      int best = -1;
      for (int b = 0; b < 3; ++b)
        if (m[b] && (best < 0 || logits.beta.at(n)[b] > logits.beta.at(n)[best])) best = b;
      EXPECT_EQ(static_cast<int>(geno.branches.at(n)), best) << n.str();
    }
  }
}

TEST(Weave, DiscretizeIsShiftAndTemperatureInvariant) {
  const GridSpec g = small_grid(5, 8, 4, 4);
  const OpSets sets = OpSets::full();
  Rng rng(21);
  for (int trial = 0; trial < 200; ++trial) {
    const ArchLogits l = random_logits(g, sets, rng);
    const Genotype base = discretize(l, sets, g);
    EXPECT_EQ(discretize(transform(l, 1.0, rng.uniform(-50, 50)), sets, g), base);
    // Temperature keeps every argmax. The top-2 edge ranking compares
    // winning probabilities across edges, which temperature can reorder, so
    // it is checked on the full edge set.
    const double temp = rng.uniform(0.1, 10);
    const Genotype all = discretize(l, sets, g, EdgeMode::AllEdges);
    const Genotype scaled = discretize(transform(l, temp, 0.0), sets, g, EdgeMode::AllEdges);
    EXPECT_EQ(scaled, all);
    EXPECT_EQ(discretize(transform(l, temp, 0.0), sets, g).branches, base.branches);
    EXPECT_EQ(all.cells[1].size(), 14u);
  }
}

TEST(Weave, DiscretizeOneHotAndTies) {
  const GridSpec g = small_grid(3, 5, 4, 4);
  const OpSets sets = OpSets::full();
  Rng rng(22);
  ArchLogits l = random_logits(g, sets, rng);
  std::array<std::vector<int>, 3> hot;
  for (int t = 0; t < 3; ++t)
    for (auto& edge : l.alpha[t]) {
      const int h = static_cast<int>(rng.index(edge.size()));
      std::fill(edge.begin(), edge.end(), 0.0);
      edge[h] = 1.0;
      hot[t].push_back(h);
    }
  const Genotype geno = discretize(l, sets, g, EdgeMode::AllEdges);
  for (int t = 0; t < 3; ++t) {
    const auto type = static_cast<CellType>(t);
    const auto specs = cell_edges(type, 4);
    ASSERT_EQ(geno.cells[t].size(), specs.size());
    for (std::size_t e = 0; e < specs.size(); ++e) {
      EXPECT_EQ(geno.cells[t][e].op, sets.for_edge(type, specs[e].cls)[hot[t][e]]);
    }
  }
  // All-zero logits: first op, first two edges, first feasible branch.
  const Genotype tie = discretize(transform(l, 0.0, 0.0), sets, g);
  for (int t = 0; t < 3; ++t) {
    const auto type = static_cast<CellType>(t);
    const auto specs = cell_edges(type, 4);
    for (const auto& e : tie.cells[t]) {
      EXPECT_LT(e.source, 2);
      const auto cls = specs[std::find_if(specs.begin(), specs.end(), [&](const CellEdge& c) {
                         return c.source == e.source && c.target == e.target;
                       }) - specs.begin()].cls;
      EXPECT_EQ(e.op, sets.for_edge(type, cls).front());
    }
  }
  for (const auto& [n, b] : tie.branches) {
    const BranchSet m = l.mask.at(n);
    const int first = m[0] ? 0 : m[1] ? 1 : 2;
    EXPECT_EQ(static_cast<int>(b), first);
  }
}

// ---------------------------------------------------------------------------
// Counting

namespace {

// Counts assignments one by one: every normal edge picks from sizes[0], the
// special edges of exactly one cell kind pick from that kind's set.
std::uint64_t enumerate_space(int normal_edges, int special_edges, const std::array<int, 4>& sizes) {
  std::uint64_t count = 0;
  for (int kind = 1; kind <= 3; ++kind) {
    std::vector<int> radix(normal_edges, sizes[0]);
    radix.insert(radix.end(), special_edges, sizes[kind]);
    std::vector<int> digit(radix.size(), 0);
    while (true) {
      ++count;
      std::size_t i = 0;
      while (i < digit.size() && ++digit[i] == radix[i]) digit[i++] = 0;
      if (i == digit.size()) break;
    }
  }
  return count;
}

}  // namespace

TEST(Weave, CountExamples) {
  using boost::multiprecision::cpp_int;
  EXPECT_EQ(count_cell_space(10, 4, {7, 6, 4, 7}), cpp_int("1116624659297"));
  EXPECT_EQ(count_cell_space(0, 1, {1, 1, 1, 1}), 3);
  EXPECT_EQ(count_cell_space(1, 0, {5, 1, 1, 1}), 15);
  // Exact far beyond 64 bits.
  EXPECT_EQ(count_cell_space(40, 0, {7, 1, 1, 1}), 3 * boost::multiprecision::pow(cpp_int(7), 40));
  expect_throws_code([] { count_cell_space(-1, 1, {1, 1, 1, 1}); }, Errc::InvalidQuery);
  expect_throws_code([] { count_cell_space(1, 1, {0, 1, 1, 1}); }, Errc::InvalidQuery);
}

TEST(Weave, CountMatchesNaiveEnumeration) {
  Rng rng(23);
  int checked = 0;
  while (checked < 200) {
    const int ne = static_cast<int>(rng.index(7));
    const int se = static_cast<int>(rng.index(5));
    std::array<int, 4> sizes{};
    for (int& s : sizes) s = 1 + static_cast<int>(rng.index(7));
    const auto exact = count_cell_space(ne, se, sizes);
    if (exact > 1000000) continue;
    EXPECT_EQ(exact, enumerate_space(ne, se, sizes)) << ne << " " << se;
    ++checked;
  }
}

// ---------------------------------------------------------------------------
// Realization

TEST(Weave, RealizedNetworkReproducesOneHotSupernet) {
  for (std::uint64_t seed : {30u, 31u, 32u}) {
    const GridSpec g = small_grid(2, 4, 4, 4);
    const OpSets sets = OpSets::full();
    Rng rng(seed);
    const WeaveNet super = build_supernet(g, sets, rng);
    ArchLogits l = super.arch_logits();
    for (int t = 0; t < 3; ++t)
      for (auto& edge : l.alpha[t]) {
        std::fill(edge.begin(), edge.end(), -1000.0);
        edge[rng.index(edge.size())] = 1000.0;
      }
    for (auto& [n, b] : l.beta) {
      std::vector<int> feasible;
      for (int i = 0; i < 3; ++i)
        if (l.mask.at(n)[i]) feasible.push_back(i);
      b = {-1000.0, -1000.0, -1000.0};
      b[feasible[rng.index(feasible.size())]] = 1000.0;
    }
    // Push the one-hot logits into the supernet.
    for (int t = 0; t < 3; ++t)
      for (std::size_t e = 0; e < l.alpha[t].size(); ++e)
        super.alpha(static_cast<CellType>(t), static_cast<int>(e))->value =
            Tensor({1, static_cast<int>(l.alpha[t][e].size()), 1, 1}, l.alpha[t][e]);
    for (const auto& [n, b] : l.beta)
      super.beta(n)->value = Tensor({1, 3, 1, 1}, std::vector<double>(b.begin(), b.end()));

    const Genotype geno = discretize(l, sets, g, EdgeMode::AllEdges);
    Rng rng2(seed + 100);
    WeaveNet real = realize(geno, rng2);
    EXPECT_GT(copy_parameters(super, real), 0u);
    EXPECT_LT(real.parameter_count(), super.parameter_count());

    const Tensor x = random_tensor({2, 1, 8, 8}, seed);
    Tape t1, t2;
    const auto a = super.forward(t1, t1.constant(x));
    const auto b = real.forward(t2, t2.constant(x));
    ASSERT_EQ(a.size(), b.size());
    for (std::size_t i = 0; i < a.size(); ++i) {
      EXPECT_LE(max_abs_diff(a[i].value(), b[i].value()), 1e-9) << "seed " << seed << " head " << i;
    }
  }
}

TEST(Weave, RealizedParametersAreDeterministicAndSmaller) {
  const GridSpec g = small_grid(5, 8, 4, 4);
  const OpSets sets = OpSets::full();
  Rng rng(40);
  const WeaveNet super = build_supernet(g, sets, rng);
  Rng lr(41);
  const Genotype geno = discretize(random_logits(g, sets, lr), sets, g);
  Rng r1(7), r2(7);
  const WeaveNet a = realize(geno, r1);
  const WeaveNet b = realize(geno, r2);
  EXPECT_FALSE(a.relaxed());
  EXPECT_EQ(a.parameters(ParamGroup::Alpha).size(), 0u);
  EXPECT_EQ(a.parameters(ParamGroup::Beta).size(), 0u);
  const auto pa = a.parameters(), pb = b.parameters();
  ASSERT_EQ(pa.size(), pb.size());
  for (std::size_t i = 0; i < pa.size(); ++i) EXPECT_EQ(pa[i]->value.vec(), pb[i]->value.vec());
  EXPECT_LT(a.parameter_count(), super.parameter_count());
  // Wider channels from the grid argument.
  GridSpec wide = g;
  wide.base_channels = 8;
  Rng r3(7);
  EXPECT_GT(realize(geno, wide, r3).parameter_count(), a.parameter_count());
  Tape t;
  const auto heads = a.forward(t, t.constant(random_tensor({1, 1, 16, 16}, 3)));
  EXPECT_EQ(heads.back().shape(), (Shape{1, 2, 16, 16}));
}

TEST(Weave, RealizeRejectsIncompatibleGenotypes) {
  const GridSpec g = small_grid(3, 5, 4, 4);
  const OpSets sets = OpSets::full();
  Rng lr(42);
  const Genotype geno = discretize(random_logits(g, sets, lr), sets, g);
  Rng rng(1);
  GridSpec other = g;
  other.layers = 6;
  expect_throws_code([&] { realize(geno, other, rng); }, Errc::IncompatibleGenotype);

  Genotype wrong_op = geno;
  wrong_op.cells[0][0].op = OpKind::ConvT2;
  expect_throws_code([&] { realize(wrong_op, rng); }, Errc::IncompatibleGenotype);

  Genotype bad_edge = geno;
  bad_edge.cells[0][0].source = 9;
  expect_throws_code([&] { realize(bad_edge, rng); }, Errc::IncompatibleGenotype);

  Genotype dup = geno;
  dup.cells[0].push_back(dup.cells[0][0]);
  expect_throws_code([&] { realize(dup, rng); }, Errc::IncompatibleGenotype);

  Genotype infeasible = geno;
  infeasible.branches[{1, 1}] = Branch::Normal;
  expect_throws_code([&] { realize(infeasible, rng); }, Errc::IncompatibleGenotype);

  Genotype missing = geno;
  missing.branches.erase({1, 3});
  expect_throws_code([&] { realize(missing, rng); }, Errc::IncompatibleGenotype);
}
