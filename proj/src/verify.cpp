#include "mixsearch/verify.hpp"

#include <algorithm>
#include <string>

#include "mixsearch/autodiff.hpp"
#include "mixsearch/ops.hpp"
#include "mixsearch/tasks.hpp"
#include "mixsearch/weave.hpp"

namespace mixsearch::verify {

namespace {

Tensor random_tensor(Shape s, std::uint64_t seed, double lo = -1.0, double hi = 1.0) {
  Rng rng(seed);
  Tensor t(s);
  for (double& v : t.values()) v = rng.uniform(lo, hi);
  return t;
}

// Contracts y with a fixed random tensor so every entry gets its own weight.
Var project(Tape& t, Var y, std::uint64_t seed) {
  return ad::sum(ad::mul(y, t.constant(random_tensor(y.shape(), seed))));
}

Var project_heads(Tape& t, const std::vector<Var>& heads) {
  Var total = project(t, heads[0], 500);
  for (std::size_t i = 1; i < heads.size(); ++i) total = ad::add(total, project(t, heads[i], 500 + i));
  return total;
}

// Zero-initialized affine shifts and gate biases are moved off their
// symmetric start so their gradients are exercised.
void perturb_biases(const std::vector<ParamPtr>& params, Rng& rng) {
  for (const auto& p : params) {
    const std::string& n = p->name();
    if (n.ends_with("gn_beta") || n.ends_with("se_b1") || n.ends_with("se_b2")) {
      for (double& v : p->value.values()) v = rng.uniform(-0.5, 0.5);
    }
  }
}

}  // namespace

std::vector<GradRow> op_gradcheck(double tolerance) {
  std::vector<GradRow> rows;
  const Tensor x = random_tensor({2, 4, 8, 8}, 31);
  for (ops::OpKind k : ops::kAllOps) {
    Rng rng(21);
    const auto op = ops::instantiate(k, 4, 4, rng);
    perturb_biases(op.parameters(), rng);
    GradRow row{.name = std::string(ops::op_name(k)), .tolerance = tolerance};
    row.input_error = finite_diff_check([&](Tape& t, Var v) { return project(t, op.apply(t, v), 99); }, x);
    for (const auto& p : op.parameters()) {
      row.param_error = std::max(
          row.param_error,
          finite_diff_check_param([&](Tape& t) { return project(t, op.apply(t, t.constant(x)), 99); }, *p));
    }
    rows.push_back(row);
  }
  return rows;
}

GradRow cell_gradcheck(double tolerance) {
  Rng rng(12);
  const auto normal_ops = ops::candidate_set(ops::CellType::Normal, ops::EdgeClass::Normal);
  const auto edges = weave::cell_edges(ops::CellType::Normal, 2);
  const std::vector<std::vector<ops::OpKind>> edge_ops(edges.size(), normal_ops);
  const weave::Cell cell("cell", ops::CellType::Normal, 4, {4, 4}, {0, 0}, 2, edge_ops, rng);
  perturb_biases(cell.parameters(), rng);
  const int k = static_cast<int>(normal_ops.size());
  std::vector<ParamPtr> alpha;
  for (std::size_t e = 0; e < edges.size(); ++e) {
    alpha.push_back(make_param("alpha.e" + std::to_string(e), random_tensor({1, k, 1, 1}, 40 + e),
                               ParamGroup::Alpha));
  }
  const Tensor in0 = random_tensor({2, 4, 8, 8}, 13), in1 = random_tensor({2, 4, 8, 8}, 14);
  auto run = [&](Tape& t, Var a, Var b) {
    std::vector<Var> w;
    for (const auto& p : alpha) w.push_back(ad::softmax_channels(t.leaf(p)));
    return project(t, cell.forward(t, a, b, &w), 77);
  };
  auto fn = [&](Tape& t) { return run(t, t.constant(in0), t.constant(in1)); };

  GradRow row{.name = "relaxed_cell", .tolerance = tolerance};
  row.input_error = std::max(finite_diff_check([&](Tape& t, Var v) { return run(t, v, t.constant(in1)); }, in0),
                             finite_diff_check([&](Tape& t, Var v) { return run(t, t.constant(in0), v); }, in1));
  for (const auto& p : alpha) row.param_error = std::max(row.param_error, finite_diff_check_param(fn, *p));
  for (const auto& p : cell.parameters()) row.param_error = std::max(row.param_error, finite_diff_check_param(fn, *p));
  return row;
}

GradRow grid_gradcheck(double tolerance) {
  weave::GridSpec grid{.depth = 3, .layers = 6, .base_channels = 4, .steps = 2, .in_channels = 4};
  Rng rng(15);
  const weave::WeaveNet net = weave::build_supernet(grid, weave::OpSets::full(), rng);
  Rng perturb(16);
  for (ParamGroup g : {ParamGroup::Alpha, ParamGroup::Beta})
    for (const auto& p : net.parameters(g))
      for (double& v : p->value.values()) v = perturb.uniform(-1.0, 1.0);
  const Tensor x = random_tensor({2, 4, 8, 8}, 17);
  auto fn = [&](Tape& t) { return project_heads(t, net.forward(t, t.constant(x))); };

  GradRow row{.name = "relaxed_grid", .tolerance = tolerance};
  row.input_error = finite_diff_check([&](Tape& t, Var v) { return project_heads(t, net.forward(t, v)); }, x);
  std::vector<ParamPtr> checked = net.parameters(ParamGroup::Alpha);
  for (const auto& p : net.parameters(ParamGroup::Beta)) checked.push_back(p);
  // The stem feeds every node, so its weights see every path.
  for (const auto& p : net.parameters(ParamGroup::Weight))
    if (p->name().starts_with("stem")) checked.push_back(p);
  for (const auto& p : checked) row.param_error = std::max(row.param_error, finite_diff_check_param(fn, *p));
  return row;
}

GradRow loss_gradcheck(double tolerance) {
  const Shape s{2, 4, 8, 8};
  Tensor target = random_tensor(s, 7, 0.0, 1.0);
  for (int n = 0; n < s.n; ++n)
    for (int y = 0; y < s.h; ++y)
      for (int x = 0; x < s.w; ++x) {
        double z = 0.0;
        for (int c = 0; c < s.c; ++c) z += target.at(n, c, y, x);
        for (int c = 0; c < s.c; ++c) target.at(n, c, y, x) /= z;
      }
  const tasks::LossConfig cfg{.ce_weight = 0.7, .dice_weight = 1.3, .deep_supervision = true};
  GradRow row{.name = "seg_loss", .tolerance = tolerance};
  row.input_error = finite_diff_check(
      [&](Tape& t, Var v) {
        const std::vector<Var> heads{ad::scale(v, 0.5), v};
        return tasks::seg_loss(t, heads, target, cfg);
      },
      random_tensor(s, 8, -3.0, 3.0));
  return row;
}

}  // namespace mixsearch::verify
