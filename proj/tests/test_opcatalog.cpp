#include <gtest/gtest.h>

#include <set>

#include "mixsearch/ops.hpp"
#include "test_util.hpp"

using namespace mixsearch;
using namespace mixsearch::ops;
using namespace mixsearch::testing;

namespace {

Shape expected_shape(OpKind kind, Shape in, int c_out) {
  Shape s{in.n, c_out, in.h, in.w};
  if (stride_class(kind) == StrideClass::Down) {
    s.h /= 2;
    s.w /= 2;
  } else if (stride_class(kind) == StrideClass::Up) {
    s.h *= 2;
    s.w *= 2;
  }
  return s;
}

Tensor run(const OpInstance& op, const Tensor& x) {
  Tape t;
  return op.apply(t, t.constant(x)).value();
}

}  // namespace

TEST(OpCatalog, NamesRoundTripAndAreUnique) {
  std::set<std::string_view> names;
  for (OpKind k : kAllOps) {
    names.insert(op_name(k));
    EXPECT_EQ(op_from_name(op_name(k)), k);
  }
  EXPECT_EQ(names.size(), 16u);
  EXPECT_EQ(op_name(OpKind::AtrousConvT2), "atrous_convt_2");
  EXPECT_EQ(op_name(OpKind::ShuffleConv1), "shuffle_conv_1");
  expect_throws_code([] { op_from_name("zero"); }, Errc::InvalidConfig);
}

TEST(OpCatalog, CandidateSetsFollowTheCatalogTable) {
  const auto down = candidate_set(CellType::Down, EdgeClass::Special);
  const auto up = candidate_set(CellType::Up, EdgeClass::Special);
  const auto normal = candidate_set(CellType::Normal, EdgeClass::Normal);
  EXPECT_EQ(down, (std::vector<OpKind>{OpKind::AvgPool2, OpKind::MaxPool2, OpKind::Conv2,
                                       OpKind::AtrousConv2, OpKind::SepConv2, OpKind::AttConv2}));
  EXPECT_EQ(up, (std::vector<OpKind>{OpKind::ConvT2, OpKind::AtrousConvT2, OpKind::SepConvT2,
                                     OpKind::AttConvT2}));
  EXPECT_EQ(normal, (std::vector<OpKind>{OpKind::Identity, OpKind::AttIdentity, OpKind::Conv1,
                                         OpKind::AtrousConv1, OpKind::SepConv1,
                                         OpKind::ShuffleConv1}));
  // Non-special edges of resolution-changing cells draw from the Normal-ops.
  EXPECT_EQ(candidate_set(CellType::Down, EdgeClass::Normal), normal);
  EXPECT_EQ(candidate_set(CellType::Up, EdgeClass::Normal), normal);
  expect_throws_code([] { candidate_set(CellType::Normal, EdgeClass::Special); },
                     Errc::InvalidQuery);

  // Every kind lands in exactly one set.
  std::multiset<OpKind> all(down.begin(), down.end());
  all.insert(up.begin(), up.end());
  all.insert(normal.begin(), normal.end());
  for (OpKind k : kAllOps) EXPECT_EQ(all.count(k), 1u) << op_name(k);
}

TEST(OpCatalog, DefinitionalParameterShapes) {
  Rng rng(1);
  EXPECT_EQ(instantiate(OpKind::Identity, 8, 8, rng).parameter_count(), 0u);

  const auto conv = instantiate(OpKind::Conv1, 4, 4, rng);
  EXPECT_EQ(conv.find("conv")->value.shape(), (Shape{4, 4, 3, 3}));
  EXPECT_EQ(conv.find("gn_gamma")->value.shape(), (Shape{1, 4, 1, 1}));
  EXPECT_EQ(conv.find("gn_beta")->value.shape(), (Shape{1, 4, 1, 1}));
  EXPECT_EQ(conv.parameters().size(), 3u);

  const auto sep = instantiate(OpKind::SepConv2, 4, 8, rng);
  EXPECT_EQ(sep.find("conv")->value.shape(), (Shape{4, 1, 3, 3}));
  EXPECT_EQ(sep.find("pointwise")->value.shape(), (Shape{8, 4, 1, 1}));

  EXPECT_EQ(instantiate(OpKind::MaxPool2, 4, 4, rng).parameter_count(), 0u);
  EXPECT_EQ(instantiate(OpKind::AvgPool2, 4, 8, rng).find("proj")->value.shape(),
            (Shape{8, 4, 1, 1}));
  EXPECT_EQ(instantiate(OpKind::ShuffleConv1, 8, 8, rng).find("conv")->value.shape(),
            (Shape{8, 2, 3, 3}));
  EXPECT_EQ(instantiate(OpKind::ConvT2, 4, 8, rng).find("conv")->value.shape(),
            (Shape{4, 8, 3, 3}));

  const auto att = instantiate(OpKind::AttIdentity, 8, 8, rng);
  EXPECT_EQ(att.find("se_w1")->value.shape(), (Shape{2, 8, 1, 1}));
  EXPECT_EQ(att.find("se_w2")->value.shape(), (Shape{8, 2, 1, 1}));
  // Narrow widths keep at least one hidden unit.
  EXPECT_EQ(instantiate(OpKind::AttIdentity, 2, 2, rng).find("se_w1")->value.shape(),
            (Shape{1, 2, 1, 1}));
}

TEST(OpCatalog, InitializationFollowsTheDocumentedRule) {
  Rng rng(5);
  const auto op = instantiate(OpKind::AttConv2, 8, 8, rng);
  const double bound = std::sqrt(6.0 / (8 * 9));
  for (double v : op.find("conv")->value.values()) EXPECT_LE(std::abs(v), bound);
  for (double v : op.find("gn_gamma")->value.values()) EXPECT_EQ(v, 1.0);
  for (double v : op.find("gn_beta")->value.values()) EXPECT_EQ(v, 0.0);
  for (double v : op.find("se_b2")->value.values()) EXPECT_EQ(v, 0.0);
}

TEST(OpCatalog, InstantiationIsDeterministic) {
  for (OpKind k : kAllOps) {
    Rng a(77), b(77);
    const auto x = instantiate(k, 8, 8, a);
    const auto y = instantiate(k, 8, 8, b);
    ASSERT_EQ(x.parameters().size(), y.parameters().size());
    for (std::size_t i = 0; i < x.parameters().size(); ++i) {
      EXPECT_EQ(x.parameters()[i]->name(), y.parameters()[i]->name());
      EXPECT_EQ(x.parameters()[i]->value.vec(), y.parameters()[i]->value.vec());
    }
  }
}

TEST(OpCatalog, MaxPoolExample) {
  Rng rng(1);
  const auto op = instantiate(OpKind::MaxPool2, 1, 1, rng);
  const Tensor y = run(op, Tensor({1, 1, 2, 2}, {1, 2, 3, 4}));
  EXPECT_EQ(y.shape(), (Shape{1, 1, 1, 1}));
  EXPECT_EQ(y.item(), 4.0);
}

TEST(OpCatalog, IdentityIsBitIdentical) {
  Rng rng(1);
  const auto op = instantiate(OpKind::Identity, 4, 4, rng);
  const Tensor x = random_tensor({2, 4, 8, 8}, 3);
  EXPECT_EQ(run(op, x).vec(), x.vec());
}

TEST(OpCatalog, StrideContractOnEightByEight) {
  Rng rng(2);
  for (OpKind k : kAllOps) {
    const int c = 4;
    const auto op = instantiate(k, c, c, rng);
    const Tensor y = run(op, random_tensor({1, c, 8, 8}, 4));
    EXPECT_EQ(y.shape(), expected_shape(k, {1, c, 8, 8}, c)) << op_name(k);
  }
}

TEST(OpCatalog, ShapeContractFuzz) {
  Rng rng(11);
  const int widths[] = {4, 8, 12, 16};
  for (int trial = 0; trial < 64; ++trial) {
    const OpKind k = kAllOps[rng.index(kAllOps.size())];
    const int c_in = widths[rng.index(4)];
    const int c_out = (k == OpKind::Identity || k == OpKind::AttIdentity) ? c_in
                                                                          : widths[rng.index(4)];
    const Shape in{1 + static_cast<int>(rng.index(2)), c_in, 2 * (1 + static_cast<int>(rng.index(5))),
                   2 * (1 + static_cast<int>(rng.index(5)))};
    const auto op = instantiate(k, c_in, c_out, rng);
    const Tensor y = run(op, random_tensor(in, trial));
    EXPECT_EQ(y.shape(), expected_shape(k, in, c_out)) << op_name(k) << " " << in.str();
    EXPECT_TRUE(y.all_finite());
  }
}

class OpGradcheck : public ::testing::TestWithParam<OpKind> {};

TEST_P(OpGradcheck, InputAndParameterGradients) {
  const OpKind k = GetParam();
  const bool same = k == OpKind::Identity || k == OpKind::AttIdentity;
  for (int c_out : {4, 8}) {
    if (same && c_out != 4) continue;
    Rng rng(21);
    const auto op = instantiate(k, 4, c_out, rng);
    // Perturb the zero-initialized affine and gate biases so their gradients
    // are exercised away from the symmetric start.
    for (const auto& p : op.parameters()) {
      if (p->name().ends_with("gn_beta") || p->name().ends_with("se_b1") ||
          p->name().ends_with("se_b2")) {
        for (double& v : p->value.values()) v = rng.uniform(-0.5, 0.5);
      }
    }
    const Tensor x = random_tensor({2, 4, 8, 8}, 31);
    auto fn_x = [&](Tape& t, Var v) { return project(t, op.apply(t, v)); };
    EXPECT_LE(finite_diff_check(fn_x, x), 1e-4) << op_name(k) << " input, c_out=" << c_out;
    for (const auto& p : op.parameters()) {
      auto fn_p = [&](Tape& t) { return project(t, op.apply(t, t.constant(x))); };
      EXPECT_LE(finite_diff_check_param(fn_p, *p), 1e-4) << p->name();
    }
  }
}

INSTANTIATE_TEST_SUITE_P(AllKinds, OpGradcheck, ::testing::ValuesIn(kAllOps),
                         [](const auto& info) { return std::string(op_name(info.param)); });

TEST(OpCatalog, SaturatedAttentionIdentityEqualsIdentity) {
  Rng rng(3);
  const auto att = instantiate(OpKind::AttIdentity, 8, 8, rng);
  att.find("se_b2")->value.fill(60.0);
  const Tensor x = random_tensor({2, 8, 6, 6}, 5);
  EXPECT_LE(max_abs_diff(run(att, x), x), 1e-9);
}

TEST(OpCatalog, ShuffleWithOneGroupEqualsPlainConv) {
  Rng rng(4);
  OpConfig cfg = default_config(OpKind::ShuffleConv1, 8, 8);
  cfg.groups = 1;
  const auto shuffle = instantiate(OpKind::ShuffleConv1, 8, 8, rng, "s", cfg);
  const auto conv = instantiate(OpKind::Conv1, 8, 8, rng, "c");
  conv.find("conv")->value = shuffle.find("conv")->value;
  const Tensor x = random_tensor({2, 8, 8, 8}, 6);
  EXPECT_LE(max_abs_diff(run(shuffle, x), run(conv, x)), 1e-12);
}

TEST(OpCatalog, ShuffleMixesGroups) {
  // Only conv group 0 sees nonzero input; the shuffle sends its two output
  // channels to positions 0 and 4.
  Rng rng(9);
  const auto op = instantiate(OpKind::ShuffleConv1, 8, 8, rng);
  Tensor x = random_tensor({1, 8, 4, 4}, 2);
  for (int c = 2; c < 8; ++c) {
    for (double& v : x.plane(0, c)) v = 0.0;
  }
  const Tensor y = run(op, x);
  auto plane_max = [&](int c) {
    double m = 0.0;
    for (double v : y.plane(0, c)) m = std::max(m, std::abs(v));
    return m;
  };
  EXPECT_GT(plane_max(0) + plane_max(4), 0.0);
  for (int c : {1, 2, 3, 5, 6, 7}) EXPECT_EQ(plane_max(c), 0.0) << c;
}

TEST(OpCatalog, Errors) {
  Rng rng(1);
  expect_throws_code([&] { instantiate(OpKind::ShuffleConv1, 6, 6, rng); },
                     Errc::UnsupportedConfig);
  expect_throws_code([&] { instantiate(OpKind::Identity, 4, 8, rng); }, Errc::UnsupportedConfig);
  expect_throws_code([&] { instantiate(OpKind::Conv1, 0, 4, rng); }, Errc::UnsupportedConfig);
  const auto conv = instantiate(OpKind::Conv2, 4, 4, rng);
  expect_throws_code([&] { run(conv, Tensor({1, 3, 8, 8})); }, Errc::ShapeMismatch);
  expect_throws_code([&] { run(conv, Tensor({1, 4, 7, 8})); }, Errc::OddSpatialSize);
  const auto pool = instantiate(OpKind::AvgPool2, 4, 4, rng);
  expect_throws_code([&] { run(pool, Tensor({1, 4, 8, 5})); }, Errc::OddSpatialSize);
}
