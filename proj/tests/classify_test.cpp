#include <gtest/gtest.h>

#include <algorithm>
#include <map>

#include "deepgrade/classify/features.hpp"
#include "deepgrade/classify/gcn.hpp"
#include "deepgrade/classify/oversample.hpp"
#include "deepgrade/classify/svm.hpp"
#include "test_util.hpp"

using namespace deepgrade;
using namespace deepgrade::classify;

namespace {

grading::StructureGradingVector gv(std::vector<double> scores, double age) {
  grading::StructureGradingVector g;
  g.scores = std::move(scores);
  g.age = age;
  return g;
}

// Two well separated classes: class c has scores around (2c - 1) * 0.8.
void separable_graphs(Rng& rng, std::size_t per_class, std::vector<StructureGraph>& g, std::vector<int>& cls) {
  for (int c = 0; c < 2; ++c)
    for (std::size_t i = 0; i < per_class; ++i) {
      std::vector<double> s(6);
      for (auto& v : s) v = (2 * c - 1) * 0.8 + rng.uniform(-0.1, 0.1);
      g.push_back(build_graph(gv(s, rng.uniform(60, 80))));
      cls.push_back(c);
    }
}

}  // namespace

TEST(BuildGraph, AgeNormalization) {
  EXPECT_DOUBLE_EQ(build_graph(gv({0.1, 0.2}, 40)).features[1], 0.0);
  EXPECT_DOUBLE_EQ(build_graph(gv({0.1, 0.2}, 100)).features[1], 1.0);
  EXPECT_DOUBLE_EQ(build_graph(gv({0.1, 0.2}, 70)).features[1], 0.5);
  EXPECT_DOUBLE_EQ(build_graph(gv({0.1, 0.2}, 20)).features[1], 0.0);
  const auto g = build_graph(gv({0.1, 0.2, 0.3}, 70));
  EXPECT_EQ(g.nodes, 3u);
  EXPECT_EQ(g.features, (std::vector<double>{0.1, 0.5, 0.2, 0.5, 0.3, 0.5}));
}

TEST(BuildGraph, SingleNodeRejected) { EXPECT_THROW(build_graph(gv({0.1}, 70)), ValidationError); }

TEST(GcnModel, ZeroWeightsGiveUniformOutput) {
  GCNModel<double> m(2, 3, {}, 1);
  for (auto& v : m.params().vars())
    for (auto& x : v.mutable_value()) x = 0.0;
  const auto p = gcn_forward(m, build_graph(gv({0.3, -0.2, 0.9}, 65)));
  for (double v : p) EXPECT_NEAR(v, 1.0 / 3.0, 1e-12);
}

TEST(GcnModel, NodePermutationInvariant) {
  GCNModel<double> m(2, 3, {}, 7);
  Rng rng(3);
  for (int t = 0; t < 10; ++t) {
    auto s = testutil::random_vector(rng, 8);
    const auto a = gcn_forward(m, build_graph(gv(s, 70)));
    rng.shuffle(std::span<double>(s));
    const auto b = gcn_forward(m, build_graph(gv(s, 70)));
    for (std::size_t c = 0; c < 3; ++c) EXPECT_NEAR(a[c], b[c], 1e-12);
  }
}

TEST(GcnModel, OutputOnSimplex) {
  GCNModel<float> m(2, 3, {}, 11);
  Rng rng(5);
  for (int t = 0; t < 20; ++t) {
    const auto p = gcn_forward(m, build_graph(gv(testutil::random_vector(rng, 12), rng.uniform(40, 100))));
    double sum = 0;
    for (double v : p) {
      EXPECT_GE(v, 0.0);
      sum += v;
    }
    EXPECT_NEAR(sum, 1.0, 1e-6);
  }
}

TEST(GcnModel, WrongFeatureWidthRejected) {
  GCNModel<double> m(2, 2, {}, 1);
  EXPECT_THROW(m.logits(nn::Var<double>::constant({1, 2, 3}, std::vector<double>(6))), ShapeError);
}

TEST(Oversample, BalancesToMajority) {
  const std::vector<int> a{0, 0, 0, 0, 1, 1};
  auto idx = oversample_indices(a, 1);
  std::map<int, int> count;
  for (auto i : idx) ++count[a[i]];
  EXPECT_EQ(count[0], 4);
  EXPECT_EQ(count[1], 4);
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(idx[i], i);

  const std::vector<int> b{0, 0, 0, 1, 2, 2};
  idx = oversample_indices(b, 2);
  count.clear();
  for (auto i : idx) ++count[b[i]];
  EXPECT_EQ(count[0], 3);
  EXPECT_EQ(count[1], 3);
  EXPECT_EQ(count[2], 3);
  EXPECT_EQ(oversample_indices(b, 2), idx);
}

TEST(Oversample, EmptyRejected) { EXPECT_THROW(oversample_indices({}, 1), ValidationError); }

TEST(TrainGcn, SeparableReachesPerfectValidation) {
  Rng rng(8);
  std::vector<StructureGraph> tg, vg;
  std::vector<int> tc, vc;
  separable_graphs(rng, 12, tg, tc);
  separable_graphs(rng, 4, vg, vc);
  GCNConfig cfg;
  cfg.epochs = 150;
  cfg.learning_rate = 1e-2;
  GCNHistory h;
  const auto m = train_gcn(tg, tc, vg, vc, 2, cfg, 3, &h);
  EXPECT_EQ(h.val_bacc[h.best_epoch - 1], 1.0);
  EXPECT_LT(h.train_loss.back(), h.train_loss.front());
  for (std::size_t i = 0; i < vg.size(); ++i) EXPECT_EQ(eval::argmax(gcn_forward(m, vg[i])), vc[i]);
}

TEST(TrainGcn, Deterministic) {
  Rng rng(9);
  std::vector<StructureGraph> tg, vg;
  std::vector<int> tc, vc;
  separable_graphs(rng, 5, tg, tc);
  separable_graphs(rng, 2, vg, vc);
  GCNConfig cfg;
  cfg.epochs = 10;
  const auto a = train_gcn(tg, tc, vg, vc, 2, cfg, 4);
  const auto b = train_gcn(tg, tc, vg, vc, 2, cfg, 4);
  EXPECT_EQ(nn::encode_checkpoint(a.params().to_arrays()), nn::encode_checkpoint(b.params().to_arrays()));
}

TEST(TrainGcn, SingleClassRejected) {
  std::vector<StructureGraph> g{build_graph(gv({0, 0}, 60)), build_graph(gv({1, 1}, 60))};
  const std::vector<int> c{0, 0};
  EXPECT_THROW(train_gcn(g, c, g, c, 2, {}, 1), ValidationError);
}

TEST(VolumeFeatures, Percentages) {
  const LabelMap3D one({2, 1, 1}, {}, std::vector<std::uint16_t>{1, 0});
  EXPECT_EQ(compute_volume_features(one, 1), (std::vector<double>{100.0}));
  LabelMap3D two({10, 1, 1});
  for (int i = 0; i < 3; ++i) two[i] = 1;
  for (int i = 3; i < 10; ++i) two[i] = 2;
  const auto f = compute_volume_features(two, 2);
  EXPECT_NEAR(f[0], 30.0, 1e-12);
  EXPECT_NEAR(f[1], 70.0, 1e-12);
  EXPECT_THROW(compute_volume_features(LabelMap3D({2, 1, 1}), 2), DegenerateInputError);
}

TEST(Svm, TwoPointLinear) {
  const Matrix x{{1.0}, {-1.0}};
  const std::vector<int> y{1, -1};
  const auto m = train_svm_binary(x, y, {KernelType::Linear}, 10.0, {1.0, 1.0}, {1e-9, 1000});
  EXPECT_NEAR(m.decision(std::vector<double>{1.0}), 1.0, 1e-6);
  EXPECT_NEAR(m.decision(std::vector<double>{-1.0}), -1.0, 1e-6);
  EXPECT_NEAR(m.decision(std::vector<double>{0.0}), 0.0, 1e-6);
}

TEST(Svm, BalancedWeights) {
  const std::vector<int> cls{0, 0, 0, 0, 1, 1, 1, 1, 1, 1, 1, 1, 1, 1, 1, 1, 1, 1, 1, 1};
  const auto w = balanced_weights(cls, 2);
  EXPECT_DOUBLE_EQ(w[0], 2.5);
  EXPECT_DOUBLE_EQ(w[1], 0.625);
  EXPECT_EQ(balanced_weight_exact(20, 2, 4), (Rational{5, 2}));
  EXPECT_EQ(balanced_weight_exact(20, 2, 16), (Rational{5, 8}));
  EXPECT_THROW(balanced_weight_exact(20, 2, 0), ValidationError);
}

TEST(Svm, CGridEndpointsAndSpacing) {
  const auto g = c_grid();
  ASSERT_EQ(g.size(), 500u);
  EXPECT_EQ(g.front(), 1e-5);
  EXPECT_EQ(g.back(), 1e5);
  for (std::size_t i = 1; i < 499; ++i) EXPECT_NEAR(std::log10(g[i]), -5.0 + 10.0 * i / 499.0, 1e-12);
}

TEST(Svm, GridSearchSeparable) {
  Rng rng(12);
  Matrix tx, vx;
  std::vector<int> tc, vc;
  for (int c = 0; c < 3; ++c) {
    for (int i = 0; i < 8; ++i) {
      std::vector<double> r(4, 0.0);
      r[static_cast<std::size_t>(c)] = 5.0 + rng.uniform(-0.5, 0.5);
      r[3] = rng.uniform(-0.5, 0.5);
      (i < 6 ? tx : vx).push_back(r);
      (i < 6 ? tc : vc).push_back(c);
    }
  }
  SVMSearchConfig cfg;
  cfg.c_points = 11;
  const auto r = grid_search_svm(tx, tc, vx, vc, 3, cfg);
  EXPECT_EQ(r.val_bacc, 1.0);
  EXPECT_EQ(r.cells.size(), 33u);
  for (std::size_t i = 0; i < vx.size(); ++i) EXPECT_EQ(eval::argmax(svm_predict_proba(r.model, vx[i])), vc[i]);
  const auto back = svm_model_from_json(to_json(r.model));
  EXPECT_EQ(to_json(back), to_json(r.model));
}

TEST(Svm, ProbabilitiesSumAndSymmetry) {
  SVMModel m;
  m.classes = 2;
  m.standardizer = {{0.0}, {1.0}};
  for (int c = 0; c < 2; ++c) {
    BinaryMachine b;
    b.support = {{1.0}};
    b.coef = {c == 0 ? -1.0 : 1.0};
    b.platt = {-2.0, 0.0};
    m.machines.push_back(b);
  }
  const auto p0 = svm_predict_proba(m, std::vector<double>{0.0});
  EXPECT_NEAR(p0[0], 0.5, 1e-12);
  double prev = 0.0;
  for (double x = -2; x <= 2; x += 0.5) {
    const auto p = svm_predict_proba(m, std::vector<double>{x});
    EXPECT_NEAR(p[0] + p[1], 1.0, 1e-12);
    EXPECT_GE(p[1], prev);
    prev = p[1];
    const auto q = svm_predict_proba(m, std::vector<double>{-x});
    EXPECT_NEAR(p[1], q[0], 1e-12);
  }
}

TEST(Svm, PlattOrdersScores) {
  const std::vector<double> f{-2, -1, -0.5, 0.5, 1, 2};
  const std::vector<int> pos{0, 0, 0, 1, 1, 1};
  const auto p = fit_platt(f, pos);
  EXPECT_LT(p.a, 0.0);
  EXPECT_GT(p(2.0), 0.5);
  EXPECT_LT(p(-2.0), 0.5);
}

TEST(Smo, KktAndMonotoneDual) {
  Rng rng(21);
  for (int t = 0; t < 10; ++t) {
    const std::size_t n = 20;
    Matrix x;
    std::vector<int> y;
    for (std::size_t i = 0; i < n; ++i) {
      x.push_back(testutil::random_vector(rng, 3));
      y.push_back(i % 2 ? 1 : -1);
    }
    const Kernel k{KernelType::Gaussian, 0.7};
    const auto K = kernel_matrix(x, k);
    const std::vector<double> upper(n, 2.0);
    const auto r = solve_smo(K, y, upper, {1e-6, 100000}, true);
    EXPECT_LT(r.kkt_gap, 1e-6);
    double eq = 0;
    for (std::size_t i = 0; i < n; ++i) {
      EXPECT_GE(r.alpha[i], 0.0);
      EXPECT_LE(r.alpha[i], 2.0);
      eq += y[i] * r.alpha[i];
    }
    EXPECT_NEAR(eq, 0.0, 1e-9);
    for (std::size_t i = 1; i < r.objective.size(); ++i) EXPECT_GE(r.objective[i], r.objective[i - 1] - 1e-12);
    EXPECT_NEAR(r.objective.back(), dual_objective(K, y, r.alpha), 1e-9);
  }
}

TEST(Smo, OneLabelRejected) {
  const Matrix K{{1, 0}, {0, 1}};
  const std::vector<int> y{1, 1};
  const std::vector<double> u{1, 1};
  EXPECT_THROW(solve_smo(K, y, u), ValidationError);
}

TEST(Smo, IterationCapIsConvergenceError) {
  Rng rng(2);
  Matrix x;
  std::vector<int> y;
  for (int i = 0; i < 30; ++i) {
    x.push_back(testutil::random_vector(rng, 2));
    y.push_back(i % 2 ? 1 : -1);
  }
  const std::vector<double> u(30, 100.0);
  EXPECT_THROW(solve_smo(kernel_matrix(x, {KernelType::Gaussian, 1.0}), y, u, {1e-12, 2}), ConvergenceError);
}
