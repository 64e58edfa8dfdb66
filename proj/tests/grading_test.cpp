#include <gtest/gtest.h>

#include <map>

#include "deepgrade/grading.hpp"
#include "deepgrade/phantom.hpp"
#include "test_util.hpp"

using namespace deepgrade;
using namespace deepgrade::grading;

namespace {

phantom::PhantomSpec tiny_spec() {
  phantom::PhantomSpec s;
  s.dims = {24, 28, 24};
  s.structures = 6;
  return s;
}

GradingConfig tiny_config() {
  GradingConfig c;
  c.k = 2;
  c.patch = {8, 8, 8};
  c.unet.base_channels = 2;
  c.epochs = 3;
  return c;
}

std::vector<const Subject*> ptrs(const std::vector<Subject>& v) {
  std::vector<const Subject*> p;
  for (const auto& s : v) p.push_back(&s);
  return p;
}

}  // namespace

TEST(MakeTarget, SignsFollowDiagnosis) {
  const Volume3D mask({3, 1, 1}, {}, std::vector<float>{1.f, 0.f, 1.f});
  const auto cn = make_target(Diagnosis::CN, mask);
  const auto ad = make_target(Diagnosis::AD, mask);
  const auto ftd = make_target(Diagnosis::FTD, mask);
  auto vec = [](const Volume3D& v) { return std::vector<float>(v.values().begin(), v.values().end()); };
  EXPECT_EQ(vec(cn), (std::vector<float>{-1.f, 0.f, -1.f}));
  EXPECT_EQ(vec(ad), (std::vector<float>{1.f, 0.f, 1.f}));
  EXPECT_EQ(vec(ftd), vec(ad));
}

TEST(GradingEnsemble, DefaultGridHas27Locations) {
  const GradingEnsemble ens({}, {48, 56, 48}, 1);
  EXPECT_EQ(ens.size(), 27u);
}

TEST(GradingEnsemble, PatchNotDivisibleRejected) {
  GradingConfig c;
  c.patch = {11, 16, 12};
  EXPECT_THROW(c.validate(), ValidationError);
}

TEST(GradingTraining, ToyLossDecreases) {
  const auto subs = phantom::generate_subjects(tiny_spec(), {{Diagnosis::CN, 1}, {Diagnosis::AD, 1}});
  TrainingHistory h;
  auto cfg = tiny_config();
  cfg.epochs = 8;
  train_ensemble(ptrs(subs), cfg, 3, 1, &h);
  ASSERT_EQ(h.locations.size(), 8u);
  for (const auto& l : h.locations) EXPECT_LT(l.epoch_loss.back(), l.initial_loss);
}

TEST(GradingTraining, RequiresBothGroups) {
  const auto subs = phantom::generate_subjects(tiny_spec(), {{Diagnosis::CN, 2}});
  EXPECT_THROW(train_ensemble(ptrs(subs), tiny_config(), 1), ValidationError);
}

TEST(GradingTraining, SameSeedSameWeights) {
  const auto subs = phantom::generate_subjects(tiny_spec(), {{Diagnosis::CN, 1}, {Diagnosis::FTD, 1}});
  auto cfg = tiny_config();
  cfg.epochs = 1;
  const auto a = train_ensemble(ptrs(subs), cfg, 5);
  const auto b = train_ensemble(ptrs(subs), cfg, 5);
  for (std::size_t l = 0; l < a.size(); ++l)
    EXPECT_EQ(nn::encode_checkpoint(a.model(l).params().to_arrays()),
              nn::encode_checkpoint(b.model(l).params().to_arrays()));
}

TEST(GradingInference, ZeroHeadGivesZeroMap) {
  const auto subs = phantom::generate_subjects(tiny_spec(), {{Diagnosis::AD, 1}});
  GradingEnsemble ens(tiny_config(), subs[0].volume.dims(), 1);
  for (std::size_t l = 0; l < ens.size(); ++l) ens.model(l).zero_head();
  const auto map = infer_grading_maps(ens, ptrs(subs)).front();
  for (float v : map.values()) EXPECT_EQ(v, 0.f);
}

TEST(GradingInference, MapBoundedAndZeroOutsideIcc) {
  const auto subs = phantom::generate_subjects(tiny_spec(), {{Diagnosis::CN, 1}, {Diagnosis::FTD, 1}});
  const GradingEnsemble ens(tiny_config(), subs[0].volume.dims(), 7);
  const auto maps = infer_grading_maps(ens, ptrs(subs));
  for (std::size_t n = 0; n < maps.size(); ++n) {
    EXPECT_EQ(maps[n].dims(), subs[n].volume.dims());
    for (std::size_t i = 0; i < maps[n].size(); ++i) {
      EXPECT_GE(maps[n][i], -1.f);
      EXPECT_LE(maps[n][i], 1.f);
      if (subs[n].labels[i] == 0) {
        EXPECT_EQ(maps[n][i], 0.f);
      }
    }
  }
}

// Inference equals the hand-composed pipeline: predict per location,
// assemble, upsample, mask.
TEST(GradingInference, MatchesManualComposition) {
  const auto subs = phantom::generate_subjects(tiny_spec(), {{Diagnosis::AD, 1}});
  const GradingEnsemble ens(tiny_config(), subs[0].volume.dims(), 9, {0.5, 0.25});
  const auto map = infer_grading_map(ens, subs[0].volume, subs[0].labels);
  const auto input = prepare_input(subs[0].volume, subs[0].labels, ens.norm());
  const Volume3D* in[] = {&input};
  std::vector<Volume3D> preds;
  for (std::size_t l = 0; l < ens.size(); ++l) preds.push_back(ens.predict_location(l, in).front());
  auto expected = upsample_trilinear(assemble(preds, ens.grid(), input.spacing()), subs[0].volume.dims());
  for (std::size_t i = 0; i < expected.size(); ++i)
    if (subs[0].labels[i] == 0) expected[i] = 0.f;
  EXPECT_EQ(map, expected);
}

TEST(GradingInference, WrongDimsRejected) {
  const GradingEnsemble ens(tiny_config(), {24, 28, 24}, 1);
  const Volume3D v({20, 28, 24});
  const LabelMap3D l({20, 28, 24});
  EXPECT_THROW(infer_grading_map(ens, v, l), ValidationError);
}

TEST(Aggregate, ConstantMapGivesConstantScores) {
  const auto s = phantom::generate_subject(tiny_spec(), Diagnosis::CN, 1);
  const Volume3D map(s.labels.dims(), {}, 0.25f);
  const auto g = aggregate_structure_scores(map, s.labels, 6, 70.0);
  ASSERT_EQ(g.scores.size(), 6u);
  for (double v : g.scores) EXPECT_NEAR(v, 0.25, 1e-7);
  EXPECT_EQ(g.age, 70.0);
}

TEST(Aggregate, DisjointStructures) {
  const LabelMap3D l({4, 1, 1}, {}, std::vector<std::uint16_t>{1, 1, 2, 0});
  const Volume3D m({4, 1, 1}, {}, std::vector<float>{0.5f, 1.f, -1.f, 9.f});
  const auto g = aggregate_structure_scores(m, l, 2, 0.0);
  EXPECT_DOUBLE_EQ(g.scores[0], 0.75);
  EXPECT_DOUBLE_EQ(g.scores[1], -1.0);
}

TEST(Aggregate, MissingStructureReported) {
  const LabelMap3D l({2, 1, 1}, {}, std::vector<std::uint16_t>{1, 3});
  try {
    aggregate_structure_scores(Volume3D({2, 1, 1}), l, 3, 0.0);
    FAIL() << "expected EmptyStructureError";
  } catch (const EmptyStructureError& e) {
    EXPECT_EQ(e.structure_id(), 2u);
  }
}

TEST(GroupAverage, ElementwiseMean) {
  const std::vector<Volume3D> maps{Volume3D({2, 1, 1}, {}, std::vector<float>{1.f, -1.f}),
                                   Volume3D({2, 1, 1}, {}, std::vector<float>{0.f, 0.5f})};
  const auto avg = group_average_map(maps);
  EXPECT_FLOAT_EQ(avg[0], 0.5f);
  EXPECT_FLOAT_EQ(avg[1], -0.25f);
  EXPECT_THROW(group_average_map(std::span<const Volume3D>{}), ValidationError);
}

TEST(Rank, DescendingWithIdTieBreak) {
  const std::vector<double> s{0.1, 0.5, 0.5, -0.2};
  const auto r = rank_structures(s, 3);
  ASSERT_EQ(r.size(), 3u);
  EXPECT_EQ(r[0].id, 2u);
  EXPECT_EQ(r[1].id, 3u);
  EXPECT_EQ(r[2].id, 1u);
  EXPECT_EQ(rank_structures(s, 10).size(), 4u);
}

TEST(TopN, GroupMeanOfMemberScores) {
  const LabelMap3D a({2, 1, 1}, {}, std::vector<std::uint16_t>{1, 2});
  const LabelMap3D b({2, 1, 1}, {}, std::vector<std::uint16_t>{2, 1});
  const std::vector<Volume3D> maps{Volume3D({2, 1, 1}, {}, std::vector<float>{1.f, 0.f}),
                                   Volume3D({2, 1, 1}, {}, std::vector<float>{1.f, 0.f})};
  const LabelMap3D* labels[] = {&a, &b};
  const auto mean = group_structure_scores(maps, labels, 2);
  EXPECT_DOUBLE_EQ(mean[0], 0.5);
  EXPECT_DOUBLE_EQ(mean[1], 0.5);
  const auto top = top_n_structures(maps, labels, 2, 1);
  ASSERT_EQ(top.size(), 1u);
  EXPECT_EQ(top[0].id, 1u);
}

TEST(EnsembleIo, SaveLoadRoundTrip) {
  const auto dir = testutil::scratch_dir("ensemble_io");
  const GradingEnsemble ens(tiny_config(), {24, 28, 24}, 4, {1.5, 0.75});
  save_ensemble(ens, dir);
  const auto back = load_ensemble(dir);
  ASSERT_EQ(back.size(), ens.size());
  EXPECT_EQ(back.norm().mean, 1.5);
  EXPECT_EQ(back.grid().origins, ens.grid().origins);
  for (std::size_t l = 0; l < ens.size(); ++l)
    EXPECT_EQ(nn::encode_checkpoint(back.model(l).params().to_arrays()),
              nn::encode_checkpoint(ens.model(l).params().to_arrays()));
}

TEST(EnsembleIo, MissingCheckpointIsIoError) {
  const auto dir = testutil::scratch_dir("ensemble_missing");
  save_ensemble(GradingEnsemble(tiny_config(), {24, 28, 24}, 4), dir);
  std::filesystem::remove(dir / "loc_3.gnn1");
  EXPECT_THROW(load_ensemble(dir), IoError);
}

TEST(Export, WritesMapCsvAndSlices) {
  const auto dir = testutil::scratch_dir("export");
  Volume3D map({4, 3, 2});
  map[0] = -1.f;
  map[1] = 1.f;
  const std::vector<double> scores{0.25, -0.5};
  export_grading_map(map, scores, dir, "s");
  EXPECT_EQ(read_volume(dir / "s.gvl"), map);
  EXPECT_EQ(deepgrade::detail::read_text(dir / "s_structures.csv"), "structure_id,score\n1,0.25\n2,-0.5\n");
  const auto pgm = deepgrade::detail::read_text(dir / "s_axial.pgm");
  EXPECT_EQ(pgm.substr(0, 9), "P5\n4 3\n25");
  EXPECT_EQ(pgm.size(), std::string("P5\n4 3\n255\n").size() + 12);
  EXPECT_TRUE(std::filesystem::exists(dir / "s_coronal.pgm"));
  EXPECT_TRUE(std::filesystem::exists(dir / "s_sagittal.pgm"));
}

TEST(EpochOrder, DuplicatesReachRatio) {
  const Volume3D dummy({1, 1, 1});
  std::vector<TrainingSample> s;
  for (int i = 0; i < 3; ++i) s.push_back({&dummy, &dummy, Diagnosis::CN});
  for (int i = 0; i < 4; ++i) s.push_back({&dummy, &dummy, i % 2 ? Diagnosis::AD : Diagnosis::FTD});
  Rng rng(1);
  auto count = [&](const std::vector<std::size_t>& o) {
    std::map<bool, std::size_t> c;
    for (auto i : o) ++c[is_patient(s[i].diagnosis)];
    return c;
  };
  auto o = grading::detail::epoch_order(s, 2.0, rng);
  EXPECT_EQ(count(o)[false], 8u);
  EXPECT_EQ(count(o)[true], 4u);
  for (std::size_t i = 0; i < s.size(); ++i) EXPECT_NE(std::find(o.begin(), o.end(), i), o.end());
  o = grading::detail::epoch_order(s, 0.5, rng);
  EXPECT_EQ(count(o)[false], 3u);
  EXPECT_EQ(count(o)[true], 6u);
  o = grading::detail::epoch_order(s, 0.0, rng);
  EXPECT_EQ(o.size(), 7u);
}

TEST(GradingConfigJson, RoundTrip) {
  auto c = tiny_config();
  c.cn_ratio = 1.5;
  EXPECT_EQ(to_json(grading_config_from_json(to_json(c))), to_json(c));
  auto j = to_json(c);
  j["cn_ratio"] = -1.0;
  EXPECT_THROW(grading_config_from_json(j), ValidationError);
}
