#include <gtest/gtest.h>

#include <filesystem>

#include "deepgrade/classify/features.hpp"
#include "deepgrade/phantom.hpp"
#include "test_util.hpp"

using namespace deepgrade;

namespace {

phantom::PhantomSpec small_spec() {
  phantom::PhantomSpec s;
  s.dims = {24, 28, 24};
  s.structures = 6;
  return s;
}

}  // namespace

TEST(Phantom, DefaultAffectedSetsSplitByHemisphere) {
  const phantom::PhantomSpec s;
  EXPECT_EQ(phantom::affected_structures(s, Diagnosis::AD), (std::vector<unsigned>{1, 3, 5, 7, 9, 11}));
  EXPECT_EQ(phantom::affected_structures(s, Diagnosis::FTD), (std::vector<unsigned>{2, 4, 6, 8, 10, 12}));
  EXPECT_TRUE(phantom::affected_structures(s, Diagnosis::CN).empty());
}

TEST(Phantom, ExplicitEmptyAffectedSetRejectedForPatients) {
  auto s = small_spec();
  s.affected_ad = std::vector<unsigned>{};
  EXPECT_THROW(phantom::generate_subject(s, Diagnosis::AD, 1), ValidationError);
  EXPECT_NO_THROW(phantom::generate_subject(s, Diagnosis::CN, 1));
}

TEST(Phantom, SeverityIrrelevantForControls) {
  auto a = small_spec(), b = small_spec();
  b.severity = 0.9;
  const auto x = phantom::generate_subject(a, Diagnosis::CN, 42);
  const auto y = phantom::generate_subject(b, Diagnosis::CN, 42);
  EXPECT_EQ(encode_volume(x.volume), encode_volume(y.volume));
  EXPECT_EQ(encode_labels(x.labels), encode_labels(y.labels));
}

TEST(Phantom, AtrophyScalesAffectedIntensity) {
  auto s = small_spec();
  s.noise_sigma = 0.0;
  const auto cn = phantom::generate_subject(s, Diagnosis::CN, 7);
  const auto ad = phantom::generate_subject(s, Diagnosis::AD, 7);
  const auto affected = phantom::affected_structures(s, Diagnosis::AD);
  double sum_ad = 0, sum_cn = 0;
  for (std::size_t i = 0; i < ad.labels.size(); ++i)
    if (std::find(affected.begin(), affected.end(), ad.labels[i]) != affected.end()) {
      sum_ad += ad.volume[i];
      sum_cn += cn.volume[i];
    }
  ASSERT_GT(sum_cn, 0.0);
  EXPECT_NEAR(sum_ad / sum_cn, 1.0 - s.severity, 1e-6);
}

TEST(Phantom, ErosionShrinksAffectedStructures) {
  const auto s = small_spec();
  const auto cn = phantom::generate_subject(s, Diagnosis::CN, 11);
  const auto ftd = phantom::generate_subject(s, Diagnosis::FTD, 11);
  const auto c0 = cn.labels.label_counts(s.structures), c1 = ftd.labels.label_counts(s.structures);
  for (unsigned id : phantom::affected_structures(s, Diagnosis::FTD)) EXPECT_LT(c1[id], c0[id]) << id;
  EXPECT_EQ(c0[0], c1[0]);  // ICC unchanged
}

// AD erodes only left structures, so the right side keeps right-hemisphere ids.
TEST(Phantom, HemisphereIsRespected) {
  const auto s = small_spec();
  const auto sub = phantom::generate_subject(s, Diagnosis::AD, 3);
  const double cx = (s.dims.x - 1) / 2.0;
  for (std::uint32_t z = 0; z < s.dims.z; ++z)
    for (std::uint32_t y = 0; y < s.dims.y; ++y)
      for (std::uint32_t x = 0; x < s.dims.x; ++x) {
        const auto l = sub.labels.at(x, y, z);
        if (l == 0) continue;
        if (x >= cx) {
          EXPECT_EQ(l % 2, 0u);
        }
      }
}

TEST(Phantom, EveryStructurePresent) {
  const auto subs = phantom::generate_subjects(small_spec(), {{Diagnosis::CN, 2}, {Diagnosis::AD, 2}, {Diagnosis::FTD, 2}});
  for (const auto& s : subs) {
    const auto c = s.labels.label_counts(6);
    for (unsigned j = 1; j <= 6; ++j) EXPECT_GT(c[j], 0u) << s.id << " structure " << j;
  }
}

TEST(Phantom, VolumeFeaturesSumToHundred) {
  const auto subs = phantom::generate_subjects(small_spec(), {{Diagnosis::CN, 3}, {Diagnosis::FTD, 3}});
  for (const auto& s : subs) {
    const auto f = classify::compute_volume_features(s.labels, 6);
    double sum = 0;
    for (double v : f) sum += v;
    EXPECT_NEAR(sum, 100.0, 1e-6);
  }
}

TEST(PhantomCohort, SplitCountsAndDeterminism) {
  const auto s = small_spec();
  const auto a = testutil::scratch_dir("cohort_a"), b = testutil::scratch_dir("cohort_b");
  const phantom::ClassCounts n{{Diagnosis::CN, 10}, {Diagnosis::AD, 10}, {Diagnosis::FTD, 10}};
  const auto m = phantom::generate_cohort(s, n, {0.8, 0.2}, a);
  phantom::generate_cohort(s, n, {0.8, 0.2}, b);
  std::map<std::pair<Diagnosis, Split>, int> counts;
  for (const auto& e : m.entries) ++counts[{e.diagnosis, e.split}];
  for (auto d : kAllDiagnoses) {
    EXPECT_EQ((counts[{d, Split::Train}]), 8);
    EXPECT_EQ((counts[{d, Split::Val}]), 2);
  }
  for (const auto& entry : std::filesystem::recursive_directory_iterator(a)) {
    if (!entry.is_regular_file()) continue;
    const auto rel = std::filesystem::relative(entry.path(), a);
    EXPECT_EQ(detail::read_file(entry.path()), detail::read_file(b / rel)) << rel;
  }
}

TEST(PhantomCohort, AgesWithinClassRanges) {
  const auto s = small_spec();
  const auto dir = testutil::scratch_dir("cohort_ages");
  const auto m = phantom::generate_cohort(s, {{Diagnosis::CN, 6}, {Diagnosis::AD, 6}, {Diagnosis::FTD, 6}},
                                          {0.5, 0.5}, dir);
  const auto back = read_manifest(dir / "manifest.json");
  for (const auto& e : back.entries) {
    const auto& r = s.age_range[static_cast<int>(e.diagnosis)];
    EXPECT_GE(e.age, r.lo);
    EXPECT_LE(e.age, r.hi);
  }
  EXPECT_EQ(back.entries.size(), m.entries.size());
}

TEST(PhantomSpecJson, RoundTrip) {
  auto s = small_spec();
  s.affected_ad = std::vector<unsigned>{1, 2};
  s.severity = 0.5;
  const auto back = phantom::phantom_spec_from_json(phantom::to_json(s));
  EXPECT_EQ(phantom::to_json(back), phantom::to_json(s));
}

TEST(PhantomSpecJson, InvalidSeverityRejected) {
  auto j = phantom::to_json(small_spec());
  j["severity"] = 1.5;
  EXPECT_THROW(phantom::phantom_spec_from_json(j), ValidationError);
}
