#include <gtest/gtest.h>

#include "deepgrade/config.hpp"
#include "test_util.hpp"

using namespace deepgrade;

TEST(RunConfig, DefaultsRoundTrip) {
  const RunConfig c;
  const auto back = run_config_from_json(to_json(c));
  EXPECT_EQ(to_json(back), to_json(c));
}

TEST(RunConfig, SeedPropagates) {
  auto j = to_json(RunConfig{});
  j["seed"] = 17;
  const auto c = run_config_from_json(j);
  EXPECT_EQ(c.phantom.seed, 17u);
  EXPECT_EQ(c.experiment.seed, 17u);
}

TEST(RunConfig, PartialDocumentKeepsDefaults) {
  const auto c = run_config_from_json(nlohmann::json::parse(R"({"experiment": {"task": "ad_vs_cn"}})"));
  EXPECT_EQ(c.experiment.task, "ad_vs_cn");
  EXPECT_EQ(c.experiment.repetitions, 3u);
  EXPECT_EQ(c.counts.at(Diagnosis::FTD), 30u);
}

TEST(RunConfig, RelativePathsResolveAgainstBase) {
  const auto c = run_config_from_json(nlohmann::json::parse(R"({"workdir": "w"})"), "/tmp/base");
  EXPECT_EQ(c.workdir, std::filesystem::path("/tmp/base/w"));
}

TEST(RunConfig, InvalidValuesRejected) {
  EXPECT_THROW(run_config_from_json(nlohmann::json::parse(R"({"workers": 0})")), ValidationError);
  EXPECT_THROW(run_config_from_json(nlohmann::json::parse(R"({"experiment": {"task": "x"}})")), ValidationError);
  EXPECT_THROW(run_config_from_json(nlohmann::json::parse(R"({"seed": "abc"})")), ValidationError);
  EXPECT_THROW(run_config_from_json(nlohmann::json::parse(R"({"phantom": {"counts": {"MCI": 3}}})")), ValidationError);
}

TEST(ContentHash, KnownValuesAndSensitivity) {
  EXPECT_EQ(content_hash(""), "cbf29ce484222325");
  EXPECT_EQ(content_hash("a"), "af63dc4c8601ec8c");
  EXPECT_NE(content_hash(to_json(RunConfig{}).dump()), content_hash(to_json(RunConfig{}).dump() + " "));
}
