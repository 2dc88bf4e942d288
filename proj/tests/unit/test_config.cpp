#include "mnarrl/config.hpp"

#include "test_support.hpp"

#include <gtest/gtest.h>

#include <fstream>

namespace mnarrl::config {
namespace {

using nlohmann::json;

std::filesystem::path source_dir() { return MNARRL_SOURCE_DIR; }

TEST(Config, EmptyObjectGivesDefaults) {
  const auto c = run_config_from_json(json::object());
  EXPECT_EQ(to_json(c), to_json(RunConfig{}));
}

TEST(Config, RoundTripIsStable) {
  RunConfig c;
  c.sim.n_episodes = 77;
  c.model.hidden = 24;
  c.model.psi_embedding = encoder::PsiEmbedding::kLinear;
  c.model.posterior_conditioning = belief::PosteriorConditioning::kPhiXAZ;
  c.train.rl.tau = 0.8;
  c.eval.behavior = eval::BehaviorSource::kFittedBc;
  c.ablate.seeds = {1, 2};
  c.ablate.variants.push_back({"no_doc", {{"doc_factor", false}}});
  const json j = to_json(c);
  EXPECT_EQ(to_json(run_config_from_json(j)), j);
}

TEST(Config, UnknownKeysAreRejected) {
  EXPECT_THROW(run_config_from_json({{"bogus", 1}}), ConfigError);
  EXPECT_THROW(run_config_from_json({{"model", {{"hiddne", 3}}}}), ConfigError);
  EXPECT_THROW(run_config_from_json({{"train", {{"rl", {{"expectile", 0.7}}}}}}), ConfigError);
}

TEST(Config, TypeMismatchesAreRejected) {
  EXPECT_THROW(run_config_from_json({{"model", {{"hidden", "wide"}}}}), ConfigError);
  EXPECT_THROW(run_config_from_json({{"model", {{"psi_embedding", "cubic"}}}}), ConfigError);
  EXPECT_THROW(run_config_from_json({{"split", {{"fractions", {0.5, 0.2}}}}}), ConfigError);
  EXPECT_THROW(run_config_from_json({{"model", {{"attention_dim", 10}, {"heads", 3}}}}), ConfigError);
}

TEST(Config, DiscountMismatchIsRejected) {
  EXPECT_THROW(run_config_from_json({{"sim", {{"discount", 0.95}}}}), ConfigError);
  EXPECT_NO_THROW(
      run_config_from_json({{"sim", {{"discount", 0.95}}}, {"train", {{"rl", {{"gamma", 0.95}}}}}}));
}

TEST(Config, AblationVariants) {
  EXPECT_THROW(run_config_from_json({{"ablate", {{"variants", {{{"model", json::object()}}}}}}}),
               ConfigError);
  EXPECT_THROW(run_config_from_json(
                   {{"ablate", {{"variants", {{{"name", "a"}}, {{"name", "a"}}}}}}}),
               ConfigError);
  EXPECT_THROW(run_config_from_json({{"ablate", {{"seeds", json::array()}}}}), ConfigError);
  const auto m = apply_overrides(model::ModelConfig{}, {{"mnar_features", false}});
  EXPECT_FALSE(m.mnar_features);
  EXPECT_TRUE(m.doc_factor);
  EXPECT_THROW(apply_overrides(model::ModelConfig{}, {{"nope", 1}}), ConfigError);
}

TEST(Config, HashIsCanonical) {
  const json a = json::parse(R"({"b": 1, "a": {"y": 2, "x": [1, 2]}})");
  const json b = json::parse(R"({"a": {"x": [1, 2], "y": 2}, "b": 1})");
  EXPECT_EQ(config_hash(a), config_hash(b));
  EXPECT_EQ(config_hash(a).size(), 16u);
  EXPECT_NE(config_hash(a), config_hash(json::parse(R"({"b": 2, "a": {"y": 2, "x": [1, 2]}})")));
}

TEST(Config, LoadReportsMissingAndMalformedFiles) {
  testing::TempDir dir("config");
  EXPECT_THROW(load_run_config(dir.path() / "absent.json"), ConfigError);
  std::ofstream(dir.path() / "bad.json") << "{ not json";
  EXPECT_THROW(load_run_config(dir.path() / "bad.json"), ConfigError);
}

TEST(Config, ShippedConfigsLoad) {
  for (const auto& e : std::filesystem::directory_iterator(source_dir() / "configs")) {
    if (e.path().extension() != ".json") continue;
    EXPECT_NO_THROW(load_run_config(e.path())) << e.path();
  }
}

// Every key the serializer emits is declared in the schema and vice versa.
void compare_keys(const json& schema, const json& value, const std::string& where) {
  if (!value.is_object()) return;
  ASSERT_TRUE(schema.contains("properties")) << where;
  const json& props = schema.at("properties");
  for (auto it = value.begin(); it != value.end(); ++it) {
    ASSERT_TRUE(props.contains(it.key())) << where << "." << it.key() << " missing from schema";
    const json& sub = props.at(it.key());
    if (it.value().is_object() && sub.value("type", "") == "object" && sub.contains("properties")) {
      compare_keys(sub, it.value(), where + "." + it.key());
    }
  }
  for (auto it = props.begin(); it != props.end(); ++it) {
    EXPECT_TRUE(value.contains(it.key())) << where << "." << it.key() << " not emitted";
  }
  EXPECT_EQ(schema.value("additionalProperties", true), false) << where;
}

TEST(Config, SchemaMatchesSerializer) {
  std::ifstream in(source_dir() / "schema" / "config.schema.json");
  ASSERT_TRUE(in.good());
  const json schema = json::parse(in);
  compare_keys(schema, to_json(RunConfig{}), "config");
}

}  // namespace
}  // namespace mnarrl::config
