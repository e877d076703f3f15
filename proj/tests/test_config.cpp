#include <gtest/gtest.h>

#include <filesystem>

#include "gridsec/config.hpp"

using namespace gridsec;

namespace {

const std::filesystem::path kConfigs = GRIDSEC_CONFIG_DIR;

std::string config_error(std::string_view text, const std::vector<std::string>& overrides = {}) {
  try {
    load_config_text(text, overrides);
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Errc::ConfigError);
    return e.what();
  }
  ADD_FAILURE() << "expected a config error";
  return {};
}

}  // namespace

TEST(Config, ShippedFilesLoad) {
  for (const auto& entry : std::filesystem::directory_iterator(kConfigs)) {
    if (entry.path().extension() != ".toml") continue;
    EXPECT_NO_THROW(load_config(entry.path())) << entry.path();
  }
}

TEST(Config, CaseOneFields) {
  const auto cfg = load_config(kConfigs / "ieee14_case1.toml");
  const auto& sc = cfg.scenario;
  EXPECT_EQ(sc.horizon, 250);
  EXPECT_EQ(sc.seed, 7u);
  EXPECT_EQ(sc.alpha, 0.2);
  EXPECT_EQ(sc.L_target, 1e6);
  EXPECT_EQ(sc.ledger_capacity, 200u);
  EXPECT_EQ(sc.difficulty, 8);
  EXPECT_EQ(sc.investigation_delay, 50);
  EXPECT_EQ(sc.on_alarm, AlarmPolicy::Halt);
  ASSERT_EQ(sc.attacks.size(), 1u);
  EXPECT_EQ(sc.attacks[0].subregions, (std::vector<int>{0, 1}));  // 1-based in the file
  EXPECT_EQ(sc.attacks[0].onset, 200);
  EXPECT_EQ(sc.attacks[0].magnitude, 0.3);
  EXPECT_EQ(cfg.output.dir, "out/case1");
  EXPECT_EQ(cfg.output.ledger, "ledger.gsld");
  EXPECT_EQ(sc.model.n_sensors, 23);
}

TEST(Config, CaseTwoMisbehavior) {
  const auto sc = load_config(kConfigs / "ieee14_case2.toml").scenario;
  ASSERT_EQ(sc.misbehaviors.size(), 1u);
  EXPECT_EQ(sc.misbehaviors[0].node, 2);
  EXPECT_EQ(sc.misbehaviors[0].kind, MisbehaviorKind::SilentFdi);
  EXPECT_EQ(sc.misbehaviors[0].votes, VotePolicy::Honest);
}

TEST(Config, InlineModel) {
  const auto m = load_config(kConfigs / "two_area_blockdiag.toml").scenario.model;
  EXPECT_EQ(m.state_dim, 4);
  EXPECT_EQ(m.n_sensors, 6);
  EXPECT_EQ(m.n_buses, 5);
  EXPECT_EQ(m.partition, (std::vector<std::vector<int>>{{0, 1, 2}, {3, 4, 5}}));
  EXPECT_EQ(m.A(2, 2), 0.95);
  EXPECT_EQ(m.x0(2), 0.2);
  EXPECT_EQ(m.H(0, 1), -1.0);
}

TEST(Config, DefaultsWithoutSections) {
  const auto cfg = load_config_text("");
  EXPECT_EQ(cfg.scenario.model.n_sensors, 23);
  EXPECT_EQ(cfg.scenario.horizon, 1000);
  EXPECT_EQ(cfg.output.csv, "run.csv");
  EXPECT_EQ(cfg.output.json, "summary.json");
  EXPECT_TRUE(cfg.output.ledger.empty());
}

TEST(Config, Overrides) {
  const auto cfg = load_config(kConfigs / "ieee14_case1.toml",
                               {"scenario.T=50", "detection.alpha=0.1", "output.dir=elsewhere", "ledger.enabled=false"});
  EXPECT_EQ(cfg.scenario.horizon, 50);
  EXPECT_EQ(cfg.scenario.alpha, 0.1);
  EXPECT_EQ(cfg.output.dir, "elsewhere");
  EXPECT_FALSE(cfg.scenario.use_ledger);
  EXPECT_NE(config_error("", {"scenario.T"}).find("key=value"), std::string::npos);
  EXPECT_NE(config_error("", {"scenario..T=3"}).find("empty component"), std::string::npos);
}

TEST(Config, StrictSchemaNamesFieldAndLine) {
  auto msg = config_error("[scenario]\nT = 10\nhorizon = 5\n");
  EXPECT_NE(msg.find("scenario.horizon"), std::string::npos) << msg;
  EXPECT_NE(msg.find("line 3"), std::string::npos) << msg;
  EXPECT_NE(msg.find("unknown key"), std::string::npos) << msg;

  msg = config_error("[detection]\nalpha = \"high\"\n");
  EXPECT_NE(msg.find("detection.alpha"), std::string::npos) << msg;
  EXPECT_NE(msg.find("line 2"), std::string::npos) << msg;

  msg = config_error("[bogus]\n");
  EXPECT_NE(msg.find("bogus"), std::string::npos) << msg;

  msg = config_error("[scenario\n");
  EXPECT_NE(msg.find("line 1"), std::string::npos) << msg;
}

TEST(Config, SemanticErrors) {
  config_error("[model]\npreset = \"ieee30\"\n");
  config_error("[model]\npreset = \"ieee14\"\nH = [[1.0]]\n");
  config_error("[model]\nH = [[1.0, 0.0], [0.0, 1.0]]\n");
  config_error("[model]\nH = [[1.0, 0.0], [0.0, 1.0]]\npartition = [[1], [2]]\nA = [[1.0, 0.0], [0.0, 1.0]]\na_diag = [1.0, 1.0]\n");
  config_error("[detection]\nalpha = 0.4\n");
  config_error("[detection]\nh = -1.0\n");
  config_error("[ledger]\nM = 0\n");
  config_error("[ledger]\ndifficulty = 40\n");
  config_error("[scenario]\nT = 0\n");
  config_error("[scenario]\non_alarm = \"panic\"\n");
  config_error("[[scenario.attacks]]\nonset = 3\n");
  config_error("[[scenario.attacks]]\nsubregions = [0]\n");
  config_error("[[scenario.misbehaviors]]\nnode = 0\n");
  config_error("[[scenario.misbehaviors]]\nnode = 2\nkind = \"sleepy\"\n");
  config_error("[[scenario.misbehaviors]]\nnode = 2\n[[scenario.misbehaviors]]\nnode = 2\n");
  config_error("[estimator]\ncross_blocks = \"full\"\n");
  config_error("[scenario]\nbaselines = [\"cubature\"]\n");
  EXPECT_THROW(load_config(kConfigs / "does_not_exist.toml"), Error);
}

// Invalid models parse but are rejected by scenario validation with the model issue.
TEST(Config, InvalidModelIsReported) {
  const auto msg = config_error("[model]\nH = [[1.0, 0.0], [0.0, 0.0]]\npartition = [[1], [2]]\n");
  EXPECT_NE(msg.find("zero measurement row"), std::string::npos) << msg;
}
