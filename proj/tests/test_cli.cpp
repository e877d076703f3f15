#include <gtest/gtest.h>

#include <sys/wait.h>

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>

namespace fs = std::filesystem;

namespace {

struct Result {
  int code = -1;
  std::string out;
};

Result cli(const std::string& args) {
  const std::string cmd = std::string("'") + GRIDSEC_CLI_PATH + "' " + args + " 2>/dev/null";
  Result r;
  FILE* p = popen(cmd.c_str(), "r");
  if (!p) return r;
  char buf[4096];
  while (std::size_t n = std::fread(buf, 1, sizeof buf, p)) r.out.append(buf, n);
  const int status = pclose(p);
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  return r;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void spit(const fs::path& p, const std::string& s) {
  std::ofstream out(p, std::ios::binary);
  out << s;
}

std::size_t lines(const std::string& s) { return static_cast<std::size_t>(std::count(s.begin(), s.end(), '\n')); }

class Cli : public ::testing::Test {
 protected:
  void SetUp() override {
    dir_ = fs::temp_directory_path() /
           ("gridsec_cli_" + std::string(::testing::UnitTest::GetInstance()->current_test_info()->name()));
    fs::remove_all(dir_);
    fs::create_directories(dir_);
  }
  void TearDown() override { fs::remove_all(dir_); }
  std::string config(const char* name) const { return std::string("'") + GRIDSEC_CONFIG_DIR + "/" + name + "'"; }
  fs::path dir_;
};

}  // namespace

TEST_F(Cli, Threshold) {
  auto r = cli("threshold 0.2 1e6");
  EXPECT_EQ(r.code, 0);
  EXPECT_NEAR(std::stod(r.out), 21.3527, 0.01);
  EXPECT_EQ(r.out.substr(r.out.find('.') + 1).size(), 7u);  // six decimals and a newline
  r = cli("threshold 0.2 1");
  EXPECT_EQ(r.code, 0);
  EXPECT_EQ(r.out, "0.000000\n");
  EXPECT_EQ(cli("threshold 0.4 1e6").code, 2);
  EXPECT_EQ(cli("threshold 0.2").code, 2);
}

TEST_F(Cli, RunWritesCsvAndSummary) {
  const auto r = cli("run --config " + config("ieee14_regular.toml") + " --set scenario.T=50 --out '" + dir_.string() + "'");
  ASSERT_EQ(r.code, 0);
  const std::string csv = slurp(dir_ / "run.csv");
  EXPECT_EQ(lines(csv), 51u);
  EXPECT_EQ(csv.substr(0, csv.find('\n')),
            "t,mse_1,mse_2,mse_3,mse_4,g_1,g_2,g_3,g_4,trust_g_1,trust_g_2,trust_g_3,trust_g_4,alarm_1,alarm_2,"
            "alarm_3,alarm_4,declared_1,declared_2,declared_3,declared_4,mse_proposed,mse_centralized,mse_robust,"
            "mse_norecovery");
  const std::string json = slurp(dir_ / "summary.json");
  EXPECT_NE(json.find("\"horizon\": 50"), std::string::npos);
  EXPECT_NE(json.find("\"network_alarm\": null"), std::string::npos);
}

TEST_F(Cli, CaseOneRowsAndSeedOverride) {
  const auto r = cli("run --config " + config("ieee14_case1.toml") + " --seed 7 --out '" + dir_.string() + "'");
  ASSERT_EQ(r.code, 0);
  EXPECT_EQ(lines(slurp(dir_ / "run.csv")), 251u);
  EXPECT_NE(slurp(dir_ / "summary.json").find("\"seed\": 7"), std::string::npos);
}

TEST_F(Cli, ConfigErrors) {
  EXPECT_EQ(cli("run --config '" + (dir_ / "missing.toml").string() + "'").code, 2);
  spit(dir_ / "bad.toml", "[scenario]\nT = 10\ncolour = 3\n");
  EXPECT_EQ(cli("run --config '" + (dir_ / "bad.toml").string() + "'").code, 2);
  EXPECT_EQ(cli("run --config " + config("ieee14_regular.toml") + " --set scenario.T=-1").code, 2);
  EXPECT_EQ(cli("frobnicate").code, 2);
}

TEST_F(Cli, ByteIdenticalOutputs) {
  const fs::path a = dir_ / "a", b = dir_ / "b";
  const std::string common = "run --config " + config("ieee14_case1.toml") + " --set scenario.T=120 ";
  ASSERT_EQ(cli(common + "--out '" + a.string() + "'").code, 0);
  ASSERT_EQ(cli(common + "--out '" + b.string() + "'").code, 0);
  for (const char* f : {"run.csv", "summary.json", "ledger.gsld"}) {
    EXPECT_FALSE(slurp(a / f).empty()) << f;
    EXPECT_EQ(slurp(a / f), slurp(b / f)) << f;
  }
}

TEST_F(Cli, LedgerRoundTripTamperAndTruncation) {
  ASSERT_EQ(cli("run --config " + config("ieee14_case1.toml") + " --set scenario.T=100 --out '" + dir_.string() + "'").code, 0);
  const fs::path ledger = dir_ / "ledger.gsld";
  auto r = cli("verify-ledger '" + ledger.string() + "'");
  EXPECT_EQ(r.code, 0);
  EXPECT_NE(r.out.find("clean: 101 blocks"), std::string::npos) << r.out;

  std::string bytes = slurp(ledger);
  // genesis plus 100 blocks of equal size; flip a bit of block 50's first estimate value
  const std::size_t block = (bytes.size() - 6) / 101;
  ASSERT_EQ(6 + 101 * block, bytes.size());
  std::string tampered = bytes;
  tampered[6 + 50 * block + 56 + 16 + 3] ^= 0x10;
  spit(dir_ / "tampered.gsld", tampered);
  r = cli("verify-ledger '" + (dir_ / "tampered.gsld").string() + "'");
  EXPECT_EQ(r.code, 4);
  EXPECT_NE(r.out.find("violation at block"), std::string::npos) << r.out;

  spit(dir_ / "short.gsld", bytes.substr(0, bytes.size() - 3));
  EXPECT_EQ(cli("verify-ledger '" + (dir_ / "short.gsld").string() + "'").code, 2);
  EXPECT_EQ(cli("verify-ledger '" + (dir_ / "none.gsld").string() + "'").code, 2);
  // a file mined at difficulty 8 does not meet a stricter target
  EXPECT_EQ(cli("verify-ledger --difficulty 30 '" + ledger.string() + "'").code, 4);
}

TEST_F(Cli, ValidateModel) {
  auto r = cli("validate-model --config " + config("ieee14_regular.toml"));
  EXPECT_EQ(r.code, 0);
  EXPECT_NE(r.out.find("valid: N=14 K=23 state_dim=13 L=4"), std::string::npos) << r.out;
  spit(dir_ / "zero_row.toml", "[model]\nH = [[1.0, 0.0], [0.0, 0.0]]\npartition = [[1], [2]]\n");
  r = cli("validate-model --config '" + (dir_ / "zero_row.toml").string() + "'");
  EXPECT_EQ(r.code, 4);
  EXPECT_NE(r.out.find("zero measurement row"), std::string::npos) << r.out;
  EXPECT_EQ(cli("validate-model --config '" + (dir_ / "missing.toml").string() + "'").code, 2);
}
