// gridsec: command-line front end.
// Exit codes: 0 success, 2 configuration or input error, 3 runtime error,
// 4 integrity violation (tampered ledger, invalid model).

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <iterator>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <spdlog/sinks/stdout_color_sinks.h>
#include <spdlog/spdlog.h>

#include "gridsec/config.hpp"
#include "gridsec/ledger.hpp"
#include "gridsec/report.hpp"
#include "gridsec/simnet.hpp"

namespace {

constexpr int kExitOk = 0;
constexpr int kExitConfig = 2;
constexpr int kExitRuntime = 3;
constexpr int kExitIntegrity = 4;

void setup_logging() {
  auto logger = spdlog::stderr_color_mt("gridsec");
  spdlog::set_default_logger(logger);
  spdlog::set_level(spdlog::level::warn);
  if (const char* env = std::getenv("GS_LOG")) {
    const auto level = spdlog::level::from_str(env);
    // from_str maps unknown names to off; only honour "off" when asked for.
    if (level != spdlog::level::off || std::string(env) == "off") spdlog::set_level(level);
  }
}

void write_file(const std::filesystem::path& path, const void* data, std::size_t size) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out.write(static_cast<const char*>(data), static_cast<std::streamsize>(size));
  if (!out) throw std::runtime_error("short write to " + path.string());
}

int cmd_run(const std::string& config_path, const std::vector<std::string>& sets, const std::string& seed,
            const std::string& out_dir) {
  gridsec::RunConfig cfg;
  try {
    std::vector<std::string> overrides = sets;
    if (!seed.empty()) overrides.push_back("scenario.seed=" + seed);
    cfg = gridsec::load_config(config_path, overrides);
  } catch (const gridsec::Error& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return kExitConfig;
  }
  if (!out_dir.empty()) cfg.output.dir = out_dir;
  try {
    const auto& sc = cfg.scenario;
    spdlog::info("running T={} seed={} nodes={}", sc.horizon, sc.seed, sc.model.node_count());
    auto rec = gridsec::run(sc);
    for (const auto& e : rec.events) spdlog::info("{}", e);

    const std::filesystem::path dir(cfg.output.dir);
    std::filesystem::create_directories(dir);
    const std::string csv = gridsec::to_csv(rec);
    write_file(dir / cfg.output.csv, csv.data(), csv.size());
    const std::string json = gridsec::summary_json(rec, sc).dump(2) + "\n";
    write_file(dir / cfg.output.json, json.data(), json.size());
    if (!cfg.output.ledger.empty()) {
      if (!rec.ledger) throw std::runtime_error("ledger export requested but ledger.enabled = false");
      const auto bytes = gridsec::export_ledger(*rec.ledger);
      write_file(dir / cfg.output.ledger, bytes.data(), bytes.size());
    }
    std::printf("t=%lld network_alarm=%s csv=%s\n", static_cast<long long>(rec.last_timestep),
                rec.network_alarm == gridsec::kNoAlarm ? "none" : std::to_string(rec.network_alarm).c_str(),
                (dir / cfg.output.csv).string().c_str());
  } catch (const std::exception& e) {
    std::fprintf(stderr, "runtime error: %s\n", e.what());
    return kExitRuntime;
  }
  return kExitOk;
}

int cmd_threshold(double alpha, double L_target) {
  try {
    std::printf("%.6f\n", gridsec::threshold_for_false_alarm(alpha, L_target));
  } catch (const gridsec::Error& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kExitConfig;
  }
  return kExitOk;
}

int cmd_verify_ledger(const std::string& path, int difficulty) {
  std::ifstream in(path, std::ios::binary);
  if (!in) {
    std::fprintf(stderr, "error: cannot open %s\n", path.c_str());
    return kExitConfig;
  }
  const gridsec::Bytes bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  gridsec::Ledger ledger(1, 0);
  try {
    ledger = gridsec::import_ledger(bytes, difficulty);
  } catch (const gridsec::Error& e) {
    std::fprintf(stderr, "format error: %s\n", e.what());
    return kExitConfig;
  }
  const auto rep = gridsec::verify_chain(ledger);
  if (rep.clean()) {
    std::printf("clean: %zu blocks verified\n", rep.blocks_checked);
    return kExitOk;
  }
  for (const auto& v : rep.violations)
    std::printf("violation at block %zu (t=%lld): %s %s\n", v.index, static_cast<long long>(v.timestep),
                v.kind.c_str(), v.detail.c_str());
  return kExitIntegrity;
}

int cmd_validate_model(const std::string& config_path, const std::vector<std::string>& sets) {
  // Parse without scenario validation so every model issue is listed.
  gridsec::GlobalSystemModel model;
  try {
    std::ifstream in(config_path, std::ios::binary);
    if (!in) throw gridsec::Error(gridsec::Errc::ConfigError, "cannot open config file " + config_path);
    std::stringstream buf;
    buf << in.rdbuf();
    toml::table root = gridsec::parse_config_text(buf.str(), config_path);
    for (const auto& o : sets) gridsec::config_detail::apply_override(root, o);
    const toml::node* m = root.get("model");
    if (m && !m->is_table()) throw gridsec::Error(gridsec::Errc::ConfigError, "model: expected a table");
    model = gridsec::config_detail::parse_model(m ? m->as_table() : nullptr);
  } catch (const gridsec::Error& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return kExitConfig;
  }
  const auto report = gridsec::validate(model);
  if (!report.ok()) {
    for (const auto& issue : report.issues) std::printf("invalid: %s\n", issue.c_str());
    return kExitIntegrity;
  }
  const auto nodes = gridsec::build_local_models(model);
  std::printf("valid: N=%d K=%d state_dim=%d L=%d\n", model.n_buses, model.n_sensors, model.state_dim,
              model.node_count());
  for (const auto& n : nodes) {
    std::printf("  node %d: K=%lld N=%lld neighbors=", n.node_id + 1, static_cast<long long>(n.k_local()),
                static_cast<long long>(n.n_local()));
    const auto nb = n.neighbors();
    if (nb.empty()) std::printf("-");
    for (std::size_t i = 0; i < nb.size(); ++i) std::printf("%s%d", i ? "," : "", nb[i] + 1);
    std::printf("\n");
  }
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  setup_logging();
  CLI::App app{"Secure distributed state estimation simulator"};
  app.require_subcommand(1);

  std::string config_path, seed, out_dir;
  std::vector<std::string> sets;
  auto* run = app.add_subcommand("run", "Run a scenario and write CSV/JSON outputs");
  run->add_option("--config", config_path, "TOML configuration file")->required();
  run->add_option("--seed", seed, "Override scenario.seed");
  run->add_option("--set", sets, "Override a config key, e.g. scenario.T=50 (repeatable)")->multi_option_policy(CLI::MultiOptionPolicy::TakeAll);
  run->add_option("--out", out_dir, "Output directory (overrides output.dir)");

  double alpha = 0.0, L_target = 0.0;
  auto* thr = app.add_subcommand("threshold", "Print the detection threshold for alpha and a false-alarm period");
  thr->add_option("alpha", alpha, "Significance level, 0 < alpha < 1/e")->required();
  thr->add_option("L", L_target, "Target mean time between false alarms (>= 1)")->required();

  std::string ledger_path;
  int difficulty = 8;
  auto* ver = app.add_subcommand("verify-ledger", "Check a ledger file for tampering");
  ver->add_option("path", ledger_path, "Ledger file")->required();
  ver->add_option("--difficulty", difficulty, "Proof-of-work difficulty in leading zero bits")->check(CLI::Range(0, 64));

  std::string model_config;
  std::vector<std::string> model_sets;
  auto* val = app.add_subcommand("validate-model", "Validate the model section of a configuration");
  val->add_option("--config", model_config, "TOML configuration file")->required();
  val->add_option("--set", model_sets, "Override a config key (repeatable)")->multi_option_policy(CLI::MultiOptionPolicy::TakeAll);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kExitOk : kExitConfig;
  }

  if (*run) return cmd_run(config_path, sets, seed, out_dir);
  if (*thr) return cmd_threshold(alpha, L_target);
  if (*ver) return cmd_verify_ledger(ledger_path, difficulty);
  if (*val) return cmd_validate_model(model_config, model_sets);
  return kExitConfig;
}
