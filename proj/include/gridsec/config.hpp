#pragma once

// Strict TOML configuration. Unknown keys and wrong types are errors that
// name the offending field and its source line. Node, subregion and sensor
// ids are 1-based in files and 0-based in the library.

#include <filesystem>
#include <fstream>
#include <sstream>
#include <set>
#include <string>
#include <string_view>
#include <vector>

#include <toml.hpp>

#include "gridsec/simnet.hpp"

namespace gridsec {

struct OutputOptions {
  std::string dir = "out";
  std::string csv = "run.csv";
  std::string json = "summary.json";
  std::string ledger;  // empty: no ledger export
};

struct RunConfig {
  Scenario scenario;
  OutputOptions output;
};

namespace config_detail {

inline std::string where(const toml::node& n, const std::string& path) {
  const auto& src = n.source();
  return path + (src.begin.line ? " (line " + std::to_string(src.begin.line) + ")" : "");
}

[[noreturn]] inline void fail(const toml::node& n, const std::string& path, const std::string& what) {
  throw Error(Errc::ConfigError, where(n, path) + ": " + what);
}

inline void only_keys(const toml::table& t, const std::string& path, std::initializer_list<std::string_view> allowed) {
  for (const auto& [k, v] : t) {
    bool ok = false;
    for (auto a : allowed) ok = ok || k.str() == a;
    if (!ok) fail(v, path.empty() ? std::string(k.str()) : path + "." + std::string(k.str()), "unknown key");
  }
}

inline const toml::table* sub_table(const toml::table& t, std::string_view key, const std::string& path) {
  const toml::node* n = t.get(key);
  if (!n) return nullptr;
  if (!n->is_table()) fail(*n, path, "expected a table");
  return n->as_table();
}

inline double get_double(const toml::node& n, const std::string& path) {
  if (auto v = n.value<double>()) return *v;  // integers convert
  fail(n, path, "expected a number");
}

inline std::int64_t get_int(const toml::node& n, const std::string& path) {
  if (n.is_integer()) return n.as_integer()->get();
  if (n.is_floating_point()) {
    const double d = n.as_floating_point()->get();
    if (d == std::floor(d) && std::abs(d) < 9.0e15) return static_cast<std::int64_t>(d);
  }
  fail(n, path, "expected an integer");
}

inline bool get_bool(const toml::node& n, const std::string& path) {
  if (n.is_boolean()) return n.as_boolean()->get();
  fail(n, path, "expected true or false");
}

inline std::string get_string(const toml::node& n, const std::string& path) {
  if (n.is_string()) return n.as_string()->get();
  fail(n, path, "expected a string");
}

inline const toml::array& get_array(const toml::node& n, const std::string& path) {
  if (!n.is_array()) fail(n, path, "expected an array");
  return *n.as_array();
}

inline Vector get_vector(const toml::node& n, const std::string& path) {
  const auto& a = get_array(n, path);
  Vector v(static_cast<Index>(a.size()));
  for (std::size_t i = 0; i < a.size(); ++i) v(Index(i)) = get_double(a[i], path + "[" + std::to_string(i) + "]");
  return v;
}

inline Matrix get_matrix(const toml::node& n, const std::string& path) {
  const auto& rows = get_array(n, path);
  if (rows.empty()) fail(n, path, "matrix has no rows");
  Matrix m;
  for (std::size_t r = 0; r < rows.size(); ++r) {
    const Vector row = get_vector(rows[r], path + "[" + std::to_string(r) + "]");
    if (r == 0) m.resize(static_cast<Index>(rows.size()), row.size());
    if (row.size() != m.cols()) fail(rows[r], path, "ragged matrix rows");
    m.row(Index(r)) = row.transpose();
  }
  return m;
}

inline std::vector<int> get_ids(const toml::node& n, const std::string& path) {
  std::vector<int> out;
  const auto& a = get_array(n, path);
  for (std::size_t i = 0; i < a.size(); ++i) {
    const auto v = get_int(a[i], path + "[" + std::to_string(i) + "]");
    if (v < 1) fail(a[i], path, "ids are 1-based");
    out.push_back(static_cast<int>(v - 1));
  }
  return out;
}

inline GlobalSystemModel parse_model(const toml::table* t) {
  if (!t) return ieee14_default();
  only_keys(*t, "model", {"preset", "n_buses", "A", "a_diag", "H", "sigma_v2", "sigma_w2", "partition", "x0"});
  GlobalSystemModel m;
  const toml::node* preset = t->get("preset");
  if (preset) {
    const auto name = get_string(*preset, "model.preset");
    if (name != "ieee14") fail(*preset, "model.preset", "unknown preset '" + name + "'");
    m = ieee14_default();
    for (auto key : {"n_buses", "A", "a_diag", "H", "partition"})
      if (const auto* n = t->get(key)) fail(*n, std::string("model.") + key, "cannot be combined with a preset");
  } else {
    const toml::node* H = t->get("H");
    const toml::node* part = t->get("partition");
    if (!H || !part) throw Error(Errc::ConfigError, "model: inline models need H and partition (or preset)");
    m.H = get_matrix(*H, "model.H");
    m.n_sensors = static_cast<int>(m.H.rows());
    m.state_dim = static_cast<int>(m.H.cols());
    m.n_buses = m.state_dim + 1;
    if (const auto* n = t->get("n_buses")) m.n_buses = static_cast<int>(get_int(*n, "model.n_buses"));
    const auto& regions = get_array(*part, "model.partition");
    for (std::size_t r = 0; r < regions.size(); ++r)
      m.partition.push_back(get_ids(regions[r], "model.partition[" + std::to_string(r) + "]"));
    const toml::node* A = t->get("A");
    const toml::node* ad = t->get("a_diag");
    if (A && ad) fail(*ad, "model.a_diag", "give either A or a_diag");
    if (A) m.A = get_matrix(*A, "model.A");
    else if (ad) m.A = get_vector(*ad, "model.a_diag").asDiagonal();
    else m.A = Matrix::Identity(m.state_dim, m.state_dim);
    m.sigma_v2 = m.sigma_w2 = 1e-4;
    m.x0 = Vector::Zero(m.state_dim);
  }
  if (const auto* n = t->get("sigma_v2")) m.sigma_v2 = get_double(*n, "model.sigma_v2");
  if (const auto* n = t->get("sigma_w2")) m.sigma_w2 = get_double(*n, "model.sigma_w2");
  if (const auto* n = t->get("x0")) m.x0 = get_vector(*n, "model.x0");
  return m;
}

inline MisbehaviorKind parse_kind(const toml::node& n, const std::string& path) {
  const auto s = get_string(n, path);
  if (s == "silent_fdi") return MisbehaviorKind::SilentFdi;
  if (s == "constant_estimate") return MisbehaviorKind::ConstantEstimate;
  if (s == "random_estimate") return MisbehaviorKind::RandomEstimate;
  fail(n, path, "expected silent_fdi, constant_estimate or random_estimate");
}

inline VotePolicy parse_votes(const toml::node& n, const std::string& path) {
  const auto s = get_string(n, path);
  if (s == "honest") return VotePolicy::Honest;
  if (s == "always_yes") return VotePolicy::AlwaysYes;
  if (s == "always_no") return VotePolicy::AlwaysNo;
  fail(n, path, "expected honest, always_yes or always_no");
}

inline AlarmPolicy parse_policy(const toml::node& n, const std::string& path) {
  const auto s = get_string(n, path);
  if (s == "halt") return AlarmPolicy::Halt;
  if (s == "restart") return AlarmPolicy::Restart;
  if (s == "monitor") return AlarmPolicy::Monitor;
  fail(n, path, "expected halt, restart or monitor");
}

inline const toml::array* table_array(const toml::table& t, std::string_view key, const std::string& path) {
  const toml::node* n = t.get(key);
  if (!n) return nullptr;
  if (!n->is_array_of_tables() && !(n->is_array() && n->as_array()->empty()))
    fail(*n, path, "expected an array of tables");
  return n->as_array();
}

// Sets table[path] = value, creating intermediate tables. The value is parsed
// as a TOML expression; anything that does not parse is taken as a string.
inline void apply_override(toml::table& root, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0)
    throw Error(Errc::ConfigError, "--set expects key=value, got '" + assignment + "'");
  const std::string key = assignment.substr(0, eq);
  const std::string raw = assignment.substr(eq + 1);
  std::vector<std::string> parts;
  std::stringstream ss(key);
  for (std::string p; std::getline(ss, p, '.');) {
    if (p.empty()) throw Error(Errc::ConfigError, "--set key '" + key + "' has an empty component");
    parts.push_back(p);
  }
  toml::table* t = &root;
  for (std::size_t i = 0; i + 1 < parts.size(); ++i) {
    toml::node* n = t->get(parts[i]);
    if (!n) n = t->insert(parts[i], toml::table{}).first->second.as_table();
    if (!n->is_table()) throw Error(Errc::ConfigError, "--set key '" + key + "': '" + parts[i] + "' is not a table");
    t = n->as_table();
  }
  toml::table parsed;
  try {
    parsed = toml::parse("v = " + raw);
  } catch (const toml::parse_error&) {
    parsed = toml::table{{"v", raw}};
  }
  t->insert_or_assign(parts.back(), *parsed.get("v"));
}

}  // namespace config_detail

inline RunConfig config_from_table(const toml::table& root) {
  using namespace config_detail;
  only_keys(root, "", {"model", "detection", "ledger", "estimator", "scenario", "output"});
  RunConfig cfg;
  Scenario& sc = cfg.scenario;
  sc.model = parse_model(sub_table(root, "model", "model"));

  if (const auto* t = sub_table(root, "detection", "detection")) {
    only_keys(*t, "detection", {"alpha", "L_target", "h", "trust_alpha", "trust_h"});
    if (const auto* n = t->get("alpha")) sc.alpha = get_double(*n, "detection.alpha");
    if (const auto* n = t->get("L_target")) sc.L_target = get_double(*n, "detection.L_target");
    if (const auto* n = t->get("h")) {
      sc.h = get_double(*n, "detection.h");
      if (!(sc.h > 0.0)) fail(*n, "detection.h", "must be positive");
    }
    if (const auto* n = t->get("trust_alpha")) sc.trust_alpha = get_double(*n, "detection.trust_alpha");
    if (const auto* n = t->get("trust_h")) sc.trust_h = get_double(*n, "detection.trust_h");
  }

  if (const auto* t = sub_table(root, "ledger", "ledger")) {
    only_keys(*t, "ledger", {"M", "difficulty", "miners_per_block", "enabled", "sign_exchanges"});
    if (const auto* n = t->get("M")) {
      const auto v = get_int(*n, "ledger.M");
      if (v < 1) fail(*n, "ledger.M", "must be at least 1");
      sc.ledger_capacity = static_cast<std::size_t>(v);
    }
    if (const auto* n = t->get("difficulty")) {
      const auto v = get_int(*n, "ledger.difficulty");
      if (v < 0 || v > 32) fail(*n, "ledger.difficulty", "must be in [0, 32]");
      sc.difficulty = static_cast<int>(v);
    }
    if (const auto* n = t->get("miners_per_block")) sc.miners_per_block = static_cast<int>(get_int(*n, "ledger.miners_per_block"));
    if (const auto* n = t->get("enabled")) sc.use_ledger = get_bool(*n, "ledger.enabled");
    if (const auto* n = t->get("sign_exchanges")) sc.sign_exchanges = get_bool(*n, "ledger.sign_exchanges");
  }

  if (const auto* t = sub_table(root, "estimator", "estimator")) {
    only_keys(*t, "estimator", {"cross_blocks", "initial_variance", "freeze_tolerance"});
    if (const auto* n = t->get("cross_blocks")) {
      const auto s = get_string(*n, "estimator.cross_blocks");
      if (s == "zero") sc.schedule.cross_policy = CrossBlockPolicy::ZeroAll;
      else if (s == "shared") sc.schedule.cross_policy = CrossBlockPolicy::SharedFromSchedules;
      else fail(*n, "estimator.cross_blocks", "expected zero or shared");
    }
    if (const auto* n = t->get("initial_variance")) sc.schedule.initial_variance = get_double(*n, "estimator.initial_variance");
    if (const auto* n = t->get("freeze_tolerance")) sc.schedule.freeze_tolerance = get_double(*n, "estimator.freeze_tolerance");
  }

  if (const auto* t = sub_table(root, "scenario", "scenario")) {
    only_keys(*t, "scenario", {"T", "seed", "investigation_delay", "on_alarm", "stop_when_all_alarmed", "trust",
                               "baselines", "robust_alpha", "robust_covariance", "attacks", "misbehaviors"});
    if (const auto* n = t->get("T")) sc.horizon = get_int(*n, "scenario.T");
    if (const auto* n = t->get("seed")) sc.seed = static_cast<std::uint64_t>(get_int(*n, "scenario.seed"));
    if (const auto* n = t->get("investigation_delay")) sc.investigation_delay = get_int(*n, "scenario.investigation_delay");
    if (const auto* n = t->get("on_alarm")) sc.on_alarm = parse_policy(*n, "scenario.on_alarm");
    if (const auto* n = t->get("stop_when_all_alarmed")) sc.stop_when_all_alarmed = get_bool(*n, "scenario.stop_when_all_alarmed");
    if (const auto* n = t->get("trust")) sc.trust_enabled = get_bool(*n, "scenario.trust");
    if (const auto* n = t->get("robust_alpha")) sc.robust_alpha = get_double(*n, "scenario.robust_alpha");
    if (const auto* n = t->get("robust_covariance")) {
      const auto s = get_string(*n, "scenario.robust_covariance");
      if (s == "skip_on_reject") sc.robust_covariance = RobustCovariance::SkipOnReject;
      else if (s == "literal") sc.robust_covariance = RobustCovariance::Literal;
      else fail(*n, "scenario.robust_covariance", "expected skip_on_reject or literal");
    }
    if (const auto* n = t->get("baselines")) {
      sc.centralized_baseline = sc.robust_baseline = sc.norecovery_baseline = false;
      const auto& a = get_array(*n, "scenario.baselines");
      for (std::size_t i = 0; i < a.size(); ++i) {
        const auto s = get_string(a[i], "scenario.baselines");
        if (s == "centralized") sc.centralized_baseline = true;
        else if (s == "robust") sc.robust_baseline = true;
        else if (s == "norecovery") sc.norecovery_baseline = true;
        else fail(a[i], "scenario.baselines", "expected centralized, robust or norecovery");
      }
    }
    if (const auto* arr = table_array(*t, "attacks", "scenario.attacks")) {
      for (std::size_t i = 0; i < arr->size(); ++i) {
        const std::string p = "scenario.attacks[" + std::to_string(i) + "]";
        const auto& at = *(*arr)[i].as_table();
        only_keys(at, p, {"subregions", "onset", "magnitude"});
        AttackSpec a;
        if (const auto* n = at.get("subregions")) a.subregions = get_ids(*n, p + ".subregions");
        else fail(at, p, "missing subregions");
        if (const auto* n = at.get("onset")) a.onset = get_int(*n, p + ".onset");
        if (const auto* n = at.get("magnitude")) a.magnitude = get_double(*n, p + ".magnitude");
        sc.attacks.push_back(std::move(a));
      }
    }
    if (const auto* arr = table_array(*t, "misbehaviors", "scenario.misbehaviors")) {
      for (std::size_t i = 0; i < arr->size(); ++i) {
        const std::string p = "scenario.misbehaviors[" + std::to_string(i) + "]";
        const auto& mt = *(*arr)[i].as_table();
        only_keys(mt, p, {"node", "onset", "kind", "magnitude", "votes"});
        MisbehaviorSpec m;
        if (const auto* n = mt.get("node")) {
          const auto v = get_int(*n, p + ".node");
          if (v < 1) fail(*n, p + ".node", "node ids are 1-based");
          m.node = static_cast<int>(v - 1);
        } else {
          fail(mt, p, "missing node");
        }
        if (const auto* n = mt.get("onset")) m.onset = get_int(*n, p + ".onset");
        if (const auto* n = mt.get("kind")) m.kind = parse_kind(*n, p + ".kind");
        if (const auto* n = mt.get("magnitude")) m.magnitude = get_double(*n, p + ".magnitude");
        if (const auto* n = mt.get("votes")) m.votes = parse_votes(*n, p + ".votes");
        sc.misbehaviors.push_back(m);
      }
    }
  }

  if (const auto* t = sub_table(root, "output", "output")) {
    only_keys(*t, "output", {"dir", "csv", "json", "ledger"});
    if (const auto* n = t->get("dir")) cfg.output.dir = get_string(*n, "output.dir");
    if (const auto* n = t->get("csv")) cfg.output.csv = get_string(*n, "output.csv");
    if (const auto* n = t->get("json")) cfg.output.json = get_string(*n, "output.json");
    if (const auto* n = t->get("ledger")) cfg.output.ledger = get_string(*n, "output.ledger");
  }

  try {
    validate_scenario(sc);
  } catch (const Error& e) {
    throw Error(Errc::ConfigError, e.what());
  }
  return cfg;
}

inline toml::table parse_config_text(std::string_view text, std::string_view source = "config") {
  try {
    return toml::parse(text, source);
  } catch (const toml::parse_error& e) {
    std::ostringstream os;
    os << source << " line " << e.source().begin.line << ": " << e.description();
    throw Error(Errc::ConfigError, os.str());
  }
}

inline RunConfig load_config(const std::filesystem::path& path, const std::vector<std::string>& overrides = {}) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(Errc::ConfigError, "cannot open config file " + path.string());
  std::stringstream buf;
  buf << in.rdbuf();
  toml::table root = parse_config_text(buf.str(), path.string());
  for (const auto& o : overrides) config_detail::apply_override(root, o);
  return config_from_table(root);
}

inline RunConfig load_config_text(std::string_view text, const std::vector<std::string>& overrides = {}) {
  toml::table root = parse_config_text(text);
  for (const auto& o : overrides) config_detail::apply_override(root, o);
  return config_from_table(root);
}

}  // namespace gridsec
