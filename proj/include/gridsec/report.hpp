#pragma once

// CSV and JSON renderings of a RunRecord.
//
// CSV columns, in order (node ids 1-based):
//   t, mse_1..mse_L, g_1..g_L, trust_g_1..trust_g_L, alarm_1..alarm_L,
//   declared_1..declared_L, mse_proposed, mse_centralized, mse_robust,
//   mse_norecovery
// trust_g_l is the largest evaluator statistic about node l; alarm_l and
// declared_l are 0/1 flags that stay 1 once raised.

#include <cstdio>
#include <optional>
#include <sstream>
#include <string>

#include <nlohmann/json.hpp>

#include "gridsec/simnet.hpp"

namespace gridsec {

namespace report_detail {

// Shortest representation that round-trips binary64.
inline std::string num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline nlohmann::json opt_time(const std::optional<std::int64_t>& v) {
  return v ? nlohmann::json(*v) : nlohmann::json(nullptr);
}

}  // namespace report_detail

inline std::string to_csv(const RunRecord& rec) {
  using report_detail::num;
  const int L = rec.node_count;
  std::ostringstream os;
  os << "t";
  for (const char* prefix : {"mse_", "g_", "trust_g_", "alarm_", "declared_"})
    for (int l = 1; l <= L; ++l) os << ',' << prefix << l;
  os << ",mse_proposed,mse_centralized,mse_robust,mse_norecovery\n";
  const std::size_t rows = rec.mse_proposed.size();
  for (std::size_t i = 0; i < rows; ++i) {
    os << (i + 1);
    for (int l = 0; l < L; ++l) os << ',' << num(rec.mse_node[std::size_t(l)][i]);
    for (int l = 0; l < L; ++l) os << ',' << num(rec.g_measurement[std::size_t(l)][i]);
    for (int l = 0; l < L; ++l) os << ',' << num(rec.g_trust[std::size_t(l)][i]);
    for (int l = 0; l < L; ++l) os << ',' << int(rec.alarm_flag[std::size_t(l)][i]);
    for (int l = 0; l < L; ++l) os << ',' << int(rec.declared_flag[std::size_t(l)][i]);
    os << ',' << num(rec.mse_proposed[i]) << ',' << num(rec.mse_centralized[i]) << ',' << num(rec.mse_robust[i])
       << ',' << num(rec.mse_norecovery[i]) << '\n';
  }
  return os.str();
}

inline nlohmann::json window_json(const WindowAverage& w) {
  return {{"proposed", w.proposed},
          {"centralized", w.centralized},
          {"robust", w.robust},
          {"norecovery", w.norecovery},
          {"steps", w.steps}};
}

inline nlohmann::json summary_json(const RunRecord& rec, const Scenario& sc) {
  using report_detail::opt_time;
  const auto metrics = collect_metrics(rec, sc);
  nlohmann::json j;
  j["seed"] = sc.seed;
  j["horizon"] = sc.horizon;
  j["last_timestep"] = rec.last_timestep;
  j["h"] = rec.h;
  j["trust_h"] = rec.trust_h;
  j["network_alarm"] = rec.network_alarm == kNoAlarm ? nlohmann::json(nullptr) : nlohmann::json(rec.network_alarm);
  j["recovery_point"] = opt_time(rec.recovery_point);
  j["recovery_change_point"] = opt_time(rec.recovery_requested);
  j["recovery_fallback"] = rec.recovery_fallback;
  j["restarts"] = rec.restarts;
  j["robust_rejections"] = rec.robust_rejections;
  j["hash_evaluations"] = rec.hash_evaluations;
  j["rejected_exchanges"] = rec.rejected_exchanges;

  nlohmann::json nodes = nlohmann::json::array();
  for (int l = 0; l < rec.node_count; ++l) {
    const auto i = std::size_t(l);
    nlohmann::json n;
    n["node"] = l + 1;
    n["measurement_alarm"] = opt_time(rec.measurement_alarm[i]);
    n["measurement_change_point"] = opt_time(rec.measurement_tau_hat[i]);
    n["declared"] = opt_time(rec.declared[i]);
    n["declared_honest_only"] = opt_time(rec.declared_honest_only[i]);
    nlohmann::json ev = nlohmann::json::object();
    for (int e = 0; e < rec.node_count; ++e)
      if (e != l) ev[std::to_string(e + 1)] = opt_time(rec.evaluator_alarm[std::size_t(e)][i]);
    n["evaluator_alarms"] = ev;
    nodes.push_back(n);
  }
  j["nodes"] = nodes;

  nlohmann::json m;
  m["full"] = window_json(metrics.full);
  if (metrics.attack_window) m["attack_window"] = window_json(*metrics.attack_window);
  if (metrics.post_detection) m["post_detection"] = window_json(*metrics.post_detection);
  m["first_onset"] = opt_time(metrics.first_onset);
  m["detection_delay"] = opt_time(metrics.detection_delay);
  j["metrics"] = m;
  j["events"] = rec.events;
  return j;
}

}  // namespace gridsec
