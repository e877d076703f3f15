#pragma once

// Long runs shared by several test files (computed once per process).

#include "gridsec/simnet.hpp"

namespace fixture {

// 1e5 regular IEEE-14 steps with trust evaluation and no baselines.
inline const gridsec::RunRecord& long_regular_run() {
  static const gridsec::RunRecord rec = [] {
    gridsec::Scenario sc;
    sc.model = gridsec::ieee14_default();
    sc.horizon = 100000;
    sc.seed = 2024;
    sc.use_ledger = false;
    sc.on_alarm = gridsec::AlarmPolicy::Monitor;
    sc.centralized_baseline = sc.robust_baseline = sc.norecovery_baseline = false;
    return gridsec::run(sc);
  }();
  return rec;
}

}  // namespace fixture
