#include <gtest/gtest.h>

#include <cmath>

#include "gridsec/simnet.hpp"
#include "oracles.hpp"

using namespace gridsec;

namespace {

Scenario light(std::uint64_t seed, std::int64_t horizon) {
  Scenario sc;
  sc.model = ieee14_default();
  sc.seed = seed;
  sc.horizon = horizon;
  sc.use_ledger = false;
  return sc;
}

}  // namespace

TEST(StepTruth, NoiselessAndDeterministic) {
  auto m = ieee14_default();
  m.sigma_v2 = m.sigma_w2 = 0.0;
  RandomStream p(1, Stream::ProcessNoise), w(1, Stream::MeasurementNoise);
  const auto s = step_truth(m.x0, m, p, w);
  EXPECT_EQ(s.x, m.x0);
  EXPECT_EQ(s.y, Vector(m.H * m.x0));

  const auto n = ieee14_default();
  RandomStream p1(4, Stream::ProcessNoise), w1(4, Stream::MeasurementNoise);
  RandomStream p2(4, Stream::ProcessNoise), w2(4, Stream::MeasurementNoise);
  Vector a = n.x0, b = n.x0;
  for (int t = 0; t < 50; ++t) {
    const auto sa = step_truth(a, n, p1, w1);
    const auto sb = step_truth(b, n, p2, w2);
    ASSERT_EQ(sa.y, sb.y);
    a = sa.x;
    b = sb.x;
  }
  EXPECT_EQ(a, b);
}

TEST(StepTruth, IncrementVarianceMatchesProcessNoise) {
  const auto m = ieee14_default();
  RandomStream p(2, Stream::ProcessNoise), w(2, Stream::MeasurementNoise);
  const int n = 100000;
  Vector x = m.x0, sum = Vector::Zero(m.state_dim), sq = Vector::Zero(m.state_dim);
  for (int t = 0; t < n; ++t) {
    const auto s = step_truth(x, m, p, w);
    const Vector d = s.x - x;
    sum += d;
    sq += d.cwiseProduct(d);
    x = s.x;
  }
  for (Index i = 0; i < m.state_dim; ++i) {
    const double mean = sum(i) / n;
    const double var = sq(i) / n - mean * mean;
    EXPECT_NEAR(var / m.sigma_v2, 1.0, 0.05) << "state " << i;
  }
}

TEST(ApplyAttack, Examples) {
  const auto m = ieee14_default();
  RandomStream rng(3, Stream::Attack);
  const Vector y = Vector::LinSpaced(m.n_sensors, -1.0, 1.0);

  Vector zero = y;
  apply_attack(zero, {{{0, 1}, 1, 0.0}}, m, 10, rng);
  EXPECT_EQ(zero, y);

  Vector early = y;
  apply_attack(early, {{{0, 1}, 200, 0.3}}, m, 199, rng);
  EXPECT_EQ(early, y);

  Vector hit = y;
  apply_attack(hit, {{{1}, 200, 0.3}}, m, 200, rng);
  for (int k = 0; k < m.n_sensors; ++k) {
    const bool targeted = std::find(m.partition[1].begin(), m.partition[1].end(), k) != m.partition[1].end();
    if (targeted) {
      EXPECT_GE(hit(k) - y(k), 0.0);
      EXPECT_LE(hit(k) - y(k), 0.3);
    } else {
      EXPECT_EQ(hit(k), y(k));
    }
  }
}

TEST(ApplyAttack, UniformMean) {
  auto m = ieee14_default();
  m.partition = {{0}};
  RandomStream rng(5, Stream::Attack);
  double sum = 0.0;
  const int n = 100000;
  for (int i = 0; i < n; ++i) {
    Vector y = Vector::Zero(m.n_sensors);
    apply_attack(y, {{{0}, 1, 0.3}}, m, 1, rng);
    sum += y(0);
  }
  EXPECT_NEAR(sum / n, 0.15, 0.15 * 0.01);
}

TEST(CentralizedKalman, ZeroInnovationAndScalar) {
  const auto m = ieee14_default();
  GaussianBelief b{m.x0, m.sigma_v2 * Matrix::Identity(m.state_dim, m.state_dim)};
  const auto out = centralized_kalman_step(b, m, Vector(m.H * m.A * m.x0));
  EXPECT_LT((out.mean - m.x0).cwiseAbs().maxCoeff(), 1e-15);

  GlobalSystemModel s;
  s.n_buses = 2;
  s.n_sensors = 1;
  s.state_dim = 1;
  s.A = Matrix::Identity(1, 1);
  s.H = Matrix::Ones(1, 1);
  s.sigma_v2 = 1.0;
  s.sigma_w2 = 1.0;
  s.partition = {{0}};
  s.x0 = Vector::Zero(1);
  GaussianBelief one{Vector::Zero(1), Matrix::Ones(1, 1)};
  const auto r = centralized_kalman_step(one, s, Vector::Constant(1, 3.0));
  // prior variance 2, gain 2/3
  EXPECT_NEAR(r.mean(0), 2.0, 1e-15);
  EXPECT_NEAR(r.cov(0, 0), 2.0 / 3.0, 1e-15);
}

TEST(RobustKalman, AcceptsAndRejects) {
  const auto m = ieee14_default();
  GaussianBelief b{m.x0, m.sigma_v2 * Matrix::Identity(m.state_dim, m.state_dim)};
  RandomStream rng(6, std::uint64_t{0});
  Vector y = m.H * m.x0;
  for (Index k = 0; k < y.size(); ++k) y(k) += 0.5 * std::sqrt(m.sigma_w2) * rng.normal();
  bool rejected = true;
  const auto r = robust_kalman_step(b, m, y, 0.01, &rejected);
  ASSERT_FALSE(rejected);
  const auto c = centralized_kalman_step(b, m, y);
  EXPECT_EQ(r.mean, c.mean);
  EXPECT_EQ(r.cov, c.cov);

  Vector outlier = y;
  outlier(3) += 100.0;
  const auto o = robust_kalman_step(b, m, outlier, 0.01, &rejected);
  EXPECT_TRUE(rejected);
  EXPECT_EQ(o.mean, Vector(m.A * b.mean));
  const auto lit = robust_kalman_step(b, m, outlier, 0.01, &rejected, RobustCovariance::Literal);
  EXPECT_EQ(lit.mean, Vector(m.A * b.mean));
  EXPECT_LT(lit.cov.trace(), o.cov.trace());
}

TEST(RobustKalman, RegularRejectionRateNearOnePercent) {
  Scenario sc = light(1, 10000);
  sc.trust_enabled = false;
  sc.on_alarm = AlarmPolicy::Monitor;
  sc.norecovery_baseline = false;
  sc.record_series = false;
  const auto rec = run(sc);
  EXPECT_NEAR(double(rec.robust_rejections) / 10000.0, 0.01, 0.003);
}

TEST(Run, RegularOperationRaisesNoAlarm) {
  for (std::uint64_t seed : {1u, 2u, 3u}) {
    Scenario sc = light(seed, 1000);
    sc.h = 21.3527;
    const auto rec = run(sc);
    EXPECT_EQ(rec.network_alarm, kNoAlarm) << "seed " << seed;
    EXPECT_EQ(rec.last_timestep, 1000);
    EXPECT_EQ(rec.mse_proposed.size(), 1000u);
  }
}

TEST(Run, FullyDeterministic) {
  Scenario sc = light(8, 300);
  sc.use_ledger = true;
  sc.record_states = true;
  sc.attacks.push_back({{0, 1}, 150, 0.2});
  sc.investigation_delay = 20;
  sc.on_alarm = AlarmPolicy::Restart;
  const auto a = run(sc);
  const auto b = run(sc);
  EXPECT_EQ(a.mse_proposed, b.mse_proposed);
  EXPECT_EQ(a.mse_centralized, b.mse_centralized);
  EXPECT_EQ(a.mse_robust, b.mse_robust);
  EXPECT_EQ(a.chi, b.chi);
  EXPECT_EQ(a.pi, b.pi);
  EXPECT_EQ(a.g_measurement, b.g_measurement);
  EXPECT_EQ(a.votes, b.votes);
  EXPECT_EQ(a.events, b.events);
  EXPECT_EQ(a.network_alarm, b.network_alarm);
  EXPECT_EQ(export_ledger(*a.ledger), export_ledger(*b.ledger));
  ASSERT_EQ(a.posteriors.size(), b.posteriors.size());
  for (std::size_t t = 0; t < a.posteriors.size(); ++t) ASSERT_EQ(a.posteriors[t], b.posteriors[t]);
}

TEST(Run, CaseOneAlarmsInsideAttackWindow) {
  for (std::uint64_t seed = 1; seed <= 10; ++seed) {
    Scenario sc = light(seed, 250);
    sc.attacks.push_back({{0, 1}, 200, 0.3});
    sc.investigation_delay = 50;
    const auto rec = run(sc);
    ASSERT_NE(rec.network_alarm, kNoAlarm);
    EXPECT_GE(rec.network_alarm, 200);
    EXPECT_LE(rec.network_alarm, 250);
    ASSERT_TRUE(rec.recovery_point.has_value());
    EXPECT_LE(*rec.recovery_point, rec.network_alarm);
    EXPECT_EQ(rec.last_timestep, std::min<std::int64_t>(250, rec.network_alarm + 50));
  }
}

// Several detectors alarm at once: recovery starts at the oldest change-point.
TEST(Run, SimultaneousAlarmsUseOldestChangePoint) {
  Scenario sc = light(4, 250);
  sc.attacks.push_back({{0, 1}, 150, 0.5});
  const auto rec = run(sc);
  ASSERT_TRUE(rec.recovery_requested.has_value());
  int simultaneous = 0;
  for (int l = 0; l < rec.node_count; ++l) {
    if (rec.measurement_alarm[std::size_t(l)] != rec.network_alarm) continue;
    ++simultaneous;
    EXPECT_LE(*rec.recovery_requested, *rec.measurement_tau_hat[std::size_t(l)]);
  }
  EXPECT_GE(simultaneous, 2);
  bool matches = false;
  for (int l = 0; l < rec.node_count; ++l)
    matches |= rec.measurement_alarm[std::size_t(l)] == rec.network_alarm &&
               rec.measurement_tau_hat[std::size_t(l)] == rec.recovery_requested;
  for (int j = 0; j < rec.node_count; ++j)
    for (int l = 0; l < rec.node_count; ++l)
      matches |= rec.evaluator_eta_hat[std::size_t(j)][std::size_t(l)] == rec.recovery_requested;
  EXPECT_TRUE(matches);
}

TEST(Run, RestartResumesAfterInvestigation) {
  Scenario sc = light(2, 400);
  sc.attacks.push_back({{0}, 100, 0.3});
  sc.on_alarm = AlarmPolicy::Restart;
  sc.investigation_delay = 30;
  const auto rec = run(sc);
  EXPECT_EQ(rec.last_timestep, 400);
  EXPECT_GE(rec.restarts, 1);
  // anomalies are cleared at the restart, so later steps look regular
  const auto late = window_average(rec, 300, 400);
  const auto quiet = window_average(run(light(2, 400)), 300, 400);
  EXPECT_LT(late.proposed, 3.0 * quiet.proposed);
}

TEST(Run, CaseTwoTrustDeclaresSilentNode) {
  double previous = 1e9;
  for (double rho : {0.05, 0.1, 0.3}) {
    double delay = 0.0;
    for (std::uint64_t seed = 1; seed <= 20; ++seed) {
      Scenario sc = light(seed, 600);
      sc.on_alarm = AlarmPolicy::Monitor;
      sc.misbehaviors.push_back({2, 1, MisbehaviorKind::SilentFdi, rho, VotePolicy::Honest});
      const auto rec = run(sc);
      EXPECT_FALSE(rec.measurement_alarm[2].has_value());
      ASSERT_TRUE(rec.declared[2].has_value()) << "rho " << rho << " seed " << seed;
      delay += double(*rec.declared[2] - 1);
    }
    EXPECT_LE(delay / 20.0, previous) << "rho " << rho;
    previous = delay / 20.0;
  }
}

TEST(Run, RandomEstimateIsDeclared) {
  for (std::uint64_t seed = 1; seed <= 3; ++seed) {
    Scenario sc = light(seed, 400);
    sc.on_alarm = AlarmPolicy::Monitor;
    sc.misbehaviors.push_back({1, 50, MisbehaviorKind::RandomEstimate, 0.01, VotePolicy::Honest});
    const auto rec = run(sc);
    ASSERT_TRUE(rec.declared[1].has_value()) << seed;
    EXPECT_GE(*rec.declared[1], 50);
  }
}

// A frozen estimate has zero increment, so its trust statistic is zero and never accumulates evidence.
TEST(Run, ConstantEstimateIsInvisibleToTrust) {
  Scenario sc = light(3, 400);
  sc.on_alarm = AlarmPolicy::Monitor;
  sc.misbehaviors.push_back({1, 50, MisbehaviorKind::ConstantEstimate, 0.0, VotePolicy::Honest});
  const auto rec = run(sc);
  EXPECT_FALSE(rec.declared[1].has_value());
  for (std::size_t i = 51; i < rec.pi[1].size(); ++i) EXPECT_EQ(rec.pi[1][i], 0.0) << "t=" << i + 1;
}

TEST(Run, ValidationErrors) {
  Scenario bad = light(1, 0);
  EXPECT_THROW(run(bad), Error);
  Scenario dup = light(1, 10);
  dup.misbehaviors = {{1, 1, MisbehaviorKind::SilentFdi, 0.1, VotePolicy::Honest},
                      {1, 5, MisbehaviorKind::ConstantEstimate, 0.0, VotePolicy::Honest}};
  EXPECT_THROW(run(dup), Error);
  Scenario unknown = light(1, 10);
  unknown.misbehaviors = {{7, 1, MisbehaviorKind::SilentFdi, 0.1, VotePolicy::Honest}};
  EXPECT_THROW(run(unknown), Error);
  Scenario region = light(1, 10);
  region.attacks = {{{4}, 1, 0.1}};
  EXPECT_THROW(run(region), Error);
  Scenario negative = light(1, 10);
  negative.attacks = {{{0}, 1, -0.1}};
  EXPECT_THROW(run(negative), Error);
}

TEST(Metrics, ZeroErrorAndIdenticalRuns) {
  RunRecord rec;
  rec.last_timestep = 5;
  rec.mse_proposed = rec.mse_centralized = rec.mse_robust = rec.mse_norecovery = std::vector<double>(5, 0.0);
  Scenario sc;
  const auto s = collect_metrics(rec, sc);
  EXPECT_EQ(s.full.proposed, 0.0);
  EXPECT_EQ(s.full.centralized, 0.0);
  EXPECT_EQ(s.full.steps, 5);
  EXPECT_FALSE(s.detection_delay.has_value());

  Scenario a = light(5, 250);
  a.attacks.push_back({{0, 1}, 200, 0.3});
  const auto r1 = run(a), r2 = run(a);
  const auto m1 = collect_metrics(r1, a), m2 = collect_metrics(r2, a);
  EXPECT_EQ(m1.full.proposed, m2.full.proposed);
  EXPECT_EQ(m1.attack_window->centralized, m2.attack_window->centralized);
  EXPECT_EQ(m1.detection_delay, m2.detection_delay);
  EXPECT_EQ(*m1.detection_delay, r1.network_alarm - 200);
}

// No-recovery error grows with the attack magnitude; the proposed one after detection does not.
TEST(Metrics, RecoveryGapGrowsWithMagnitude) {
  std::vector<double> gap, proposed;
  for (double rho : {0.1, 0.3, 0.5}) {
    double p = 0.0, nr = 0.0;
    for (std::uint64_t seed = 1; seed <= 100; ++seed) {
      Scenario sc = light(seed, 250);
      sc.attacks.push_back({{0, 1}, 200, rho});
      sc.investigation_delay = 50;
      const auto s = collect_metrics(run(sc), sc);
      ASSERT_TRUE(s.attack_window.has_value());
      ASSERT_TRUE(s.post_detection.has_value());
      p += s.post_detection->proposed;
      nr += s.attack_window->norecovery - s.attack_window->proposed;
    }
    gap.push_back(nr);
    proposed.push_back(p);
  }
  EXPECT_LT(gap[0], gap[1]);
  EXPECT_LT(gap[1], gap[2]);
  EXPECT_LT(std::abs(proposed[2] / proposed[0] - 1.0), 0.05) << proposed[0] << ' ' << proposed[1] << ' ' << proposed[2];
}
