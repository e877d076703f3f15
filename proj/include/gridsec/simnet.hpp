#pragma once

// Deterministic scenario engine. One call to run() plays the whole network:
// ground truth, attacks, the per-node filters with processed-measurement
// exchange, anomaly detectors, the ledger, trust voting, recovery and the
// centralized baselines. All randomness comes from seeded purpose streams.

#include <algorithm>
#include <cstdint>
#include <deque>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "gridsec/detection.hpp"
#include "gridsec/estimator.hpp"
#include "gridsec/ledger.hpp"
#include "gridsec/model.hpp"
#include "gridsec/rng.hpp"
#include "gridsec/trust.hpp"

namespace gridsec {

// a_{i,t} ~ Uniform[0, magnitude] on every sensor of the listed subregions for t >= onset.
struct AttackSpec {
  std::vector<int> subregions;
  std::int64_t onset = 1;
  double magnitude = 0.0;
};

enum class MisbehaviorKind {
  SilentFdi,         // injects FDI into its own sensors and skips its measurement detector
  ConstantEstimate,  // publishes the estimate it held at onset - 1 from then on
  RandomEstimate,    // publishes its estimate plus N(0, magnitude^2) noise
};

enum class VotePolicy { Honest, AlwaysYes, AlwaysNo };

struct MisbehaviorSpec {
  int node = 0;
  std::int64_t onset = 1;
  MisbehaviorKind kind = MisbehaviorKind::SilentFdi;
  double magnitude = 0.0;
  VotePolicy votes = VotePolicy::Honest;
};

enum class AlarmPolicy {
  Halt,     // recover, predict through the investigation window, then stop
  Restart,  // recover, predict through the window, clear anomalies, re-arm once filters settle
  Monitor,  // record alarms only; no recovery, detectors stop at their own alarm
};

enum class RobustCovariance {
  // A rejected step keeps P_{t|t} = P_{t|t-1}; the filter stays calibrated.
  SkipOnReject,
  // The pseudo measurement is absorbed like a real one (P shrinks anyway).
  Literal,
};

struct Scenario {
  GlobalSystemModel model;
  std::int64_t horizon = 1000;
  std::uint64_t seed = 1;

  double alpha = 0.2;
  double L_target = 1e6;
  double h = 0.0;  // <= 0: derived from alpha and L_target
  double trust_alpha = 0.0;  // <= 0: alpha
  double trust_h = 0.0;      // <= 0: h

  std::size_t ledger_capacity = 200;
  int difficulty = 8;
  int miners_per_block = 2;
  bool use_ledger = true;       // false: plain estimate history, no crypto
  bool sign_exchanges = true;   // sign processed measurements (ledger mode only)
  bool trust_enabled = true;

  std::vector<AttackSpec> attacks;
  std::vector<MisbehaviorSpec> misbehaviors;
  std::int64_t investigation_delay = 0;
  AlarmPolicy on_alarm = AlarmPolicy::Halt;
  bool stop_when_all_alarmed = false;  // Monitor only

  bool centralized_baseline = true;
  bool robust_baseline = true;
  bool norecovery_baseline = true;
  double robust_alpha = 0.01;
  RobustCovariance robust_covariance = RobustCovariance::SkipOnReject;
  ScheduleOptions schedule;

  bool record_series = true;
  bool record_states = false;

  double threshold() const { return h > 0.0 ? h : threshold_for_false_alarm(alpha, L_target); }
  double trust_alpha_value() const { return trust_alpha > 0.0 ? trust_alpha : alpha; }
  double trust_threshold() const { return trust_h > 0.0 ? trust_h : threshold(); }
};

inline void validate_scenario(const Scenario& sc) {
  const auto report = validate(sc.model);
  if (!report.ok()) throw Error(Errc::InvalidModel, report.issues.front());
  const int L = sc.model.node_count();
  if (sc.horizon < 1) throw Error(Errc::ConfigError, "horizon T must be at least 1");
  if (sc.ledger_capacity < 1) throw Error(Errc::ConfigError, "ledger capacity M must be at least 1");
  if (sc.investigation_delay < 0) throw Error(Errc::ConfigError, "investigation delay must be nonnegative");
  check_alpha(sc.alpha);
  check_alpha(sc.trust_alpha_value());
  std::vector<int> seen(static_cast<std::size_t>(L), 0);
  for (const auto& m : sc.misbehaviors) {
    if (m.node < 0 || m.node >= L) throw Error(Errc::ConfigError, "misbehavior names an unknown node");
    if (m.onset < 1) throw Error(Errc::ConfigError, "misbehavior onset must be at least 1");
    if (!(m.magnitude >= 0.0)) throw Error(Errc::ConfigError, "misbehavior magnitude must be nonnegative");
    if (seen[std::size_t(m.node)]++) throw Error(Errc::ConfigError, "at most one misbehavior per node");
  }
  for (const auto& a : sc.attacks) {
    if (!(a.magnitude >= 0.0)) throw Error(Errc::ConfigError, "attack magnitude must be nonnegative");
    for (int s : a.subregions)
      if (s < 0 || s >= L) throw Error(Errc::ConfigError, "attack names an unknown subregion");
  }
}

// ---- truth, attacks, baselines -------------------------------------------

struct TruthSample {
  Vector x;
  Vector y;
};

inline TruthSample step_truth(const Vector& x_prev, const GlobalSystemModel& model, RandomStream& process_rng,
                              RandomStream& measurement_rng) {
  TruthSample s;
  s.x = model.A * x_prev;
  const double sv = std::sqrt(model.sigma_v2);
  for (Index i = 0; i < s.x.size(); ++i) s.x(i) += sv * process_rng.normal();
  s.y = model.H * s.x;
  const double sw = std::sqrt(model.sigma_w2);
  for (Index k = 0; k < s.y.size(); ++k) s.y(k) += sw * measurement_rng.normal();
  return s;
}

inline void apply_attack(Vector& y, const std::vector<AttackSpec>& specs, const GlobalSystemModel& model,
                         std::int64_t t, RandomStream& rng) {
  for (const auto& spec : specs) {
    if (t < spec.onset) continue;
    for (int region : spec.subregions)
      for (int k : model.partition.at(std::size_t(region))) y(k) += spec.magnitude * rng.uniform();
  }
}

inline GaussianBelief centralized_kalman_step(const GaussianBelief& belief, const GlobalSystemModel& model,
                                              const Vector& y) {
  Matrix P = model.A * belief.cov * model.A.transpose();
  P.diagonal().array() += model.sigma_v2;
  const Vector prior = model.A * belief.mean;
  const Matrix R = model.sigma_w2 * Matrix::Identity(model.n_sensors, model.n_sensors);
  auto cu = covariance_update(P, model.H, R);
  GaussianBelief out;
  out.mean = prior + cu.gain * (y - model.H * prior);
  out.cov = std::move(cu.posterior_cov);
  return out;
}

// Replaces y by H xhat_{t|t-1} when the global chi-squared p-value is below outlier_alpha.
inline GaussianBelief robust_kalman_step(const GaussianBelief& belief, const GlobalSystemModel& model,
                                         const Vector& y, double outlier_alpha = 0.01, bool* rejected = nullptr,
                                         RobustCovariance mode = RobustCovariance::SkipOnReject) {
  Matrix P = model.A * belief.cov * model.A.transpose();
  P.diagonal().array() += model.sigma_v2;
  const Vector prior = model.A * belief.mean;
  const Matrix R = model.sigma_w2 * Matrix::Identity(model.n_sensors, model.n_sensors);
  auto cu = covariance_update(P, model.H, R);
  const Vector innov = y - model.H * prior;
  const double chi = chi_statistic(innov, cu.innovation_cov);
  const bool reject = chi_squared_sf(chi, model.n_sensors) < outlier_alpha;
  if (rejected) *rejected = reject;
  GaussianBelief out;
  out.mean = reject ? prior : Vector(prior + cu.gain * innov);
  if (reject && mode == RobustCovariance::SkipOnReject) {
    symmetrize(P);
    out.cov = std::move(P);
  } else {
    out.cov = std::move(cu.posterior_cov);
  }
  return out;
}

// Covariance side of the centralized filter, frozen like the node schedule.
class CentralSchedule {
 public:
  CentralSchedule(const GlobalSystemModel& model, double p0, double freeze_tolerance)
      : model_(&model), tol_(freeze_tolerance) {
    posterior_ = p0 * Matrix::Identity(model.state_dim, model.state_dim);
    R_ = model.sigma_w2 * Matrix::Identity(model.n_sensors, model.n_sensors);
  }

  void advance() {
    if (converged_) return;
    Matrix P = model_->A * posterior_ * model_->A.transpose();
    P.diagonal().array() += model_->sigma_v2;
    auto cu = covariance_update(P, model_->H, R_);
    const double scale = posterior_.cwiseAbs().maxCoeff();
    const bool unchanged = started_ && (cu.posterior_cov - posterior_).cwiseAbs().maxCoeff() <= tol_ * scale;
    started_ = true;
    gain_ = std::move(cu.gain);
    posterior_ = std::move(cu.posterior_cov);
    if (unchanged) converged_ = true;
  }

  const Matrix& gain() const noexcept { return gain_; }

 private:
  const GlobalSystemModel* model_;
  double tol_;
  Matrix posterior_;
  Matrix R_;
  Matrix gain_;
  bool started_ = false;
  bool converged_ = false;
};

// Steps until the steady-state closed-loop error map (I - K H) A contracts
// below 1e-3 in Frobenius norm; detectors stay paused this long after a restart.
inline std::int64_t settling_steps(const GlobalSystemModel& m) {
  const Index n = m.state_dim;
  const Matrix R = m.sigma_w2 * Matrix::Identity(m.n_sensors, m.n_sensors);
  Matrix P = m.sigma_v2 * Matrix::Identity(n, n);
  Matrix K;
  for (int it = 0; it < 10000; ++it) {
    Matrix prior = m.A * P * m.A.transpose();
    prior.diagonal().array() += m.sigma_v2;
    auto cu = covariance_update(prior, m.H, R);
    const bool done = (cu.posterior_cov - P).cwiseAbs().maxCoeff() <= 1e-12 * P.cwiseAbs().maxCoeff();
    P = std::move(cu.posterior_cov);
    K = std::move(cu.gain);
    if (done) break;
  }
  const Matrix phi = (Matrix::Identity(n, n) - K * m.H) * m.A;
  Matrix power = Matrix::Identity(n, n);
  for (std::int64_t k = 1; k <= 10000; ++k) {
    power = phi * power;
    if (power.norm() <= 1e-3) return k;
  }
  return 10000;
}

// ---- run record -----------------------------------------------------------

struct RunRecord {
  int node_count = 0;
  std::int64_t last_timestep = 0;  // rows cover t = 1..last_timestep
  double h = 0.0;
  double trust_h = 0.0;

  // Per-timestep series, index t-1 (only when record_series).
  std::vector<double> mse_proposed, mse_centralized, mse_robust, mse_norecovery;
  std::vector<std::vector<double>> mse_node;      // [node][t-1]
  std::vector<std::vector<double>> chi;           // local chi statistic
  std::vector<std::vector<double>> p_value;       // its p-value
  std::vector<std::vector<double>> g_measurement;
  std::vector<std::vector<double>> pi;            // trust statistic of each target
  std::vector<std::vector<double>> g_trust;       // max over evaluators
  std::vector<std::vector<char>> alarm_flag;      // measurement detector alarmed by t
  std::vector<std::vector<char>> declared_flag;   // target declared by t
  std::vector<std::vector<int>> votes;            // yes votes about each target
  std::vector<std::vector<std::vector<double>>> g_evaluator;  // [j][l][t-1], empty for j == l
  std::vector<Vector> true_states;                // when record_states
  std::vector<std::vector<Vector>> posteriors;    // [t-1][node], when record_states

  // Events (timesteps are 1-based simulation time, node ids 0-based).
  std::vector<std::optional<std::int64_t>> measurement_alarm;      // first Gamma^l
  std::vector<std::optional<std::int64_t>> measurement_tau_hat;    // tau_hat at that alarm
  std::vector<std::vector<std::optional<std::int64_t>>> evaluator_alarm;    // [j][l] Gamma_j^l
  std::vector<std::vector<std::optional<std::int64_t>>> evaluator_eta_hat;  // [j][l]
  std::vector<std::optional<std::int64_t>> declared;               // Gamma_net^l
  std::vector<std::optional<std::int64_t>> declared_honest_only;   // tally without hacked voters
  std::int64_t network_alarm = kNoAlarm;                           // Gamma_net
  std::optional<std::int64_t> recovery_point;                      // t_R of the first recovery
  std::optional<std::int64_t> recovery_requested;                  // oldest change-point before fallback
  bool recovery_fallback = false;
  std::int64_t restarts = 0;
  std::int64_t robust_rejections = 0;
  std::uint64_t hash_evaluations = 0;
  std::int64_t rejected_exchanges = 0;
  std::vector<std::string> events;
  std::optional<Ledger> ledger;
};

// ---- engine ---------------------------------------------------------------

namespace detail {

// Retains the last `capacity` published estimate vectors when no ledger runs.
class EstimateHistory {
 public:
  explicit EstimateHistory(std::size_t capacity) : capacity_(capacity) {}
  void push(std::int64_t t, std::vector<Vector> estimates) {
    if (!rows_.empty() && t != first_ + static_cast<std::int64_t>(rows_.size()))
      throw Error(Errc::OutOfDomain, "history timesteps must be consecutive");
    if (rows_.empty()) first_ = t;
    rows_.push_back(std::move(estimates));
    while (rows_.size() > capacity_) {
      rows_.pop_front();
      ++first_;
    }
  }
  const Vector& get(std::int64_t t, int node) const {
    if (rows_.empty() || t < first_ || t >= first_ + static_cast<std::int64_t>(rows_.size()))
      throw Error(Errc::MissingBlock, "no estimate retained for t=" + std::to_string(t));
    return rows_[std::size_t(t - first_)].at(std::size_t(node));
  }
  bool has(std::int64_t t) const noexcept {
    return !rows_.empty() && t >= first_ && t < first_ + static_cast<std::int64_t>(rows_.size());
  }

 private:
  std::size_t capacity_;
  std::int64_t first_ = 0;
  std::deque<std::vector<Vector>> rows_;
};

inline Vector select_entries(const Vector& v, const std::vector<int>& idx) {
  Vector out(static_cast<Index>(idx.size()));
  for (std::size_t i = 0; i < idx.size(); ++i) out(Index(i)) = v(idx[i]);
  return out;
}

inline Bytes serialize_processed(const ProcessedMeasurement& pm) { return serialize_payload(pm.values); }

}  // namespace detail

class Simulator {
 public:
  explicit Simulator(Scenario scenario)
      : sc_(std::move(scenario)),
        nodes_(build_local_models(sc_.model)),
        L_(static_cast<int>(nodes_.size())),
        stepper_(sc_.model, nodes_, sc_.schedule),
        central_(sc_.model,
                 sc_.schedule.initial_variance > 0.0 ? sc_.schedule.initial_variance : sc_.model.sigma_v2,
                 sc_.schedule.freeze_tolerance),
        history_(sc_.ledger_capacity),
        rng_init_(sc_.seed, Stream::Initialization),
        rng_process_(sc_.seed, Stream::ProcessNoise),
        rng_measure_(sc_.seed, Stream::MeasurementNoise),
        rng_attack_(sc_.seed, Stream::Attack),
        rng_miners_(sc_.seed, Stream::MinerAssignment),
        rng_misbehave_(sc_.seed, Stream::Misbehavior) {
    validate_scenario(sc_);
    h_ = sc_.threshold();
    trust_alpha_ = sc_.trust_alpha_value();
    trust_h_ = sc_.trust_threshold();
    misbehavior_.assign(static_cast<std::size_t>(L_), std::nullopt);
    for (const auto& m : sc_.misbehaviors) misbehavior_[std::size_t(m.node)] = m;
  }

  const std::vector<LocalNodeModel>& nodes() const noexcept { return nodes_; }

  RunRecord run() {
    init();
    for (std::int64_t t = 1; t <= sc_.horizon && !stopped_; ++t) step(t);
    rec_.last_timestep = last_t_;
    if (ledger_) rec_.ledger = std::move(*ledger_);
    return std::move(rec_);
  }

 private:
  enum class Mode { Regular, Investigating, Settling };

  bool misbehaving(int node, std::int64_t t) const {
    const auto& m = misbehavior_[std::size_t(node)];
    return m && anomalies_active_ && t >= m->onset;
  }
  bool silent(int node, std::int64_t t) const {
    return misbehaving(node, t) && misbehavior_[std::size_t(node)]->kind == MisbehaviorKind::SilentFdi;
  }
  bool hacked(int node) const { return misbehavior_[std::size_t(node)].has_value(); }

  void init() {
    const auto& m = sc_.model;
    rec_.node_count = L_;
    rec_.h = h_;
    rec_.trust_h = trust_h_;
    const std::size_t Ls = static_cast<std::size_t>(L_);
    rec_.measurement_alarm.assign(Ls, std::nullopt);
    rec_.measurement_tau_hat.assign(Ls, std::nullopt);
    rec_.evaluator_alarm.assign(Ls, std::vector<std::optional<std::int64_t>>(Ls));
    rec_.evaluator_eta_hat.assign(Ls, std::vector<std::optional<std::int64_t>>(Ls));
    rec_.declared.assign(Ls, std::nullopt);
    rec_.declared_honest_only.assign(Ls, std::nullopt);
    if (sc_.record_series) {
      rec_.mse_node.assign(Ls, {});
      rec_.chi.assign(Ls, {});
      rec_.p_value.assign(Ls, {});
      rec_.g_measurement.assign(Ls, {});
      rec_.pi.assign(Ls, {});
      rec_.g_trust.assign(Ls, {});
      rec_.alarm_flag.assign(Ls, {});
      rec_.declared_flag.assign(Ls, {});
      rec_.votes.assign(Ls, {});
      rec_.g_evaluator.assign(Ls, std::vector<std::vector<double>>(Ls));
    }

    x_ = m.x0;
    Vector e(m.state_dim);
    const double sd0 = std::sqrt(sc_.schedule.initial_variance > 0.0 ? sc_.schedule.initial_variance : m.sigma_v2);
    for (Index i = 0; i < e.size(); ++i) e(i) = sd0 * rng_init_.normal();
    const Vector xhat0 = m.x0 + e;

    for (const auto& node : nodes_) {
      filters_.emplace_back(node, detail::select_entries(xhat0, node.state_indices));
      shadow_.emplace_back(node, detail::select_entries(xhat0, node.state_indices));
    }
    central_mean_ = xhat0;
    robust_.mean = xhat0;
    robust_.cov = sd0 * sd0 * Matrix::Identity(m.state_dim, m.state_dim);

    for (int l = 0; l < L_; ++l) detectors_.emplace_back(sc_.alpha, h_, 0);
    evaluators_.assign(Ls, {});
    for (int j = 0; j < L_; ++j)
      for (int l = 0; l < L_; ++l)
        evaluators_[std::size_t(j)].push_back(j == l ? std::nullopt
                                                     : std::optional<TrustEvaluator>(TrustEvaluator(j, l, trust_alpha_, trust_h_, 0)));
    for (int l = 0; l < L_; ++l) boards_.emplace_back(l, L_);
    discontinuity_.assign(Ls, -1);
    published_.assign(Ls, Vector());
    chi_cache_.assign(Ls, {});
    psi_cache_.assign(Ls, {});

    if (sc_.use_ledger) {
      keys_ = generate_keys(L_, sc_.seed);
      registry_ = KeyRegistry(keys_);
      ledger_.emplace(sc_.ledger_capacity, sc_.difficulty);
    }
    std::vector<Vector> genesis;
    for (int l = 0; l < L_; ++l) genesis.push_back(filters_[std::size_t(l)].posterior_mean());
    publish(0, genesis);
  }

  // Appends the estimates of timestep t to the ledger (or history).
  bool publish(std::int64_t t, const std::vector<Vector>& estimates) {
    if (!ledger_) {
      history_.push(t, estimates);
      return true;
    }
    std::vector<DataPackage> pkgs;
    for (int l = 0; l < L_; ++l)
      pkgs.push_back(sign_package(l, keys_[std::size_t(l)].secret_key, t, serialize_payload(estimates[std::size_t(l)])));
    CommitOptions opt;
    opt.miners_per_block = sc_.miners_per_block;
    try {
      auto res = propose_and_commit(*ledger_, pkgs, registry_, rng_miners_, opt);
      rec_.hash_evaluations += res.mining.hash_evaluations;
    } catch (const Error& e) {
      rec_.events.push_back("t=" + std::to_string(t) + " commit failed: " + e.what());
      stopped_ = true;
      return false;
    }
    return true;
  }

  Vector stored(std::int64_t t, int node) const {
    if (ledger_) return get_estimate(*ledger_, t, node);
    return history_.get(t, node);
  }
  bool has_stored(std::int64_t t) const {
    if (ledger_) return ledger_->find(t) != nullptr;
    return history_.has(t);
  }

  const Eigen::LLT<Matrix>& chi_factor(int l) {
    auto& c = chi_cache_[std::size_t(l)];
    if (c.revision != stepper_.revision()) {
      const auto K = nodes_[std::size_t(l)].k_local();
      c.factor = factor_sigma(stepper_.entry(l).innovation_cov.topLeftCorner(K, K));
      c.revision = stepper_.revision();
    }
    return c.factor;
  }

  const Eigen::LLT<Matrix>& psi_factor(int l) {
    auto& c = psi_cache_[std::size_t(l)];
    if (c.revision != stepper_.revision()) {
      c.factor = factor_psi(evolution_covariance(stepper_.entry(l)));
      c.revision = stepper_.revision();
    }
    return c.factor;
  }

  Vector local_measurements(const Vector& y, int l) const {
    return detail::select_entries(y, nodes_[std::size_t(l)].sensors);
  }

  // One regular filtering step of a set of node filters on measurements y.
  void filter_step(std::vector<NodeFilter>& filters, const Vector& y, std::int64_t t, bool sign) {
    for (auto& f : filters) f.predict();
    std::vector<Vector> local(static_cast<std::size_t>(L_));
    for (int l = 0; l < L_; ++l) local[std::size_t(l)] = local_measurements(y, l);
    for (int l = 0; l < L_; ++l) {
      const auto& node = nodes_[std::size_t(l)];
      std::vector<ProcessedMeasurement> msgs;
      msgs.reserve(node.inbound.size());
      std::vector<const ProcessedMeasurement*> ptrs;
      for (const auto& link : node.inbound) {
        const auto& sender = nodes_[std::size_t(link.sender)];
        msgs.push_back(process_for_neighbor(sender, l, local[std::size_t(link.sender)],
                                            filters[std::size_t(link.sender)].prior_mean(), t));
      }
      for (std::size_t i = 0; i < msgs.size(); ++i) {
        bool ok = true;
        if (sign) {
          const auto pkg = sign_package(msgs[i].from_node, keys_[std::size_t(msgs[i].from_node)].secret_key, t,
                                        detail::serialize_processed(msgs[i]));
          ok = verify_package(registry_, pkg);
          if (!ok) ++rec_.rejected_exchanges;
        }
        ptrs.push_back(ok ? &msgs[i] : nullptr);
      }
      auto& f = filters[std::size_t(l)];
      f.update(f.stack(local[std::size_t(l)], ptrs), stepper_.entry(l));
    }
  }

  static double sq_error(const Vector& truth, const LocalNodeModel& node, const Vector& est) {
    double s = 0.0;
    for (std::size_t i = 0; i < node.state_indices.size(); ++i) {
      const double d = truth(node.state_indices[i]) - est(Index(i));
      s += d * d;
    }
    return s;
  }
  double summed_error(const Vector& truth, const Vector& global_est) const {
    double s = 0.0;
    for (const auto& node : nodes_)
      for (int g : node.state_indices) {
        const double d = truth(g) - global_est(g);
        s += d * d;
      }
    return s;
  }

  void recover(std::int64_t t, std::int64_t requested) {
    std::int64_t tR = requested;
    bool fallback = false;
    if (!has_stored(tR)) {
      tR = t - static_cast<std::int64_t>(sc_.ledger_capacity) + 1;
      fallback = true;
    }
    if (!rec_.recovery_point) {
      rec_.recovery_point = tR;
      rec_.recovery_requested = requested;
      rec_.recovery_fallback = fallback;
    }
    rec_.events.push_back("t=" + std::to_string(t) + " recovery from t_R=" + std::to_string(tR) +
                          (fallback ? " (oldest retained block)" : ""));
    for (int l = 0; l < L_; ++l) {
      const auto& node = nodes_[std::size_t(l)];
      filters_[std::size_t(l)].set_posterior(recover_state(stored(tR, l), node.a_diag, t, tR));
      discontinuity_[std::size_t(l)] = t;
    }
  }

  // Filters resume on clean data at once; detection re-arms after they settle.
  void restart_all(std::int64_t t) {
    anomalies_active_ = false;
    mode_ = Mode::Settling;
    if (settle_ == 0) settle_ = settling_steps(sc_.model);
    rearm_at_ = t + settle_;
    ++rec_.restarts;
    rec_.events.push_back("t=" + std::to_string(t) + " restart");
  }

  void rearm(std::int64_t t) {
    for (auto& d : detectors_) d.restart(t);
    for (auto& row : evaluators_)
      for (auto& ev : row)
        if (ev) ev->restart(t);
    for (auto& b : boards_) b.reset();
    mode_ = Mode::Regular;
    rec_.events.push_back("t=" + std::to_string(t) + " detectors re-armed");
  }

  void step(std::int64_t t) {
    const auto& m = sc_.model;
    last_t_ = t;
    auto truth = step_truth(x_, m, rng_process_, rng_measure_);
    x_ = truth.x;
    Vector y = truth.y;
    // Draws are consumed whether or not the anomaly is still active.
    Vector attack = Vector::Zero(m.n_sensors);
    apply_attack(attack, sc_.attacks, m, t, rng_attack_);
    std::vector<Vector> misbehave_noise(static_cast<std::size_t>(L_));
    for (int l = 0; l < L_; ++l) {
      const auto& mb = misbehavior_[std::size_t(l)];
      if (!mb || t < mb->onset) continue;
      const auto& node = nodes_[std::size_t(l)];
      if (mb->kind == MisbehaviorKind::SilentFdi) {
        for (int k : node.sensors) attack(k) += mb->magnitude * rng_misbehave_.uniform() * (anomalies_active_ ? 1.0 : 0.0);
      } else if (mb->kind == MisbehaviorKind::RandomEstimate) {
        Vector noise(node.n_local());
        for (Index i = 0; i < noise.size(); ++i) noise(i) = mb->magnitude * rng_misbehave_.normal();
        misbehave_noise[std::size_t(l)] = std::move(noise);
      }
    }
    if (anomalies_active_) y += attack;

    stepper_.advance();
    if (sc_.centralized_baseline) central_.advance();

    // Proposed mechanism.
    if (mode_ != Mode::Investigating) {
      filter_step(filters_, y, t, ledger_.has_value() && sc_.sign_exchanges);
    } else {
      for (auto& f : filters_) {
        f.predict();
        f.set_posterior(f.prior_mean());
      }
    }

    // Measurement-anomaly detectors.
    std::vector<double> chi_row(static_cast<std::size_t>(L_), 0.0), p_row(static_cast<std::size_t>(L_), 1.0);
    std::vector<std::int64_t> new_meas_alarms;
    for (int l = 0; l < L_; ++l) {
      const auto& node = nodes_[std::size_t(l)];
      const auto& f = filters_[std::size_t(l)];
      const Vector r = local_measurements(y, l) - node.H_local * f.prior_mean();
      const double chi = chi_statistic(r, chi_factor(l));
      chi_row[std::size_t(l)] = chi;
      p_row[std::size_t(l)] = p_value(chi, static_cast<int>(node.k_local()));
      auto& det = detectors_[std::size_t(l)];
      if (mode_ != Mode::Regular || silent(l, t) || det.alarmed()) continue;
      det = cusum_step(det, evidence(chi, static_cast<int>(node.k_local()), det.alpha), t);
      if (det.alarmed()) {
        if (!rec_.measurement_alarm[std::size_t(l)]) {
          rec_.measurement_alarm[std::size_t(l)] = t;
          rec_.measurement_tau_hat[std::size_t(l)] = det.tau_hat;
        }
        new_meas_alarms.push_back(det.tau_hat);
      }
    }

    // Published estimates and commit.
    std::vector<Vector> pub(static_cast<std::size_t>(L_));
    for (int l = 0; l < L_; ++l) {
      const auto& mb = misbehavior_[std::size_t(l)];
      Vector est = filters_[std::size_t(l)].posterior_mean();
      if (mb && misbehaving(l, t)) {
        if (mb->kind == MisbehaviorKind::ConstantEstimate) est = published_[std::size_t(l)];
        else if (mb->kind == MisbehaviorKind::RandomEstimate) est += misbehave_noise[std::size_t(l)];
      }
      pub[std::size_t(l)] = est;
    }
    published_ = pub;
    if (!publish(t, pub)) return;

    // Trust evaluation on committed data.
    std::vector<double> pi_row(static_cast<std::size_t>(L_), 0.0), gtrust_row(static_cast<std::size_t>(L_), 0.0);
    std::vector<std::int64_t> new_declarations;
    if (sc_.trust_enabled) {
      for (int l = 0; l < L_; ++l) {
        const auto& node = nodes_[std::size_t(l)];
        const bool evaluate = mode_ == Mode::Regular && t - 1 != discontinuity_[std::size_t(l)];
        if (evaluate) {
          const double pi = pi_statistic(stored(t, l), stored(t - 1, l), node.a_diag, psi_factor(l));
          pi_row[std::size_t(l)] = pi;
          for (int j = 0; j < L_; ++j) {
            if (j == l) continue;
            auto& ev = *evaluators_[std::size_t(j)][std::size_t(l)];
            if (!ev.detector().alarmed()) {
              ev.evaluate_step(pi, static_cast<int>(node.n_local()), t);
              if (ev.detector().alarmed() && !rec_.evaluator_alarm[std::size_t(j)][std::size_t(l)]) {
                rec_.evaluator_alarm[std::size_t(j)][std::size_t(l)] = t;
                rec_.evaluator_eta_hat[std::size_t(j)][std::size_t(l)] = ev.detector().tau_hat;
              }
            }
          }
        }
        auto& board = boards_[std::size_t(l)];
        int honest_yes = 0, honest_voters = 0;
        for (int j = 0; j < L_; ++j) {
          if (j == l) continue;
          bool vote = evaluators_[std::size_t(j)][std::size_t(l)]->vote(t);
          const auto& mb = misbehavior_[std::size_t(j)];
          if (mb && misbehaving(j, t)) {
            if (mb->votes == VotePolicy::AlwaysYes) vote = true;
            else if (mb->votes == VotePolicy::AlwaysNo) vote = false;
          }
          board.cast(j, vote);
          if (!hacked(j)) {
            ++honest_voters;
            honest_yes += board.vote_of(j);
          }
          gtrust_row[std::size_t(l)] = std::max(gtrust_row[std::size_t(l)],
                                                evaluators_[std::size_t(j)][std::size_t(l)]->detector().g);
        }
        const bool was = board.declared_at().has_value();
        if (mode_ == Mode::Regular) board.tally(t);
        if (!was && board.declared_at()) {
          if (!rec_.declared[std::size_t(l)]) rec_.declared[std::size_t(l)] = t;
          std::int64_t eta = t;
          for (int j = 0; j < L_; ++j)
            if (j != l && board.vote_of(j)) eta = std::min(eta, evaluators_[std::size_t(j)][std::size_t(l)]->detector().tau_hat);
          new_declarations.push_back(eta);
        }
        if (!rec_.declared_honest_only[std::size_t(l)] && 2 * honest_yes > honest_voters && honest_voters > 0)
          rec_.declared_honest_only[std::size_t(l)] = t;
      }
    }

    // Baselines.
    if (sc_.norecovery_baseline) filter_step(shadow_, y, t, false);
    if (sc_.centralized_baseline) {
      const Vector prior = m.A * central_mean_;
      central_mean_ = prior + central_.gain() * (y - m.H * prior);
    }
    if (sc_.robust_baseline) {
      bool rejected = false;
      robust_ = robust_kalman_step(robust_, m, y, sc_.robust_alpha, &rejected, sc_.robust_covariance);
      rec_.robust_rejections += rejected;
    }

    // Alarms, recovery, investigation window.
    const bool any_alarm = !new_meas_alarms.empty() || !new_declarations.empty();
    if (any_alarm && rec_.network_alarm == kNoAlarm) rec_.network_alarm = t;
    if (any_alarm && mode_ == Mode::Regular && sc_.on_alarm != AlarmPolicy::Monitor) {
      std::int64_t requested = t;
      for (auto v : new_meas_alarms) requested = std::min(requested, v);
      for (auto v : new_declarations) requested = std::min(requested, v);
      recover(t, requested);
      mode_ = Mode::Investigating;
      investigation_end_ = t + sc_.investigation_delay;
    }

    record(t, chi_row, p_row, pi_row, gtrust_row);

    if (mode_ == Mode::Investigating && t >= investigation_end_) {
      if (sc_.on_alarm == AlarmPolicy::Restart) restart_all(t);
      else stopped_ = true;
    } else if (mode_ == Mode::Settling && t >= rearm_at_) {
      rearm(t);
    }
    if (sc_.on_alarm == AlarmPolicy::Monitor && sc_.stop_when_all_alarmed && all_alarmed()) stopped_ = true;
  }

  bool all_alarmed() const {
    for (int l = 0; l < L_; ++l) {
      if (!silent(l, last_t_) && !detectors_[std::size_t(l)].alarmed()) return false;
      if (sc_.trust_enabled)
        for (int j = 0; j < L_; ++j)
          if (j != l && !evaluators_[std::size_t(j)][std::size_t(l)]->detector().alarmed()) return false;
    }
    return true;
  }

  void record(std::int64_t t, const std::vector<double>& chi_row, const std::vector<double>& p_row,
              const std::vector<double>& pi_row, const std::vector<double>& gtrust_row) {
    (void)t;
    if (!sc_.record_series) return;
    double proposed = 0.0;
    for (int l = 0; l < L_; ++l) {
      const std::size_t i = std::size_t(l);
      const double e = sq_error(x_, nodes_[i], filters_[i].posterior_mean());
      proposed += e;
      rec_.mse_node[i].push_back(e);
      rec_.chi[i].push_back(chi_row[i]);
      rec_.p_value[i].push_back(p_row[i]);
      rec_.g_measurement[i].push_back(detectors_[i].g);
      rec_.pi[i].push_back(pi_row[i]);
      rec_.g_trust[i].push_back(gtrust_row[i]);
      rec_.alarm_flag[i].push_back(detectors_[i].alarmed() ? 1 : 0);
      rec_.declared_flag[i].push_back(boards_[i].declared_at() ? 1 : 0);
      rec_.votes[i].push_back(boards_[i].yes_votes());
      for (int j = 0; j < L_; ++j)
        if (j != l) rec_.g_evaluator[std::size_t(j)][i].push_back(evaluators_[std::size_t(j)][i]->detector().g);
    }
    rec_.mse_proposed.push_back(proposed);
    rec_.mse_centralized.push_back(sc_.centralized_baseline ? summed_error(x_, central_mean_) : 0.0);
    rec_.mse_robust.push_back(sc_.robust_baseline ? summed_error(x_, robust_.mean) : 0.0);
    double norec = 0.0;
    if (sc_.norecovery_baseline)
      for (int l = 0; l < L_; ++l) norec += sq_error(x_, nodes_[std::size_t(l)], shadow_[std::size_t(l)].posterior_mean());
    rec_.mse_norecovery.push_back(norec);
    if (sc_.record_states) {
      rec_.true_states.push_back(x_);
      std::vector<Vector> post;
      for (const auto& f : filters_) post.push_back(f.posterior_mean());
      rec_.posteriors.push_back(std::move(post));
    }
  }

  struct FactorCache {
    std::uint64_t revision = std::numeric_limits<std::uint64_t>::max();
    Eigen::LLT<Matrix> factor;
  };

  Scenario sc_;
  std::vector<LocalNodeModel> nodes_;
  int L_;
  ScheduleStepper stepper_;
  CentralSchedule central_;
  detail::EstimateHistory history_;
  RandomStream rng_init_, rng_process_, rng_measure_, rng_attack_, rng_miners_, rng_misbehave_;

  double h_ = 0.0, trust_alpha_ = 0.0, trust_h_ = 0.0;
  std::vector<std::optional<MisbehaviorSpec>> misbehavior_;

  Vector x_;
  std::vector<NodeFilter> filters_, shadow_;
  Vector central_mean_;
  GaussianBelief robust_;
  std::vector<DetectorState> detectors_;
  std::vector<std::vector<std::optional<TrustEvaluator>>> evaluators_;
  std::vector<VoteBoard> boards_;
  std::vector<std::int64_t> discontinuity_;
  std::vector<Vector> published_;
  std::vector<FactorCache> chi_cache_, psi_cache_;

  std::vector<KeyPair> keys_;
  KeyRegistry registry_;
  std::optional<Ledger> ledger_;

  Mode mode_ = Mode::Regular;
  std::int64_t investigation_end_ = 0;
  std::int64_t settle_ = 0;
  std::int64_t rearm_at_ = 0;
  bool anomalies_active_ = true;
  bool stopped_ = false;
  std::int64_t last_t_ = 0;
  RunRecord rec_;
};

inline RunRecord run(const Scenario& scenario) { return Simulator(scenario).run(); }

// ---- metrics --------------------------------------------------------------

struct WindowAverage {
  double proposed = 0.0;
  double centralized = 0.0;
  double robust = 0.0;
  double norecovery = 0.0;
  std::int64_t steps = 0;
};

// Mean of the summed-over-centers squared error over t in [from, to] (clipped to the record).
inline WindowAverage window_average(const RunRecord& rec, std::int64_t from, std::int64_t to) {
  WindowAverage w;
  const std::int64_t lo = std::max<std::int64_t>(from, 1);
  const std::int64_t hi = std::min<std::int64_t>(to, static_cast<std::int64_t>(rec.mse_proposed.size()));
  for (std::int64_t t = lo; t <= hi; ++t) {
    const std::size_t i = std::size_t(t - 1);
    w.proposed += rec.mse_proposed[i];
    w.centralized += rec.mse_centralized[i];
    w.robust += rec.mse_robust[i];
    w.norecovery += rec.mse_norecovery[i];
    ++w.steps;
  }
  if (w.steps > 0) {
    const double n = static_cast<double>(w.steps);
    w.proposed /= n;
    w.centralized /= n;
    w.robust /= n;
    w.norecovery /= n;
  }
  return w;
}

struct MetricSummary {
  WindowAverage full;
  std::optional<WindowAverage> attack_window;     // [onset, horizon]
  std::optional<WindowAverage> post_detection;    // (Gamma_net, horizon]
  std::optional<std::int64_t> first_onset;
  std::optional<std::int64_t> detection_delay;    // Gamma_net - onset
};

inline MetricSummary collect_metrics(const RunRecord& rec, const Scenario& sc) {
  MetricSummary s;
  s.full = window_average(rec, 1, rec.last_timestep);
  std::optional<std::int64_t> onset;
  for (const auto& a : sc.attacks) onset = onset ? std::min(*onset, a.onset) : a.onset;
  for (const auto& m : sc.misbehaviors) onset = onset ? std::min(*onset, m.onset) : m.onset;
  s.first_onset = onset;
  if (onset && *onset <= rec.last_timestep) s.attack_window = window_average(rec, *onset, rec.last_timestep);
  if (rec.network_alarm != kNoAlarm) {
    if (rec.network_alarm < rec.last_timestep)
      s.post_detection = window_average(rec, rec.network_alarm + 1, rec.last_timestep);
    if (onset) s.detection_delay = rec.network_alarm - *onset;
  }
  return s;
}

}  // namespace gridsec
