#pragma once

// Distributed trust management over published estimates.

#include <algorithm>
#include <cstdint>
#include <limits>
#include <optional>
#include <vector>

#include "gridsec/detection.hpp"
#include "gridsec/estimator.hpp"

namespace gridsec {

// Psi = G (H~ P H~^T + R) G^T
inline Matrix evolution_covariance(const ScheduleEntry& entry) {
  Matrix S = entry.innovation_cov;
  if (S.size() == 0 && entry.gain.size() > 0)
    throw Error(Errc::MissingSchedule, "schedule entry carries no innovation covariance");
  Matrix psi = entry.gain * S * entry.gain.transpose();
  symmetrize(psi);
  return psi;
}

inline Matrix evolution_covariance(const Matrix& gain, const Matrix& H_stacked, const Matrix& prior_cov,
                                   const Matrix& R) {
  Matrix S = H_stacked * prior_cov * H_stacked.transpose() + R;
  Matrix psi = gain * S * gain.transpose();
  symmetrize(psi);
  return psi;
}

inline constexpr double kPsiRegularization = 1e-12;

// Factor of Psi, regularized once with 1e-12 I before giving up.
inline Eigen::LLT<Matrix> factor_psi(const Matrix& psi) {
  Eigen::LLT<Matrix> llt(psi);
  if (llt.info() == Eigen::Success && llt.rcond() * kMaxConditionNumber >= 1.0) return llt;
  Matrix reg = psi;
  reg.diagonal().array() += kPsiRegularization;
  llt.compute(reg);
  if (llt.info() != Eigen::Success || llt.rcond() * kMaxConditionNumber < 1.0)
    throw Error(Errc::SingularPsi, "evolution covariance is singular after regularization");
  return llt;
}

// d^T Psi^{-1} d with d = xhat_t - A xhat_{t-1}.
inline double pi_statistic(const Vector& xhat_t, const Vector& xhat_prev, const Vector& a_diag,
                           const Eigen::LLT<Matrix>& psi_factor) {
  if (xhat_t.size() != xhat_prev.size() || a_diag.size() != xhat_t.size() || psi_factor.rows() != xhat_t.size())
    throw Error(Errc::DimensionMismatch, "pi statistic operands disagree in size");
  const Vector d = xhat_t - a_diag.cwiseProduct(xhat_prev);
  return psi_factor.matrixL().solve(d).squaredNorm();
}

inline double pi_statistic(const Vector& xhat_t, const Vector& xhat_prev, const Vector& a_diag, const Matrix& psi) {
  if (psi.rows() != xhat_t.size() || psi.cols() != xhat_t.size())
    throw Error(Errc::DimensionMismatch, "pi statistic operands disagree in size");
  return pi_statistic(xhat_t, xhat_prev, a_diag, factor_psi(psi));
}

class TrustEvaluator {
 public:
  TrustEvaluator(int evaluator_id, int target_id, double alpha, double h, std::int64_t start = 0)
      : evaluator_(evaluator_id), target_(target_id), detector_(alpha, h, start) {
    if (evaluator_id == target_id) throw Error(Errc::OutOfDomain, "a node does not evaluate itself");
  }

  int evaluator_id() const noexcept { return evaluator_; }
  int target_id() const noexcept { return target_; }
  const DetectorState& detector() const noexcept { return detector_; }
  DetectorState& detector() noexcept { return detector_; }

  bool vote(std::int64_t t) const noexcept { return detector_.alarmed_at && *detector_.alarmed_at <= t; }

  // Advances the CUSUM on pi (N_local degrees of freedom); returns the vote.
  bool evaluate_step(double pi, int n_local, std::int64_t t) {
    last_evidence_ = evidence(pi, n_local, detector_.alpha);
    if (!detector_.alarmed()) detector_ = cusum_step(detector_, last_evidence_, t);
    return vote(t);
  }

  double last_evidence() const noexcept { return last_evidence_; }
  void restart(std::int64_t t) noexcept { detector_.restart(t); }

 private:
  int evaluator_;
  int target_;
  DetectorState detector_;
  double last_evidence_ = 0.0;
};

inline bool strict_majority(int yes_votes, int node_count) noexcept {
  return 2 * yes_votes > node_count - 1;
}

// Votes about one target; declaration is sticky.
class VoteBoard {
 public:
  VoteBoard(int target_id, int node_count) : target_(target_id), L_(node_count), votes_(std::size_t(node_count), 0) {}

  int target_id() const noexcept { return target_; }
  void cast(int evaluator_id, bool vote) {
    if (evaluator_id == target_ || evaluator_id < 0 || evaluator_id >= L_)
      throw Error(Errc::OutOfDomain, "invalid evaluator for this board");
    auto& v = votes_[std::size_t(evaluator_id)];
    v = static_cast<char>(v || vote);
  }
  bool vote_of(int evaluator_id) const { return votes_.at(std::size_t(evaluator_id)) != 0; }
  int yes_votes(std::optional<int> excluding = std::nullopt) const {
    int n = 0;
    for (int j = 0; j < L_; ++j)
      if (j != target_ && (!excluding || *excluding != j)) n += votes_[std::size_t(j)];
    return n;
  }

  std::optional<std::int64_t> tally(std::int64_t t) {
    if (!declared_at_ && strict_majority(yes_votes(), L_)) declared_at_ = t;
    return declared_at_;
  }
  std::optional<std::int64_t> declared_at() const noexcept { return declared_at_; }
  void reset() {
    std::fill(votes_.begin(), votes_.end(), 0);
    declared_at_.reset();
  }

 private:
  int target_;
  int L_;
  std::vector<char> votes_;
  std::optional<std::int64_t> declared_at_;
};

inline constexpr std::int64_t kNoAlarm = std::numeric_limits<std::int64_t>::max();

inline std::int64_t network_stopping_time(const std::vector<std::optional<std::int64_t>>& measurement_alarms,
                                          const std::vector<std::optional<std::int64_t>>& trust_declarations) {
  std::int64_t out = kNoAlarm;
  for (const auto& a : measurement_alarms)
    if (a) out = std::min(out, *a);
  for (const auto& a : trust_declarations)
    if (a) out = std::min(out, *a);
  return out;
}

inline Vector recover_after_misbehavior(const Vector& mean_at_eta, const Vector& a_diag, std::int64_t t,
                                        std::int64_t eta_hat) {
  return recover_state(mean_at_eta, a_diag, t, eta_hat);
}

}  // namespace gridsec
