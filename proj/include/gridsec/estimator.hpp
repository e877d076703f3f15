#pragma once

// Per-center Kalman filtering with processed-measurement exchange.
//
// Node l stacks its own measurements y^l with the processed measurements
// ytilde^{l,j} = y^{l,j} - H^{bar-l,j} xhat^{bar-l,j}_{t|t-1} received from
// every neighbor j. The noise covariance of the stack is block diagonal
// (sigma_w^2 I, Delta^{l,j}, ...) with cross blocks approximated per
// CrossBlockPolicy. Covariances never depend on measurements, so they are
// produced by a ScheduleStepper that every node can run offline.

#include <cstdint>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include <Eigen/Cholesky>
#include <Eigen/Dense>

#include "gridsec/error.hpp"
#include "gridsec/model.hpp"

namespace gridsec {

enum class BeliefTag { Prior, Posterior };

struct GaussianBelief {
  Vector mean;
  Matrix cov;
  BeliefTag tag = BeliefTag::Posterior;

  Index dim() const noexcept { return mean.size(); }
};

struct ProcessedMeasurement {
  int from_node = 0;
  int to_node = 0;
  std::int64_t timestep = 0;
  Vector values;
};

struct StackedMeasurement {
  int node = 0;
  std::int64_t timestep = 0;
  Vector values;
  Matrix H_stacked;
  Matrix R;
};

enum class CrossBlockPolicy {
  // Every cross block between two neighbors' processed measurements is zero.
  ZeroAll,
  // Entries between foreign variables held by both neighbors are taken from
  // the mean of the two neighbors' prior covariances; everything else is zero.
  SharedFromSchedules,
};

inline void symmetrize(Matrix& m) { m = (0.5 * (m + m.transpose())).eval(); }

inline GaussianBelief predict(const GaussianBelief& posterior, const LocalNodeModel& node,
                              double sigma_v2) {
  const Index n = node.n_local();
  if (posterior.mean.size() != n || posterior.cov.rows() != n || posterior.cov.cols() != n)
    throw Error(Errc::DimensionMismatch, "posterior dimension does not match node " +
                                             std::to_string(node.node_id + 1));
  GaussianBelief prior;
  prior.mean = node.a_diag.cwiseProduct(posterior.mean);
  prior.cov = node.a_diag.asDiagonal() * posterior.cov * node.a_diag.asDiagonal();
  prior.cov.diagonal().array() += sigma_v2;
  prior.tag = BeliefTag::Prior;
  return prior;
}

// Innovation-side quantities of one Kalman measurement update.
struct CovarianceUpdate {
  Matrix innovation_cov;  // S = H P H^T + R
  Matrix gain;            // G = P H^T S^{-1}
  Matrix posterior_cov;   // P - G H P, symmetrized
};

inline constexpr double kMaxConditionNumber = 1e14;

inline Eigen::LLT<Matrix> factor_spd(const Matrix& m, Errc code, const char* what) {
  Eigen::LLT<Matrix> llt(m);
  if (llt.info() != Eigen::Success)
    throw Error(code, std::string(what) + " is not positive definite");
  if (m.size() > 0 && llt.rcond() * kMaxConditionNumber < 1.0)
    throw Error(code, std::string(what) + " is numerically singular");
  return llt;
}

inline CovarianceUpdate covariance_update(const Matrix& prior_cov, const Matrix& H, const Matrix& R) {
  if (H.cols() != prior_cov.rows() || R.rows() != H.rows() || R.cols() != H.rows())
    throw Error(Errc::DimensionMismatch, "measurement update shapes disagree");
  CovarianceUpdate out;
  const Matrix HP = H * prior_cov;
  out.innovation_cov = HP * H.transpose() + R;
  symmetrize(out.innovation_cov);
  const auto llt = factor_spd(out.innovation_cov, Errc::SingularInnovation, "innovation covariance");
  out.gain = llt.solve(HP).transpose();
  out.posterior_cov = prior_cov - out.gain * HP;
  symmetrize(out.posterior_cov);
  return out;
}

struct UpdateResult {
  GaussianBelief posterior;
  Matrix gain;
};

inline UpdateResult measurement_update(const GaussianBelief& prior, const StackedMeasurement& meas) {
  if (meas.H_stacked.cols() != prior.dim() || meas.values.size() != meas.H_stacked.rows())
    throw Error(Errc::DimensionMismatch, "stacked measurement does not match prior");
  auto cu = covariance_update(prior.cov, meas.H_stacked, meas.R);
  UpdateResult out;
  out.posterior.mean = prior.mean + cu.gain * (meas.values - meas.H_stacked * prior.mean);
  out.posterior.cov = std::move(cu.posterior_cov);
  out.posterior.tag = BeliefTag::Posterior;
  out.gain = std::move(cu.gain);
  return out;
}

inline ProcessedMeasurement process_for_neighbor(const LocalNodeModel& sender, int recipient_id,
                                                 const Vector& local_meas, const Vector& sender_prior_mean,
                                                 std::int64_t timestep = 0) {
  const NeighborLink* link = sender.outbound_to(recipient_id);
  if (!link)
    throw Error(Errc::NotANeighbor, "node " + std::to_string(recipient_id + 1) +
                                        " is not a neighbor of node " + std::to_string(sender.node_id + 1));
  if (local_meas.size() != sender.k_local() || sender_prior_mean.size() != sender.n_local())
    throw Error(Errc::DimensionMismatch, "sender measurement or prior has wrong length");
  ProcessedMeasurement pm;
  pm.from_node = sender.node_id;
  pm.to_node = recipient_id;
  pm.timestep = timestep;
  pm.values.resize(link->rows());
  for (Index r = 0; r < link->rows(); ++r) {
    double v = local_meas(link->sender_rows[std::size_t(r)]);
    for (Index c = 0; c < link->H_foreign.cols(); ++c)
      v -= link->H_foreign(r, c) * sender_prior_mean(link->foreign_positions[std::size_t(c)]);
    pm.values(r) = v;
  }
  return pm;
}

inline ProcessedMeasurement process_for_neighbor(const LocalNodeModel& sender, int recipient_id,
                                                 const Vector& local_meas, const GaussianBelief& prior,
                                                 std::int64_t timestep = 0) {
  return process_for_neighbor(sender, recipient_id, local_meas, prior.mean, timestep);
}

inline Matrix extract(const Matrix& m, const std::vector<int>& idx) {
  Matrix out(static_cast<Index>(idx.size()), static_cast<Index>(idx.size()));
  for (std::size_t r = 0; r < idx.size(); ++r)
    for (std::size_t c = 0; c < idx.size(); ++c) out(Index(r), Index(c)) = m(idx[r], idx[c]);
  return out;
}

// Lemma-1 covariance of the processed-measurement noise.
inline Matrix delta_covariance(const Matrix& foreign_prior_cov, const Matrix& H_foreign,
                               double sigma_w2, Index k_shared) {
  if (H_foreign.rows() != k_shared || H_foreign.cols() != foreign_prior_cov.rows() ||
      foreign_prior_cov.rows() != foreign_prior_cov.cols())
    throw Error(Errc::DimensionMismatch, "delta covariance shapes disagree");
  Matrix delta = H_foreign * foreign_prior_cov * H_foreign.transpose();
  delta.diagonal().array() += sigma_w2;
  symmetrize(delta);
  return delta;
}

// Covariance of the stacked noise vector of `node`. `neighbor_priors` (indexed
// by node id) is only read under CrossBlockPolicy::SharedFromSchedules.
inline Matrix assemble_R(const LocalNodeModel& node, const std::map<int, Matrix>& deltas, double sigma_w2,
                         CrossBlockPolicy policy = CrossBlockPolicy::ZeroAll,
                         const std::vector<Matrix>* neighbor_priors = nullptr) {
  const Index total = node.stacked_rows();
  Matrix R = Matrix::Zero(total, total);
  R.topLeftCorner(node.k_local(), node.k_local()).diagonal().setConstant(sigma_w2);

  std::vector<Index> offsets;
  Index offset = node.k_local();
  for (const auto& link : node.inbound) {
    auto it = deltas.find(link.sender);
    if (it == deltas.end())
      throw Error(Errc::MissingDelta, "no Delta for neighbor " + std::to_string(link.sender + 1));
    if (it->second.rows() != link.rows() || it->second.cols() != link.rows())
      throw Error(Errc::DimensionMismatch, "Delta for neighbor " + std::to_string(link.sender + 1));
    R.block(offset, offset, link.rows(), link.rows()) = it->second;
    offsets.push_back(offset);
    offset += link.rows();
  }

  if (policy == CrossBlockPolicy::SharedFromSchedules) {
    if (!neighbor_priors) throw Error(Errc::MissingSchedule, "strict cross blocks need neighbor priors");
    for (std::size_t a = 0; a < node.inbound.size(); ++a) {
      for (std::size_t b = a + 1; b < node.inbound.size(); ++b) {
        const auto& li = node.inbound[a];
        const auto& lj = node.inbound[b];
        const Matrix& Pi = (*neighbor_priors)[std::size_t(li.sender)];
        const Matrix& Pj = (*neighbor_priors)[std::size_t(lj.sender)];
        // (column in H_foreign_i, column in H_foreign_j) for each common variable
        std::vector<std::pair<int, int>> common;
        for (std::size_t ci = 0; ci < li.foreign_global.size(); ++ci)
          for (std::size_t cj = 0; cj < lj.foreign_global.size(); ++cj)
            if (li.foreign_global[ci] == lj.foreign_global[cj])
              common.emplace_back(static_cast<int>(ci), static_cast<int>(cj));
        if (common.empty()) continue;
        const Index m = static_cast<Index>(common.size());
        Matrix C(m, m), Hi(li.rows(), m), Hj(lj.rows(), m);
        for (Index p = 0; p < m; ++p) {
          const auto [ci, cj] = common[std::size_t(p)];
          Hi.col(p) = li.H_foreign.col(ci);
          Hj.col(p) = lj.H_foreign.col(cj);
          for (Index q = 0; q < m; ++q) {
            const auto [di, dj] = common[std::size_t(q)];
            C(p, q) = 0.5 * (Pi(li.foreign_positions[std::size_t(ci)], li.foreign_positions[std::size_t(di)]) +
                             Pj(lj.foreign_positions[std::size_t(cj)], lj.foreign_positions[std::size_t(dj)]));
          }
        }
        const Matrix cross = Hi * C * Hj.transpose();
        R.block(offsets[a], offsets[b], li.rows(), lj.rows()) = cross;
        R.block(offsets[b], offsets[a], lj.rows(), li.rows()) = cross.transpose();
      }
    }
  }
  symmetrize(R);
  return R;
}

// Covariance quantities of one node at one timestep.
struct ScheduleEntry {
  Matrix prior_cov;       // P_{t|t-1}
  Matrix posterior_cov;   // P_{t|t}
  Matrix gain;            // G_t
  Matrix R;               // R_t
  Matrix innovation_cov;  // H~ P H~^T + R
};

struct ScheduleOptions {
  CrossBlockPolicy cross_policy = CrossBlockPolicy::ZeroAll;
  // P_0 = initial_variance * I; non-positive means sigma_v^2.
  double initial_variance = 0.0;
  // The recursion is frozen once no posterior entry moves by more than this
  // fraction of the largest entry. Zero freezes only on a bitwise repeat.
  double freeze_tolerance = 1e-13;
};

// Advances the covariance recursion of all nodes jointly, one timestep per
// call. After the recursion freezes (see ScheduleOptions::freeze_tolerance)
// every later entry is the frozen one.
class ScheduleStepper {
 public:
  ScheduleStepper(const GlobalSystemModel& model, const std::vector<LocalNodeModel>& nodes,
                  ScheduleOptions options = {})
      : nodes_(&nodes), sigma_v2_(model.sigma_v2), sigma_w2_(model.sigma_w2), options_(options) {
    const double p0 = options.initial_variance > 0.0 ? options.initial_variance : model.sigma_v2;
    posterior_.reserve(nodes.size());
    for (const auto& node : nodes) posterior_.push_back(p0 * Matrix::Identity(node.n_local(), node.n_local()));
    entries_.resize(nodes.size());
  }

  void advance() {
    ++t_;
    if (converged_) return;
    const auto& nodes = *nodes_;
    std::vector<Matrix> priors;
    priors.reserve(nodes.size());
    for (std::size_t l = 0; l < nodes.size(); ++l) {
      Matrix P = nodes[l].a_diag.asDiagonal() * posterior_[l] * nodes[l].a_diag.asDiagonal();
      P.diagonal().array() += sigma_v2_;
      priors.push_back(std::move(P));
    }
    bool unchanged = t_ > 1;
    for (std::size_t l = 0; l < nodes.size(); ++l) {
      const auto& node = nodes[l];
      std::map<int, Matrix> deltas;
      for (const auto& link : node.inbound) {
        const Matrix Pf = extract(priors[std::size_t(link.sender)], link.foreign_positions);
        deltas.emplace(link.sender, delta_covariance(Pf, link.H_foreign, sigma_w2_, link.rows()));
      }
      ScheduleEntry e;
      e.R = assemble_R(node, deltas, sigma_w2_, options_.cross_policy, &priors);
      auto cu = covariance_update(priors[l], node.H_stacked, e.R);
      e.prior_cov = priors[l];
      e.posterior_cov = std::move(cu.posterior_cov);
      e.gain = std::move(cu.gain);
      e.innovation_cov = std::move(cu.innovation_cov);
      if (unchanged) {
        const double scale = posterior_[l].cwiseAbs().maxCoeff();
        const double moved = (e.posterior_cov - posterior_[l]).cwiseAbs().maxCoeff();
        if (moved > options_.freeze_tolerance * scale) unchanged = false;
      }
      entries_[l] = std::move(e);
    }
    for (std::size_t l = 0; l < nodes.size(); ++l) posterior_[l] = entries_[l].posterior_cov;
    ++revision_;
    if (unchanged) converged_ = true;
  }

  std::int64_t timestep() const noexcept { return t_; }
  bool converged() const noexcept { return converged_; }
  // Changes whenever any entry changes.
  std::uint64_t revision() const noexcept { return revision_; }
  const ScheduleEntry& entry(int node) const { return entries_.at(std::size_t(node)); }
  const std::vector<ScheduleEntry>& entries() const noexcept { return entries_; }

 private:
  const std::vector<LocalNodeModel>* nodes_;
  double sigma_v2_;
  double sigma_w2_;
  ScheduleOptions options_;
  std::vector<Matrix> posterior_;
  std::vector<ScheduleEntry> entries_;
  std::int64_t t_ = 0;
  std::uint64_t revision_ = 0;
  bool converged_ = false;
};

class CovarianceSchedule {
 public:
  CovarianceSchedule() = default;
  explicit CovarianceSchedule(std::vector<std::vector<ScheduleEntry>> steps) : steps_(std::move(steps)) {}

  std::int64_t horizon() const noexcept { return static_cast<std::int64_t>(steps_.size()); }

  const ScheduleEntry& at(int node, std::int64_t t) const {
    if (t < 1 || t > horizon() || node < 0 || std::size_t(node) >= steps_[std::size_t(t - 1)].size())
      throw Error(Errc::MissingSchedule, "no schedule entry for node " + std::to_string(node + 1) +
                                             " at t=" + std::to_string(t));
    return steps_[std::size_t(t - 1)][std::size_t(node)];
  }

 private:
  std::vector<std::vector<ScheduleEntry>> steps_;
};

inline CovarianceSchedule compute_covariance_schedule(const GlobalSystemModel& model,
                                                      const std::vector<LocalNodeModel>& nodes,
                                                      std::int64_t horizon, ScheduleOptions options = {}) {
  if (horizon < 1) throw Error(Errc::DimensionMismatch, "schedule horizon must be at least 1");
  ScheduleStepper stepper(model, nodes, options);
  std::vector<std::vector<ScheduleEntry>> steps;
  steps.reserve(std::size_t(horizon));
  for (std::int64_t t = 1; t <= horizon; ++t) {
    stepper.advance();
    steps.push_back(stepper.entries());
  }
  return CovarianceSchedule(std::move(steps));
}

// Mean-side state of one center. Gains come from the shared schedule so the
// online covariances are the offline ones by construction.
class NodeFilter {
 public:
  NodeFilter(const LocalNodeModel& node, Vector initial_mean)
      : node_(&node), posterior_(std::move(initial_mean)), prior_(posterior_) {}

  const LocalNodeModel& node() const noexcept { return *node_; }
  const Vector& prior_mean() const noexcept { return prior_; }
  const Vector& posterior_mean() const noexcept { return posterior_; }

  void predict() { prior_ = node_->a_diag.cwiseProduct(posterior_); }

  // Stack y^l with the processed measurements (ascending sender id).
  Vector stack(const Vector& local_meas, const std::vector<const ProcessedMeasurement*>& inbound) const {
    Vector y(node_->stacked_rows());
    y.head(node_->k_local()) = local_meas;
    Index offset = node_->k_local();
    for (std::size_t i = 0; i < node_->inbound.size(); ++i) {
      const auto& link = node_->inbound[i];
      const ProcessedMeasurement* pm = i < inbound.size() ? inbound[i] : nullptr;
      if (pm && pm->from_node == link.sender && pm->values.size() == link.rows())
        y.segment(offset, link.rows()) = pm->values;
      else  // missing or rejected message: pseudo measurement, zero innovation
        y.segment(offset, link.rows()) = link.H_shared * prior_;
      offset += link.rows();
    }
    return y;
  }

  void update(const Vector& stacked, const ScheduleEntry& entry) {
    posterior_ = prior_ + entry.gain * (stacked - node_->H_stacked * prior_);
  }

  void set_posterior(Vector mean) { posterior_ = std::move(mean); }

 private:
  const LocalNodeModel* node_;
  Vector posterior_;
  Vector prior_;
};

}  // namespace gridsec
