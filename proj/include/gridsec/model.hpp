#pragma once

// Global linear grid model and the per-center local models derived from it.

#include <algorithm>
#include <cmath>
#include <numbers>
#include <optional>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "gridsec/error.hpp"

namespace gridsec {

using Vector = Eigen::VectorXd;
using Matrix = Eigen::MatrixXd;
using Index = Eigen::Index;

// x_t = A x_{t-1} + v_t,  y_t = H x_t + w_t, with sensors split into
// disjoint subregions. Sensor and node indices are 0-based.
struct GlobalSystemModel {
  int n_buses = 0;
  int n_sensors = 0;
  int state_dim = 0;
  Matrix A;
  Matrix H;
  double sigma_v2 = 0.0;
  double sigma_w2 = 0.0;
  std::vector<std::vector<int>> partition;
  Vector x0;

  int node_count() const noexcept { return static_cast<int>(partition.size()); }
};

struct ValidationReport {
  std::vector<std::string> issues;

  bool ok() const noexcept { return issues.empty(); }
  bool contains(std::string_view needle) const {
    return std::any_of(issues.begin(), issues.end(), [&](const std::string& s) {
      return s.find(needle) != std::string::npos;
    });
  }
};

inline bool is_diagonal(const Matrix& m) {
  for (Index r = 0; r < m.rows(); ++r)
    for (Index c = 0; c < m.cols(); ++c)
      if (r != c && m(r, c) != 0.0) return false;
  return true;
}

inline ValidationReport validate(const GlobalSystemModel& model) {
  ValidationReport report;
  auto issue = [&](std::string text) { report.issues.push_back(std::move(text)); };

  if (model.n_buses <= 0) issue("n_buses must be positive");
  if (model.n_sensors <= 0) issue("n_sensors must be positive");
  if (model.state_dim <= 0) issue("state_dim must be positive");
  if (!(model.sigma_v2 > 0.0)) issue("sigma_v2 must be positive");
  if (!(model.sigma_w2 > 0.0)) issue("sigma_w2 must be positive");

  const bool a_shape = model.A.rows() == model.state_dim && model.A.cols() == model.state_dim;
  if (!a_shape) issue("A must be state_dim x state_dim");
  else if (!is_diagonal(model.A)) issue("non-diagonal transition matrix A");

  const bool h_shape = model.H.rows() == model.n_sensors && model.H.cols() == model.state_dim;
  if (!h_shape) {
    issue("H must be n_sensors x state_dim");
  } else {
    for (Index k = 0; k < model.H.rows(); ++k)
      if ((model.H.row(k).array() == 0.0).all())
        issue("zero measurement row for sensor " + std::to_string(k + 1));
  }
  if (model.x0.size() != model.state_dim) issue("x0 length must equal state_dim");
  if (!model.A.allFinite() || !model.H.allFinite() || !model.x0.allFinite())
    issue("non-finite entries in model");

  if (model.partition.empty()) issue("partition has no subregions");
  std::vector<int> owner(static_cast<std::size_t>(std::max(model.n_sensors, 0)), -1);
  for (std::size_t l = 0; l < model.partition.size(); ++l) {
    if (model.partition[l].empty()) issue("empty subregion " + std::to_string(l + 1));
    for (int k : model.partition[l]) {
      if (k < 0 || k >= model.n_sensors) {
        issue("sensor index " + std::to_string(k + 1) + " out of range in subregion " +
              std::to_string(l + 1));
        continue;
      }
      auto& o = owner[static_cast<std::size_t>(k)];
      if (o >= 0)
        issue("partition overlap: sensor " + std::to_string(k + 1) + " in subregions " +
              std::to_string(o + 1) + " and " + std::to_string(l + 1));
      else
        o = static_cast<int>(l);
    }
  }
  for (std::size_t k = 0; k < owner.size(); ++k)
    if (owner[k] < 0) issue("partition does not cover sensor " + std::to_string(k + 1));
  return report;
}

// Data node `receiver` needs about the rows it gets from `sender`
// (receiver in C^sender and sender in C^receiver).
struct NeighborLink {
  int receiver = 0;
  int sender = 0;
  std::vector<int> sensor_ids;         // global sensor ids, subset of R^sender
  std::vector<int> sender_rows;        // positions of those sensors in y^sender
  Matrix H_shared;                     // K^{l,j} x N^receiver
  Matrix H_foreign;                    // K^{l,j} x |foreign|
  std::vector<int> foreign_global;     // x^{bar-l,j} as global state indices
  std::vector<int> foreign_positions;  // the same variables as positions in x^sender

  Index rows() const noexcept { return static_cast<Index>(sensor_ids.size()); }
};

struct LocalNodeModel {
  int node_id = 0;
  std::vector<int> sensors;        // R^l, ascending
  std::vector<int> state_indices;  // global indices of x^l, ascending
  Vector a_diag;                   // diagonal of A^l
  Matrix A_local;
  Matrix H_local;                  // K^l x N^l
  std::vector<NeighborLink> inbound;   // one per j in C^l, ascending j
  std::vector<NeighborLink> outbound;  // one per l' with this node in C^l'
  Matrix H_stacked;                // [H^l; H^{l,j} ...]

  Index n_local() const noexcept { return static_cast<Index>(state_indices.size()); }
  Index k_local() const noexcept { return static_cast<Index>(sensors.size()); }
  Index stacked_rows() const noexcept { return H_stacked.rows(); }

  std::vector<int> neighbors() const {
    std::vector<int> out;
    for (const auto& link : inbound) out.push_back(link.sender);
    return out;
  }

  const NeighborLink* inbound_from(int sender) const noexcept {
    for (const auto& link : inbound)
      if (link.sender == sender) return &link;
    return nullptr;
  }

  const NeighborLink* outbound_to(int receiver) const noexcept {
    for (const auto& link : outbound)
      if (link.receiver == receiver) return &link;
    return nullptr;
  }

  // Position of a global state index inside x^l, or -1.
  int position_of(int global_index) const noexcept {
    auto it = std::lower_bound(state_indices.begin(), state_indices.end(), global_index);
    if (it == state_indices.end() || *it != global_index) return -1;
    return static_cast<int>(it - state_indices.begin());
  }
};

namespace detail {

inline Matrix select(const Matrix& m, const std::vector<int>& rows, const std::vector<int>& cols) {
  Matrix out(static_cast<Index>(rows.size()), static_cast<Index>(cols.size()));
  for (std::size_t r = 0; r < rows.size(); ++r)
    for (std::size_t c = 0; c < cols.size(); ++c) out(Index(r), Index(c)) = m(rows[r], cols[c]);
  return out;
}

// X_{y_k}: state variables with a nonzero coefficient in sensor row k.
inline std::vector<int> row_support(const Matrix& H, int k) {
  std::vector<int> out;
  for (Index n = 0; n < H.cols(); ++n)
    if (H(k, n) != 0.0) out.push_back(static_cast<int>(n));
  return out;
}

}  // namespace detail

inline std::vector<LocalNodeModel> build_local_models(const GlobalSystemModel& model) {
  for (std::size_t l = 0; l < model.partition.size(); ++l)
    if (model.partition[l].empty())
      throw Error(Errc::EmptySubregion, "subregion " + std::to_string(l + 1) + " has no sensors");
  if (model.A.rows() == model.A.cols() && !is_diagonal(model.A))
    throw Error(Errc::NonDiagonalTransition, "state transition matrix must be diagonal");
  if (auto report = validate(model); !report.ok())
    throw Error(Errc::InvalidModel, report.issues.front());

  const int L = model.node_count();
  std::vector<LocalNodeModel> nodes(static_cast<std::size_t>(L));

  for (int l = 0; l < L; ++l) {
    auto& node = nodes[static_cast<std::size_t>(l)];
    node.node_id = l;
    node.sensors = model.partition[static_cast<std::size_t>(l)];
    std::sort(node.sensors.begin(), node.sensors.end());
    std::set<int> support;
    for (int k : node.sensors)
      for (int n : detail::row_support(model.H, k)) support.insert(n);
    node.state_indices.assign(support.begin(), support.end());
    node.a_diag.resize(node.n_local());
    for (Index i = 0; i < node.n_local(); ++i)
      node.a_diag(i) = model.A(node.state_indices[std::size_t(i)], node.state_indices[std::size_t(i)]);
    node.A_local = node.a_diag.asDiagonal();
    node.H_local = detail::select(model.H, node.sensors, node.state_indices);
  }

  for (int l = 0; l < L; ++l) {
    auto& receiver = nodes[static_cast<std::size_t>(l)];
    const std::set<int> mine(receiver.state_indices.begin(), receiver.state_indices.end());
    for (int j = 0; j < L; ++j) {
      if (j == l) continue;
      const auto& sender = nodes[static_cast<std::size_t>(j)];
      const bool overlaps = std::any_of(sender.state_indices.begin(), sender.state_indices.end(),
                                        [&](int n) { return mine.count(n) > 0; });
      if (!overlaps) continue;

      NeighborLink link;
      link.receiver = l;
      link.sender = j;
      for (std::size_t pos = 0; pos < sender.sensors.size(); ++pos) {
        const int k = sender.sensors[pos];
        const auto support = detail::row_support(model.H, k);
        if (std::any_of(support.begin(), support.end(), [&](int n) { return mine.count(n) > 0; })) {
          link.sensor_ids.push_back(k);
          link.sender_rows.push_back(static_cast<int>(pos));
        }
      }
      for (std::size_t pos = 0; pos < sender.state_indices.size(); ++pos) {
        const int n = sender.state_indices[pos];
        if (!mine.count(n)) {
          link.foreign_global.push_back(n);
          link.foreign_positions.push_back(static_cast<int>(pos));
        }
      }
      link.H_shared = detail::select(model.H, link.sensor_ids, receiver.state_indices);
      link.H_foreign = detail::select(model.H, link.sensor_ids, link.foreign_global);
      receiver.inbound.push_back(link);
      nodes[static_cast<std::size_t>(j)].outbound.push_back(std::move(link));
    }
  }

  for (auto& node : nodes) {
    Index rows = node.k_local();
    for (const auto& link : node.inbound) rows += link.rows();
    node.H_stacked.resize(rows, node.n_local());
    node.H_stacked.topRows(node.k_local()) = node.H_local;
    Index offset = node.k_local();
    for (const auto& link : node.inbound) {
      node.H_stacked.middleRows(offset, link.rows()) = link.H_shared;
      offset += link.rows();
    }
    std::sort(node.outbound.begin(), node.outbound.end(),
              [](const NeighborLink& a, const NeighborLink& b) { return a.receiver < b.receiver; });
  }
  return nodes;
}

// Scatter a local row back to global column positions.
inline Eigen::RowVectorXd scatter_row(const LocalNodeModel& node, Index local_row, Index state_dim) {
  Eigen::RowVectorXd row = Eigen::RowVectorXd::Zero(state_dim);
  for (Index i = 0; i < node.n_local(); ++i)
    row(node.state_indices[std::size_t(i)]) = node.H_local(local_row, i);
  return row;
}

// IEEE 14-bus system in the DC (phase-angle only) form with bus 6 as the
// reference, split into four monitoring subregions:
//   1: buses 1, 2, 5        2: buses 3, 4
//   3: buses 6, 11, 12, 13  4: buses 7, 8, 9, 10, 14
// Flow rows on branch (i,k) measured at i are +1 at i, -1 at k; injection rows
// are the sum of the incident flow rows (unit susceptances).
struct Ieee14Topology {
  static constexpr int kBuses = 14;
  static constexpr int kReferenceBus = 6;

  static constexpr std::pair<int, int> kBranches[] = {
      {1, 2}, {1, 5}, {2, 3}, {2, 4}, {2, 5}, {3, 4}, {4, 5}, {4, 7}, {4, 9}, {5, 6},
      {6, 11}, {6, 12}, {6, 13}, {7, 8}, {7, 9}, {9, 10}, {9, 14}, {10, 11}, {12, 13}, {13, 14}};

  struct Sensor {
    int from;  // bus where the meter sits
    int to;    // 0 for an injection meter
  };

  // Grouped by subregion: 6 + 5 + 5 + 7 = 23 sensors.
  static constexpr Sensor kSensors[] = {
      {1, 5}, {2, 3}, {2, 4}, {2, 5}, {5, 6}, {5, 0},             // subregion 1
      {3, 2}, {3, 4}, {4, 2}, {4, 5}, {3, 0},                     // subregion 2
      {6, 11}, {6, 12}, {6, 13}, {12, 13}, {12, 0},               // subregion 3
      {7, 8}, {7, 9}, {9, 10}, {9, 14}, {14, 13}, {8, 0}, {14, 0}  // subregion 4
  };
  static constexpr int kRegionSizes[] = {6, 5, 5, 7};

  // Operating-point angles in degrees (bus 1..14) before re-referencing.
  static constexpr double kAnglesDeg[] = {0.0,    -4.98,  -12.72, -10.33, -8.78,  -14.22, -13.37,
                                          -13.36, -14.94, -15.10, -14.79, -15.07, -15.16, -16.04};

  static int state_index(int bus) noexcept { return bus < kReferenceBus ? bus - 1 : bus - 2; }
};

inline GlobalSystemModel ieee14_default() {
  using T = Ieee14Topology;
  GlobalSystemModel m;
  m.n_buses = T::kBuses;
  m.n_sensors = static_cast<int>(std::size(T::kSensors));
  m.state_dim = T::kBuses - 1;
  m.A = Matrix::Identity(m.state_dim, m.state_dim);
  m.H = Matrix::Zero(m.n_sensors, m.state_dim);
  m.sigma_v2 = 1e-4;
  m.sigma_w2 = 1e-4;

  auto add_flow = [&](int row, int from, int to, double sign) {
    if (from != T::kReferenceBus) m.H(row, T::state_index(from)) += sign;
    if (to != T::kReferenceBus) m.H(row, T::state_index(to)) -= sign;
  };
  for (int k = 0; k < m.n_sensors; ++k) {
    const auto s = T::kSensors[k];
    if (s.to != 0) {
      add_flow(k, s.from, s.to, 1.0);
      continue;
    }
    for (const auto& [a, b] : T::kBranches) {
      if (a == s.from) add_flow(k, a, b, 1.0);
      else if (b == s.from) add_flow(k, b, a, 1.0);
    }
  }

  int next = 0;
  for (int size : T::kRegionSizes) {
    std::vector<int> region;
    for (int i = 0; i < size; ++i) region.push_back(next++);
    m.partition.push_back(std::move(region));
  }

  m.x0.resize(m.state_dim);
  const double ref = T::kAnglesDeg[T::kReferenceBus - 1];
  for (int bus = 1; bus <= T::kBuses; ++bus) {
    if (bus == T::kReferenceBus) continue;
    m.x0(T::state_index(bus)) = (T::kAnglesDeg[bus - 1] - ref) * std::numbers::pi / 180.0;
  }
  return m;
}

}  // namespace gridsec
