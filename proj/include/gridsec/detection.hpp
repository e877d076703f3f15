#pragma once

// Sequential detection: chi-squared residual statistic, p-value evidence,
// a CUSUM-like test with change-point tracking, and threshold calibration.

#include <cmath>
#include <cstdint>
#include <limits>
#include <numbers>
#include <optional>
#include <string>

#include <Eigen/Cholesky>

#include "gridsec/error.hpp"
#include "gridsec/model.hpp"

namespace gridsec {

inline constexpr double kPFloor = 1e-300;

inline Eigen::LLT<Matrix> factor_sigma(const Matrix& sigma) {
  Eigen::LLT<Matrix> llt(sigma);
  if (llt.info() != Eigen::Success || (sigma.size() > 0 && llt.rcond() * 1e14 < 1.0))
    throw Error(Errc::SingularSigma, "Sigma is not numerically positive definite");
  return llt;
}

// r^T Sigma^{-1} r from a factor of Sigma.
inline double chi_statistic(const Vector& residual, const Eigen::LLT<Matrix>& sigma_factor) {
  if (sigma_factor.rows() != residual.size())
    throw Error(Errc::DimensionMismatch, "residual and Sigma dimensions differ");
  if (residual.size() == 0) return 0.0;
  return sigma_factor.matrixL().solve(residual).squaredNorm();
}

inline double chi_statistic(const Vector& residual, const Matrix& sigma) {
  if (sigma.rows() != residual.size() || sigma.cols() != residual.size())
    throw Error(Errc::DimensionMismatch, "residual and Sigma dimensions differ");
  if (residual.size() == 0) return 0.0;
  return chi_statistic(residual, factor_sigma(sigma));
}

namespace detail {

// Regularized incomplete gamma, both tails. Series below a+1, Lentz
// continued fraction above; each tail is computed directly so small p-values
// keep full relative precision.
struct GammaTails {
  double lower;  // P(a, x)
  double upper;  // Q(a, x)
};

inline GammaTails incomplete_gamma(double a, double x) {
  if (x <= 0.0) return {0.0, 1.0};
  if (std::isinf(x)) return {1.0, 0.0};
  const double log_prefix = a * std::log(x) - x - std::lgamma(a);
  constexpr double eps = 1e-16;
  constexpr int max_iter = 10000;
  if (x < a + 1.0) {
    double term = 1.0 / a;
    double sum = term;
    for (int n = 1; n < max_iter; ++n) {
      term *= x / (a + n);
      sum += term;
      if (std::abs(term) < std::abs(sum) * eps) break;
    }
    const double p = std::min(1.0, sum * std::exp(log_prefix));
    return {p, 1.0 - p};
  }
  constexpr double tiny = 1e-300;
  double b = x + 1.0 - a;
  double c = 1.0 / tiny;
  double d = 1.0 / b;
  double h = d;
  for (int i = 1; i < max_iter; ++i) {
    const double an = -i * (i - a);
    b += 2.0;
    d = an * d + b;
    if (std::abs(d) < tiny) d = tiny;
    c = b + an / c;
    if (std::abs(c) < tiny) c = tiny;
    d = 1.0 / d;
    const double delta = d * c;
    h *= delta;
    if (std::abs(delta - 1.0) < eps) break;
  }
  const double q = std::min(1.0, std::exp(log_prefix) * h);
  return {1.0 - q, q};
}

}  // namespace detail

// F_k(x): regularized lower incomplete gamma P(k/2, x/2).
inline double chi_squared_cdf(double x, int k) {
  if (k <= 0) throw Error(Errc::OutOfDomain, "degrees of freedom must be positive");
  if (!(x >= 0.0)) throw Error(Errc::OutOfDomain, "chi-squared argument must be nonnegative");
  return detail::incomplete_gamma(0.5 * k, 0.5 * x).lower;
}

// 1 - F_k(x) evaluated without cancellation.
inline double chi_squared_sf(double x, int k) {
  if (k <= 0) throw Error(Errc::OutOfDomain, "degrees of freedom must be positive");
  if (!(x >= 0.0)) throw Error(Errc::OutOfDomain, "chi-squared argument must be nonnegative");
  return detail::incomplete_gamma(0.5 * k, 0.5 * x).upper;
}

inline void check_alpha(double alpha) {
  if (!(alpha > 0.0 && alpha < std::exp(-1.0)))
    throw Error(Errc::InvalidAlpha, "alpha must lie in (0, 1/e), got " + std::to_string(alpha));
}

inline double p_value(double chi, int k) { return std::max(chi_squared_sf(chi, k), kPFloor); }

// log(alpha / p); positive iff p < alpha.
inline double evidence(double chi, int k, double alpha) {
  check_alpha(alpha);
  return std::log(alpha) - std::log(p_value(chi, k));
}

struct DetectorState {
  double g = 0.0;
  std::int64_t tau_hat = 0;
  double alpha = 0.2;
  double h = 0.0;
  std::optional<std::int64_t> alarmed_at;

  DetectorState() = default;
  DetectorState(double alpha_, double h_, std::int64_t start = 0) : tau_hat(start), alpha(alpha_), h(h_) {
    check_alpha(alpha_);
    if (!(h_ >= 0.0)) throw Error(Errc::OutOfDomain, "threshold must be nonnegative");
  }

  bool alarmed() const noexcept { return alarmed_at.has_value(); }

  // Post-investigation restart: g = 0 and the change-point moves to t.
  void restart(std::int64_t t) noexcept {
    g = 0.0;
    tau_hat = t;
    alarmed_at.reset();
  }
};

inline DetectorState cusum_step(DetectorState state, double evidence_value, std::int64_t t) {
  if (state.alarmed())
    throw Error(Errc::AlreadyAlarmed, "detector alarmed at t=" + std::to_string(*state.alarmed_at));
  state.g = std::max(0.0, state.g + evidence_value);
  if (state.g == 0.0) state.tau_hat = t;
  if (state.g >= state.h) state.alarmed_at = t;
  return state;
}

// Principal branch of the Lambert-W function.
inline double lambert_w0(double z) {
  constexpr double branch = -0.36787944117144233;  // -1/e
  if (std::isnan(z) || z < branch - 1e-12)
    throw Error(Errc::OutOfDomain, "Lambert W0 is undefined below -1/e");
  if (z <= branch) return -1.0;
  if (z == 0.0) return 0.0;
  if (std::isinf(z)) return z;

  double w;
  if (z < -0.25) {
    // branch-point expansion in p = sqrt(2(e z + 1))
    const double p = std::sqrt(2.0 * (std::numbers::e * z + 1.0));
    w = -1.0 + p - p * p / 3.0 + 11.0 / 72.0 * p * p * p;
  } else if (z < 3.0) {
    w = std::log1p(z);
    w = w * (1.0 - std::log1p(w) / (2.0 + w));
  } else {
    const double l1 = std::log(z);
    const double l2 = std::log(l1);
    w = l1 - l2 + l2 / l1;
  }
  for (int i = 0; i < 64; ++i) {
    const double ew = std::exp(w);
    const double f = w * ew - z;
    const double wp1 = w + 1.0;
    if (wp1 <= 0.0) break;
    const double step = f / (ew * wp1 - (w + 2.0) * f / (2.0 * wp1));
    const double next = w - step;
    if (!std::isfinite(next)) break;
    w = std::max(next, -1.0);
    if (std::abs(step) <= 1e-16 * (1.0 + std::abs(w))) break;
  }
  return w;
}

// Smallest h with E_inf[Gamma] >= L_target:
// h = log(L) / (1 - W0(alpha log alpha) / log alpha).
inline double threshold_for_false_alarm(double alpha, double L_target) {
  check_alpha(alpha);
  if (!(L_target >= 1.0)) throw Error(Errc::OutOfDomain, "target false-alarm period must be >= 1");
  const double la = std::log(alpha);
  return std::log(L_target) / (1.0 - lambert_w0(alpha * la) / la);
}

// x_{t|t} = A^(t - tau_hat) x_{tau_hat|tau_hat} for diagonal A.
inline Vector recover_state(const Vector& mean_at_tau, const Vector& a_diag, std::int64_t t, std::int64_t tau_hat) {
  if (a_diag.size() != mean_at_tau.size())
    throw Error(Errc::DimensionMismatch, "transition diagonal and estimate lengths differ");
  if (t < tau_hat) throw Error(Errc::OutOfDomain, "recovery time precedes the change-point");
  const double steps = static_cast<double>(t - tau_hat);
  Vector out(mean_at_tau.size());
  for (Index i = 0; i < out.size(); ++i) {
    const double a = a_diag(i);
    out(i) = (a == 1.0 ? 1.0 : std::pow(a, steps)) * mean_at_tau(i);
  }
  return out;
}

inline Vector recover_state(const Vector& mean_at_tau, const Matrix& A_local, std::int64_t t, std::int64_t tau_hat) {
  if (!is_diagonal(A_local)) throw Error(Errc::NonDiagonalTransition, "recovery needs a diagonal A");
  return recover_state(mean_at_tau, Vector(A_local.diagonal()), t, tau_hat);
}

}  // namespace gridsec
