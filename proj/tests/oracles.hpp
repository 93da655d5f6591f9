#pragma once

// Closed-form reference values and finite-difference helpers used as
// independent checks against the library implementations. Everything here is
// hand-derived from textbook formulas and stays off the library code paths.

#include <cmath>
#include <functional>
#include <vector>

namespace oracle {

inline double central_diff(const std::function<double(double)>& f, double x,
                           double h = 1e-5) {
  return (f(x + h) - f(x - h)) / (2.0 * h);
}

inline double second_diff(const std::function<double(double)>& f, double x,
                          double h = 1e-4) {
  return (f(x + h) - 2.0 * f(x) + f(x - h)) / (h * h);
}

inline double rel_err(double got, double want) {
  double denom = std::max(std::abs(want), 1e-12);
  return std::abs(got - want) / denom;
}

// --- Clayton, theta > 0 ---------------------------------------------------
inline double clayton_phi(double theta, double x) {
  return std::pow(1.0 + x, -1.0 / theta);
}
inline double clayton_dphi(double theta, double x) {
  return -(1.0 / theta) * std::pow(1.0 + x, -1.0 / theta - 1.0);
}
inline double clayton_d2phi(double theta, double x) {
  return (1.0 / theta) * (1.0 / theta + 1.0) * std::pow(1.0 + x, -1.0 / theta - 2.0);
}
inline double clayton_inv(double theta, double u) {
  return std::pow(u, -theta) - 1.0;
}
inline double clayton_cdf2(double theta, double u, double v) {
  return std::pow(std::pow(u, -theta) + std::pow(v, -theta) - 1.0, -1.0 / theta);
}
inline double clayton_cdf(double theta, const std::vector<double>& u) {
  double s = 1.0 - static_cast<double>(u.size());
  for (double ui : u) s += std::pow(ui, -theta);
  return std::pow(s, -1.0 / theta);
}
inline double clayton_partial2(double theta, double u, double v) {
  double s = std::pow(u, -theta) + std::pow(v, -theta) - 1.0;
  return std::pow(u, -theta - 1.0) * std::pow(s, -1.0 / theta - 1.0);
}
inline double clayton_partial(double theta, const std::vector<double>& u, int k) {
  double s = 1.0 - static_cast<double>(u.size());
  for (double ui : u) s += std::pow(ui, -theta);
  return std::pow(u[static_cast<std::size_t>(k)], -theta - 1.0) *
         std::pow(s, -1.0 / theta - 1.0);
}
inline double clayton_density2(double theta, double u, double v) {
  double s = std::pow(u, -theta) + std::pow(v, -theta) - 1.0;
  return (1.0 + theta) * std::pow(u * v, -theta - 1.0) *
         std::pow(s, -1.0 / theta - 2.0);
}
inline double clayton_tau(double theta) { return theta / (theta + 2.0); }

// Two-level nested Clayton: outer theta0 over (u1, inner theta1 over (u2,u3)).
inline double nested_clayton_cdf3(double t0, double t1, double u1, double u2,
                                  double u3) {
  double inner = std::pow(u2, -t1) + std::pow(u3, -t1) - 1.0;
  return std::pow(std::pow(inner, t0 / t1) + std::pow(u1, -t0) - 1.0, -1.0 / t0);
}
inline double nested_clayton_d_u2(double t0, double t1, double u1, double u2,
                                  double u3) {
  double inner = std::pow(u2, -t1) + std::pow(u3, -t1) - 1.0;
  double outer = std::pow(inner, t0 / t1) + std::pow(u1, -t0) - 1.0;
  return std::pow(outer, -1.0 / t0 - 1.0) * std::pow(inner, t0 / t1 - 1.0) *
         std::pow(u2, -t1 - 1.0);
}

// --- Frank, theta != 0 ----------------------------------------------------
inline double frank_phi(double theta, double x) {
  double c = 1.0 - std::exp(-theta);
  return -(1.0 / theta) * std::log(1.0 - c * std::exp(-x));
}
inline double frank_inv(double theta, double u) {
  double c = 1.0 - std::exp(-theta);
  return -std::log((1.0 - std::exp(-theta * u)) / c);
}
inline double frank_cdf2(double theta, double u, double v) {
  double c = std::exp(-theta) - 1.0;
  return -(1.0 / theta) *
         std::log(1.0 + (std::exp(-theta * u) - 1.0) * (std::exp(-theta * v) - 1.0) / c);
}
inline double frank_partial2(double theta, double u, double v) {
  double eu = std::exp(-theta * u), ev = std::exp(-theta * v), e1 = std::exp(-theta);
  return eu * (ev - 1.0) / ((e1 - 1.0) + (eu - 1.0) * (ev - 1.0));
}
inline double frank_density2(double theta, double u, double v) {
  double c = 1.0 - std::exp(-theta);
  double num = theta * c * std::exp(-theta * (u + v));
  double den = c - (1.0 - std::exp(-theta * u)) * (1.0 - std::exp(-theta * v));
  return num / (den * den);
}

// --- Gumbel, theta >= 1 ---------------------------------------------------
inline double gumbel_phi(double theta, double x) {
  return std::exp(-std::pow(x, 1.0 / theta));
}
inline double gumbel_inv(double theta, double u) {
  return std::pow(-std::log(u), theta);
}
inline double gumbel_cdf2(double theta, double u, double v) {
  double s = std::pow(-std::log(u), theta) + std::pow(-std::log(v), theta);
  return std::exp(-std::pow(s, 1.0 / theta));
}
inline double gumbel_partial2(double theta, double u, double v) {
  double a = -std::log(u), b = -std::log(v);
  double s = std::pow(a, theta) + std::pow(b, theta);
  return gumbel_cdf2(theta, u, v) * std::pow(s, 1.0 / theta - 1.0) *
         std::pow(a, theta - 1.0) / u;
}
inline double gumbel_density2(double theta, double u, double v) {
  double a = -std::log(u), b = -std::log(v);
  double s = std::pow(a, theta) + std::pow(b, theta);
  return gumbel_cdf2(theta, u, v) * std::pow(a * b, theta - 1.0) / (u * v) *
         (std::pow(s, 2.0 / theta - 2.0) +
          (theta - 1.0) * std::pow(s, 1.0 / theta - 2.0));
}

// Kendall tau of a finite sample, O(n^2) concordance count (tau-a).
inline double empirical_tau(const std::vector<double>& x,
                            const std::vector<double>& y) {
  const std::size_t n = x.size();
  long long concordant = 0, discordant = 0;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j) {
      double p = (x[i] - x[j]) * (y[i] - y[j]);
      if (p > 0)
        ++concordant;
      else if (p < 0)
        ++discordant;
    }
  double pairs = 0.5 * static_cast<double>(n) * static_cast<double>(n - 1);
  return static_cast<double>(concordant - discordant) / pairs;
}

}  // namespace oracle
