#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "hacsurv/hac.hpp"
#include "hacsurv/marginals.hpp"
#include "hacsurv/sampling.hpp"

namespace hacsurv {

// ---------------------------------------------------------------------------
// Conditional cause-specific CIF:
//   F_k(t|x) = 1 - C(u_0..u_K) / C({u_i}_{i != k}),
// with u_i = S_i(t|x) and the denominator the same tree with u_k set to 1.
// Under the independent copula the ratio cancels to 1 - u_k exactly.
// ---------------------------------------------------------------------------

inline double cif_from_u(const CopulaModel& copula, std::span<const double> u,
                         int k) {
  const int nv = copula.dimension();
  if (k < 0 || k >= nv) throw DomainError("predict_cif: event index out of range");
  if (copula.kind() == CopulaKind::Independent)
    return 1.0 - u[static_cast<std::size_t>(k)];
  std::vector<double> uc(u.begin(), u.end());
  for (double& v : uc) v = clamp_unit(v);
  double num = copula.cdf(uc);
  uc[static_cast<std::size_t>(k)] = 1.0;
  double den = copula.cdf(uc);
  if (den < 1e-300)
    throw NumericError("predict_cif: denominator copula vanished (degenerate region)");
  double f = 1.0 - num / den;
  return std::min(std::max(f, 0.0), 1.0);
}

inline double predict_cif(const CopulaModel& copula,
                          std::span<const MarginalModel* const> marginals, int k,
                          double t, std::span<const double> x) {
  if (!(t > 0.0)) throw DomainError("predict_cif: t must be > 0");
  const int nv = copula.dimension();
  if (static_cast<int>(marginals.size()) != nv)
    throw StructureError("predict_cif: marginal count != copula dimension");
  std::vector<double> u(static_cast<std::size_t>(nv));
  for (int i = 0; i < nv; ++i)
    u[static_cast<std::size_t>(i)] = marginals[static_cast<std::size_t>(i)]->survival(t, x);
  return cif_from_u(copula, u, k);
}

// ---------------------------------------------------------------------------
// Shared prediction grid: per-subject, per-event survival and CIF matrices on
// a common strictly increasing time grid (empirical quantiles of observed
// times, deduplicated).
// ---------------------------------------------------------------------------

struct PredictionGrid {
  std::vector<double> times;               // G points, strictly increasing
  int n_subjects = 0;
  std::vector<std::vector<double>> survival;  // [event k][subject * G + g]
  std::vector<std::vector<double>> cif;       // same shape; may be empty

  int n_events() const { return static_cast<int>(survival.size()); }

  double survival_at(int k, std::size_t subject, double t) const {
    return interp(survival[static_cast<std::size_t>(k)], subject, t,
                  /*anchor_at_zero=*/1.0);
  }
  double cif_at(int k, std::size_t subject, double t) const {
    return interp(cif[static_cast<std::size_t>(k)], subject, t,
                  /*anchor_at_zero=*/0.0);
  }

 private:
  // Linear interpolation on the grid; below the first point the curve is
  // anchored at its exact t = 0 limit, beyond the last point it is clamped.
  double interp(const std::vector<double>& m, std::size_t subject, double t,
                double anchor_at_zero) const {
    const std::size_t G = times.size();
    const double* row = m.data() + subject * G;
    if (t <= 0.0) return anchor_at_zero;
    if (t >= times.back()) return row[G - 1];
    if (t <= times.front())
      return anchor_at_zero + (row[0] - anchor_at_zero) * t / times.front();
    std::size_t hi = static_cast<std::size_t>(
        std::upper_bound(times.begin(), times.end(), t) - times.begin());
    std::size_t lo = hi - 1;
    double w = (t - times[lo]) / (times[hi] - times[lo]);
    return row[lo] + w * (row[hi] - row[lo]);
  }
};

inline std::vector<double> quantile_time_grid(const SurvivalDataset& data,
                                              int points = 100) {
  if (data.size() == 0) throw DomainError("quantile_time_grid: empty dataset");
  std::vector<double> ts(data.time);
  std::sort(ts.begin(), ts.end());
  std::vector<double> grid;
  for (int i = 0; i < points; ++i) {
    double q = (i + 1.0) / (points + 1.0);
    double v = ts[static_cast<std::size_t>(q * (static_cast<double>(ts.size()) - 1.0))];
    if (grid.empty() || v > grid.back()) grid.push_back(v);
  }
  return grid;
}

inline PredictionGrid predict_grid(const CopulaModel& copula,
                                   const MonotoneSurvivalNet& net,
                                   const SurvivalDataset& subjects,
                                   std::vector<double> times,
                                   bool want_cif = true) {
  PredictionGrid pg;
  pg.times = std::move(times);
  pg.n_subjects = static_cast<int>(subjects.size());
  const int nv = net.n_causes();
  const std::size_t G = pg.times.size();
  pg.survival.assign(static_cast<std::size_t>(nv),
                     std::vector<double>(subjects.size() * G));
  if (want_cif)
    pg.cif.assign(static_cast<std::size_t>(nv),
                  std::vector<double>(subjects.size() * G));
  std::vector<double> block;
  std::vector<double> u(static_cast<std::size_t>(nv));
  for (std::size_t i = 0; i < subjects.size(); ++i) {
    net.survival_grid(subjects.covariates(i), pg.times, block);
    for (int k = 0; k < nv; ++k)
      for (std::size_t g = 0; g < G; ++g)
        pg.survival[static_cast<std::size_t>(k)][i * G + g] =
            block[static_cast<std::size_t>(k) * G + g];
    if (want_cif) {
      for (std::size_t g = 0; g < G; ++g) {
        for (int k = 0; k < nv; ++k)
          u[static_cast<std::size_t>(k)] = block[static_cast<std::size_t>(k) * G + g];
        for (int k = 0; k < nv; ++k)
          pg.cif[static_cast<std::size_t>(k)][i * G + g] = cif_from_u(copula, u, k);
      }
    }
  }
  return pg;
}

// ---------------------------------------------------------------------------
// Survival-L1: mean over subjects of the time-normalized L1 distance between
// two survival curves on a 200-point uniform grid over [0, t_max].
// ---------------------------------------------------------------------------

namespace detail {

inline double l1_between(const std::function<double(std::size_t, double)>& a,
                         const std::function<double(std::size_t, double)>& b,
                         std::size_t n_subjects, double t_max, int grid_points) {
  std::vector<double> per_subject(n_subjects);
  for (std::size_t i = 0; i < n_subjects; ++i) {
    double integral = 0.0;
    double prev = std::abs(a(i, 0.0) - b(i, 0.0));
    for (int g = 1; g < grid_points; ++g) {
      double t = t_max * g / (grid_points - 1.0);
      double cur = std::abs(a(i, t) - b(i, t));
      integral += 0.5 * (prev + cur) * (t_max / (grid_points - 1.0));
      prev = cur;
    }
    per_subject[i] = integral / t_max;
  }
  return pairwise_sum(per_subject) / static_cast<double>(n_subjects);
}

}  // namespace detail

// Against a ground-truth oracle (synthetic data only).
inline std::vector<double> survival_l1(
    const PredictionGrid& est, std::span<const MarginalModel* const> truth,
    const SurvivalDataset& data, int grid_points = 200) {
  if (truth.empty()) throw DomainError("survival_l1: missing truth oracle");
  if (static_cast<std::size_t>(est.n_subjects) != data.size())
    throw StructureError("survival_l1: subject count mismatch");
  double t_max = data.max_time();
  std::vector<double> out;
  for (int k = 0; k < est.n_events(); ++k) {
    auto a = [&](std::size_t i, double t) { return est.survival_at(k, i, t); };
    auto b = [&](std::size_t i, double t) {
      return truth[static_cast<std::size_t>(k)]->survival(t, data.covariates(i));
    };
    out.push_back(detail::l1_between(a, b, data.size(), t_max, grid_points));
  }
  return out;
}

// Between two grid estimates (used by the metric-property checks).
inline double survival_l1_between(const PredictionGrid& a, const PredictionGrid& b,
                                  int k, const SurvivalDataset& data,
                                  int grid_points = 200) {
  auto fa = [&](std::size_t i, double t) { return a.survival_at(k, i, t); };
  auto fb = [&](std::size_t i, double t) { return b.survival_at(k, i, t); };
  return detail::l1_between(fa, fb, data.size(), data.max_time(), grid_points);
}

// ---------------------------------------------------------------------------
// Time-dependent concordance (Antolini): pairs (i, j) with e_i = k and
// t_i < t_j are comparable; concordant when F_k(t_i|x_i) > F_k(t_i|x_j);
// prediction ties count one half.
// ---------------------------------------------------------------------------

inline double ctd_index(const PredictionGrid& pred, const SurvivalDataset& data,
                        int k) {
  if (static_cast<std::size_t>(pred.n_subjects) != data.size())
    throw StructureError("ctd_index: subject count mismatch");
  // CIF when present; otherwise risk = 1 - S at the comparison time.
  const bool use_cif = !pred.cif.empty();
  long long comparable = 0;
  double concordant = 0.0;
  const std::size_t n = data.size();
  for (std::size_t i = 0; i < n; ++i) {
    if (data.event[i] != k) continue;
    double ti = data.time[i];
    double fi = use_cif ? pred.cif_at(k, i, ti) : 1.0 - pred.survival_at(k, i, ti);
    for (std::size_t j = 0; j < n; ++j) {
      if (data.time[j] <= ti || i == j) continue;
      ++comparable;
      double fj = use_cif ? pred.cif_at(k, j, ti) : 1.0 - pred.survival_at(k, j, ti);
      if (fi > fj)
        concordant += 1.0;
      else if (fi == fj)
        concordant += 0.5;
    }
  }
  if (comparable == 0)
    throw DomainError("ctd_index: no comparable pairs for event " + std::to_string(k));
  return concordant / static_cast<double>(comparable);
}

// ---------------------------------------------------------------------------
// Kaplan-Meier estimate of the censoring survival G(t) (event 0 = censoring)
// and the IPCW integrated Brier score.
// ---------------------------------------------------------------------------

struct StepFunction {
  std::vector<double> times;   // ascending jump locations
  std::vector<double> values;  // value at and after each jump

  double operator()(double t) const {
    if (times.empty() || t < times.front()) return 1.0;
    std::size_t idx = static_cast<std::size_t>(
        std::upper_bound(times.begin(), times.end(), t) - times.begin());
    return values[idx - 1];
  }
  double left_limit(double t) const {
    if (times.empty() || t <= times.front()) return 1.0;
    std::size_t idx = static_cast<std::size_t>(
        std::lower_bound(times.begin(), times.end(), t) - times.begin());
    return idx == 0 ? 1.0 : values[idx - 1];
  }
};

inline StepFunction km_censoring(const SurvivalDataset& data) {
  if (data.size() == 0) throw DomainError("km_censoring: empty dataset");
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return data.time[a] < data.time[b];
  });
  StepFunction g;
  double surv = 1.0;
  std::size_t at_risk = data.size();
  std::size_t pos = 0;
  while (pos < order.size()) {
    double t = data.time[order[pos]];
    std::size_t censored = 0, total = 0;
    while (pos < order.size() && data.time[order[pos]] == t) {
      if (data.event[order[pos]] == 0) ++censored;
      ++total;
      ++pos;
    }
    if (censored > 0) {
      surv *= 1.0 - static_cast<double>(censored) / static_cast<double>(at_risk);
      g.times.push_back(t);
      g.values.push_back(surv);
    }
    at_risk -= total;
  }
  return g;
}

struct IbsResult {
  double ibs = 0.0;
  int skipped_points = 0;
};

inline IbsResult ibs(const PredictionGrid& pred, const SurvivalDataset& data,
                     int k, const StepFunction& censor_km,
                     double weight_floor = 0.05) {
  if (static_cast<std::size_t>(pred.n_subjects) != data.size())
    throw StructureError("ibs: subject count mismatch");
  const std::size_t G = pred.times.size();
  const std::size_t n = data.size();
  std::vector<double> bs(G, 0.0);
  std::vector<bool> valid(G, false);
  for (std::size_t g = 0; g < G; ++g) {
    double t = pred.times[g];
    double acc = 0.0;
    bool any = false;
    double g_t = std::max(censor_km(t), weight_floor);
    for (std::size_t i = 0; i < n; ++i) {
      double s = pred.survival_at(k, i, t);
      if (data.time[i] <= t && data.event[i] == static_cast<int>(k)) {
        double w = 1.0 / std::max(censor_km.left_limit(data.time[i]), weight_floor);
        acc += s * s * w;
        any = true;
      } else if (data.time[i] > t) {
        acc += (1.0 - s) * (1.0 - s) / g_t;
        any = true;
      }
    }
    if (any) {
      bs[g] = acc / static_cast<double>(n);
      valid[g] = true;
    }
  }
  IbsResult out;
  // time average over the valid grid points (trapezoid)
  double integral = 0.0, span_t = 0.0;
  double prev_t = 0.0, prev_v = 0.0;
  bool have_prev = false;
  for (std::size_t g = 0; g < G; ++g) {
    if (!valid[g]) {
      ++out.skipped_points;
      continue;
    }
    if (have_prev) {
      integral += 0.5 * (prev_v + bs[g]) * (pred.times[g] - prev_t);
      span_t += pred.times[g] - prev_t;
    }
    prev_t = pred.times[g];
    prev_v = bs[g];
    have_prev = true;
  }
  if (span_t > 0.0)
    out.ibs = integral / span_t;
  else if (have_prev)
    out.ibs = prev_v;  // single valid point
  else
    throw DomainError("ibs: every grid point had an empty risk set");
  return out;
}

// ---------------------------------------------------------------------------
// Metrics report.
// ---------------------------------------------------------------------------

struct MetricsReport {
  std::vector<double> ctd;          // per event
  std::vector<double> ibs_value;    // per event
  std::vector<int> ibs_skipped;     // per event
  std::vector<double> l1;           // per event; empty without an oracle
  std::vector<double> grid;

  json to_json() const {
    json j{{"ctd", ctd},
           {"ibs", ibs_value},
           {"ibs_skipped_points", ibs_skipped},
           {"grid", grid}};
    if (!l1.empty()) j["survival_l1"] = l1;
    return j;
  }
};

inline MetricsReport evaluate_predictions(
    const PredictionGrid& pred, const SurvivalDataset& test,
    const SurvivalDataset& train,
    std::span<const MarginalModel* const> truth = {}) {
  MetricsReport rep;
  rep.grid = pred.times;
  StepFunction g = km_censoring(train);
  for (int k = 0; k < pred.n_events(); ++k) {
    if (k > 0) {
      rep.ctd.push_back(ctd_index(pred, test, k));
    } else {
      // censoring "event": concordance is reported for risks only
      rep.ctd.push_back(std::numeric_limits<double>::quiet_NaN());
    }
    IbsResult r = ibs(pred, test, k, g);
    rep.ibs_value.push_back(r.ibs);
    rep.ibs_skipped.push_back(r.skipped_points);
  }
  if (!truth.empty()) rep.l1 = survival_l1(pred, truth, test);
  return rep;
}

}  // namespace hacsurv
