#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "hacsurv/hac.hpp"
#include "hacsurv/marginals.hpp"

namespace hacsurv {

// ---------------------------------------------------------------------------
// Bivariate Archimedean sampling.
//   * Empirical generators: Marshall-Olkin frailty with the atom mixture.
//   * Clayton: Gamma(1/theta) frailty.
//   * Independence: uniforms.
//   * Anything else: conditional inversion of phi'(a+b)/phi'(a).
// ---------------------------------------------------------------------------

inline std::array<double, 2> sample_bivariate_row(const Generator& g, Rng& rng) {
  if (const auto* emp = dynamic_cast<const EmpiricalGenerator*>(&g)) {
    const auto& atoms = emp->atoms();
    double m = atoms[static_cast<std::size_t>(rng.integer(atoms.size()))];
    return {g.phi(rng.exponential() / m), g.phi(rng.exponential() / m)};
  }
  if (const auto* cl = dynamic_cast<const ClaytonGenerator*>(&g)) {
    double v = rng.gamma(1.0 / cl->theta());
    return {g.phi(rng.exponential() / v), g.phi(rng.exponential() / v)};
  }
  if (dynamic_cast<const IndependenceGenerator*>(&g) != nullptr)
    return {rng.uniform_open(), rng.uniform_open()};

  // Conditional inversion: F(v|u) = phi'(a+b) / phi'(a), monotone in b.
  double u = clamp_unit(rng.uniform_open());
  double a = g.inverse(u);
  double q = rng.uniform_open();
  double target = q * g.derivative(1, a);  // negative
  double lo = 0.0, hi = 1.0;
  int guard = 0;
  while (g.derivative(1, a + hi) < target) {
    lo = hi;
    hi *= 2.0;
    if (++guard > 400 || !finite(hi))
      throw NumericError("sample_bivariate: conditional bracket ran away");
  }
  double b = 0.5 * (lo + hi);
  for (int it = 0; it < 90; ++it) {
    double f = g.derivative(1, a + b) - target;
    if (f < 0.0)
      lo = b;
    else
      hi = b;
    double d2 = g.derivative(2, a + b);
    double bn = d2 > 1e-300 ? b - f / d2 : 0.5 * (lo + hi);
    if (!(bn > lo && bn < hi)) bn = 0.5 * (lo + hi);
    if (std::abs(bn - b) <= 1e-14 * (1.0 + b)) {
      b = bn;
      break;
    }
    b = bn;
  }
  return {u, g.phi(b)};
}

inline std::vector<std::array<double, 2>> sample_bivariate(const Generator& g,
                                                           int n,
                                                           std::uint64_t seed) {
  if (n < 1) throw DomainError("sample_bivariate: n must be >= 1");
  std::vector<std::array<double, 2>> out(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    Rng rng(seed, static_cast<std::uint64_t>(i));
    out[static_cast<std::size_t>(i)] = sample_bivariate_row(g, rng);
  }
  return out;
}

struct TauEstimate {
  double tau = 0.0;
  double se = 0.0;
};

// Monte-Carlo Kendall tau: tau = 4 E[C(U,V)] - 1 over pairs sampled from the
// bivariate copula of g.
inline TauEstimate kendall_tau(const Generator& g, int n_mc,
                               std::uint64_t seed = 1234) {
  if (n_mc < 1000) throw DomainError("kendall_tau: n_mc must be >= 1000");
  auto uv = sample_bivariate(g, n_mc, seed);
  double mean = 0.0, m2 = 0.0;
  std::size_t count = 0;
  for (const auto& p : uv) {
    double c = g.phi(g.inverse(clamp_unit(p[0])) + g.inverse(clamp_unit(p[1])));
    ++count;
    double delta = c - mean;
    mean += delta / static_cast<double>(count);
    m2 += delta * (c - mean);
  }
  double var = m2 / static_cast<double>(count - 1);
  TauEstimate est;
  est.tau = 4.0 * mean - 1.0;
  est.se = 4.0 * std::sqrt(var / static_cast<double>(count));
  return est;
}

// Kendall tau of a finite sample, O(n^2) concordance count.
inline double empirical_kendall_tau(std::span<const double> x,
                                    std::span<const double> y) {
  if (x.size() != y.size() || x.size() < 2)
    throw DomainError("empirical_kendall_tau: need two equal-length columns");
  const std::size_t n = x.size();
  long long net = 0;
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i + 1; j < n; ++j) {
      double p = (x[i] - x[j]) * (y[i] - y[j]);
      net += (p > 0.0) - (p < 0.0);
    }
  }
  return static_cast<double>(net) /
         (0.5 * static_cast<double>(n) * static_cast<double>(n - 1));
}

// ---------------------------------------------------------------------------
// Full copula sampling. Uniform for the independent model, Marshall-Olkin
// frailty where the root admits one, Rosenblatt conditional inversion (ratios
// of sequential mixed partials, bisection-safeguarded) otherwise.
// ---------------------------------------------------------------------------

namespace detail {

// Incremental evaluator for sequential mixed partials of a 2-level tree.
// Leading 1/phi' factors cancel between numerator and denominator of the
// Rosenblatt conditional, so they are omitted throughout.
class RosenblattState {
 public:
  explicit RosenblattState(const HacTree& tree)
      : tree_(tree), dim_(tree.dimension()) {
    group_.assign(static_cast<std::size_t>(dim_), -1);
    for (std::size_t j = 0; j < tree_.inner.size(); ++j)
      for (int l : tree_.inner[j].leaves)
        group_[static_cast<std::size_t>(l)] = static_cast<int>(j);
    reset();
  }

  void reset() {
    outer_sum_ = 0.0;
    outer_diff_ = 0;
    s_.assign(tree_.inner.size(), 0.0);
    cg_.assign(tree_.inner.size(), 0);
  }

  const Generator& coord_generator(int i) const {
    int g = group_[static_cast<std::size_t>(i)];
    return g < 0 ? *tree_.root : *tree_.inner[static_cast<std::size_t>(g)].gen;
  }

  // Mixed partial over all settled coordinates, with an optional candidate
  // value a for coordinate `cand` (not itself differentiated), trailing
  // coordinates at one. Leading factors omitted.
  double eval(int cand, double a) const {
    double T = outer_sum_;
    int cand_group = cand >= 0 ? group_[static_cast<std::size_t>(cand)] : -2;
    if (cand >= 0 && cand_group < 0) T += a;

    // per-group block polynomials
    std::vector<double> W{1.0};
    for (std::size_t j = 0; j < tree_.inner.size(); ++j) {
      double sj = s_[j] + (static_cast<int>(j) == cand_group ? a : 0.0);
      std::array<double, 4> h = group_h(j, sj);
      T += h[0];
      int c = cg_[j];
      if (c == 0) continue;
      if (c > 3)
        throw DomainError("rosenblatt: more than 3 settled coordinates in a group");
      std::vector<double> poly(static_cast<std::size_t>(c) + 1, 0.0);
      for (const auto& part : partitions_block_sizes(c)) {
        double w = 1.0;
        for (int bs : part) w *= h[static_cast<std::size_t>(bs)];
        poly[part.size()] += w;
      }
      std::vector<double> next(W.size() + poly.size() - 1, 0.0);
      for (std::size_t r = 0; r < W.size(); ++r)
        for (std::size_t q = 0; q < poly.size(); ++q) next[r + q] += W[r] * poly[q];
      W.swap(next);
    }
    for (int i = 0; i < outer_diff_; ++i) {
      std::vector<double> next(W.size() + 1, 0.0);
      for (std::size_t r = 0; r < W.size(); ++r) next[r + 1] += W[r];
      W.swap(next);
    }

    auto d4 = tree_.root->derivs4(T);
    double total = 0.0;
    for (std::size_t r = 0; r < W.size(); ++r) {
      if (W[r] == 0.0) continue;
      double fr = r < 4 ? d4[r] : tree_.root->derivative(static_cast<int>(r), T);
      total += W[r] * fr;
    }
    return total;
  }

  void settle(int i, double a) {
    int g = group_[static_cast<std::size_t>(i)];
    if (g < 0) {
      outer_sum_ += a;
      ++outer_diff_;
    } else {
      s_[static_cast<std::size_t>(g)] += a;
      ++cg_[static_cast<std::size_t>(g)];
    }
  }

 private:
  std::array<double, 4> group_h(std::size_t j, double sj) const {
    const Generator& gj = *tree_.inner[j].gen;
    const auto* sub = dynamic_cast<const SubordinatorGenerator*>(&gj);
    if (sub != nullptr && &sub->outer() == tree_.root.get())
      return sub->psi_derivs4(sj);
    const Generator& root = *tree_.root;
    auto gd = gj.derivs4(sj);
    double y = root.inverse(gd[0]);
    auto fd = root.derivs4(y);
    double h1 = gd[1] / fd[1];
    double h2 = (gd[2] - fd[2] * h1 * h1) / fd[1];
    double h3 = (gd[3] - fd[3] * h1 * h1 * h1 - 3.0 * fd[2] * h1 * h2) / fd[1];
    return {y, h1, h2, h3};
  }

  const HacTree& tree_;
  int dim_;
  std::vector<int> group_;
  double outer_sum_ = 0.0;
  int outer_diff_ = 0;
  std::vector<double> s_;
  std::vector<int> cg_;
};

inline void rosenblatt_row(const HacTree& tree, Rng& rng, double* row,
                           long row_index) {
  RosenblattState state(tree);
  const int dim = tree.dimension();
  for (int j = 0; j < dim; ++j) {
    const Generator& gen = state.coord_generator(j);
    if (j == 0) {
      double u = clamp_unit(rng.uniform_open());
      row[0] = u;
      state.settle(0, gen.inverse(u));
      continue;
    }
    double q = rng.uniform_open();
    double denom = state.eval(-1, 0.0);
    if (!finite(denom) || denom == 0.0)
      throw NumericError("sample_copula: degenerate conditional at row " +
                         std::to_string(row_index));
    double a_max = gen.inverse(kUnitEps);
    // F(a) = eval(j, a)/denom is decreasing from 1 at a = 0. Grow the
    // bracket geometrically (a can span many orders of magnitude for strong
    // generators), then bisect inside it.
    auto cond = [&](double a) {
      double v = state.eval(j, a) / denom;
      if (!finite(v))
        throw NumericError("sample_copula: non-finite conditional at row " +
                           std::to_string(row_index));
      return v;
    };
    double lo = 0.0, hi = std::min(1.0, a_max);
    int guard = 0;
    while (cond(hi) >= q) {
      lo = hi;
      if (hi >= a_max) break;
      hi = std::min(hi * 2.0, a_max);
      if (++guard > 1200)
        throw NumericError("sample_copula: conditional bracket ran away at row " +
                           std::to_string(row_index));
    }
    double a;
    if (lo >= a_max) {
      a = a_max;  // target beyond the clamped tail
    } else {
      for (int it = 0; it < 80; ++it) {
        double mid = 0.5 * (lo + hi);
        if (cond(mid) >= q)
          lo = mid;
        else
          hi = mid;
        if (hi - lo <= 1e-13 * (1.0 + hi)) break;
      }
      a = 0.5 * (lo + hi);
    }
    row[j] = clamp_unit(gen.phi(a));
    state.settle(j, a);
  }
}

}  // namespace detail

// n x dim row-major matrix of copula samples. Deterministic per (seed, row).
inline std::vector<double> sample_copula(const CopulaModel& m, int n,
                                         std::uint64_t seed) {
  if (n < 1) throw DomainError("sample_copula: n must be >= 1");
  const int dim = m.dimension();
  std::vector<double> out(static_cast<std::size_t>(n) * dim);

  if (m.kind() == CopulaKind::Independent) {
    for (int i = 0; i < n; ++i) {
      Rng rng(seed, static_cast<std::uint64_t>(i));
      for (int j = 0; j < dim; ++j)
        out[static_cast<std::size_t>(i) * dim + j] = rng.uniform_open();
    }
    return out;
  }

  if (m.kind() == CopulaKind::Symmetric) {
    const Generator& g = m.root_generator();
    const auto* emp = dynamic_cast<const EmpiricalGenerator*>(&g);
    const auto* cl = dynamic_cast<const ClaytonGenerator*>(&g);
    const bool ind = dynamic_cast<const IndependenceGenerator*>(&g) != nullptr;
    if (emp != nullptr || cl != nullptr || ind) {
      for (int i = 0; i < n; ++i) {
        Rng rng(seed, static_cast<std::uint64_t>(i));
        double* row = out.data() + static_cast<std::size_t>(i) * dim;
        if (ind) {
          for (int j = 0; j < dim; ++j) row[j] = rng.uniform_open();
          continue;
        }
        double v = emp != nullptr
                       ? emp->atoms()[static_cast<std::size_t>(
                             rng.integer(emp->atoms().size()))]
                       : rng.gamma(1.0 / cl->theta());
        for (int j = 0; j < dim; ++j)
          row[j] = clamp_unit(g.phi(rng.exponential() / v));
      }
      return out;
    }
  }

  const HacTree& tree = m.tree();
  for (int i = 0; i < n; ++i) {
    Rng rng(seed, static_cast<std::uint64_t>(i));
    detail::rosenblatt_row(tree, rng, out.data() + static_cast<std::size_t>(i) * dim,
                           i);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Synthetic competing-risks benchmark: CoxPH marginals with Weibull baselines
// coupled by a known copula; censoring is variable 0.
// ---------------------------------------------------------------------------

struct SyntheticSpec {
  int n = 20000;
  int covariate_dim = 10;
  std::vector<WeibullCoxMarginal> marginals;  // K+1 entries, censoring first
  CopulaModel copula = CopulaModel::independent(4);
  std::uint64_t seed = 41;

  int n_variables() const { return static_cast<int>(marginals.size()); }

  json to_json() const {
    json ms = json::array();
    for (const auto& m : marginals) ms.push_back(m.to_json());
    return {{"n", n},
            {"covariate_dim", covariate_dim},
            {"marginals", ms},
            {"copula", copula.to_json()},
            {"seed", seed}};
  }
  static SyntheticSpec from_json(const json& j) {
    SyntheticSpec s;
    s.n = j.at("n").get<int>();
    s.covariate_dim = j.at("covariate_dim").get<int>();
    for (const auto& mj : j.at("marginals"))
      s.marginals.push_back(WeibullCoxMarginal::from_json(mj));
    s.copula = CopulaModel::from_json(j.at("copula"));
    s.seed = j.at("seed").get<std::uint64_t>();
    return s;
  }
};

struct SurvivalDataset {
  int covariate_dim = 0;
  int n_causes = 0;  // K+1 including censoring label 0
  std::vector<double> x;  // n x covariate_dim, row-major
  std::vector<double> time;
  std::vector<int> event;

  std::size_t size() const { return time.size(); }
  std::span<const double> covariates(std::size_t i) const {
    return {x.data() + i * static_cast<std::size_t>(covariate_dim),
            static_cast<std::size_t>(covariate_dim)};
  }
  double max_time() const {
    return time.empty() ? 0.0 : *std::max_element(time.begin(), time.end());
  }
  std::vector<double> event_fractions() const {
    std::vector<double> f(static_cast<std::size_t>(n_causes), 0.0);
    for (int e : event) f[static_cast<std::size_t>(e)] += 1.0;
    for (double& v : f) v /= static_cast<double>(size());
    return f;
  }
  SurvivalDataset subset(std::span<const std::size_t> rows) const {
    SurvivalDataset d;
    d.covariate_dim = covariate_dim;
    d.n_causes = n_causes;
    for (std::size_t r : rows) {
      auto xr = covariates(r);
      d.x.insert(d.x.end(), xr.begin(), xr.end());
      d.time.push_back(time[r]);
      d.event.push_back(event[r]);
    }
    return d;
  }
};

struct SyntheticResult {
  SurvivalDataset data;
  std::vector<double> latent;  // n x (K+1) latent times, row-major
  json metadata;
};

inline SyntheticResult generate_synthetic(const SyntheticSpec& spec) {
  const int nv = spec.n_variables();
  if (nv < 2) throw DomainError("generate_synthetic: need censoring plus >= 1 risk");
  if (spec.copula.dimension() != nv)
    throw DomainError("generate_synthetic: copula dimension != marginal count");
  for (const auto& m : spec.marginals)
    if (static_cast<int>(m.beta().size()) != spec.covariate_dim)
      throw DomainError("generate_synthetic: marginal beta dimension mismatch");

  SyntheticResult res;
  SurvivalDataset& d = res.data;
  d.covariate_dim = spec.covariate_dim;
  d.n_causes = nv;
  d.x.resize(static_cast<std::size_t>(spec.n) * spec.covariate_dim);
  d.time.resize(static_cast<std::size_t>(spec.n));
  d.event.resize(static_cast<std::size_t>(spec.n));
  res.latent.resize(static_cast<std::size_t>(spec.n) * nv);

  std::vector<double> U = sample_copula(spec.copula, spec.n, spec.seed);
  for (int i = 0; i < spec.n; ++i) {
    Rng rng(spec.seed ^ 0xC0FFEEULL, static_cast<std::uint64_t>(i));
    double* xi = d.x.data() + static_cast<std::size_t>(i) * spec.covariate_dim;
    for (int c = 0; c < spec.covariate_dim; ++c) xi[c] = rng.uniform01();
    std::span<const double> xs{xi, static_cast<std::size_t>(spec.covariate_dim)};
    double best = std::numeric_limits<double>::infinity();
    int label = 0;
    for (int k = 0; k < nv; ++k) {
      double u = clamp_unit(U[static_cast<std::size_t>(i) * nv + k]);
      double t = spec.marginals[static_cast<std::size_t>(k)].time_from_uniform(u, xs);
      res.latent[static_cast<std::size_t>(i) * nv + k] = t;
      if (t < best) {
        best = t;
        label = k;
      }
    }
    d.time[static_cast<std::size_t>(i)] = best;
    d.event[static_cast<std::size_t>(i)] = label;
  }

  auto fractions = d.event_fractions();
  json warnings = json::array();
  for (int k = 0; k < nv; ++k)
    if (fractions[static_cast<std::size_t>(k)] < 0.05)
      warnings.push_back("label " + std::to_string(k) + " below 5% frequency");
  res.metadata = {{"seed", spec.seed},
                  {"spec", spec.to_json()},
                  {"event_fractions", fractions},
                  {"warnings", warnings}};
  return res;
}

// Default benchmark: nested Clayton with theta = (1, 3, 8); groups
// {censoring, risk1} and {risk2, risk3}. Weibull shapes drawn from the seed,
// scales calibrated on a pilot sample so the label mix stays balanced.
inline SyntheticSpec default_synthetic_spec(std::uint64_t seed, int n = 20000) {
  SyntheticSpec spec;
  spec.n = n;
  spec.covariate_dim = 10;
  spec.seed = seed;

  HacTree tree;
  tree.root = std::make_shared<ClaytonGenerator>(1.0);
  tree.inner.push_back({std::make_shared<ClaytonGenerator>(3.0), {0, 1}});
  tree.inner.push_back({std::make_shared<ClaytonGenerator>(8.0), {2, 3}});
  spec.copula = CopulaModel::hierarchical(std::move(tree));

  Rng rng(seed, 1001);
  std::vector<double> shapes(4);
  std::vector<std::vector<double>> betas(4, std::vector<double>(10));
  for (int k = 0; k < 4; ++k) {
    shapes[static_cast<std::size_t>(k)] = rng.uniform(1.0, 3.0);
    for (double& b : betas[static_cast<std::size_t>(k)]) b = rng.uniform(-1.0, 1.0);
  }

  // Pilot calibration: equalize latent-time medians across variables so the
  // observed-label mix is balanced and censoring lands in [20%, 40%].
  const int pilot = 4000;
  std::vector<double> U = sample_copula(spec.copula, pilot, seed ^ 0xBEEF);
  std::vector<double> raw(static_cast<std::size_t>(pilot));
  for (int k = 0; k < 4; ++k) {
    WeibullCoxMarginal unit(shapes[static_cast<std::size_t>(k)], 1.0,
                            betas[static_cast<std::size_t>(k)]);
    Rng xr(seed ^ 0xC0FFEEULL ^ 0x5EEDULL, 9000 + static_cast<std::uint64_t>(k));
    for (int i = 0; i < pilot; ++i) {
      std::vector<double> xs(10);
      for (double& v : xs) v = xr.uniform01();
      double u = clamp_unit(U[static_cast<std::size_t>(i) * 4 + k]);
      raw[static_cast<std::size_t>(i)] = unit.time_from_uniform(u, xs);
    }
    std::nth_element(raw.begin(), raw.begin() + pilot / 2, raw.end());
    double median = raw[static_cast<std::size_t>(pilot) / 2];
    spec.marginals.emplace_back(shapes[static_cast<std::size_t>(k)], 1.0 / median,
                                betas[static_cast<std::size_t>(k)]);
  }
  return spec;
}

// ---------------------------------------------------------------------------
// CSV I/O. Header: x0,...,x{D-1},time,event. %.17g keeps round trips exact.
// ---------------------------------------------------------------------------

inline std::string format_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

inline std::string dataset_to_csv(const SurvivalDataset& d) {
  std::string out;
  for (int c = 0; c < d.covariate_dim; ++c) {
    out += "x" + std::to_string(c) + ",";
  }
  out += "time,event\n";
  for (std::size_t i = 0; i < d.size(); ++i) {
    auto xs = d.covariates(i);
    for (double v : xs) {
      out += format_double(v);
      out += ',';
    }
    out += format_double(d.time[i]);
    out += ',';
    out += std::to_string(d.event[i]);
    out += '\n';
  }
  return out;
}

inline SurvivalDataset dataset_from_csv(const std::string& text) {
  SurvivalDataset d;
  std::size_t pos = 0;
  auto next_line = [&](std::string& line) {
    if (pos >= text.size()) return false;
    std::size_t end = text.find('\n', pos);
    if (end == std::string::npos) end = text.size();
    line = text.substr(pos, end - pos);
    pos = end + 1;
    return true;
  };
  std::string header;
  if (!next_line(header)) throw DomainError("dataset CSV: empty file");
  int columns = 1 + static_cast<int>(std::count(header.begin(), header.end(), ','));
  d.covariate_dim = columns - 2;
  if (d.covariate_dim < 0 || header.rfind("x0,", 0) != 0)
    throw DomainError("dataset CSV: expected header x0,...,time,event");
  std::string line;
  long line_no = 1;
  int max_event = 0;
  while (next_line(line)) {
    ++line_no;
    if (line.empty()) continue;
    std::size_t p = 0;
    auto next_field = [&]() {
      std::size_t end = line.find(',', p);
      if (end == std::string::npos) end = line.size();
      std::string f = line.substr(p, end - p);
      p = end + 1;
      return f;
    };
    try {
      for (int c = 0; c < d.covariate_dim; ++c) d.x.push_back(std::stod(next_field()));
      d.time.push_back(std::stod(next_field()));
      d.event.push_back(std::stoi(next_field()));
    } catch (const std::exception&) {
      throw DomainError("dataset CSV: malformed row at line " +
                        std::to_string(line_no));
    }
    if (d.time.back() <= 0.0 || !finite(d.time.back()))
      throw DomainError("dataset CSV: nonpositive time at line " +
                        std::to_string(line_no));
    if (d.event.back() < 0)
      throw DomainError("dataset CSV: negative event label at line " +
                        std::to_string(line_no));
    max_event = std::max(max_event, d.event.back());
  }
  d.n_causes = max_event + 1;
  return d;
}

}  // namespace hacsurv
