#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <memory>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "hacsurv/autodiff.hpp"
#include "hacsurv/common.hpp"
#include "hacsurv/nn.hpp"

namespace hacsurv {

using nlohmann::json;

// Archimedean generator phi: [0, inf) -> (0, 1], completely monotone,
// phi(0) = 1, phi(x) -> 0. derivative(k, x) returns phi^(k)(x) for
// k <= max_order() (k = 0 is phi itself).
class Generator {
 public:
  virtual ~Generator() = default;

  virtual double phi(double x) const = 0;
  virtual double derivative(int order, double x) const = 0;
  virtual int max_order() const = 0;
  virtual std::string kind() const = 0;
  virtual json to_json() const = 0;

  // phi, phi', phi'' in one call.
  std::array<double, 3> phi_derivs(double x) const {
    return {phi(x), derivative(1, x), derivative(2, x)};
  }

  // phi and derivatives up to order 3; overridden where a fused pass is
  // cheaper (samplers call this in inner loops).
  virtual std::array<double, 4> derivs4(double x) const {
    return {phi(x), derivative(1, x), derivative(2, x), derivative(3, x)};
  }

  // Bracketed Newton with bisection fallback; phi is monotone decreasing so
  // the bracket [lo, hi] always contains the root once phi(hi) <= u.
  double inverse(double u) const {
    if (!(u > 0.0) || u > 1.0)
      throw DomainError("phi_inverse: u must lie in (0, 1], got " +
                        std::to_string(u));
    if (u >= 1.0) return 0.0;
    double lo = 0.0, hi = 1.0;
    int doublings = 0;
    while (phi(hi) > u) {
      lo = hi;
      hi *= 2.0;
      if (++doublings > 1100 || !finite(hi))
        throw NumericError("phi_inverse(" + kind() +
                           "): bracket search ran away, u=" + std::to_string(u));
    }
    double x = 0.5 * (lo + hi);
    double fx = phi(x) - u;
    bool converged = false;
    for (int it = 0; it < 200; ++it) {
      if (fx == 0.0) {
        converged = true;
        break;
      }
      if (fx > 0.0)
        lo = x;
      else
        hi = x;
      double d = derivative(1, x);
      double xn;
      if (finite(d) && std::abs(d) > 1e-300) {
        xn = x - fx / d;
        if (!(xn > lo && xn < hi)) xn = 0.5 * (lo + hi);
      } else {
        xn = 0.5 * (lo + hi);
      }
      if (std::abs(xn - x) <= 1e-16 * (1.0 + std::abs(x))) {
        x = xn;
        fx = phi(x) - u;
        converged = true;
        break;
      }
      x = xn;
      fx = phi(x) - u;
    }
    if (!converged && std::abs(fx) > 1e-10 * std::max(u, 1e-3)) {
      std::ostringstream msg;
      msg << "phi_inverse(" << kind() << "): no convergence at u=" << u
          << ", residual=" << fx << ", x=" << x;
      throw NumericError(msg.str());
    }
    return x;
  }
};

using GeneratorPtr = std::shared_ptr<const Generator>;

// ---------------------------------------------------------------------------
// Parametric families
// ---------------------------------------------------------------------------

class IndependenceGenerator final : public Generator {
 public:
  double phi(double x) const override {
    check_domain(x);
    return std::exp(-x);
  }
  double derivative(int order, double x) const override {
    check_domain(x);
    double sign = (order % 2 == 0) ? 1.0 : -1.0;
    return sign * std::exp(-x);
  }
  int max_order() const override { return 16; }
  std::string kind() const override { return "independence"; }
  json to_json() const override { return {{"kind", "independence"}}; }

 private:
  static void check_domain(double x) {
    if (x < 0.0) throw DomainError("generator: x must be >= 0");
  }
};

class ClaytonGenerator final : public Generator {
 public:
  explicit ClaytonGenerator(double theta) : theta_(theta) {
    if (!(theta > 0.0)) throw DomainError("Clayton requires theta > 0");
  }
  double theta() const { return theta_; }
  double phi(double x) const override {
    check_domain(x);
    return std::pow(1.0 + x, -1.0 / theta_);
  }
  double derivative(int order, double x) const override {
    check_domain(x);
    if (order == 0) return phi(x);
    double a = -1.0 / theta_;
    double coef = 1.0;
    for (int i = 0; i < order; ++i) coef *= a - i;
    return coef * std::pow(1.0 + x, a - order);
  }
  int max_order() const override { return 16; }
  std::string kind() const override { return "clayton"; }
  json to_json() const override { return {{"kind", "clayton"}, {"theta", theta_}}; }

 private:
  static void check_domain(double x) {
    if (x < 0.0) throw DomainError("generator: x must be >= 0");
  }
  double theta_;
};

class FrankGenerator final : public Generator {
 public:
  explicit FrankGenerator(double theta) : theta_(theta) {
    if (theta == 0.0) throw DomainError("Frank requires theta != 0");
  }
  double theta() const { return theta_; }
  double phi(double x) const override {
    check_domain(x);
    double w = c() * std::exp(-x);
    return -(1.0 / theta_) * std::log1p(-w);
  }
  double derivative(int order, double x) const override {
    check_domain(x);
    if (order == 0) return phi(x);
    double w = c() * std::exp(-x);
    double om = 1.0 - w;
    switch (order) {
      case 1: return -(1.0 / theta_) * w / om;
      case 2: return (1.0 / theta_) * w / (om * om);
      case 3: return -(1.0 / theta_) * w * (1.0 + w) / (om * om * om);
      default:
        throw DomainError("Frank generator: derivatives available up to order 3");
    }
  }
  int max_order() const override { return 3; }
  std::string kind() const override { return "frank"; }
  json to_json() const override { return {{"kind", "frank"}, {"theta", theta_}}; }

 private:
  double c() const { return 1.0 - std::exp(-theta_); }
  static void check_domain(double x) {
    if (x < 0.0) throw DomainError("generator: x must be >= 0");
  }
  double theta_;
};

class GumbelGenerator final : public Generator {
 public:
  explicit GumbelGenerator(double theta) : theta_(theta) {
    if (!(theta >= 1.0)) throw DomainError("Gumbel requires theta >= 1");
  }
  double theta() const { return theta_; }
  double phi(double x) const override {
    check_domain(x);
    return std::exp(-std::pow(x, 1.0 / theta_));
  }
  double derivative(int order, double x) const override {
    check_domain(x);
    if (order == 0) return phi(x);
    double a = 1.0 / theta_;
    double E = phi(x);
    switch (order) {
      case 1: return -a * std::pow(x, a - 1.0) * E;
      case 2:
        return (a * a * std::pow(x, 2 * a - 2.0) +
                a * (1.0 - a) * std::pow(x, a - 2.0)) * E;
      case 3:
        return (2 * a * a * (a - 1.0) * std::pow(x, 2 * a - 3.0) +
                a * (1.0 - a) * (a - 2.0) * std::pow(x, a - 3.0) -
                a * a * a * std::pow(x, 3 * a - 3.0) -
                a * a * (1.0 - a) * std::pow(x, 2 * a - 3.0)) * E;
      default:
        throw DomainError("Gumbel generator: derivatives available up to order 3");
    }
  }
  int max_order() const override { return 3; }
  std::string kind() const override { return "gumbel"; }
  json to_json() const override { return {{"kind", "gumbel"}, {"theta", theta_}}; }

 private:
  static void check_domain(double x) {
    if (x < 0.0) throw DomainError("generator: x must be >= 0");
  }
  double theta_;
};

// ---------------------------------------------------------------------------
// Empirical Laplace-transform generator: phi(x) = (1/L) sum_l exp(-M_l x)
// with positive atoms M_l. Atoms either come from a small net applied to a
// fixed noise matrix (trainable) or are pinned directly (frozen/test form).
// Completely monotone by construction for any atom values.
// ---------------------------------------------------------------------------

namespace detail {

// One fused pass over the atoms; returns sum of M^k e^{-Mx} for k = 0..3.
inline std::array<double, 4> atom_moments(const std::vector<double>& atoms,
                                          double x) {
  double s0 = 0, s1 = 0, s2 = 0, s3 = 0;
  const double* m = atoms.data();
  const int n = static_cast<int>(atoms.size());
#pragma omp simd reduction(+ : s0, s1, s2, s3)
  for (int l = 0; l < n; ++l) {
    double e = std::exp(-m[l] * x);
    double m1 = m[l];
    s0 += e;
    s1 += m1 * e;
    s2 += m1 * m1 * e;
    s3 += m1 * m1 * m1 * e;
  }
  return {s0, s1, s2, s3};
}

}  // namespace detail

class EmpiricalGenerator final : public Generator {
 public:
  struct Config {
    int atom_count = 512;
    int eps_dim = 8;
    std::vector<int> hidden = {64, 64};
  };

  EmpiricalGenerator(const Config& cfg, std::uint64_t seed)
      : config_(cfg), net_(make_sizes(cfg)) {
    Rng rng(seed, /*stream=*/17);
    epsilon_.resize(static_cast<std::size_t>(cfg.atom_count) * cfg.eps_dim);
    for (double& e : epsilon_) e = rng.normal();
    net_.init(rng);
    refresh();
  }

  // Frozen form with pinned atoms (no parameters).
  explicit EmpiricalGenerator(std::vector<double> atoms)
      : config_{static_cast<int>(atoms.size()), 0, {}},
        net_({1, 1}),
        fixed_atoms_(true),
        atoms_(std::move(atoms)) {
    for (double m : atoms_)
      if (!(m > 0.0)) throw DomainError("empirical generator: atoms must be > 0");
  }

  int atom_count() const { return config_.atom_count; }
  const std::vector<double>& atoms() const { return atoms_; }
  bool trainable() const { return !fixed_atoms_; }

  int n_params() const { return fixed_atoms_ ? 0 : net_.n_params(); }
  std::vector<double>& params() { return net_.params(); }
  const std::vector<double>& params() const { return net_.params(); }

  // Recomputes atoms from the net; must be called after parameter updates.
  void refresh() {
    if (fixed_atoms_) return;
    std::vector<double> out(static_cast<std::size_t>(config_.atom_count));
    net_.forward(epsilon_.data(), config_.atom_count, out.data(), ws_);
    atoms_.resize(out.size());
    for (std::size_t l = 0; l < out.size(); ++l) atoms_[l] = std::exp(out[l]);
  }

  // Chains dL/dM into parameter gradients (after a refresh()-backed forward).
  void accumulate_param_grad(const std::vector<double>& dL_dM,
                             std::vector<double>& grad) const {
    if (fixed_atoms_) return;
    std::vector<double> dOut(dL_dM.size());
    for (std::size_t l = 0; l < dL_dM.size(); ++l)
      dOut[l] = dL_dM[l] * atoms_[l];  // d exp(o)/do = M
    net_.backward(ws_, dOut.data(), grad.data(), nullptr);
  }

  double phi(double x) const override {
    check_domain(x);
    auto s = detail::atom_moments(atoms_, x);
    return s[0] / static_cast<double>(atoms_.size());
  }
  double derivative(int order, double x) const override {
    check_domain(x);
    const double L = static_cast<double>(atoms_.size());
    if (order <= 3) {
      auto s = detail::atom_moments(atoms_, x);
      double sign = (order % 2 == 0) ? 1.0 : -1.0;
      return sign * s[static_cast<std::size_t>(order)] / L;
    }
    double acc = 0.0;
    for (double m : atoms_) acc += std::pow(m, order) * std::exp(-m * x);
    return ((order % 2 == 0) ? 1.0 : -1.0) * acc / L;
  }
  int max_order() const override { return 16; }
  std::string kind() const override { return "empirical"; }

  std::array<double, 4> derivs4(double x) const override {
    check_domain(x);
    auto s = detail::atom_moments(atoms_, x);
    const double L = static_cast<double>(atoms_.size());
    return {s[0] / L, -s[1] / L, s[2] / L, -s[3] / L};
  }

  json to_json() const override {
    json j{{"kind", "empirical"},
           {"atom_count", config_.atom_count},
           {"eps_dim", config_.eps_dim},
           {"hidden", config_.hidden},
           {"fixed_atoms", fixed_atoms_}};
    if (fixed_atoms_) {
      j["atoms"] = atoms_;
    } else {
      j["epsilon"] = epsilon_;
      j["params"] = net_.params();
    }
    return j;
  }

  static std::shared_ptr<EmpiricalGenerator> from_json(const json& j) {
    if (j.at("fixed_atoms").get<bool>()) {
      return std::make_shared<EmpiricalGenerator>(
          j.at("atoms").get<std::vector<double>>());
    }
    Config cfg;
    cfg.atom_count = j.at("atom_count").get<int>();
    cfg.eps_dim = j.at("eps_dim").get<int>();
    cfg.hidden = j.at("hidden").get<std::vector<int>>();
    auto g = std::make_shared<EmpiricalGenerator>(cfg, 0);
    g->epsilon_ = j.at("epsilon").get<std::vector<double>>();
    g->net_.params() = j.at("params").get<std::vector<double>>();
    g->refresh();
    return g;
  }

 private:
  static std::vector<int> make_sizes(const Config& cfg) {
    std::vector<int> sizes{cfg.eps_dim};
    for (int h : cfg.hidden) sizes.push_back(h);
    sizes.push_back(1);
    return sizes;
  }
  static void check_domain(double x) {
    if (x < 0.0) throw DomainError("generator: x must be >= 0");
  }

  Config config_;
  nn::Mlp net_;
  bool fixed_atoms_ = false;
  std::vector<double> epsilon_;
  std::vector<double> atoms_;
  mutable nn::Mlp::Workspace ws_;
};

// ---------------------------------------------------------------------------
// Inner generator built from a compound-Poisson Laplace exponent:
//   psi(x)  = mu x + beta (1 - phi_M(x)),  mu, beta > 0,
//   phi_j   = phi0 o psi.
// The composition satisfies the sufficient nesting condition against phi0 by
// construction. mu and beta are stored on log scale.
// ---------------------------------------------------------------------------

class SubordinatorGenerator final : public Generator {
 public:
  SubordinatorGenerator(GeneratorPtr outer,
                        std::shared_ptr<EmpiricalGenerator> jumps,
                        double raw_mu = 0.0, double raw_beta = 0.0)
      : outer_(std::move(outer)),
        jumps_(std::move(jumps)),
        raw_mu_(raw_mu),
        raw_beta_(raw_beta) {
    if (!outer_ || !jumps_) throw StructureError("subordinator: null component");
  }

  const Generator& outer() const { return *outer_; }
  GeneratorPtr outer_ptr() const { return outer_; }
  EmpiricalGenerator& jumps() { return *jumps_; }
  const EmpiricalGenerator& jumps() const { return *jumps_; }

  double mu() const { return std::exp(raw_mu_); }
  double beta() const { return std::exp(raw_beta_); }
  double raw_mu() const { return raw_mu_; }
  double raw_beta() const { return raw_beta_; }
  void set_raw(double raw_mu, double raw_beta) {
    raw_mu_ = raw_mu;
    raw_beta_ = raw_beta;
  }

  // Laplace exponent and its derivatives.
  double psi(double x) const {
    if (x < 0.0) throw DomainError("psi: x must be >= 0");
    return mu() * x + beta() * (1.0 - jumps_->phi(x));
  }
  double psi_derivative(int order, double x) const {
    if (order == 0) return psi(x);
    if (order == 1) return mu() - beta() * jumps_->derivative(1, x);
    return -beta() * jumps_->derivative(order, x);
  }
  // psi, psi', psi'', psi''' in one pass over the jump atoms.
  std::array<double, 4> psi_derivs4(double x) const {
    auto d = jumps_->derivs4(x);
    double m = mu(), b = beta();
    return {m * x + b * (1.0 - d[0]), m - b * d[1], -b * d[2], -b * d[3]};
  }
  // psi is increasing and concave with psi(0) = 0; Newton from below
  // converges monotonically, with a bisection guard for safety.
  double psi_inverse(double z) const {
    if (z < 0.0) throw DomainError("psi_inverse: z must be >= 0");
    if (z == 0.0) return 0.0;
    double lo = 0.0, hi = std::max(z / mu(), 1.0);
    int guard = 0;
    while (psi(hi) < z) {
      lo = hi;
      hi *= 2.0;
      if (++guard > 1100 || !finite(hi))
        throw NumericError("psi_inverse: bracket search ran away");
    }
    double x = std::min(z / mu(), 0.5 * (lo + hi));
    if (!(x > lo && x < hi)) x = 0.5 * (lo + hi);
    double fx = psi(x) - z;
    for (int it = 0; it < 200; ++it) {
      if (fx == 0.0) break;
      if (fx < 0.0)
        lo = x;
      else
        hi = x;
      double d = psi_derivative(1, x);
      double xn = (finite(d) && d > 1e-300) ? x - fx / d : 0.5 * (lo + hi);
      if (!(xn > lo && xn < hi)) xn = 0.5 * (lo + hi);
      if (std::abs(xn - x) <= 1e-16 * (1.0 + std::abs(x))) {
        x = xn;
        fx = psi(x) - z;
        break;
      }
      x = xn;
      fx = psi(x) - z;
    }
    if (std::abs(fx) > 1e-9 * std::max(1.0, z))
      throw NumericError("psi_inverse: no convergence, residual=" +
                         std::to_string(fx));
    return x;
  }

  double phi(double x) const override { return outer_->phi(psi(x)); }

  double derivative(int order, double x) const override {
    if (order == 0) return phi(x);
    double p = psi(x);
    double p1 = psi_derivative(1, x);
    double f1 = outer_->derivative(1, p);
    if (order == 1) return f1 * p1;
    double p2 = psi_derivative(2, x);
    double f2 = outer_->derivative(2, p);
    if (order == 2) return f2 * p1 * p1 + f1 * p2;
    double p3 = psi_derivative(3, x);
    double f3 = outer_->derivative(3, p);
    if (order == 3) return f3 * p1 * p1 * p1 + 3.0 * f2 * p1 * p2 + f1 * p3;
    throw DomainError("subordinator generator: derivatives available up to order 3");
  }
  int max_order() const override { return std::min(3, outer_->max_order()); }
  std::string kind() const override { return "subordinator"; }

  std::array<double, 4> derivs4(double x) const override {
    auto p = psi_derivs4(x);
    auto f = outer_->derivs4(p[0]);
    return {f[0], f[1] * p[1], f[2] * p[1] * p[1] + f[1] * p[2],
            f[3] * p[1] * p[1] * p[1] + 3.0 * f[2] * p[1] * p[2] + f[1] * p[3]};
  }

  json to_json() const override {
    return {{"kind", "subordinator"},
            {"outer", outer_->to_json()},
            {"raw_mu", raw_mu_},
            {"raw_beta", raw_beta_},
            {"jumps", jumps_->to_json()}};
  }

 private:
  GeneratorPtr outer_;
  std::shared_ptr<EmpiricalGenerator> jumps_;
  double raw_mu_;
  double raw_beta_;
};

inline GeneratorPtr generator_from_json(const json& j) {
  const std::string kind = j.at("kind").get<std::string>();
  if (kind == "independence") return std::make_shared<IndependenceGenerator>();
  if (kind == "clayton")
    return std::make_shared<ClaytonGenerator>(j.at("theta").get<double>());
  if (kind == "frank")
    return std::make_shared<FrankGenerator>(j.at("theta").get<double>());
  if (kind == "gumbel")
    return std::make_shared<GumbelGenerator>(j.at("theta").get<double>());
  if (kind == "empirical") return EmpiricalGenerator::from_json(j);
  if (kind == "subordinator") {
    auto outer = generator_from_json(j.at("outer"));
    auto jumps = EmpiricalGenerator::from_json(j.at("jumps"));
    return std::make_shared<SubordinatorGenerator>(
        outer, jumps, j.at("raw_mu").get<double>(), j.at("raw_beta").get<double>());
  }
  throw DomainError("unknown generator kind: " + kind);
}

// ---------------------------------------------------------------------------
// Nesting check. h = phi0^{-1} o phi_j must be increasing and concave with a
// completely monotone derivative; we verify sign alternation of h', h'', h'''
// by finite differences, and for subordinator inners additionally that h
// coincides with psi_j.
// ---------------------------------------------------------------------------

struct NestingReport {
  bool pass = true;
  double worst_violation = 0.0;
  std::string message;
};

inline NestingReport check_nesting(const Generator& outer, const Generator& inner,
                                   const std::vector<double>& grid) {
  const auto* sub = dynamic_cast<const SubordinatorGenerator*>(&inner);
  if (sub != nullptr && &sub->outer() != &outer)
    throw StructureError("check_nesting: inner generator references a different outer");

  NestingReport report;
  auto h = [&](double x) { return outer.inverse(inner.phi(x)); };
  auto worsen = [&](double violation, const std::string& what, double x) {
    if (violation > report.worst_violation) {
      report.worst_violation = violation;
      report.message = what + " at x=" + std::to_string(x);
    }
    if (violation > 0.0) report.pass = false;
  };

  const double deriv_tol = 1e-6;
  for (double x : grid) {
    if (x < 0.0) throw DomainError("check_nesting: grid must be nonnegative");
    double hx = h(x);
    if (sub != nullptr) {
      double px = sub->psi(x);
      double diff = std::abs(hx - px) - 1e-8 * std::max(1.0, std::abs(px));
      worsen(diff, "h != psi", x);
    }
    // Central differences; step sized to the local scale, stencil shifted
    // right so x0 - 2*step stays inside the domain.
    double step = 1e-3 * (1.0 + x);
    double x0 = std::max(x, 2.0 * step);
    double hm2 = h(x0 - 2 * step), hm1 = h(x0 - step);
    double hp1 = h(x0 + step), hp2 = h(x0 + 2 * step), hc = h(x0);
    double d1 = (hp1 - hm1) / (2 * step);
    double d2 = (hp1 - 2 * hc + hm1) / (step * step);
    double d3 = (hp2 - 2 * hp1 + 2 * hm1 - hm2) / (2 * step * step * step);
    worsen(-d1 - deriv_tol, "h' < 0", x0);
    worsen(d2 - deriv_tol * std::max(1.0, std::abs(d1)), "h'' > 0", x0);
    worsen(-d3 - deriv_tol * std::max(1.0, std::abs(d2)), "h''' < 0", x0);
  }
  if (report.pass) report.message = "nesting conditions hold on grid";
  return report;
}

// ---------------------------------------------------------------------------
// Tape-recorded generator evaluation.
//
// Frozen form: unary nodes whose local partial is the next derivative.
// Trainable empirical form: nodes carry the atoms as parents so gradients
// reach the generator network; values and partials are computed in closed
// form (one O(L) pass), not by taping the atom sum.
// ---------------------------------------------------------------------------

namespace taped {

using ad::Tape;
using ad::Var;

inline Var phi(Tape& tape, const Generator& g, Var x) {
  Var parents[] = {x};
  double partials[] = {g.derivative(1, x.val)};
  return tape.custom(g.phi(x.val), parents, partials, "phi");
}
inline Var dphi(Tape& tape, const Generator& g, Var x) {
  Var parents[] = {x};
  double partials[] = {g.derivative(2, x.val)};
  return tape.custom(g.derivative(1, x.val), parents, partials, "dphi");
}
inline Var d2phi(Tape& tape, const Generator& g, Var x) {
  Var parents[] = {x};
  double partials[] = {g.derivative(3, x.val)};
  return tape.custom(g.derivative(2, x.val), parents, partials, "d2phi");
}
inline Var inverse(Tape& tape, const Generator& g, Var u) {
  double y = g.inverse(u.val);
  Var parents[] = {u};
  double partials[] = {1.0 / g.derivative(1, y)};
  return tape.custom(y, parents, partials, "phi_inverse");
}

// Atoms of a trainable empirical generator bound to a tape as leaves.
struct AtomVars {
  const EmpiricalGenerator* gen = nullptr;
  std::vector<Var> vars;

  static AtomVars bind(Tape& tape, const EmpiricalGenerator& g) {
    AtomVars av;
    av.gen = &g;
    av.vars.reserve(g.atoms().size());
    for (double m : g.atoms()) av.vars.push_back(tape.leaf(m));
    return av;
  }

  // Reads dL/dM_l back out of a gradient vector.
  std::vector<double> read_grad(const std::vector<double>& adj) const {
    std::vector<double> g(vars.size());
    for (std::size_t l = 0; l < vars.size(); ++l)
      g[l] = adj[static_cast<std::size_t>(vars[l].idx)];
    return g;
  }
};

namespace detail_taped {

inline Var empirical_node(Tape& tape, const AtomVars& atoms, Var x, int order,
                          const char* what) {
  const auto& m = atoms.gen->atoms();
  const double L = static_cast<double>(m.size());
  std::vector<Var> parents;
  parents.reserve(m.size() + 1);
  parents.push_back(x);
  for (const Var& v : atoms.vars) parents.push_back(v);
  std::vector<double> partials(m.size() + 1);
  double value = 0.0;
  double dx = 0.0;
  for (std::size_t l = 0; l < m.size(); ++l) {
    double e = std::exp(-m[l] * x.val);
    double mk = 1.0;
    for (int k = 0; k < order; ++k) mk *= m[l];
    double sign = (order % 2 == 0) ? 1.0 : -1.0;
    value += sign * mk * e;
    dx += -sign * mk * m[l] * e;  // d/dx adds one factor of -M
    // d/dM_l of sign * M^k e^{-M x}: sign * (k M^{k-1} - x M^k) e^{-M x}
    double dmk = (order == 0) ? 0.0 : order * mk / m[l];
    partials[l + 1] = sign * (dmk - x.val * mk) * e / L;
  }
  value /= L;
  dx /= L;
  partials[0] = dx;
  return tape.custom(value, parents, partials, what);
}

}  // namespace detail_taped

inline Var phi(Tape& tape, const AtomVars& atoms, Var x) {
  return detail_taped::empirical_node(tape, atoms, x, 0, "phi[empirical]");
}
inline Var dphi(Tape& tape, const AtomVars& atoms, Var x) {
  return detail_taped::empirical_node(tape, atoms, x, 1, "dphi[empirical]");
}
inline Var d2phi(Tape& tape, const AtomVars& atoms, Var x) {
  return detail_taped::empirical_node(tape, atoms, x, 2, "d2phi[empirical]");
}

// y = phi^{-1}(u) with gradients to u and to the atoms via the implicit
// function theorem: phi(y; M) = u.
inline Var inverse(Tape& tape, const AtomVars& atoms, Var u) {
  double y = atoms.gen->inverse(u.val);
  const auto& m = atoms.gen->atoms();
  const double L = static_cast<double>(m.size());
  double dphi_y = atoms.gen->derivative(1, y);
  std::vector<Var> parents;
  parents.reserve(m.size() + 1);
  parents.push_back(u);
  std::vector<double> partials(m.size() + 1);
  partials[0] = 1.0 / dphi_y;
  for (std::size_t l = 0; l < m.size(); ++l) {
    parents.push_back(atoms.vars[l]);
    // d phi / d M_l = -(y/L) e^{-M_l y}; implicit: dy/dM_l = -that / phi'(y).
    partials[l + 1] = (y / L) * std::exp(-m[l] * y) / dphi_y;
  }
  return tape.custom(y, parents, partials, "phi_inverse[empirical]");
}

// psi^{-1}(z) for a trainable subordinator: parents are (mu, beta, atoms).
inline Var psi_inverse(Tape& tape, const SubordinatorGenerator& g,
                       const AtomVars& jump_atoms, Var mu, Var beta, double z) {
  double y = g.psi_inverse(z);
  double dpsi = g.psi_derivative(1, y);
  const auto& m = g.jumps().atoms();
  const double L = static_cast<double>(m.size());
  std::vector<Var> parents;
  parents.reserve(m.size() + 2);
  parents.push_back(mu);
  parents.push_back(beta);
  std::vector<double> partials(m.size() + 2);
  partials[0] = -y / dpsi;
  partials[1] = -(1.0 - g.jumps().phi(y)) / dpsi;
  for (std::size_t l = 0; l < m.size(); ++l) {
    parents.push_back(jump_atoms.vars[l]);
    // d psi / d M_l = beta * (y/L) e^{-M_l y}
    partials[l + 2] = -g.beta() * (y / L) * std::exp(-m[l] * y) / dpsi;
  }
  return tape.custom(y, parents, partials, "psi_inverse");
}

}  // namespace taped

}  // namespace hacsurv
