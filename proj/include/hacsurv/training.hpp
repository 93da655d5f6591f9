#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <functional>
#include <map>
#include <memory>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "hacsurv/autodiff.hpp"
#include "hacsurv/marginals.hpp"
#include "hacsurv/sampling.hpp"

namespace hacsurv {

// ---------------------------------------------------------------------------
// Optimizer: Adam with decoupled weight decay.
// ---------------------------------------------------------------------------

struct OptimizerParams {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 1e-4;

  json to_json() const {
    return {{"lr", lr},
            {"beta1", beta1},
            {"beta2", beta2},
            {"eps", eps},
            {"weight_decay", weight_decay}};
  }
  static OptimizerParams from_json(const json& j) {
    OptimizerParams p;
    p.lr = j.at("lr").get<double>();
    p.beta1 = j.at("beta1").get<double>();
    p.beta2 = j.at("beta2").get<double>();
    p.eps = j.at("eps").get<double>();
    p.weight_decay = j.at("weight_decay").get<double>();
    return p;
  }
};

class AdamW {
 public:
  AdamW(std::size_t n, OptimizerParams p)
      : p_(p), m_(n, 0.0), v_(n, 0.0) {
    if (!(p.lr > 0) || !(p.beta1 > 0) || !(p.beta2 > 0) || !(p.eps > 0) ||
        p.weight_decay < 0)
      throw DomainError("AdamW: hyperparameters must be positive");
  }

  void scale_lr(double factor) { p_.lr *= factor; }

  void step(std::vector<double>& params, const std::vector<double>& grad) {
    if (params.size() != m_.size() || grad.size() != m_.size())
      throw StructureError("AdamW: size mismatch");
    ++t_;
    double c1 = 1.0 - std::pow(p_.beta1, t_);
    double c2 = 1.0 - std::pow(p_.beta2, t_);
    for (std::size_t i = 0; i < params.size(); ++i) {
      m_[i] = p_.beta1 * m_[i] + (1.0 - p_.beta1) * grad[i];
      v_[i] = p_.beta2 * v_[i] + (1.0 - p_.beta2) * grad[i] * grad[i];
      double mhat = m_[i] / c1;
      double vhat = v_[i] / c2;
      params[i] -= p_.lr * (mhat / (std::sqrt(vhat) + p_.eps) +
                            p_.weight_decay * params[i]);
    }
  }

 private:
  OptimizerParams p_;
  std::vector<double> m_, v_;
  long t_ = 0;
};

// ---------------------------------------------------------------------------
// Training configuration shared by all fit drivers.
// ---------------------------------------------------------------------------

enum class Variant { Independent, Symmetric, Hierarchical };

inline std::string variant_name(Variant v) {
  switch (v) {
    case Variant::Independent: return "independent";
    case Variant::Symmetric: return "symmetric";
    case Variant::Hierarchical: return "hierarchical";
  }
  return "?";
}
inline Variant variant_from_name(const std::string& s) {
  if (s == "independent") return Variant::Independent;
  if (s == "symmetric") return Variant::Symmetric;
  if (s == "hierarchical") return Variant::Hierarchical;
  throw DomainError("unknown variant: " + s);
}

struct TrainConfig {
  OptimizerParams opt;
  int epochs = 300;
  int batch_size = 512;
  int patience = 20;
  double val_fraction = 0.2;
  std::uint64_t seed = 1;
  Variant variant = Variant::Hierarchical;

  // architecture
  EmpiricalGenerator::Config generator;
  MonotoneSurvivalNet::Config net;
  int n_regen = 10000;
  double tau_floor = 0.05;   // dependence below this is treated as noise
  double gen_lr_scale = 5.0;  // generator parameters learn faster than the nets

  // Pairwise discovery stage: marginal model family. The parametric
  // Weibull-CoxPH marginals give the copula a far better-conditioned joint
  // landscape (and run much faster); the monotone-net route remains available
  // and is what the final marginal stage always uses.
  bool pairwise_parametric = true;
  double parametric_lr = 2e-2;
  int pairwise_epochs = 0;  // 0 inherits `epochs`
  int regen_epochs = 0;     // 0 inherits `epochs`

  TrainConfig stage_config(int stage_epochs) const {
    TrainConfig c = *this;
    if (stage_epochs > 0) c.epochs = stage_epochs;
    c.pairwise_epochs = 0;
    c.regen_epochs = 0;
    return c;
  }

  // Step decay: learning rates shrink once, late in the run, to settle the
  // iterate before the best-validation snapshot is taken.
  double lr_decay_fraction = 0.6;  // epoch fraction at which the step happens
  double lr_decay_factor = 0.3;    // 1.0 disables

  int lr_decay_epoch() const {
    return lr_decay_factor < 1.0
               ? static_cast<int>(lr_decay_fraction * static_cast<double>(epochs))
               : -1;
  }

  // Generator side: faster, and no decay — shrinking the atom network biases
  // the copula toward independence, unlike ordinary net regularization.
  OptimizerParams generator_opt() const {
    OptimizerParams p = opt;
    p.lr *= gen_lr_scale;
    p.weight_decay = 0.0;
    return p;
  }

  json to_json() const {
    return {{"opt", opt.to_json()},
            {"epochs", epochs},
            {"batch_size", batch_size},
            {"patience", patience},
            {"val_fraction", val_fraction},
            {"seed", seed},
            {"variant", variant_name(variant)},
            {"generator",
             {{"atom_count", generator.atom_count},
              {"eps_dim", generator.eps_dim},
              {"hidden", generator.hidden}}},
            {"net",
             {{"embed_width", net.embed_width},
              {"cov_width", net.cov_width},
              {"joint_width", net.joint_width},
              {"normalize_at_zero", net.normalize_at_zero}}},
            {"n_regen", n_regen},
            {"tau_floor", tau_floor},
            {"gen_lr_scale", gen_lr_scale},
            {"pairwise_parametric", pairwise_parametric},
            {"parametric_lr", parametric_lr},
            {"lr_decay_fraction", lr_decay_fraction},
            {"lr_decay_factor", lr_decay_factor},
            {"pairwise_epochs", pairwise_epochs},
            {"regen_epochs", regen_epochs}};
  }
  static TrainConfig from_json(const json& j) {
    TrainConfig c;
    c.opt = OptimizerParams::from_json(j.at("opt"));
    c.epochs = j.at("epochs").get<int>();
    c.batch_size = j.at("batch_size").get<int>();
    c.patience = j.at("patience").get<int>();
    c.val_fraction = j.at("val_fraction").get<double>();
    c.seed = j.at("seed").get<std::uint64_t>();
    c.variant = variant_from_name(j.at("variant").get<std::string>());
    c.generator.atom_count = j.at("generator").at("atom_count").get<int>();
    c.generator.eps_dim = j.at("generator").at("eps_dim").get<int>();
    c.generator.hidden = j.at("generator").at("hidden").get<std::vector<int>>();
    c.net.embed_width = j.at("net").at("embed_width").get<int>();
    c.net.cov_width = j.at("net").at("cov_width").get<int>();
    c.net.joint_width = j.at("net").at("joint_width").get<int>();
    c.net.normalize_at_zero = j.at("net").at("normalize_at_zero").get<bool>();
    c.n_regen = j.at("n_regen").get<int>();
    c.tau_floor = j.at("tau_floor").get<double>();
    c.gen_lr_scale = j.value("gen_lr_scale", 5.0);
    c.pairwise_parametric = j.value("pairwise_parametric", true);
    c.parametric_lr = j.value("parametric_lr", 2e-2);
    c.lr_decay_fraction = j.value("lr_decay_fraction", 0.6);
    c.lr_decay_factor = j.value("lr_decay_factor", 0.3);
    c.pairwise_epochs = j.value("pairwise_epochs", 0);
    c.regen_epochs = j.value("regen_epochs", 0);
    return c;
  }

  void validate() const {
    if (epochs < 0 || batch_size < 1 || patience < 1)
      throw DomainError("TrainConfig: nonpositive hyperparameter");
    if (!(val_fraction > 0.0) || !(val_fraction < 1.0))
      throw DomainError("TrainConfig: val_fraction must lie in (0,1)");
  }
};

// ---------------------------------------------------------------------------
// Likelihood (Eq. 9 shape): per row, log f_e + log dC/du_e at u_i = S_i(t|x),
// arguments clamped into the open unit interval.
// ---------------------------------------------------------------------------

struct LikelihoodContext {
  const SurvivalDataset* data = nullptr;
  const CopulaModel* copula = nullptr;
  std::vector<const MarginalModel*> marginals;  // one per cause
  double eps = kUnitEps;
};

inline double neg_log_likelihood(const LikelihoodContext& ctx,
                                 std::span<const std::size_t> rows) {
  if (rows.empty()) return 0.0;
  const auto& d = *ctx.data;
  const int nv = static_cast<int>(ctx.marginals.size());
  if (ctx.copula->dimension() != nv)
    throw StructureError("neg_log_likelihood: copula/marginal dimension mismatch");
  std::vector<double> terms;
  terms.reserve(rows.size());
  std::vector<double> u(static_cast<std::size_t>(nv));
  for (std::size_t r : rows) {
    auto x = d.covariates(r);
    double t = d.time[r];
    int e = d.event[r];
    for (int i = 0; i < nv; ++i) {
      double s = ctx.marginals[static_cast<std::size_t>(i)]->survival(t, x);
      u[static_cast<std::size_t>(i)] =
          std::min(std::max(s, ctx.eps), 1.0 - ctx.eps);
    }
    double f = ctx.marginals[static_cast<std::size_t>(e)]->density(t, x);
    double lf = std::log(f);
    if (!finite(lf))
      throw NumericError("neg_log_likelihood: non-finite density term at row " +
                         std::to_string(r));
    double lp = std::log(ctx.copula->partial(u, e));
    if (!finite(lp))
      throw NumericError(
          "neg_log_likelihood: non-finite copula-partial term at row " +
          std::to_string(r));
    terms.push_back(lf + lp);
  }
  return -pairwise_sum(terms);
}

// Direct product form under independence (the identity the copula route must
// reproduce exactly).
inline double independent_neg_log_likelihood(
    const LikelihoodContext& ctx, std::span<const std::size_t> rows) {
  if (rows.empty()) return 0.0;
  const auto& d = *ctx.data;
  const int nv = static_cast<int>(ctx.marginals.size());
  std::vector<double> terms;
  terms.reserve(rows.size());
  for (std::size_t r : rows) {
    auto x = d.covariates(r);
    double t = d.time[r];
    int e = d.event[r];
    double term =
        std::log(ctx.marginals[static_cast<std::size_t>(e)]->density(t, x));
    for (int i = 0; i < nv; ++i) {
      if (i == e) continue;
      double s = ctx.marginals[static_cast<std::size_t>(i)]->survival(t, x);
      term += std::log(std::min(std::max(s, ctx.eps), 1.0 - ctx.eps));
    }
    terms.push_back(term);
  }
  return -pairwise_sum(terms);
}

// ---------------------------------------------------------------------------
// Tape-recorded log dC/du_e for a frozen copula (generator parameters fixed;
// gradients flow to the u arguments only).
// ---------------------------------------------------------------------------

namespace detail {

inline ad::Var frozen_inverse(ad::Tape& tape, const Generator& g, ad::Var u) {
  return taped::inverse(tape, g, u);
}

// value -phi'(x), partial -phi''(x)
inline ad::Var frozen_neg_dphi(ad::Tape& tape, const Generator& g, ad::Var x) {
  ad::Var parents[] = {x};
  double partials[] = {-g.derivative(2, x.val)};
  return tape.custom(-g.derivative(1, x.val), parents, partials, "neg_dphi");
}

// nesting map h = phi0^{-1} o phi_j evaluated as a frozen node
inline std::array<double, 4> nesting_map_derivs(const Generator& root,
                                                const Generator& inner,
                                                double s) {
  const auto* sub = dynamic_cast<const SubordinatorGenerator*>(&inner);
  if (sub != nullptr && &sub->outer() == &root) return sub->psi_derivs4(s);
  auto gd = inner.derivs4(s);
  auto y = root.inverse(gd[0]);
  auto fd = root.derivs4(y);
  double h1 = gd[1] / fd[1];
  double h2 = (gd[2] - fd[2] * h1 * h1) / fd[1];
  double h3 = (gd[3] - fd[3] * h1 * h1 * h1 - 3.0 * fd[2] * h1 * h2) / fd[1];
  return {y, h1, h2, h3};
}

inline ad::Var frozen_h(ad::Tape& tape, const Generator& root,
                        const Generator& inner, ad::Var s) {
  auto h = nesting_map_derivs(root, inner, s.val);
  ad::Var parents[] = {s};
  double partials[] = {h[1]};
  return tape.custom(h[0], parents, partials, "nesting_map");
}
inline ad::Var frozen_h_prime(ad::Tape& tape, const Generator& root,
                              const Generator& inner, ad::Var s) {
  auto h = nesting_map_derivs(root, inner, s.val);
  ad::Var parents[] = {s};
  double partials[] = {h[2]};
  return tape.custom(h[1], parents, partials, "nesting_map_prime");
}

// log dC/du_e for symmetric/hierarchical frozen models.
inline ad::Var taped_log_partial(ad::Tape& tape, const CopulaModel& m,
                                 std::span<const ad::Var> u, int e) {
  const HacTree& tree = m.tree();
  const Generator& root = *tree.root;
  const int dim = m.dimension();
  std::vector<int> group(static_cast<std::size_t>(dim), -1);
  for (std::size_t j = 0; j < tree.inner.size(); ++j)
    for (int l : tree.inner[j].leaves)
      group[static_cast<std::size_t>(l)] = static_cast<int>(j);

  std::vector<ad::Var> y(static_cast<std::size_t>(dim));
  for (int i = 0; i < dim; ++i) {
    const Generator& gi =
        group[static_cast<std::size_t>(i)] < 0
            ? root
            : *tree.inner[static_cast<std::size_t>(group[static_cast<std::size_t>(i)])].gen;
    y[static_cast<std::size_t>(i)] = frozen_inverse(tape, gi, u[i]);
  }

  std::optional<ad::Var> T;
  auto add_term = [&](ad::Var v) { T = T.has_value() ? (*T + v) : v; };
  std::vector<std::optional<ad::Var>> s(tree.inner.size());
  for (int i = 0; i < dim; ++i) {
    int g = group[static_cast<std::size_t>(i)];
    if (g < 0)
      add_term(y[static_cast<std::size_t>(i)]);
    else {
      auto& sg = s[static_cast<std::size_t>(g)];
      sg = sg.has_value() ? (*sg + y[static_cast<std::size_t>(i)])
                          : y[static_cast<std::size_t>(i)];
    }
  }
  for (std::size_t j = 0; j < tree.inner.size(); ++j)
    add_term(frozen_h(tape, root, *tree.inner[j].gen, *s[j]));

  ad::Var lp = ad::log(frozen_neg_dphi(tape, root, *T));
  int ge = group[static_cast<std::size_t>(e)];
  if (ge < 0) {
    lp = lp - ad::log(frozen_neg_dphi(tape, root, y[static_cast<std::size_t>(e)]));
  } else {
    const Generator& gene = *tree.inner[static_cast<std::size_t>(ge)].gen;
    lp = lp +
         ad::log(frozen_h_prime(tape, root, gene, *s[static_cast<std::size_t>(ge)])) -
         ad::log(frozen_neg_dphi(tape, gene, y[static_cast<std::size_t>(e)]));
  }
  return lp;
}

// Deterministic train/validation split of [0, n).
struct Split {
  std::vector<std::size_t> train, val;
};
inline Split split_rows(std::size_t n, double val_fraction, std::uint64_t seed) {
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  Rng rng(seed, 999);
  rng.shuffle(idx);
  std::size_t n_val = std::max<std::size_t>(1, static_cast<std::size_t>(
                                                   std::floor(val_fraction *
                                                              static_cast<double>(n))));
  Split s;
  s.val.assign(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(n_val));
  s.train.assign(idx.begin() + static_cast<std::ptrdiff_t>(n_val), idx.end());
  return s;
}

struct EarlyStopper {
  int patience;
  double initial = std::numeric_limits<double>::infinity();
  double best = std::numeric_limits<double>::infinity();
  int best_epoch = -1;
  explicit EarlyStopper(int p) : patience(p) {}
  bool improved(int epoch, double val) {
    if (epoch == 0) initial = val;
    if (val < best) {
      best = val;
      best_epoch = epoch;
      return true;
    }
    return false;
  }
  bool should_stop(int epoch) const { return epoch - best_epoch >= patience; }
  void check_divergence(int epoch, const std::vector<double>& trace) const {
    if (epoch >= patience && !(best < initial)) {
      std::string msg = "training diverged: validation NLL never improved on its "
                        "initial value (" + std::to_string(initial) + "); trace:";
      for (double v : trace) msg += " " + std::to_string(v);
      throw NumericError(msg);
    }
  }
};

}  // namespace detail

struct FitTrace {
  std::vector<double> train_nll;
  std::vector<double> val_nll;
  int best_epoch = -1;
  double best_val = std::numeric_limits<double>::infinity();

  json to_json() const {
    return {{"train_nll", train_nll},
            {"val_nll", val_nll},
            {"best_epoch", best_epoch},
            {"best_val", best_val}};
  }
};

// ---------------------------------------------------------------------------
// Batch kernels. Each one evaluates the stage loss over a row set and, when
// asked, accumulates analytic gradients. Training loops and the gradient
// test-suite share these code paths.
// ---------------------------------------------------------------------------

// Marginal stage: copula frozen; gradients w.r.t. net parameters only.
inline double marginal_batch(const SurvivalDataset& data,
                             std::span<const std::size_t> rows,
                             const CopulaModel& copula, MonotoneSurvivalNet& net,
                             std::vector<double>* grad) {
  const int nv = copula.dimension();
  std::vector<double> terms;
  terms.reserve(rows.size());
  MonotoneSurvivalNet::Scratch sc;
  MonotoneSurvivalNet::Eval ev;
  ad::Tape tape;
  std::vector<double> adj;
  std::vector<double> u(static_cast<std::size_t>(nv));
  std::vector<bool> clamped(static_cast<std::size_t>(nv));
  std::vector<double> dS(static_cast<std::size_t>(nv));
  std::vector<double> df(static_cast<std::size_t>(nv));

  for (std::size_t r : rows) {
    auto x = data.covariates(r);
    double t = data.time[r];
    int e = data.event[r];
    net.forward_row(x, t, e, sc, ev);
    for (int i = 0; i < nv; ++i) {
      double s = ev.S[static_cast<std::size_t>(i)];
      double c = std::min(std::max(s, kUnitEps), 1.0 - kUnitEps);
      u[static_cast<std::size_t>(i)] = c;
      clamped[static_cast<std::size_t>(i)] = (c != s);
    }
    double f = ev.f[static_cast<std::size_t>(e)];
    if (!(f > 0.0) || !finite(f))
      throw NumericError("marginal likelihood: non-finite density at row " +
                         std::to_string(r));

    double lp;
    std::fill(dS.begin(), dS.end(), 0.0);
    std::fill(df.begin(), df.end(), 0.0);
    if (copula.kind() == CopulaKind::Independent) {
      lp = 0.0;
      for (int i = 0; i < nv; ++i) {
        if (i == e) continue;
        lp += std::log(u[static_cast<std::size_t>(i)]);
        if (!clamped[static_cast<std::size_t>(i)])
          dS[static_cast<std::size_t>(i)] = -1.0 / u[static_cast<std::size_t>(i)];
      }
    } else {
      auto mark = tape.mark();
      std::vector<ad::Var> uv;
      uv.reserve(static_cast<std::size_t>(nv));
      for (int i = 0; i < nv; ++i)
        uv.push_back(tape.leaf(u[static_cast<std::size_t>(i)]));
      ad::Var lpv = detail::taped_log_partial(tape, copula, uv, e);
      lp = lpv.val;
      if (grad != nullptr) {
        tape.gradient_into(lpv, adj);
        for (int i = 0; i < nv; ++i)
          if (!clamped[static_cast<std::size_t>(i)])
            dS[static_cast<std::size_t>(i)] =
                -adj[static_cast<std::size_t>(uv[static_cast<std::size_t>(i)].idx)];
      }
      tape.rewind(mark);
    }
    if (!finite(lp))
      throw NumericError("marginal likelihood: non-finite copula term at row " +
                         std::to_string(r));
    terms.push_back(std::log(f) + lp);
    if (grad != nullptr) {
      df[static_cast<std::size_t>(e)] = -1.0 / f;
      net.backward_row(sc, dS, df, *grad);
    }
  }
  return -pairwise_sum(terms);
}

// Taped Weibull-CoxPH marginal: parameters per variable are
// (raw_shape, raw_scale, beta[0..D-1]) with shape = exp(raw_shape) and
// log(scale) = raw_scale. Survival and density are recorded with primitives
// so the tape reaches every parameter.
struct TapedWeibullCox {
  static constexpr int fixed_params = 2;
  static int params_per_variable(int dim) { return fixed_params + dim; }

  // offset indexes into a flat Var vector laid out variable-by-variable.
  static void eval(ad::Tape& tape, std::span<const ad::Var> params, int offset,
                   double t, std::span<const double> x, ad::Var& survival,
                   ad::Var* density) {
    ad::Var shape = ad::exp(params[static_cast<std::size_t>(offset)]);
    ad::Var lp = tape.constant(0.0);
    for (std::size_t i = 0; i < x.size(); ++i)
      lp = lp + params[static_cast<std::size_t>(offset) + fixed_params + i] * x[i];
    // z = (t / scale)^shape = exp(shape * (log t - raw_scale))
    ad::Var z = ad::exp(shape * (tape.constant(std::log(t)) -
                                 params[static_cast<std::size_t>(offset) + 1]));
    ad::Var elp = ad::exp(lp);
    survival = ad::exp(-z * elp);
    if (density != nullptr) *density = survival * shape * z * elp / t;
  }

  static WeibullCoxMarginal materialize(std::span<const double> flat, int offset,
                                        int dim) {
    std::vector<double> beta(flat.begin() + offset + fixed_params,
                             flat.begin() + offset + fixed_params + dim);
    return WeibullCoxMarginal(std::exp(flat[static_cast<std::size_t>(offset)]),
                              std::exp(flat[static_cast<std::size_t>(offset) + 1]),
                              std::move(beta));
  }
};

// clamp into the open unit interval with max primitives (gradient stops at
// the clamp, matching the evaluation-path convention)
inline ad::Var taped_clamp_unit(ad::Tape& tape, ad::Var u) {
  ad::Var lo = ad::max(u, tape.constant(kUnitEps));
  return -ad::max(-lo, tape.constant(kUnitEps - 1.0));
}

// Pairwise stage with parametric marginals: all parameters (two marginal
// blocks + generator atoms) live on one tape per row.
inline double pairwise_batch_parametric(const SurvivalDataset& data,
                                        std::span<const std::size_t> rows,
                                        std::pair<int, int> pair,
                                        EmpiricalGenerator& gen,
                                        std::vector<double>& wc_flat,
                                        std::vector<double>* wc_grad,
                                        std::vector<double>* atom_grad) {
  const int D = data.covariate_dim;
  const int per = TapedWeibullCox::params_per_variable(D);
  if (static_cast<int>(wc_flat.size()) != 2 * per)
    throw StructureError("pairwise_batch_parametric: bad parameter block");
  std::vector<double> terms;
  terms.reserve(rows.size());
  ad::Tape tape;
  taped::AtomVars atoms = taped::AtomVars::bind(tape, gen);
  std::vector<ad::Var> P;
  P.reserve(wc_flat.size());
  for (double p : wc_flat) P.push_back(tape.leaf(p));
  auto mark = tape.mark();
  std::vector<double> adj;

  for (std::size_t r : rows) {
    auto x = data.covariates(r);
    double t = data.time[r];
    int e = data.event[r];
    int head = e == pair.first ? 0 : (e == pair.second ? 1 : -1);
    tape.rewind(mark);
    ad::Var Sa{}, Sb{}, fa{}, fb{};
    TapedWeibullCox::eval(tape, P, 0, t, x, Sa, head == 0 ? &fa : nullptr);
    TapedWeibullCox::eval(tape, P, per, t, x, Sb, head == 1 ? &fb : nullptr);
    ad::Var ua = taped_clamp_unit(tape, Sa);
    ad::Var ub = taped_clamp_unit(tape, Sb);
    ad::Var ya = taped::inverse(tape, atoms, ua);
    ad::Var yb = taped::inverse(tape, atoms, ub);
    ad::Var ll{};
    if (head < 0) {
      ll = ad::log(taped::phi(tape, atoms, ya + yb));
    } else {
      ll = ad::log(-taped::dphi(tape, atoms, ya + yb)) -
           ad::log(-taped::dphi(tape, atoms, head == 0 ? ya : yb)) +
           ad::log(head == 0 ? fa : fb);
    }
    if (!finite(ll.val))
      throw NumericError("pairwise likelihood: non-finite term at row " +
                         std::to_string(r));
    terms.push_back(ll.val);
    if (wc_grad != nullptr || atom_grad != nullptr) {
      tape.gradient_into(ll, adj);
      if (wc_grad != nullptr)
        for (std::size_t p = 0; p < P.size(); ++p)
          (*wc_grad)[p] -= adj[static_cast<std::size_t>(P[p].idx)];
      if (atom_grad != nullptr)
        for (std::size_t l = 0; l < atoms.vars.size(); ++l)
          (*atom_grad)[l] -= adj[static_cast<std::size_t>(atoms.vars[l].idx)];
    }
  }
  return -pairwise_sum(terms);
}

// Pairwise stage: bivariate reduction over (a, b); trainable generator atoms
// plus a two-head net. Rows with other labels contribute joint survival.
inline double pairwise_batch(const SurvivalDataset& data,
                             std::span<const std::size_t> rows,
                             std::pair<int, int> pair, EmpiricalGenerator& gen,
                             MonotoneSurvivalNet& net, std::vector<double>* net_grad,
                             std::vector<double>* atom_grad) {
  std::vector<double> terms;
  terms.reserve(rows.size());
  MonotoneSurvivalNet::Scratch sc;
  MonotoneSurvivalNet::Eval ev;
  ad::Tape tape;
  taped::AtomVars atoms = taped::AtomVars::bind(tape, gen);
  auto mark = tape.mark();
  std::vector<double> adj;
  std::vector<double> dS(2), df(2);

  for (std::size_t r : rows) {
    auto x = data.covariates(r);
    double t = data.time[r];
    int e = data.event[r];
    int head = e == pair.first ? 0 : (e == pair.second ? 1 : -1);
    net.forward_row(x, t, head, sc, ev);
    double ua = std::min(std::max(ev.S[0], kUnitEps), 1.0 - kUnitEps);
    double ub = std::min(std::max(ev.S[1], kUnitEps), 1.0 - kUnitEps);
    bool ca = ua != ev.S[0], cb = ub != ev.S[1];

    tape.rewind(mark);
    ad::Var uva = tape.leaf(ua), uvb = tape.leaf(ub);
    ad::Var ya = taped::inverse(tape, atoms, uva);
    ad::Var yb = taped::inverse(tape, atoms, uvb);
    ad::Var ll{};
    double f = 1.0;
    if (head < 0) {
      ll = ad::log(taped::phi(tape, atoms, ya + yb));
    } else {
      f = ev.f[static_cast<std::size_t>(head)];
      if (!(f > 0.0) || !finite(f))
        throw NumericError("pairwise likelihood: non-finite density at row " +
                           std::to_string(r));
      ad::Var yk = head == 0 ? ya : yb;
      ad::Var T = ya + yb;
      ll = ad::log(-taped::dphi(tape, atoms, T)) -
           ad::log(-taped::dphi(tape, atoms, yk));
    }
    if (!finite(ll.val))
      throw NumericError("pairwise likelihood: non-finite copula term at row " +
                         std::to_string(r));
    terms.push_back((head >= 0 ? std::log(f) : 0.0) + ll.val);

    if (net_grad != nullptr || atom_grad != nullptr) {
      tape.gradient_into(ll, adj);
      if (net_grad != nullptr) {
        dS[0] = ca ? 0.0 : -adj[static_cast<std::size_t>(uva.idx)];
        dS[1] = cb ? 0.0 : -adj[static_cast<std::size_t>(uvb.idx)];
        df[0] = df[1] = 0.0;
        if (head >= 0) df[static_cast<std::size_t>(head)] = -1.0 / f;
        net.backward_row(sc, dS, df, *net_grad);
      }
      if (atom_grad != nullptr)
        for (std::size_t l = 0; l < atoms.vars.size(); ++l)
          (*atom_grad)[l] -= adj[static_cast<std::size_t>(atoms.vars[l].idx)];
    }
  }
  return -pairwise_sum(terms);
}

// Symmetric end-to-end stage: one generator over all K+1 coordinates plus the
// full multi-head net.
inline double symmetric_batch(const SurvivalDataset& data,
                              std::span<const std::size_t> rows,
                              EmpiricalGenerator& gen, MonotoneSurvivalNet& net,
                              std::vector<double>* net_grad,
                              std::vector<double>* atom_grad) {
  const int nv = net.n_causes();
  std::vector<double> terms;
  terms.reserve(rows.size());
  MonotoneSurvivalNet::Scratch sc;
  MonotoneSurvivalNet::Eval ev;
  ad::Tape tape;
  taped::AtomVars atoms = taped::AtomVars::bind(tape, gen);
  auto mark = tape.mark();
  std::vector<double> adj;
  std::vector<double> dS(static_cast<std::size_t>(nv)),
      df(static_cast<std::size_t>(nv));
  std::vector<ad::Var> uv(static_cast<std::size_t>(nv));
  std::vector<bool> clamped(static_cast<std::size_t>(nv));

  for (std::size_t r : rows) {
    auto x = data.covariates(r);
    double t = data.time[r];
    int e = data.event[r];
    net.forward_row(x, t, e, sc, ev);
    double f = ev.f[static_cast<std::size_t>(e)];
    if (!(f > 0.0) || !finite(f))
      throw NumericError("symmetric likelihood: non-finite density at row " +
                         std::to_string(r));
    tape.rewind(mark);
    std::optional<ad::Var> T;
    ad::Var ye{};
    for (int i = 0; i < nv; ++i) {
      double s = ev.S[static_cast<std::size_t>(i)];
      double c = std::min(std::max(s, kUnitEps), 1.0 - kUnitEps);
      clamped[static_cast<std::size_t>(i)] = (c != s);
      uv[static_cast<std::size_t>(i)] = tape.leaf(c);
      ad::Var y = taped::inverse(tape, atoms, uv[static_cast<std::size_t>(i)]);
      if (i == e) ye = y;
      T = T.has_value() ? (*T + y) : y;
    }
    ad::Var ll = ad::log(-taped::dphi(tape, atoms, *T)) -
                 ad::log(-taped::dphi(tape, atoms, ye));
    if (!finite(ll.val))
      throw NumericError("symmetric likelihood: non-finite copula term at row " +
                         std::to_string(r));
    terms.push_back(std::log(f) + ll.val);
    if (net_grad != nullptr || atom_grad != nullptr) {
      tape.gradient_into(ll, adj);
      if (net_grad != nullptr) {
        for (int i = 0; i < nv; ++i)
          dS[static_cast<std::size_t>(i)] =
              clamped[static_cast<std::size_t>(i)]
                  ? 0.0
                  : -adj[static_cast<std::size_t>(uv[static_cast<std::size_t>(i)].idx)];
        std::fill(df.begin(), df.end(), 0.0);
        df[static_cast<std::size_t>(e)] = -1.0 / f;
        net.backward_row(sc, dS, df, *net_grad);
      }
      if (atom_grad != nullptr)
        for (std::size_t l = 0; l < atoms.vars.size(); ++l)
          (*atom_grad)[l] -= adj[static_cast<std::size_t>(atoms.vars[l].idx)];
    }
  }
  return -pairwise_sum(terms);
}

// Re-generation stage: maximize the bivariate copula density of the nested
// inner generator phi_j = phi0 o psi_j on regenerated pairs. Outer frozen.
// Parameters: raw_mu, raw_beta, jump-net atoms.
struct RegenData {
  std::vector<double> zu, zv;  // phi0^{-1}(u), phi0^{-1}(v) per pair
};

inline RegenData regen_precompute(const Generator& outer,
                                  const std::vector<std::array<double, 2>>& uv) {
  RegenData d;
  d.zu.reserve(uv.size());
  d.zv.reserve(uv.size());
  for (const auto& p : uv) {
    d.zu.push_back(outer.inverse(clamp_unit(p[0])));
    d.zv.push_back(outer.inverse(clamp_unit(p[1])));
  }
  return d;
}

inline double regen_batch(const RegenData& data,
                          std::span<const std::size_t> rows,
                          SubordinatorGenerator& sub,
                          std::vector<double>* scalar_grad,  // d/d(raw_mu, raw_beta)
                          std::vector<double>* atom_grad) {
  const Generator& outer = sub.outer();
  std::vector<double> terms;
  terms.reserve(rows.size());
  ad::Tape tape;
  taped::AtomVars atoms = taped::AtomVars::bind(tape, sub.jumps());
  ad::Var raw_mu = tape.leaf(sub.raw_mu());
  ad::Var raw_beta = tape.leaf(sub.raw_beta());
  ad::Var mu = ad::exp(raw_mu);
  ad::Var beta = ad::exp(raw_beta);
  auto mark = tape.mark();
  std::vector<double> adj;

  auto psi_of = [&](ad::Var xv) {
    return mu * xv + beta * (1.0 - taped::phi(tape, atoms, xv));
  };
  auto psi_prime_of = [&](ad::Var xv) {
    return mu - beta * taped::dphi(tape, atoms, xv);
  };
  auto log_neg_dphi_j = [&](ad::Var xv) {
    // -phi_j'(x) = (-phi0'(psi x)) * psi'(x), both factors positive
    ad::Var px = psi_of(xv);
    return ad::log(detail::frozen_neg_dphi(tape, outer, px)) +
           ad::log(psi_prime_of(xv));
  };

  for (std::size_t r : rows) {
    tape.rewind(mark);
    ad::Var a = taped::psi_inverse(tape, sub, atoms, mu, beta, data.zu[r]);
    ad::Var b = taped::psi_inverse(tape, sub, atoms, mu, beta, data.zv[r]);
    ad::Var s = a + b;
    ad::Var ps = psi_of(s);
    ad::Var ps1 = psi_prime_of(s);
    // phi_j''(s) = phi0''(psi s) psi'(s)^2 + (-phi0'(psi s)) * beta * phiM''(s)
    ad::Var d2 = taped::d2phi(tape, atoms, s);  // phi_M''
    ad::Var t1 = taped::d2phi(tape, outer, ps) * ps1 * ps1;
    ad::Var t2 = detail::frozen_neg_dphi(tape, outer, ps) * beta * d2;
    ad::Var ll = ad::log(t1 + t2) - log_neg_dphi_j(a) - log_neg_dphi_j(b);
    if (!finite(ll.val))
      throw NumericError("regen likelihood: non-finite term at pair " +
                         std::to_string(r));
    terms.push_back(ll.val);
    if (scalar_grad != nullptr) {
      tape.gradient_into(ll, adj);
      (*scalar_grad)[0] -= adj[static_cast<std::size_t>(raw_mu.idx)];
      (*scalar_grad)[1] -= adj[static_cast<std::size_t>(raw_beta.idx)];
      for (std::size_t l = 0; l < atoms.vars.size(); ++l)
        (*atom_grad)[l] -= adj[static_cast<std::size_t>(atoms.vars[l].idx)];
    }
  }
  return -pairwise_sum(terms);
}

// ---------------------------------------------------------------------------
// Fit drivers. All of them: deterministic split, shuffled mini-batches,
// AdamW on mean-of-batch gradients, early stopping on validation NLL with a
// snapshot of the best parameters, and a divergence error when validation
// never improves on its initial value within `patience` epochs.
// ---------------------------------------------------------------------------

namespace detail {

struct EpochDriver {
  const TrainConfig& cfg;
  std::size_t n_train;
  FitTrace trace;
  EarlyStopper stopper;

  EpochDriver(const TrainConfig& c, std::size_t n)
      : cfg(c), n_train(n), stopper(c.patience) {}

  // run(batch_fn, val_fn, snapshot_fn, restore_fn)
  template <typename BatchFn, typename ValFn, typename SnapFn, typename RestoreFn>
  void run(BatchFn&& batch_fn, ValFn&& val_fn, SnapFn&& snapshot,
           RestoreFn&& restore) {
    std::vector<std::size_t> order(n_train);
    std::iota(order.begin(), order.end(), 0);
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
      Rng shuffler(cfg.seed, 100000 + static_cast<std::uint64_t>(epoch));
      shuffler.shuffle(order);
      double train_sum = 0.0;
      std::size_t done = 0;
      while (done < n_train) {
        std::size_t take = std::min<std::size_t>(
            static_cast<std::size_t>(cfg.batch_size), n_train - done);
        train_sum +=
            batch_fn(epoch, std::span<const std::size_t>(order).subspan(done, take));
        done += take;
      }
      trace.train_nll.push_back(train_sum / static_cast<double>(n_train));
      double val = val_fn();
      trace.val_nll.push_back(val);
      if (stopper.improved(epoch, val)) snapshot();
      stopper.check_divergence(epoch, trace.val_nll);
      if (stopper.should_stop(epoch)) break;
    }
    trace.best_epoch = stopper.best_epoch;
    trace.best_val = stopper.best;
    if (stopper.best_epoch >= 0) restore();
  }
};

inline std::vector<std::size_t> take_rows(const std::vector<std::size_t>& pool,
                                          std::span<const std::size_t> order) {
  std::vector<std::size_t> rows;
  rows.reserve(order.size());
  for (std::size_t o : order) rows.push_back(pool[o]);
  return rows;
}

inline double max_time(const SurvivalDataset& d,
                       const std::vector<std::size_t>& rows) {
  double m = 0.0;
  for (std::size_t r : rows) m = std::max(m, d.time[r]);
  return m;
}

}  // namespace detail

struct MarginalFit {
  std::shared_ptr<MonotoneSurvivalNet> net;
  FitTrace trace;
};

inline MarginalFit fit_marginals_frozen_copula(const SurvivalDataset& data,
                                               const CopulaModel& copula,
                                               const TrainConfig& cfg) {
  cfg.validate();
  const int nv = copula.dimension();
  if (data.n_causes > nv)
    throw StructureError("fit_marginals: dataset has more causes than copula");
  MarginalFit fit;
  fit.net = std::make_shared<MonotoneSurvivalNet>(data.covariate_dim, nv, cfg.net,
                                                  cfg.seed);
  auto split = detail::split_rows(data.size(), cfg.val_fraction, cfg.seed);
  fit.net->set_time_scale(std::max(detail::max_time(data, split.train), 1e-12));
  if (cfg.epochs == 0) return fit;

  AdamW opt(static_cast<std::size_t>(fit.net->n_params()), cfg.opt);
  std::vector<double> grad(static_cast<std::size_t>(fit.net->n_params()));
  std::vector<double> best;
  detail::EpochDriver driver(cfg, split.train.size());
  bool decayed = false;
  driver.run(
      [&](int epoch, std::span<const std::size_t> order) {
        if (!decayed && epoch == cfg.lr_decay_epoch()) {
          opt.scale_lr(cfg.lr_decay_factor);
          decayed = true;
        }
        auto rows = detail::take_rows(split.train, order);
        std::fill(grad.begin(), grad.end(), 0.0);
        double nll = marginal_batch(data, rows, copula, *fit.net, &grad);
        double inv = 1.0 / static_cast<double>(rows.size());
        for (double& g : grad) g *= inv;
        opt.step(fit.net->params(), grad);
        return nll;
      },
      [&]() {
        return marginal_batch(data, split.val, copula, *fit.net, nullptr) /
               static_cast<double>(split.val.size());
      },
      [&]() { best = fit.net->params(); },
      [&]() { fit.net->params() = best; });
  fit.trace = driver.trace;
  return fit;
}

struct PairwiseFit {
  std::pair<int, int> pair;
  std::shared_ptr<EmpiricalGenerator> generator;
  std::shared_ptr<MonotoneSurvivalNet> net;   // net-marginal route
  std::vector<WeibullCoxMarginal> parametric;  // parametric-marginal route
  TauEstimate tau;
  FitTrace trace;
};

inline PairwiseFit fit_pairwise(const SurvivalDataset& data,
                                std::pair<int, int> pair, const TrainConfig& cfg_in) {
  TrainConfig cfg = cfg_in.stage_config(cfg_in.pairwise_epochs);
  cfg.validate();
  if (pair.first == pair.second || pair.first < 0 || pair.second < 0 ||
      pair.first >= data.n_causes || pair.second >= data.n_causes)
    throw DomainError("fit_pairwise: invalid pair");
  PairwiseFit fit;
  fit.pair = pair;
  fit.generator = std::make_shared<EmpiricalGenerator>(cfg.generator, cfg.seed ^ 0xA7);
  auto split = detail::split_rows(data.size(), cfg.val_fraction, cfg.seed);

  AdamW opt_gen(static_cast<std::size_t>(fit.generator->n_params()), cfg.generator_opt());
  std::vector<double> gen_grad(static_cast<std::size_t>(fit.generator->n_params()));
  std::vector<double> atom_grad(fit.generator->atoms().size());
  std::vector<double> best_gen;

  if (cfg.pairwise_parametric) {
    const int D = data.covariate_dim;
    const int per = TapedWeibullCox::params_per_variable(D);
    std::vector<double> wc(static_cast<std::size_t>(2 * per), 0.0);
    // start at an exponential with the median observed time as scale
    std::vector<double> ts;
    for (std::size_t r : split.train) ts.push_back(data.time[r]);
    std::nth_element(ts.begin(), ts.begin() + static_cast<std::ptrdiff_t>(ts.size() / 2), ts.end());
    double log_med = std::log(std::max(ts[ts.size() / 2], 1e-12));
    wc[1] = log_med;
    wc[static_cast<std::size_t>(per) + 1] = log_med;

    OptimizerParams wc_opt = cfg.opt;
    wc_opt.lr = cfg.parametric_lr;
    wc_opt.weight_decay = 0.0;
    AdamW opt_wc(wc.size(), wc_opt);
    std::vector<double> wc_grad(wc.size());
    std::vector<double> best_wc;

    detail::EpochDriver driver(cfg, split.train.size());
    bool decayed = false;
    driver.run(
        [&](int epoch, std::span<const std::size_t> order) {
          if (!decayed && epoch == cfg.lr_decay_epoch()) {
            opt_wc.scale_lr(cfg.lr_decay_factor);
            opt_gen.scale_lr(cfg.lr_decay_factor);
            decayed = true;
          }
          auto rows = detail::take_rows(split.train, order);
          std::fill(wc_grad.begin(), wc_grad.end(), 0.0);
          std::fill(gen_grad.begin(), gen_grad.end(), 0.0);
          std::fill(atom_grad.begin(), atom_grad.end(), 0.0);
          double nll = pairwise_batch_parametric(data, rows, pair, *fit.generator,
                                                 wc, &wc_grad, &atom_grad);
          double inv = 1.0 / static_cast<double>(rows.size());
          for (double& g : wc_grad) g *= inv;
          for (double& g : atom_grad) g *= inv;
          fit.generator->accumulate_param_grad(atom_grad, gen_grad);
          opt_wc.step(wc, wc_grad);
          opt_gen.step(fit.generator->params(), gen_grad);
          fit.generator->refresh();
          return nll;
        },
        [&]() {
          return pairwise_batch_parametric(data, split.val, pair, *fit.generator,
                                           wc, nullptr, nullptr) /
                 static_cast<double>(split.val.size());
        },
        [&]() {
          best_wc = wc;
          best_gen = fit.generator->params();
        },
        [&]() {
          wc = best_wc;
          fit.generator->params() = best_gen;
          fit.generator->refresh();
        });
    fit.trace = driver.trace;
    fit.parametric.push_back(TapedWeibullCox::materialize(wc, 0, D));
    fit.parametric.push_back(TapedWeibullCox::materialize(wc, per, D));
  } else {
    fit.net = std::make_shared<MonotoneSurvivalNet>(data.covariate_dim, 2, cfg.net,
                                                    cfg.seed ^ 0x99);
    fit.net->set_time_scale(std::max(detail::max_time(data, split.train), 1e-12));
    AdamW opt_net(static_cast<std::size_t>(fit.net->n_params()), cfg.opt);
    std::vector<double> net_grad(static_cast<std::size_t>(fit.net->n_params()));
    std::vector<double> best_net;

    detail::EpochDriver driver(cfg, split.train.size());
    bool decayed = false;
    driver.run(
        [&](int epoch, std::span<const std::size_t> order) {
          if (!decayed && epoch == cfg.lr_decay_epoch()) {
            opt_net.scale_lr(cfg.lr_decay_factor);
            opt_gen.scale_lr(cfg.lr_decay_factor);
            decayed = true;
          }
          auto rows = detail::take_rows(split.train, order);
          std::fill(net_grad.begin(), net_grad.end(), 0.0);
          std::fill(gen_grad.begin(), gen_grad.end(), 0.0);
          std::fill(atom_grad.begin(), atom_grad.end(), 0.0);
          double nll = pairwise_batch(data, rows, pair, *fit.generator, *fit.net,
                                      &net_grad, &atom_grad);
          double inv = 1.0 / static_cast<double>(rows.size());
          for (double& g : atom_grad) g *= inv;
          for (double& g : net_grad) g *= inv;
          fit.generator->accumulate_param_grad(atom_grad, gen_grad);
          opt_net.step(fit.net->params(), net_grad);
          opt_gen.step(fit.generator->params(), gen_grad);
          fit.generator->refresh();
          return nll;
        },
        [&]() {
          return pairwise_batch(data, split.val, pair, *fit.generator, *fit.net,
                                nullptr, nullptr) /
                 static_cast<double>(split.val.size());
        },
        [&]() {
          best_net = fit.net->params();
          best_gen = fit.generator->params();
        },
        [&]() {
          fit.net->params() = best_net;
          fit.generator->params() = best_gen;
          fit.generator->refresh();
        });
    fit.trace = driver.trace;
  }
  fit.tau = kendall_tau(*fit.generator, 20000, cfg.seed ^ 0x7AB);
  return fit;
}

struct RegenFit {
  std::shared_ptr<SubordinatorGenerator> generator;
  TauEstimate fitted_tau;
  TauEstimate target_tau;
  NestingReport nesting;
  FitTrace trace;
};

inline RegenFit fit_inner_regeneration(GeneratorPtr outer,
                                       const EmpiricalGenerator& target,
                                       const TrainConfig& cfg_in) {
  TrainConfig cfg = cfg_in.stage_config(cfg_in.regen_epochs);
  cfg.validate();
  if (cfg.n_regen < 1)
    throw DomainError("fit_inner_regeneration: n_regen must be >= 1 (empty MLE)");
  // Stage 1: regenerate bivariate samples from the target copula.
  auto uv = sample_bivariate(target, cfg.n_regen, cfg.seed ^ 0x5E6E);
  RegenData all = regen_precompute(*outer, uv);

  RegenFit fit;
  auto jumps = std::make_shared<EmpiricalGenerator>(cfg.generator, cfg.seed ^ 0xF00D);
  fit.generator = std::make_shared<SubordinatorGenerator>(outer, jumps, 0.0, 0.0);

  auto split = detail::split_rows(static_cast<std::size_t>(cfg.n_regen),
                                  cfg.val_fraction, cfg.seed);

  AdamW opt_scalar(2, cfg.generator_opt());
  AdamW opt_jumps(static_cast<std::size_t>(jumps->n_params()), cfg.generator_opt());
  std::vector<double> scalars{fit.generator->raw_mu(), fit.generator->raw_beta()};
  std::vector<double> scalar_grad(2);
  std::vector<double> jump_grad(static_cast<std::size_t>(jumps->n_params()));
  std::vector<double> atom_grad(jumps->atoms().size());
  std::vector<double> best_scalars, best_jumps;

  detail::EpochDriver driver(cfg, split.train.size());
  bool decayed = false;
  driver.run(
      [&](int epoch, std::span<const std::size_t> order) {
        if (!decayed && epoch == cfg.lr_decay_epoch()) {
          opt_scalar.scale_lr(cfg.lr_decay_factor);
          opt_jumps.scale_lr(cfg.lr_decay_factor);
          decayed = true;
        }
        auto rows = detail::take_rows(split.train, order);
        std::fill(scalar_grad.begin(), scalar_grad.end(), 0.0);
        std::fill(jump_grad.begin(), jump_grad.end(), 0.0);
        std::fill(atom_grad.begin(), atom_grad.end(), 0.0);
        double nll = regen_batch(all, rows, *fit.generator, &scalar_grad, &atom_grad);
        double inv = 1.0 / static_cast<double>(rows.size());
        for (double& g : scalar_grad) g *= inv;
        for (double& g : atom_grad) g *= inv;
        jumps->accumulate_param_grad(atom_grad, jump_grad);
        opt_scalar.step(scalars, scalar_grad);
        opt_jumps.step(jumps->params(), jump_grad);
        fit.generator->set_raw(scalars[0], scalars[1]);
        jumps->refresh();
        return nll;
      },
      [&]() {
        return regen_batch(all, split.val, *fit.generator, nullptr, nullptr) /
               static_cast<double>(split.val.size());
      },
      [&]() {
        best_scalars = scalars;
        best_jumps = jumps->params();
      },
      [&]() {
        scalars = best_scalars;
        jumps->params() = best_jumps;
        fit.generator->set_raw(scalars[0], scalars[1]);
        jumps->refresh();
      });
  fit.trace = driver.trace;

  std::vector<double> grid;
  for (double x = 0.0; x <= 4.0; x += 0.25) grid.push_back(x);
  fit.nesting = check_nesting(*outer, *fit.generator, grid);
  if (!fit.nesting.pass)
    throw NumericError("fit_inner_regeneration: nesting check failed after fit: " +
                       fit.nesting.message);
  fit.fitted_tau = kendall_tau(*fit.generator, 20000, cfg.seed ^ 0x71);
  fit.target_tau = kendall_tau(target, 20000, cfg.seed ^ 0x72);
  return fit;
}

struct SymmetricFit {
  std::shared_ptr<EmpiricalGenerator> generator;
  std::shared_ptr<MonotoneSurvivalNet> net;
  FitTrace trace;
};

inline SymmetricFit fit_symmetric_end_to_end(const SurvivalDataset& data,
                                             const TrainConfig& cfg) {
  cfg.validate();
  SymmetricFit fit;
  fit.generator = std::make_shared<EmpiricalGenerator>(cfg.generator, cfg.seed ^ 0x51);
  fit.net = std::make_shared<MonotoneSurvivalNet>(data.covariate_dim, data.n_causes,
                                                  cfg.net, cfg.seed ^ 0x52);
  auto split = detail::split_rows(data.size(), cfg.val_fraction, cfg.seed);
  fit.net->set_time_scale(std::max(detail::max_time(data, split.train), 1e-12));

  AdamW opt_net(static_cast<std::size_t>(fit.net->n_params()), cfg.opt);
  AdamW opt_gen(static_cast<std::size_t>(fit.generator->n_params()), cfg.generator_opt());
  std::vector<double> net_grad(static_cast<std::size_t>(fit.net->n_params()));
  std::vector<double> gen_grad(static_cast<std::size_t>(fit.generator->n_params()));
  std::vector<double> atom_grad(fit.generator->atoms().size());
  std::vector<double> best_net, best_gen;

  detail::EpochDriver driver(cfg, split.train.size());
  bool decayed = false;
  driver.run(
      [&](int epoch, std::span<const std::size_t> order) {
        if (!decayed && epoch == cfg.lr_decay_epoch()) {
          opt_net.scale_lr(cfg.lr_decay_factor);
          opt_gen.scale_lr(cfg.lr_decay_factor);
          decayed = true;
        }
        auto rows = detail::take_rows(split.train, order);
        std::fill(net_grad.begin(), net_grad.end(), 0.0);
        std::fill(gen_grad.begin(), gen_grad.end(), 0.0);
        std::fill(atom_grad.begin(), atom_grad.end(), 0.0);
        double nll = symmetric_batch(data, rows, *fit.generator, *fit.net,
                                     &net_grad, &atom_grad);
        double inv = 1.0 / static_cast<double>(rows.size());
        for (double& g : atom_grad) g *= inv;
        for (double& g : net_grad) g *= inv;
        fit.generator->accumulate_param_grad(atom_grad, gen_grad);
        opt_net.step(fit.net->params(), net_grad);
        opt_gen.step(fit.generator->params(), gen_grad);
        fit.generator->refresh();
        return nll;
      },
      [&]() {
        return symmetric_batch(data, split.val, *fit.generator, *fit.net, nullptr,
                               nullptr) /
               static_cast<double>(split.val.size());
      },
      [&]() {
        best_net = fit.net->params();
        best_gen = fit.generator->params();
      },
      [&]() {
        fit.net->params() = best_net;
        fit.generator->params() = best_gen;
        fit.generator->refresh();
      });
  fit.trace = driver.trace;
  return fit;
}

// ---------------------------------------------------------------------------
// Structure selection: greedy agglomeration on |tau| with average linkage.
// A merge is accepted while its strength strictly exceeds the running outer
// strength (the max between-group |tau| after the merge; for a final merge
// the merged copula itself would become the outer level, so the strict
// inequality fails and the merge is rejected).
// ---------------------------------------------------------------------------

struct Blueprint {
  bool independent = false;
  std::vector<std::vector<int>> groups;
  std::vector<std::pair<int, int>> group_targets;  // strongest in-group pair
  std::pair<int, int> outer_pair{-1, -1};          // weakest pair involving censoring

  json to_json() const {
    json gs = json::array();
    for (const auto& g : groups) gs.push_back(g);
    json ts = json::array();
    for (const auto& t : group_targets) ts.push_back({t.first, t.second});
    return {{"independent", independent},
            {"groups", gs},
            {"group_targets", ts},
            {"outer_pair", {outer_pair.first, outer_pair.second}}};
  }
  static Blueprint from_json(const json& j) {
    Blueprint b;
    b.independent = j.at("independent").get<bool>();
    for (const auto& g : j.at("groups"))
      b.groups.push_back(g.get<std::vector<int>>());
    for (const auto& t : j.at("group_targets"))
      b.group_targets.emplace_back(t.at(0).get<int>(), t.at(1).get<int>());
    b.outer_pair = {j.at("outer_pair").at(0).get<int>(),
                    j.at("outer_pair").at(1).get<int>()};
    return b;
  }
};

inline Blueprint select_structure(const std::vector<std::vector<double>>& tau,
                                  double tau_floor = 0.05) {
  const int nv = static_cast<int>(tau.size());
  for (const auto& row : tau)
    if (static_cast<int>(row.size()) != nv)
      throw DomainError("select_structure: tau matrix must be square");
  Blueprint bp;
  if (nv == 1) {  // K = 0: nothing to group
    bp.independent = true;
    return bp;
  }

  auto strength = [&](int i, int j) { return std::abs(tau[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)]); };

  // Weakest dependence involving censoring picks the outer generator.
  {
    double best = std::numeric_limits<double>::infinity();
    for (int j = 1; j < nv; ++j)
      if (strength(0, j) < best) {
        best = strength(0, j);
        bp.outer_pair = {0, j};
      }
  }

  double max_any = 0.0;
  for (int i = 0; i < nv; ++i)
    for (int j = i + 1; j < nv; ++j) max_any = std::max(max_any, strength(i, j));
  if (max_any < tau_floor) {
    bp.independent = true;
    return bp;
  }

  std::vector<std::vector<int>> clusters;
  for (int i = 0; i < nv; ++i) clusters.push_back({i});
  auto linkage = [&](const std::vector<int>& A, const std::vector<int>& B) {
    double s = 0.0;
    for (int a : A)
      for (int b : B) s += strength(a, b);
    return s / (static_cast<double>(A.size()) * static_cast<double>(B.size()));
  };

  auto internal = [&](const std::vector<int>& C) {
    if (C.size() < 2) return 1.0;  // a leaf joins on the linkage test alone
    double s = 0.0;
    int cnt = 0;
    for (std::size_t a = 0; a < C.size(); ++a)
      for (std::size_t b = a + 1; b < C.size(); ++b) {
        s += strength(C[a], C[b]);
        ++cnt;
      }
    return s / cnt;
  };

  for (;;) {
    if (clusters.size() < 2) break;
    // strongest merge candidate, deterministic tie-break by smallest indices
    int bi = -1, bj = -1;
    double best = -1.0;
    for (std::size_t i = 0; i < clusters.size(); ++i)
      for (std::size_t j = i + 1; j < clusters.size(); ++j) {
        double s = linkage(clusters[i], clusters[j]);
        if (s > best + 1e-15) {
          best = s;
          bi = static_cast<int>(i);
          bj = static_cast<int>(j);
        }
      }
    if (best < tau_floor) break;

    // Two formed groups only fuse when their mutual dependence is at least
    // as strong as the weaker group's internal level; otherwise the merge
    // would dilute a clique that an inner copula is meant to capture.
    const auto& A = clusters[static_cast<std::size_t>(bi)];
    const auto& B = clusters[static_cast<std::size_t>(bj)];
    if (A.size() >= 2 && B.size() >= 2 &&
        best < std::min(internal(A), internal(B)) - 1e-15)
      break;

    // outer strength after the merge
    std::vector<std::vector<int>> after;
    std::vector<int> merged = A;
    merged.insert(merged.end(), B.begin(), B.end());
    std::sort(merged.begin(), merged.end());
    for (std::size_t i = 0; i < clusters.size(); ++i)
      if (static_cast<int>(i) != bi && static_cast<int>(i) != bj)
        after.push_back(clusters[i]);
    double outer_after = best;  // final merge would itself become the outer level
    if (!after.empty()) {
      outer_after = 0.0;
      for (std::size_t i = 0; i < after.size(); ++i) {
        outer_after = std::max(outer_after, linkage(after[i], merged));
        for (std::size_t j = i + 1; j < after.size(); ++j)
          outer_after = std::max(outer_after, linkage(after[i], after[j]));
      }
    }
    if (!(best > outer_after)) break;

    after.push_back(merged);
    std::sort(after.begin(), after.end(),
              [](const auto& a, const auto& b) { return a.front() < b.front(); });
    clusters = std::move(after);
  }

  for (const auto& c : clusters) {
    if (c.size() < 2) continue;
    bp.groups.push_back(c);
    // strongest in-group pairwise fit represents the group
    double best = -1.0;
    std::pair<int, int> target{-1, -1};
    for (std::size_t a = 0; a < c.size(); ++a)
      for (std::size_t b = a + 1; b < c.size(); ++b)
        if (strength(c[a], c[b]) > best + 1e-15) {
          best = strength(c[a], c[b]);
          target = {c[a], c[b]};
        }
    bp.group_targets.push_back(target);
  }
  return bp;
}

// ---------------------------------------------------------------------------
// End-to-end variants and the full hierarchical pipeline.
// ---------------------------------------------------------------------------

struct FitReport {
  std::string variant;
  json config;
  std::string config_hash;
  std::uint64_t seed = 0;
  std::vector<json> stages;
  double wall_clock_seconds = 0.0;

  json to_json() const {
    return {{"variant", variant},
            {"config", config},
            {"config_hash", config_hash},
            {"seed", seed},
            {"stages", stages},
            {"wall_clock_seconds", wall_clock_seconds}};
  }
};

struct FitBundle {
  CopulaModel copula = CopulaModel::independent(2);
  std::shared_ptr<MonotoneSurvivalNet> net;
  FitReport report;
};

inline FitBundle fit_model(const SurvivalDataset& data, const TrainConfig& cfg) {
  auto t0 = std::chrono::steady_clock::now();
  FitBundle bundle;
  bundle.report.variant = variant_name(cfg.variant);
  bundle.report.config = cfg.to_json();
  bundle.report.config_hash = hex64(fnv1a(bundle.report.config.dump()));
  bundle.report.seed = cfg.seed;
  const int nv = data.n_causes;

  switch (cfg.variant) {
    case Variant::Independent: {
      bundle.copula = CopulaModel::independent(nv);
      MarginalFit mf = fit_marginals_frozen_copula(data, bundle.copula, cfg);
      bundle.net = mf.net;
      bundle.report.stages.push_back(
          {{"stage", "marginals"}, {"trace", mf.trace.to_json()}});
      break;
    }
    case Variant::Symmetric: {
      SymmetricFit sf = fit_symmetric_end_to_end(data, cfg);
      bundle.copula = CopulaModel::symmetric(sf.generator, nv);
      bundle.net = sf.net;
      bundle.report.stages.push_back(
          {{"stage", "symmetric_end_to_end"}, {"trace", sf.trace.to_json()}});
      break;
    }
    case Variant::Hierarchical: {
      // Stage 1: pairwise copulas.
      std::vector<std::vector<double>> tau(
          static_cast<std::size_t>(nv), std::vector<double>(static_cast<std::size_t>(nv), 0.0));
      std::map<std::pair<int, int>, PairwiseFit> fits;
      for (int i = 0; i < nv; ++i)
        for (int j = i + 1; j < nv; ++j) {
          TrainConfig pc = cfg;
          pc.seed = cfg.seed + 101 * static_cast<std::uint64_t>(i) +
                    static_cast<std::uint64_t>(j);
          PairwiseFit pf = fit_pairwise(data, {i, j}, pc);
          tau[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)] = pf.tau.tau;
          tau[static_cast<std::size_t>(j)][static_cast<std::size_t>(i)] = pf.tau.tau;
          bundle.report.stages.push_back({{"stage", "pairwise"},
                                          {"pair", {i, j}},
                                          {"tau", pf.tau.tau},
                                          {"tau_se", pf.tau.se},
                                          {"trace", pf.trace.to_json()}});
          fits.emplace(std::make_pair(i, j), std::move(pf));
        }

      // Stage 2: structure.
      Blueprint bp = select_structure(tau, cfg.tau_floor);
      bundle.report.stages.push_back(
          {{"stage", "select_structure"},
           {"blueprint", bp.to_json()},
           {"tau_matrix", tau},
           {"outer_policy", "kept fixed after pairwise fit"}});

      if (bp.independent) {
        bundle.copula = CopulaModel::independent(nv);
      } else {
        GeneratorPtr outer = fits.at(bp.outer_pair).generator;
        if (bp.groups.empty()) {
          bundle.copula = CopulaModel::symmetric(outer, nv);
        } else {
          HacTree tree;
          tree.root = outer;
          std::vector<bool> grouped(static_cast<std::size_t>(nv), false);
          for (std::size_t g = 0; g < bp.groups.size(); ++g) {
            TrainConfig rc = cfg;
            rc.seed = cfg.seed + 7919 * (g + 1);
            RegenFit rf = fit_inner_regeneration(
                outer, *fits.at(bp.group_targets[g]).generator, rc);
            tree.inner.push_back({rf.generator, bp.groups[g]});
            for (int l : bp.groups[g]) grouped[static_cast<std::size_t>(l)] = true;
            bundle.report.stages.push_back(
                {{"stage", "fit_inner"},
                 {"group", bp.groups[g]},
                 {"target_pair", {bp.group_targets[g].first, bp.group_targets[g].second}},
                 {"fitted_tau", rf.fitted_tau.tau},
                 {"target_tau", rf.target_tau.tau},
                 {"trace", rf.trace.to_json()}});
          }
          for (int l = 0; l < nv; ++l)
            if (!grouped[static_cast<std::size_t>(l)]) tree.outer_leaves.push_back(l);
          bundle.copula = CopulaModel::hierarchical(std::move(tree));
        }
      }

      // Stage 3: marginals with the copula frozen.
      MarginalFit mf = fit_marginals_frozen_copula(data, bundle.copula, cfg);
      bundle.net = mf.net;
      bundle.report.stages.push_back(
          {{"stage", "marginals"}, {"trace", mf.trace.to_json()}});
      break;
    }
  }
  bundle.report.wall_clock_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return bundle;
}

}  // namespace hacsurv
