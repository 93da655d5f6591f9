#pragma once

#include <cmath>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"

#include "hacsurv/common.hpp"

namespace hacsurv {

using nlohmann::json;

// Per-event conditional survival model: S(t|x) nonincreasing in t with
// density f = -dS/dt. The parametric and network models are substitutable
// anywhere the likelihood consumes this contract.
class MarginalModel {
 public:
  virtual ~MarginalModel() = default;
  virtual double survival(double t, std::span<const double> x) const = 0;
  virtual double density(double t, std::span<const double> x) const = 0;
};

// CoxPH with Weibull baseline: S(t|x) = exp(-(t/scale)^shape * e^{beta.x}).
class WeibullCoxMarginal final : public MarginalModel {
 public:
  WeibullCoxMarginal(double shape, double scale, std::vector<double> beta)
      : shape_(shape), scale_(scale), beta_(std::move(beta)) {
    if (!(shape_ > 0.0) || !(scale_ > 0.0))
      throw DomainError("WeibullCoxMarginal: shape and scale must be > 0");
  }

  double shape() const { return shape_; }
  double scale() const { return scale_; }
  const std::vector<double>& beta() const { return beta_; }

  double linpred(std::span<const double> x) const {
    double s = 0.0;
    for (std::size_t i = 0; i < beta_.size(); ++i) s += beta_[i] * x[i];
    return s;
  }

  double survival(double t, std::span<const double> x) const override {
    if (t < 0.0) throw DomainError("survival: t must be >= 0");
    return std::exp(-std::pow(t / scale_, shape_) * std::exp(linpred(x)));
  }

  double density(double t, std::span<const double> x) const override {
    if (!(t > 0.0)) throw DomainError("density: t must be > 0");
    double lp = std::exp(linpred(x));
    double s = survival(t, x);
    return s * (shape_ / scale_) * std::pow(t / scale_, shape_ - 1.0) * lp;
  }

  // Inverse transform: the t with S(t|x) = u.
  double time_from_uniform(double u, std::span<const double> x) const {
    return scale_ * std::pow(-std::log(u) * std::exp(-linpred(x)), 1.0 / shape_);
  }

  json to_json() const {
    return {{"shape", shape_}, {"scale", scale_}, {"beta", beta_}};
  }
  static WeibullCoxMarginal from_json(const json& j) {
    return WeibullCoxMarginal(j.at("shape").get<double>(),
                              j.at("scale").get<double>(),
                              j.at("beta").get<std::vector<double>>());
  }

 private:
  double shape_;
  double scale_;
  std::vector<double> beta_;
};

// ---------------------------------------------------------------------------
// Monotone survival network. Shared covariate embedding (two tanh layers),
// then per event: a covariate subnet (two tanh layers) and a joint subnet
// over (features, t) with three tanh layers and a sigmoid output, where every
// weight on a path from t is kept nonnegative by storing raw values and
// squaring them. S = 1 - sigmoid(g); the density comes from propagating
// d/dt forward through the joint subnet, so no numeric differentiation is
// involved. Time is standardized by a stored scale.
// ---------------------------------------------------------------------------

class MonotoneSurvivalNet {
 public:
  struct Config {
    int embed_width = 100;
    int cov_width = 100;
    int joint_width = 100;
    bool normalize_at_zero = false;  // S(t|x)/S(0|x) variant, off by default
  };

  MonotoneSurvivalNet(int covariate_dim, int n_causes, Config cfg,
                      std::uint64_t seed)
      : dim_(covariate_dim), causes_(n_causes), cfg_(cfg) {
    if (covariate_dim < 1 || n_causes < 1)
      throw DomainError("MonotoneSurvivalNet: bad dimensions");
    build_layout();
    Rng rng(seed, 71);
    init(rng);
  }

  int covariate_dim() const { return dim_; }
  int n_causes() const { return causes_; }
  const Config& config() const { return cfg_; }
  double time_scale() const { return time_scale_; }
  void set_time_scale(double s) {
    if (!(s > 0.0)) throw DomainError("time scale must be > 0");
    time_scale_ = s;
  }

  int n_params() const { return static_cast<int>(params_.size()); }
  std::vector<double>& params() { return params_; }
  const std::vector<double>& params() const { return params_; }

  // -- single row evaluation ------------------------------------------------

  struct HeadPass {
    std::vector<double> c1, c2;          // covariate subnet activations
    std::vector<double> h1, h2, h3;      // joint activations (tanh outputs)
    std::vector<double> d1, d2, d3;      // tangents dh/dt~
    std::vector<double> u2, u3;          // pre-tanh tangent inputs
    double g = 0.0, sig = 0.0, gt = 0.0;
    bool tangent = false;
  };

  struct Scratch {
    std::vector<double> x;
    double t_tilde = 0.0;
    std::vector<double> e1, e2;
    std::vector<HeadPass> head;       // at t_tilde
    std::vector<HeadPass> head_zero;  // at 0 (normalization only)
  };

  struct Eval {
    std::vector<double> S;  // per cause
    std::vector<double> f;  // per cause; valid where density was requested
  };

  // density_head: -1 none, -2 all heads, k >= 0 single head.
  void forward_row(std::span<const double> x, double t, int density_head,
                   Scratch& sc, Eval& out) const {
    if (t < 0.0) throw DomainError("survival: t must be >= 0");
    sc.x.assign(x.begin(), x.end());
    sc.t_tilde = t / time_scale_;
    embed_forward(sc);
    sc.head.resize(static_cast<std::size_t>(causes_));
    out.S.resize(static_cast<std::size_t>(causes_));
    out.f.assign(static_cast<std::size_t>(causes_), 0.0);
    if (cfg_.normalize_at_zero)
      sc.head_zero.resize(static_cast<std::size_t>(causes_));
    for (int k = 0; k < causes_; ++k) {
      bool want_density = density_head == -2 || density_head == k;
      HeadPass& hp = sc.head[static_cast<std::size_t>(k)];
      head_forward(k, sc, sc.t_tilde, want_density, hp);
      double S = 1.0 - hp.sig;
      double f = want_density ? hp.sig * (1.0 - hp.sig) * hp.gt / time_scale_ : 0.0;
      if (cfg_.normalize_at_zero) {
        HeadPass& hz = sc.head_zero[static_cast<std::size_t>(k)];
        head_forward(k, sc, 0.0, false, hz);
        double S0 = 1.0 - hz.sig;
        S /= S0;
        f /= S0;
      }
      out.S[static_cast<std::size_t>(k)] = S;
      out.f[static_cast<std::size_t>(k)] = f;
    }
  }

  // Seeds dS, df are dL/dS_k and dL/df_k per cause; accumulates into grad.
  void backward_row(const Scratch& sc, std::span<const double> dS,
                    std::span<const double> df, std::vector<double>& grad) const {
    std::vector<double> de(static_cast<std::size_t>(cfg_.embed_width), 0.0);
    for (int k = 0; k < causes_; ++k) {
      const HeadPass& hp = sc.head[static_cast<std::size_t>(k)];
      double dSk = dS[static_cast<std::size_t>(k)];
      double dfk = df[static_cast<std::size_t>(k)];
      if (cfg_.normalize_at_zero) {
        const HeadPass& hz = sc.head_zero[static_cast<std::size_t>(k)];
        double S0 = 1.0 - hz.sig;
        double S = 1.0 - hp.sig;
        double f = hp.sig * (1.0 - hp.sig) * hp.gt / time_scale_;
        // S~ = S/S0, f~ = f/S0: push seeds to the raw heads.
        double dS_raw = dSk / S0;
        double df_raw = dfk / S0;
        double dS0 = -(dSk * S + dfk * f) / (S0 * S0);
        head_backward(k, sc, hp, dS_raw, df_raw, grad, de);
        head_backward(k, sc, hz, dS0, 0.0, grad, de);
      } else {
        if (dSk != 0.0 || dfk != 0.0) head_backward(k, sc, hp, dSk, dfk, grad, de);
      }
    }
    embed_backward(sc, de, grad);
  }

  // Survival of every head on a whole time grid for one subject; the
  // covariate side is evaluated once. Output: causes x grid, row-major.
  void survival_grid(std::span<const double> x, std::span<const double> times,
                     std::vector<double>& out) const {
    Scratch sc;
    sc.x.assign(x.begin(), x.end());
    embed_forward(sc);
    const std::size_t G = times.size();
    out.resize(static_cast<std::size_t>(causes_) * G);
    HeadPass hp;
    HeadPass hz;
    for (int k = 0; k < causes_; ++k) {
      double s0 = 1.0;
      if (cfg_.normalize_at_zero) {
        head_forward(k, sc, 0.0, false, hz);
        s0 = 1.0 - hz.sig;
      }
      for (std::size_t g = 0; g < G; ++g) {
        if (times[g] < 0.0) throw DomainError("survival: t must be >= 0");
        head_forward(k, sc, times[g] / time_scale_, false, hp);
        out[static_cast<std::size_t>(k) * G + g] = (1.0 - hp.sig) / s0;
      }
    }
  }

  double survival(int k, double t, std::span<const double> x) const {
    Scratch sc;
    Eval ev;
    forward_row(x, t, -1, sc, ev);
    return ev.S[static_cast<std::size_t>(check_head(k))];
  }
  double density(int k, double t, std::span<const double> x) const {
    if (!(t > 0.0)) throw DomainError("density: t must be > 0");
    Scratch sc;
    Eval ev;
    forward_row(x, t, k, sc, ev);
    return ev.f[static_cast<std::size_t>(check_head(k))];
  }

  // MarginalModel adapter for one event head.
  class Head final : public MarginalModel {
   public:
    Head(const MonotoneSurvivalNet* net, int k) : net_(net), k_(k) {}
    double survival(double t, std::span<const double> x) const override {
      return net_->survival(k_, t, x);
    }
    double density(double t, std::span<const double> x) const override {
      return net_->density(k_, t, x);
    }

   private:
    const MonotoneSurvivalNet* net_;
    int k_;
  };
  Head marginal(int k) const { return Head(this, check_head(k)); }

  json to_json() const {
    return {{"covariate_dim", dim_},
            {"n_causes", causes_},
            {"embed_width", cfg_.embed_width},
            {"cov_width", cfg_.cov_width},
            {"joint_width", cfg_.joint_width},
            {"normalize_at_zero", cfg_.normalize_at_zero},
            {"time_scale", time_scale_},
            {"params", params_}};
  }
  static MonotoneSurvivalNet from_json(const json& j) {
    Config cfg;
    cfg.embed_width = j.at("embed_width").get<int>();
    cfg.cov_width = j.at("cov_width").get<int>();
    cfg.joint_width = j.at("joint_width").get<int>();
    cfg.normalize_at_zero = j.at("normalize_at_zero").get<bool>();
    MonotoneSurvivalNet net(j.at("covariate_dim").get<int>(),
                            j.at("n_causes").get<int>(), cfg, 0);
    net.params_ = j.at("params").get<std::vector<double>>();
    net.time_scale_ = j.at("time_scale").get<double>();
    return net;
  }

  // Raw (pre-squaring) parameter indices of constrained weights; exposed so
  // tests can verify the positivity map directly.
  bool is_constrained(int param_index) const {
    return constrained_[static_cast<std::size_t>(param_index)];
  }

 private:
  int check_head(int k) const {
    if (k < 0 || k >= causes_) throw DomainError("marginal head index out of range");
    return k;
  }

  // ---- layout ----
  struct Block {
    int offset = 0;
    int rows = 0, cols = 0;  // cols == 0 means bias vector of length rows
    bool constrained = false;
  };
  enum BlockId {
    kEmbedW1, kEmbedB1, kEmbedW2, kEmbedB2,
    kCovW1, kCovB1, kCovW2, kCovB2,
    kJointW1, kJointT1, kJointB1,
    kJointW2, kJointB2,
    kJointW3, kJointB3,
    kOutW, kOutB,
    kHeadBlockCount = kOutB - kCovW1 + 1
  };

  void build_layout() {
    const int we = cfg_.embed_width, wc = cfg_.cov_width, wj = cfg_.joint_width;
    blocks_.clear();
    int off = 0;
    auto add = [&](int rows, int cols, bool constrained) {
      blocks_.push_back({off, rows, cols, constrained});
      off += rows * std::max(cols, 1);
    };
    add(we, dim_, false);  // embed W1
    add(we, 0, false);
    add(we, we, false);    // embed W2
    add(we, 0, false);
    for (int k = 0; k < causes_; ++k) {
      add(wc, we, false);  // cov W1
      add(wc, 0, false);
      add(wc, wc, false);  // cov W2
      add(wc, 0, false);
      add(wj, wc, false);  // joint W1 (covariate side)
      add(wj, 0, true);    // joint t column (constrained)
      add(wj, 0, false);   // joint b1
      add(wj, wj, true);   // joint W2
      add(wj, 0, false);
      add(wj, wj, true);   // joint W3
      add(wj, 0, false);
      add(1, wj, true);    // output weights
      add(1, 0, false);    // output bias
    }
    params_.assign(static_cast<std::size_t>(off), 0.0);
    constrained_.assign(static_cast<std::size_t>(off), false);
    for (const Block& b : blocks_) {
      if (!b.constrained) continue;
      int len = b.rows * std::max(b.cols, 1);
      for (int i = 0; i < len; ++i)
        constrained_[static_cast<std::size_t>(b.offset + i)] = true;
    }
  }

  const Block& block(int head, int id) const {
    if (id < kCovW1) return blocks_[static_cast<std::size_t>(id)];
    return blocks_[static_cast<std::size_t>(4 + head * kHeadBlockCount +
                                            (id - kCovW1))];
  }
  const double* raw(const Block& b) const { return params_.data() + b.offset; }
  double* raw_mut(const Block& b) { return params_.data() + b.offset; }

  void init(Rng& rng) {
    for (const Block& b : blocks_) {
      int len = b.rows * std::max(b.cols, 1);
      double* p = params_.data() + b.offset;
      if (b.cols == 0 && !b.constrained) {
        for (int i = 0; i < len; ++i) p[i] = 0.0;  // biases
      } else if (!b.constrained) {
        double bound = 1.0 / std::sqrt(static_cast<double>(std::max(b.cols, 1)));
        for (int i = 0; i < len; ++i) p[i] = rng.uniform(-bound, bound);
      } else {
        // raw value whose square is a small positive weight
        int fan = b.cols > 0 ? b.cols : 1;
        double scale = std::pow(1.0 / static_cast<double>(fan), 0.25);
        for (int i = 0; i < len; ++i) p[i] = rng.uniform(0.05, 0.5) * scale;
      }
    }
  }

  // ---- forward pieces ----
  static void dense(const double* w, const double* b, const double* in, int rows,
                    int cols, double* out, bool squared) {
    for (int o = 0; o < rows; ++o) {
      const double* wo = w + static_cast<std::ptrdiff_t>(o) * cols;
      double acc = b != nullptr ? b[o] : 0.0;
      if (squared) {
#pragma omp simd reduction(+ : acc)
        for (int i = 0; i < cols; ++i) acc += wo[i] * wo[i] * in[i];
      } else {
#pragma omp simd reduction(+ : acc)
        for (int i = 0; i < cols; ++i) acc += wo[i] * in[i];
      }
      out[o] = acc;
    }
  }

  void embed_forward(Scratch& sc) const {
    const int we = cfg_.embed_width;
    sc.e1.resize(static_cast<std::size_t>(we));
    sc.e2.resize(static_cast<std::size_t>(we));
    dense(raw(block(0, kEmbedW1)), raw(block(0, kEmbedB1)), sc.x.data(), we, dim_,
          sc.e1.data(), false);
    for (double& v : sc.e1) v = std::tanh(v);
    dense(raw(block(0, kEmbedW2)), raw(block(0, kEmbedB2)), sc.e1.data(), we, we,
          sc.e2.data(), false);
    for (double& v : sc.e2) v = std::tanh(v);
  }

  void head_forward(int k, const Scratch& sc, double t_tilde, bool tangent,
                    HeadPass& hp) const {
    const int we = cfg_.embed_width, wc = cfg_.cov_width, wj = cfg_.joint_width;
    hp.tangent = tangent;
    hp.c1.resize(static_cast<std::size_t>(wc));
    hp.c2.resize(static_cast<std::size_t>(wc));
    dense(raw(block(k, kCovW1)), raw(block(k, kCovB1)), sc.e2.data(), wc, we,
          hp.c1.data(), false);
    for (double& v : hp.c1) v = std::tanh(v);
    dense(raw(block(k, kCovW2)), raw(block(k, kCovB2)), hp.c1.data(), wc, wc,
          hp.c2.data(), false);
    for (double& v : hp.c2) v = std::tanh(v);

    hp.h1.resize(static_cast<std::size_t>(wj));
    dense(raw(block(k, kJointW1)), raw(block(k, kJointB1)), hp.c2.data(), wj, wc,
          hp.h1.data(), false);
    const double* t1 = raw(block(k, kJointT1));
    for (int o = 0; o < wj; ++o)
      hp.h1[static_cast<std::size_t>(o)] =
          std::tanh(hp.h1[static_cast<std::size_t>(o)] + t1[o] * t1[o] * t_tilde);

    hp.h2.resize(static_cast<std::size_t>(wj));
    dense(raw(block(k, kJointW2)), raw(block(k, kJointB2)), hp.h1.data(), wj, wj,
          hp.h2.data(), true);
    for (double& v : hp.h2) v = std::tanh(v);

    hp.h3.resize(static_cast<std::size_t>(wj));
    dense(raw(block(k, kJointW3)), raw(block(k, kJointB3)), hp.h2.data(), wj, wj,
          hp.h3.data(), true);
    for (double& v : hp.h3) v = std::tanh(v);

    const Block& bo = block(k, kOutW);
    const double* wo = raw(bo);
    double g = raw(block(k, kOutB))[0];
    for (int i = 0; i < wj; ++i)
      g += wo[i] * wo[i] * hp.h3[static_cast<std::size_t>(i)];
    hp.g = g;
    hp.sig = 1.0 / (1.0 + std::exp(-g));

    if (tangent) {
      hp.d1.resize(static_cast<std::size_t>(wj));
      for (int o = 0; o < wj; ++o) {
        double h = hp.h1[static_cast<std::size_t>(o)];
        hp.d1[static_cast<std::size_t>(o)] = (1.0 - h * h) * t1[o] * t1[o];
      }
      hp.u2.resize(static_cast<std::size_t>(wj));
      dense(raw(block(k, kJointW2)), nullptr, hp.d1.data(), wj, wj, hp.u2.data(),
            true);
      hp.d2.resize(static_cast<std::size_t>(wj));
      for (int o = 0; o < wj; ++o) {
        double h = hp.h2[static_cast<std::size_t>(o)];
        hp.d2[static_cast<std::size_t>(o)] =
            (1.0 - h * h) * hp.u2[static_cast<std::size_t>(o)];
      }
      hp.u3.resize(static_cast<std::size_t>(wj));
      dense(raw(block(k, kJointW3)), nullptr, hp.d2.data(), wj, wj, hp.u3.data(),
            true);
      hp.d3.resize(static_cast<std::size_t>(wj));
      for (int o = 0; o < wj; ++o) {
        double h = hp.h3[static_cast<std::size_t>(o)];
        hp.d3[static_cast<std::size_t>(o)] =
            (1.0 - h * h) * hp.u3[static_cast<std::size_t>(o)];
      }
      double gt = 0.0;
      for (int i = 0; i < wj; ++i)
        gt += wo[i] * wo[i] * hp.d3[static_cast<std::size_t>(i)];
      hp.gt = gt;
    } else {
      hp.gt = 0.0;
    }
  }

  // ---- backward pieces ----
  // accumulate dL/deff into grad through the squaring map where needed
  void accum_mat(const Block& b, const double* delta_out, const double* in,
                 int rows, int cols, std::vector<double>& grad) const {
    const double* p = raw(b);
    double* g = grad.data() + b.offset;
    for (int o = 0; o < rows; ++o) {
      double d = delta_out[o];
      if (d == 0.0) continue;
      const double* po = p + static_cast<std::ptrdiff_t>(o) * cols;
      double* go = g + static_cast<std::ptrdiff_t>(o) * cols;
      if (b.constrained) {
#pragma omp simd
        for (int i = 0; i < cols; ++i) go[i] += 2.0 * po[i] * d * in[i];
      } else {
#pragma omp simd
        for (int i = 0; i < cols; ++i) go[i] += d * in[i];
      }
    }
  }
  void accum_bias(const Block& b, const double* delta_out, int rows,
                  std::vector<double>& grad) const {
    double* g = grad.data() + b.offset;
    for (int o = 0; o < rows; ++o) g[o] += delta_out[o];
  }
  // delta_in += W_eff^T delta_out
  void back_input(const Block& b, const double* delta_out, int rows, int cols,
                  double* delta_in) const {
    const double* p = raw(b);
    for (int o = 0; o < rows; ++o) {
      double d = delta_out[o];
      if (d == 0.0) continue;
      const double* po = p + static_cast<std::ptrdiff_t>(o) * cols;
      if (b.constrained) {
#pragma omp simd
        for (int i = 0; i < cols; ++i) delta_in[i] += po[i] * po[i] * d;
      } else {
#pragma omp simd
        for (int i = 0; i < cols; ++i) delta_in[i] += po[i] * d;
      }
    }
  }

  void head_backward(int k, const Scratch& sc, const HeadPass& hp, double dS,
                     double df, std::vector<double>& grad,
                     std::vector<double>& de) const {
    const int we = cfg_.embed_width, wc = cfg_.cov_width, wj = cfg_.joint_width;
    const double sig = hp.sig;
    const double sp = sig * (1.0 - sig);
    // S = 1 - sig; f = sp * gt / tau
    double dsig = -dS;
    double dgt = 0.0;
    if (df != 0.0 && hp.tangent) {
      dsig += df * (1.0 - 2.0 * sig) * hp.gt / time_scale_;
      dgt = df * sp / time_scale_;
    }
    double dg = dsig * sp;

    const Block& bo = block(k, kOutW);
    const double* wo = raw(bo);
    std::vector<double> dh3(static_cast<std::size_t>(wj), 0.0);
    std::vector<double> dd3(static_cast<std::size_t>(wj), 0.0);
    {
      double* g = grad.data() + bo.offset;
      for (int i = 0; i < wj; ++i) {
        double w2 = wo[i] * wo[i];
        dh3[static_cast<std::size_t>(i)] = w2 * dg;
        double deff = dg * hp.h3[static_cast<std::size_t>(i)];
        if (dgt != 0.0) {
          deff += dgt * hp.d3[static_cast<std::size_t>(i)];
          dd3[static_cast<std::size_t>(i)] = w2 * dgt;
        }
        g[i] += 2.0 * wo[i] * deff;
      }
      grad[static_cast<std::size_t>(block(k, kOutB).offset)] += dg;
    }

    // joint layer 3 (tanh with optional tangent channel)
    std::vector<double> dz3(static_cast<std::size_t>(wj));
    std::vector<double> du3(static_cast<std::size_t>(wj), 0.0);
    for (int o = 0; o < wj; ++o) {
      double h = hp.h3[static_cast<std::size_t>(o)];
      double omh2 = 1.0 - h * h;
      double v = dh3[static_cast<std::size_t>(o)] * omh2;
      if (hp.tangent && dgt != 0.0) {
        v += dd3[static_cast<std::size_t>(o)] *
             (-2.0 * h * hp.u3[static_cast<std::size_t>(o)]) * omh2;
        du3[static_cast<std::size_t>(o)] = dd3[static_cast<std::size_t>(o)] * omh2;
      }
      dz3[static_cast<std::size_t>(o)] = v;
    }
    std::vector<double> dh2(static_cast<std::size_t>(wj), 0.0);
    std::vector<double> dd2(static_cast<std::size_t>(wj), 0.0);
    accum_mat(block(k, kJointW3), dz3.data(), hp.h2.data(), wj, wj, grad);
    accum_bias(block(k, kJointB3), dz3.data(), wj, grad);
    back_input(block(k, kJointW3), dz3.data(), wj, wj, dh2.data());
    if (hp.tangent && dgt != 0.0) {
      accum_mat(block(k, kJointW3), du3.data(), hp.d2.data(), wj, wj, grad);
      back_input(block(k, kJointW3), du3.data(), wj, wj, dd2.data());
    }

    // joint layer 2
    std::vector<double> dz2(static_cast<std::size_t>(wj));
    std::vector<double> du2(static_cast<std::size_t>(wj), 0.0);
    for (int o = 0; o < wj; ++o) {
      double h = hp.h2[static_cast<std::size_t>(o)];
      double omh2 = 1.0 - h * h;
      double v = dh2[static_cast<std::size_t>(o)] * omh2;
      if (hp.tangent && dgt != 0.0) {
        v += dd2[static_cast<std::size_t>(o)] *
             (-2.0 * h * hp.u2[static_cast<std::size_t>(o)]) * omh2;
        du2[static_cast<std::size_t>(o)] = dd2[static_cast<std::size_t>(o)] * omh2;
      }
      dz2[static_cast<std::size_t>(o)] = v;
    }
    std::vector<double> dh1(static_cast<std::size_t>(wj), 0.0);
    std::vector<double> dd1(static_cast<std::size_t>(wj), 0.0);
    accum_mat(block(k, kJointW2), dz2.data(), hp.h1.data(), wj, wj, grad);
    accum_bias(block(k, kJointB2), dz2.data(), wj, grad);
    back_input(block(k, kJointW2), dz2.data(), wj, wj, dh1.data());
    if (hp.tangent && dgt != 0.0) {
      accum_mat(block(k, kJointW2), du2.data(), hp.d1.data(), wj, wj, grad);
      back_input(block(k, kJointW2), du2.data(), wj, wj, dd1.data());
    }

    // joint layer 1: z1 = W1 c2 + t1^2 * t~ + b1; d1 = (1-h1^2) t1^2
    const Block& bt = block(k, kJointT1);
    const double* t1 = raw(bt);
    std::vector<double> dz1(static_cast<std::size_t>(wj));
    {
      double* g = grad.data() + bt.offset;
      // The normalization pass evaluates the head at t~ = 0.
      bool is_zero_pass =
          !sc.head_zero.empty() &&
          &hp == &sc.head_zero[static_cast<std::size_t>(k)];
      double t_for_head = is_zero_pass ? 0.0 : sc.t_tilde;
      for (int o = 0; o < wj; ++o) {
        double h = hp.h1[static_cast<std::size_t>(o)];
        double omh2 = 1.0 - h * h;
        double v = dh1[static_cast<std::size_t>(o)] * omh2;
        double dt1eff = 0.0;
        if (hp.tangent && dgt != 0.0) {
          v += dd1[static_cast<std::size_t>(o)] * (-2.0 * h * t1[o] * t1[o]) * omh2;
          dt1eff += dd1[static_cast<std::size_t>(o)] * omh2;  // d d1 / d (t1^2)
        }
        dz1[static_cast<std::size_t>(o)] = v;
        dt1eff += v * t_for_head;  // d z1 / d (t1^2)
        g[o] += 2.0 * t1[o] * dt1eff;
      }
    }
    std::vector<double> dc2(static_cast<std::size_t>(wc), 0.0);
    accum_mat(block(k, kJointW1), dz1.data(), hp.c2.data(), wj, wc, grad);
    accum_bias(block(k, kJointB1), dz1.data(), wj, grad);
    back_input(block(k, kJointW1), dz1.data(), wj, wc, dc2.data());

    // covariate subnet
    std::vector<double> dz_c2(static_cast<std::size_t>(wc));
    for (int o = 0; o < wc; ++o) {
      double h = hp.c2[static_cast<std::size_t>(o)];
      dz_c2[static_cast<std::size_t>(o)] =
          dc2[static_cast<std::size_t>(o)] * (1.0 - h * h);
    }
    std::vector<double> dc1(static_cast<std::size_t>(wc), 0.0);
    accum_mat(block(k, kCovW2), dz_c2.data(), hp.c1.data(), wc, wc, grad);
    accum_bias(block(k, kCovB2), dz_c2.data(), wc, grad);
    back_input(block(k, kCovW2), dz_c2.data(), wc, wc, dc1.data());

    std::vector<double> dz_c1(static_cast<std::size_t>(wc));
    for (int o = 0; o < wc; ++o) {
      double h = hp.c1[static_cast<std::size_t>(o)];
      dz_c1[static_cast<std::size_t>(o)] =
          dc1[static_cast<std::size_t>(o)] * (1.0 - h * h);
    }
    accum_mat(block(k, kCovW1), dz_c1.data(), sc.e2.data(), wc, we, grad);
    accum_bias(block(k, kCovB1), dz_c1.data(), wc, grad);
    back_input(block(k, kCovW1), dz_c1.data(), wc, we, de.data());
  }

  void embed_backward(const Scratch& sc, const std::vector<double>& de,
                      std::vector<double>& grad) const {
    const int we = cfg_.embed_width;
    std::vector<double> dz2(static_cast<std::size_t>(we));
    for (int o = 0; o < we; ++o) {
      double h = sc.e2[static_cast<std::size_t>(o)];
      dz2[static_cast<std::size_t>(o)] = de[static_cast<std::size_t>(o)] * (1.0 - h * h);
    }
    std::vector<double> de1(static_cast<std::size_t>(we), 0.0);
    accum_mat(block(0, kEmbedW2), dz2.data(), sc.e1.data(), we, we, grad);
    accum_bias(block(0, kEmbedB2), dz2.data(), we, grad);
    back_input(block(0, kEmbedW2), dz2.data(), we, we, de1.data());

    std::vector<double> dz1(static_cast<std::size_t>(we));
    for (int o = 0; o < we; ++o) {
      double h = sc.e1[static_cast<std::size_t>(o)];
      dz1[static_cast<std::size_t>(o)] = de1[static_cast<std::size_t>(o)] * (1.0 - h * h);
    }
    accum_mat(block(0, kEmbedW1), dz1.data(), sc.x.data(), we, dim_, grad);
    accum_bias(block(0, kEmbedB1), dz1.data(), we, grad);
  }

  int dim_;
  int causes_;
  Config cfg_;
  double time_scale_ = 1.0;
  std::vector<Block> blocks_;
  std::vector<double> params_;
  std::vector<bool> constrained_;
};

}  // namespace hacsurv
