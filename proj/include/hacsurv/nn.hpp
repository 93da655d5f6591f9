#pragma once

#include <cmath>
#include <numeric>
#include <vector>

#include "hacsurv/common.hpp"

namespace hacsurv::nn {

// Dense helpers over row-major buffers. Kept free of any tape machinery:
// networks are hot loops, so forward/backward are hand-written and checked
// against finite differences in the tests.

inline void dense_forward(const double* x, int rows, int in, int out,
                          const double* w, const double* b, double* z) {
  for (int r = 0; r < rows; ++r) {
    const double* xr = x + static_cast<std::ptrdiff_t>(r) * in;
    double* zr = z + static_cast<std::ptrdiff_t>(r) * out;
    for (int o = 0; o < out; ++o) {
      const double* wo = w + static_cast<std::ptrdiff_t>(o) * in;
      double acc = b[o];
#pragma omp simd reduction(+ : acc)
      for (int i = 0; i < in; ++i) acc += wo[i] * xr[i];
      zr[o] = acc;
    }
  }
}

// Accumulates dL/dw, dL/db and (optionally) dL/dx given dL/dz.
inline void dense_backward(const double* x, int rows, int in, int out,
                           const double* w, const double* dz, double* dw,
                           double* db, double* dx) {
  for (int r = 0; r < rows; ++r) {
    const double* xr = x + static_cast<std::ptrdiff_t>(r) * in;
    const double* dzr = dz + static_cast<std::ptrdiff_t>(r) * out;
    for (int o = 0; o < out; ++o) {
      double g = dzr[o];
      if (g == 0.0) continue;
      db[o] += g;
      double* dwo = dw + static_cast<std::ptrdiff_t>(o) * in;
#pragma omp simd
      for (int i = 0; i < in; ++i) dwo[i] += g * xr[i];
    }
    if (dx != nullptr) {
      double* dxr = dx + static_cast<std::ptrdiff_t>(r) * in;
      for (int o = 0; o < out; ++o) {
        double g = dzr[o];
        if (g == 0.0) continue;
        const double* wo = w + static_cast<std::ptrdiff_t>(o) * in;
#pragma omp simd
        for (int i = 0; i < in; ++i) dxr[i] += g * wo[i];
      }
    }
  }
}

// Plain feed-forward net: tanh hidden layers, linear output.
class Mlp {
 public:
  explicit Mlp(std::vector<int> sizes) : sizes_(std::move(sizes)) {
    if (sizes_.size() < 2) throw StructureError("Mlp needs at least two sizes");
    int total = 0;
    offsets_.clear();
    for (std::size_t l = 0; l + 1 < sizes_.size(); ++l) {
      offsets_.push_back(total);
      total += sizes_[l] * sizes_[l + 1] + sizes_[l + 1];
    }
    params_.assign(static_cast<std::size_t>(total), 0.0);
  }

  const std::vector<int>& sizes() const { return sizes_; }
  int input_dim() const { return sizes_.front(); }
  int output_dim() const { return sizes_.back(); }
  int n_params() const { return static_cast<int>(params_.size()); }
  std::vector<double>& params() { return params_; }
  const std::vector<double>& params() const { return params_; }

  void init(Rng& rng) {
    for (std::size_t l = 0; l + 1 < sizes_.size(); ++l) {
      int in = sizes_[l], out = sizes_[l + 1];
      double bound = 1.0 / std::sqrt(static_cast<double>(in));
      double* w = weight(l);
      for (int i = 0; i < in * out; ++i) w[i] = rng.uniform(-bound, bound);
      double* b = bias(l);
      for (int o = 0; o < out; ++o) b[o] = 0.0;
    }
  }

  struct Workspace {
    std::vector<std::vector<double>> act;  // act[0] = input, act[l+1] = layer l output
    int rows = 0;
  };

  void forward(const double* x, int rows, double* y, Workspace& ws) const {
    const std::size_t n_layers = sizes_.size() - 1;
    ws.rows = rows;
    ws.act.resize(n_layers + 1);
    ws.act[0].assign(x, x + static_cast<std::ptrdiff_t>(rows) * sizes_[0]);
    for (std::size_t l = 0; l < n_layers; ++l) {
      int in = sizes_[l], out = sizes_[l + 1];
      ws.act[l + 1].resize(static_cast<std::size_t>(rows) * out);
      dense_forward(ws.act[l].data(), rows, in, out, weight(l), bias(l),
                    ws.act[l + 1].data());
      if (l + 1 < n_layers)
        for (double& v : ws.act[l + 1]) v = std::tanh(v);
    }
    const auto& top = ws.act[n_layers];
    std::copy(top.begin(), top.end(), y);
  }

  // dy: rows × output_dim. Accumulates into grad (n_params); dx optional.
  void backward(const Workspace& ws, const double* dy, double* grad,
                double* dx) const {
    const std::size_t n_layers = sizes_.size() - 1;
    int rows = ws.rows;
    std::vector<double> delta(dy, dy + static_cast<std::ptrdiff_t>(rows) * sizes_.back());
    std::vector<double> prev;
    for (std::size_t l = n_layers; l-- > 0;) {
      int in = sizes_[l], out = sizes_[l + 1];
      if (l + 1 < n_layers) {
        // delta currently holds dL/d(post-activation); convert through tanh.
        const auto& h = ws.act[l + 1];
        for (std::size_t i = 0; i < delta.size(); ++i)
          delta[i] *= 1.0 - h[i] * h[i];
      }
      bool need_dx = (l > 0) || (dx != nullptr);
      prev.assign(static_cast<std::size_t>(rows) * in, 0.0);
      dense_backward(ws.act[l].data(), rows, in, out, weight(l), delta.data(),
                     grad + offsets_[l], grad + offsets_[l] + in * out,
                     need_dx ? prev.data() : nullptr);
      delta.swap(prev);
    }
    if (dx != nullptr)
      for (std::size_t i = 0; i < delta.size(); ++i) dx[i] += delta[i];
  }

 private:
  double* weight(std::size_t l) { return params_.data() + offsets_[l]; }
  const double* weight(std::size_t l) const { return params_.data() + offsets_[l]; }
  double* bias(std::size_t l) {
    return params_.data() + offsets_[l] + sizes_[l] * sizes_[l + 1];
  }
  const double* bias(std::size_t l) const {
    return params_.data() + offsets_[l] + sizes_[l] * sizes_[l + 1];
  }

  std::vector<int> sizes_;
  std::vector<int> offsets_;
  std::vector<double> params_;
};

}  // namespace hacsurv::nn
