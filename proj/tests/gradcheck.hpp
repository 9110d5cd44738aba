#pragma once

#include <cmath>
#include <functional>

#include "mcl3d/nn.hpp"

namespace testutil {

using mcl3d::Tensor;

// Scalar objective: weighted sum of module output, with fixed random weights.
struct Probe {
  Tensor w;
  explicit Probe(const Tensor& y, mcl3d::Rng& rng) : w(y.shape) {
    for (auto& v : w.data) v = static_cast<float>(rng.uniform(-1, 1));
  }
  double loss(const Tensor& y) const {
    double s = 0;
    for (int64_t i = 0; i < y.numel(); ++i) s += static_cast<double>(y[i]) * w[i];
    return s;
  }
  Tensor dy() const { return w; }
};

// Scaled error with an absolute floor so fp32 finite-difference noise on
// near-zero gradients does not dominate.
inline double rel_err(double a, double b) {
  return std::abs(a - b) / (std::max(std::abs(a), std::abs(b)) + 0.05);
}

// Central-difference check of dL/dx and dL/dtheta for a module.
inline double max_grad_err(mcl3d::nn::Module& m, Tensor x, mcl3d::Rng& rng, double h = 1e-3) {
  Tensor y = m.forward(x);
  Probe probe(y, rng);
  mcl3d::nn::ParamRefs ps;
  m.collect(ps);
  mcl3d::nn::zero_grads(ps);
  Tensor dx = m.backward(probe.dy());
  double worst = 0;

  auto check_slot = [&](float* slot, double analytic) {
    float orig = *slot;
    *slot = orig + static_cast<float>(h);
    double lp = probe.loss(m.forward(x));
    *slot = orig - static_cast<float>(h);
    double lm = probe.loss(m.forward(x));
    *slot = orig;
    double num = (lp - lm) / (2 * h);
    worst = std::max(worst, rel_err(analytic, num));
  };

  // Sample a subset of coordinates to keep runtime bounded.
  auto sample = [&](int64_t n) { return std::min<int64_t>(n, 25); };
  for (int64_t j = 0, n = sample(x.numel()); j < n; ++j) {
    int64_t i = rng.uniform_int(x.numel());
    check_slot(&x.data[static_cast<size_t>(i)], dx[i]);
  }
  for (auto* p : ps)
    for (int64_t j = 0, n = sample(p->value.numel()); j < n; ++j) {
      int64_t i = rng.uniform_int(p->value.numel());
      check_slot(&p->value.data[static_cast<size_t>(i)], p->grad[i]);
    }
  m.forward(x);  // restore cache to the unperturbed input
  return worst;
}

inline Tensor random_tensor(std::vector<int64_t> shape, mcl3d::Rng& rng, double scale = 1.0) {
  Tensor t(std::move(shape));
  for (auto& v : t.data) v = static_cast<float>(rng.uniform(-scale, scale));
  return t;
}

}  // namespace testutil
