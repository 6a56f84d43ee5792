#pragma once

#include <cmath>
#include <deque>
#include <string>
#include <vector>

#include "ssq/autodiff.hpp"
#include "ssq/errors.hpp"
#include "ssq/tensor.hpp"

namespace ssq::ad {

// Named trainable tensor plus its optimizer state. `no_decay` marks the
// parameter groups excluded from decoupled weight decay (embeddings,
// normalization gains/biases, bias vectors, and state-space parameters).
template <typename Real>
struct Param {
  std::string name;
  Tensor<Real> value;
  bool no_decay = false;
  Tensor<Real> m, v;  // AdamW moments, lazily sized
  Var var = -1;       // binding on the current tape, -1 when unbound
};

template <typename Real>
struct ParamStore {
  std::deque<Param<Real>> items;

  Param<Real>& add(std::string name, Tensor<Real> value, bool no_decay = false) {
    items.push_back(Param<Real>{std::move(name), std::move(value), no_decay, {}, {}, -1});
    return items.back();
  }

  Param<Real>* find(const std::string& name) {
    for (auto& p : items)
      if (p.name == name) return &p;
    return nullptr;
  }

  // Bind every parameter as a leaf on `tape`; bindings stay valid until the
  // next bind_all call.
  void bind_all(Tape<Real>& tape) {
    for (auto& p : items) p.var = tape.param(p.value);
  }

  int64_t total_size() const {
    int64_t n = 0;
    for (const auto& p : items) n += p.value.numel();
    return n;
  }
};

// Warmup then exponential decay:
//   lr(t) = peak * min((t+1)/warmup, exp(-gamma * (t+1-warmup))).
// Desk-scale defaults; the full-scale recipe uses warmup=40000, peak=0.025.
struct LrSchedule {
  double peak = 1e-3;
  int warmup = 500;
  double gamma = 1e-4;

  double at(int64_t step) const {
    const double t = static_cast<double>(step + 1);
    const double w = static_cast<double>(std::max(warmup, 1));
    return peak * std::min(t / w, std::exp(-gamma * (t - w)));
  }
};

struct AdamWConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
};

// One decoupled-weight-decay Adam step over the whole store. `grads` is
// aligned with store.items (one tensor per parameter, zeros allowed).
template <typename Real>
void adamw_step(ParamStore<Real>& store, const std::vector<Tensor<Real>>& grads, int64_t step,
                double lr, const AdamWConfig& cfg) {
  if (grads.size() != store.items.size())
    throw ShapeMismatch("adamw_step: gradient count mismatch");
  const double b1 = cfg.beta1, b2 = cfg.beta2;
  const double bc1 = 1.0 - std::pow(b1, static_cast<double>(step + 1));
  const double bc2 = 1.0 - std::pow(b2, static_cast<double>(step + 1));
  size_t idx = 0;
  for (auto& p : store.items) {
    const Tensor<Real>& g = grads[idx++];
    if (!g.same_shape(p.value)) throw ShapeMismatch("adamw_step: gradient shape mismatch");
    for (const Real gv : g.data)
      if (!std::isfinite(static_cast<double>(gv)))
        throw NonFiniteGradient("adamw_step: non-finite gradient in " + p.name);
    if (p.m.data.empty()) {
      p.m = Tensor<Real>::zeros(p.value.shape);
      p.v = Tensor<Real>::zeros(p.value.shape);
    }
    const double wd = p.no_decay ? 0.0 : cfg.weight_decay;
    for (int64_t i = 0; i < p.value.numel(); ++i) {
      const double gi = static_cast<double>(g[i]);
      const double m = b1 * static_cast<double>(p.m[i]) + (1.0 - b1) * gi;
      const double v = b2 * static_cast<double>(p.v[i]) + (1.0 - b2) * gi * gi;
      p.m[i] = static_cast<Real>(m);
      p.v[i] = static_cast<Real>(v);
      const double mhat = m / bc1;
      const double vhat = v / bc2;
      const double upd = mhat / (std::sqrt(vhat) + cfg.eps) + wd * static_cast<double>(p.value[i]);
      p.value[i] = static_cast<Real>(static_cast<double>(p.value[i]) - lr * upd);
    }
  }
}

// Convenience: pull gradients for every bound parameter off the tape.
template <typename Real>
std::vector<Tensor<Real>> collect_grads(const Tape<Real>& tape, const ParamStore<Real>& store) {
  std::vector<Tensor<Real>> grads;
  grads.reserve(store.items.size());
  for (const auto& p : store.items) {
    if (p.var < 0) throw Error("collect_grads: parameter '" + p.name + "' is unbound");
    grads.push_back(tape.grad(p.var));
  }
  return grads;
}

}  // namespace ssq::ad
