#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "ssq/errors.hpp"
#include "ssq/tensor.hpp"

namespace ssq::ad {

using Var = int32_t;

// Define-by-run reverse-mode tape over dense real tensors. The tape is
// rebuilt every iteration; backward traverses the recording order in exact
// reverse. One tape per training thread; tapes are never shared.
template <typename Real>
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  // ---- leaves ----

  Var leaf(Tensor<Real> value) { return push(std::move(value), false, {}, nullptr); }

  Var param(const Tensor<Real>& value) {
    Tensor<Real> v = value;
    v.requires_grad = true;
    return push(std::move(v), true, {}, nullptr);
  }

  const Tensor<Real>& value(Var v) const { return vals_[check(v)]; }
  int64_t size() const { return static_cast<int64_t>(vals_.size()); }

  // Gradient of the last backward() w.r.t. var v. Parameters that did not
  // participate in the loss get zeros.
  Tensor<Real> grad(Var v) const {
    const size_t i = check(v);
    if (grads_[i].data.empty()) return Tensor<Real>::zeros(vals_[i].shape);
    return grads_[i];
  }

  // ---- elementwise ----

  Var add(Var a, Var b) {
    same_shape(a, b, "add");
    Tensor<Real> out = vals_[check(a)];
    const auto& tb = vals_[check(b)];
    for (int64_t i = 0; i < out.numel(); ++i) out[i] += tb[i];
    return push(std::move(out), needs(a) || needs(b), {a, b}, [this, a, b](const Tensor<Real>& g) {
      accum(a, g);
      accum(b, g);
    });
  }

  Var sub(Var a, Var b) {
    same_shape(a, b, "sub");
    Tensor<Real> out = vals_[check(a)];
    const auto& tb = vals_[check(b)];
    for (int64_t i = 0; i < out.numel(); ++i) out[i] -= tb[i];
    return push(std::move(out), needs(a) || needs(b), {a, b}, [this, a, b](const Tensor<Real>& g) {
      accum(a, g);
      accum_scaled(b, g, Real(-1));
    });
  }

  Var mul(Var a, Var b) {
    same_shape(a, b, "mul");
    Tensor<Real> out = vals_[check(a)];
    const auto& tb = vals_[check(b)];
    for (int64_t i = 0; i < out.numel(); ++i) out[i] *= tb[i];
    return push(std::move(out), needs(a) || needs(b), {a, b}, [this, a, b](const Tensor<Real>& g) {
      if (needs(a)) {
        Tensor<Real> ga = g;
        const auto& vb = vals_[b];
        for (int64_t i = 0; i < ga.numel(); ++i) ga[i] *= vb[i];
        accum_move(a, std::move(ga));
      }
      if (needs(b)) {
        Tensor<Real> gb = g;
        const auto& va = vals_[a];
        for (int64_t i = 0; i < gb.numel(); ++i) gb[i] *= va[i];
        accum_move(b, std::move(gb));
      }
    });
  }

  Var scale(Var a, Real c) {
    Tensor<Real> out = vals_[check(a)];
    for (auto& v : out.data) v *= c;
    return push(std::move(out), needs(a), {a},
                [this, a, c](const Tensor<Real>& g) { accum_scaled(a, g, c); });
  }

  Var neg(Var a) { return scale(a, Real(-1)); }

  // Multiply every element by a scalar variable s (shape {1}).
  Var scale_by(Var a, Var s) {
    if (vals_[check(s)].numel() != 1) throw ShapeMismatch("scale_by: s must be a scalar");
    const Real sv = vals_[s][0];
    Tensor<Real> out = vals_[check(a)];
    for (auto& v : out.data) v *= sv;
    return push(std::move(out), needs(a) || needs(s), {a, s},
                [this, a, s, sv](const Tensor<Real>& g) {
                  accum_scaled(a, g, sv);
                  if (needs(s)) {
                    double acc = 0.0;
                    const auto& va = vals_[a];
                    for (int64_t i = 0; i < g.numel(); ++i)
                      acc += static_cast<double>(g[i]) * static_cast<double>(va[i]);
                    accum_move(s, Tensor<Real>::scalar(static_cast<Real>(acc)));
                  }
                });
  }

  Var exp(Var a) {
    Tensor<Real> out = vals_[check(a)];
    for (auto& v : out.data) v = std::exp(v);
    Var o = push(std::move(out), needs(a), {a}, nullptr);
    set_backward(o, [this, a, o](const Tensor<Real>& g) {
      Tensor<Real> ga = g;
      const auto& y = vals_[o];
      for (int64_t i = 0; i < ga.numel(); ++i) ga[i] *= y[i];
      accum_move(a, std::move(ga));
    });
    return o;
  }

  Var sigmoid(Var a) {
    Tensor<Real> out = vals_[check(a)];
    for (auto& v : out.data) v = stable_sigmoid(v);
    Var o = push(std::move(out), needs(a), {a}, nullptr);
    set_backward(o, [this, a, o](const Tensor<Real>& g) {
      Tensor<Real> ga = g;
      const auto& y = vals_[o];
      for (int64_t i = 0; i < ga.numel(); ++i) ga[i] *= y[i] * (Real(1) - y[i]);
      accum_move(a, std::move(ga));
    });
    return o;
  }

  Var relu(Var a) {
    Tensor<Real> out = vals_[check(a)];
    for (auto& v : out.data) v = v > Real(0) ? v : Real(0);
    return push(std::move(out), needs(a), {a}, [this, a](const Tensor<Real>& g) {
      Tensor<Real> ga = g;
      const auto& x = vals_[a];
      for (int64_t i = 0; i < ga.numel(); ++i)
        if (x[i] <= Real(0)) ga[i] = Real(0);
      accum_move(a, std::move(ga));
    });
  }

  // ---- matrix ops ----

  Var matmul(Var a, Var b) {
    const auto& ta = vals_[check(a)];
    const auto& tb = vals_[check(b)];
    if (ta.rank() != 2 || tb.rank() != 2 || ta.cols() != tb.rows())
      throw ShapeMismatch("matmul: incompatible shapes " + shape_str(ta.shape) + " x " +
                          shape_str(tb.shape));
    const int64_t m = ta.rows(), k = ta.cols(), n = tb.cols();
    Tensor<Real> out({m, n});
    mm(ta.data.data(), tb.data.data(), out.data.data(), m, k, n);
    return push(std::move(out), needs(a) || needs(b),
                {a, b}, [this, a, b, m, k, n](const Tensor<Real>& g) {
                  const auto& va = vals_[a];
                  const auto& vb = vals_[b];
                  if (needs(a)) {
                    // gA = G B^T
                    Tensor<Real> ga({m, k});
                    for (int64_t i = 0; i < m; ++i)
                      for (int64_t p = 0; p < k; ++p) {
                        double acc = 0.0;
                        for (int64_t j = 0; j < n; ++j)
                          acc += static_cast<double>(g.at(i, j)) * static_cast<double>(vb.at(p, j));
                        ga.at(i, p) = static_cast<Real>(acc);
                      }
                    accum_move(a, std::move(ga));
                  }
                  if (needs(b)) {
                    // gB = A^T G
                    Tensor<Real> gb({k, n});
                    for (int64_t i = 0; i < m; ++i)
                      for (int64_t p = 0; p < k; ++p) {
                        const Real av = va.at(i, p);
                        if (av == Real(0)) continue;
                        for (int64_t j = 0; j < n; ++j) gb.at(p, j) += av * g.at(i, j);
                      }
                    accum_move(b, std::move(gb));
                  }
                });
  }

  Var transpose(Var a) {
    const auto& ta = vals_[check(a)];
    if (ta.rank() != 2) throw ShapeMismatch("transpose: rank-2 tensor expected");
    const int64_t m = ta.rows(), n = ta.cols();
    Tensor<Real> out({n, m});
    for (int64_t i = 0; i < m; ++i)
      for (int64_t j = 0; j < n; ++j) out.at(j, i) = ta.at(i, j);
    return push(std::move(out), needs(a), {a}, [this, a, m, n](const Tensor<Real>& g) {
      Tensor<Real> ga({m, n});
      for (int64_t i = 0; i < m; ++i)
        for (int64_t j = 0; j < n; ++j) ga.at(i, j) = g.at(j, i);
      accum_move(a, std::move(ga));
    });
  }

  Var reshape(Var a, std::vector<int64_t> new_shape) {
    const auto& ta = vals_[check(a)];
    if (Tensor<Real>::numel_of(new_shape) != ta.numel())
      throw ShapeMismatch("reshape: element count mismatch");
    Tensor<Real> out(new_shape, ta.data);
    auto old_shape = ta.shape;
    return push(std::move(out), needs(a), {a}, [this, a, old_shape](const Tensor<Real>& g) {
      accum_move(a, Tensor<Real>(old_shape, g.data));
    });
  }

  // Row-wise softmax; masked inputs are handled by adding a large negative
  // constant beforehand so masked entries underflow to exactly zero.
  Var softmax_rows(Var a) {
    const auto& ta = vals_[check(a)];
    if (ta.rank() != 2) throw ShapeMismatch("softmax_rows: rank-2 tensor expected");
    const int64_t m = ta.rows(), n = ta.cols();
    Tensor<Real> out({m, n});
    for (int64_t i = 0; i < m; ++i) {
      Real mx = ta.at(i, 0);
      for (int64_t j = 1; j < n; ++j) mx = std::max(mx, ta.at(i, j));
      double z = 0.0;
      for (int64_t j = 0; j < n; ++j) {
        const Real e = std::exp(ta.at(i, j) - mx);
        out.at(i, j) = e;
        z += static_cast<double>(e);
      }
      for (int64_t j = 0; j < n; ++j) out.at(i, j) = static_cast<Real>(out.at(i, j) / z);
    }
    Var o = push(std::move(out), needs(a), {a}, nullptr);
    set_backward(o, [this, a, o, m, n](const Tensor<Real>& g) {
      const auto& y = vals_[o];
      Tensor<Real> ga({m, n});
      for (int64_t i = 0; i < m; ++i) {
        double dot = 0.0;
        for (int64_t j = 0; j < n; ++j)
          dot += static_cast<double>(g.at(i, j)) * static_cast<double>(y.at(i, j));
        for (int64_t j = 0; j < n; ++j)
          ga.at(i, j) = y.at(i, j) * static_cast<Real>(static_cast<double>(g.at(i, j)) - dot);
      }
      accum_move(a, std::move(ga));
    });
    return o;
  }

  // Row-wise layer normalization (zero mean, unit variance), no affine part;
  // compose with mul_rowvec/add_rowvec for gain and bias.
  Var layer_norm_rows(Var a, Real eps = Real(1e-5)) {
    const auto& ta = vals_[check(a)];
    if (ta.rank() != 2) throw ShapeMismatch("layer_norm_rows: rank-2 tensor expected");
    const int64_t m = ta.rows(), n = ta.cols();
    Tensor<Real> out({m, n});
    std::vector<Real> inv_sigma(static_cast<size_t>(m));
    for (int64_t i = 0; i < m; ++i) {
      double mu = 0.0;
      for (int64_t j = 0; j < n; ++j) mu += static_cast<double>(ta.at(i, j));
      mu /= static_cast<double>(n);
      double var = 0.0;
      for (int64_t j = 0; j < n; ++j) {
        const double d = static_cast<double>(ta.at(i, j)) - mu;
        var += d * d;
      }
      var /= static_cast<double>(n);
      const double is = 1.0 / std::sqrt(var + static_cast<double>(eps));
      inv_sigma[static_cast<size_t>(i)] = static_cast<Real>(is);
      for (int64_t j = 0; j < n; ++j)
        out.at(i, j) = static_cast<Real>((static_cast<double>(ta.at(i, j)) - mu) * is);
    }
    Var o = push(std::move(out), needs(a), {a}, nullptr);
    set_backward(o, [this, a, o, m, n, inv_sigma](const Tensor<Real>& g) {
      const auto& y = vals_[o];
      Tensor<Real> ga({m, n});
      for (int64_t i = 0; i < m; ++i) {
        double gmean = 0.0, gymean = 0.0;
        for (int64_t j = 0; j < n; ++j) {
          gmean += static_cast<double>(g.at(i, j));
          gymean += static_cast<double>(g.at(i, j)) * static_cast<double>(y.at(i, j));
        }
        gmean /= static_cast<double>(n);
        gymean /= static_cast<double>(n);
        const double is = static_cast<double>(inv_sigma[static_cast<size_t>(i)]);
        for (int64_t j = 0; j < n; ++j)
          ga.at(i, j) = static_cast<Real>(
              is * (static_cast<double>(g.at(i, j)) - gmean -
                    static_cast<double>(y.at(i, j)) * gymean));
      }
      accum_move(a, std::move(ga));
    });
    return o;
  }

  Var gather_rows(Var table, std::vector<int> ids) {
    const auto& t = vals_[check(table)];
    if (t.rank() != 2) throw ShapeMismatch("gather_rows: rank-2 table expected");
    const int64_t d = t.cols();
    Tensor<Real> out({static_cast<int64_t>(ids.size()), d});
    for (size_t i = 0; i < ids.size(); ++i) {
      if (ids[i] < 0 || ids[i] >= t.rows()) throw ShapeMismatch("gather_rows: id out of range");
      for (int64_t j = 0; j < d; ++j) out.at(static_cast<int64_t>(i), j) = t.at(ids[i], j);
    }
    auto tshape = t.shape;
    return push(std::move(out), needs(table), {table},
                [this, table, ids = std::move(ids), tshape, d](const Tensor<Real>& g) {
                  Tensor<Real> gt(tshape);
                  for (size_t i = 0; i < ids.size(); ++i)
                    for (int64_t j = 0; j < d; ++j)
                      gt.at(ids[i], j) += g.at(static_cast<int64_t>(i), j);
                  accum_move(table, std::move(gt));
                });
  }

  Var slice_rows(Var a, int64_t r0, int64_t r1) {
    const auto& ta = vals_[check(a)];
    if (ta.rank() != 2 || r0 < 0 || r1 > ta.rows() || r0 >= r1)
      throw ShapeMismatch("slice_rows: bad range");
    const int64_t n = ta.cols();
    Tensor<Real> out({r1 - r0, n});
    std::copy(ta.data.begin() + r0 * n, ta.data.begin() + r1 * n, out.data.begin());
    auto ashape = ta.shape;
    return push(std::move(out), needs(a), {a}, [this, a, r0, n, ashape](const Tensor<Real>& g) {
      Tensor<Real> ga(ashape);
      std::copy(g.data.begin(), g.data.end(), ga.data.begin() + r0 * n);
      accum_move(a, std::move(ga));
    });
  }

  Var slice_cols(Var a, int64_t c0, int64_t c1) {
    const auto& ta = vals_[check(a)];
    if (ta.rank() != 2 || c0 < 0 || c1 > ta.cols() || c0 >= c1)
      throw ShapeMismatch("slice_cols: bad range");
    const int64_t m = ta.rows(), n = ta.cols();
    Tensor<Real> out({m, c1 - c0});
    for (int64_t i = 0; i < m; ++i)
      for (int64_t j = c0; j < c1; ++j) out.at(i, j - c0) = ta.at(i, j);
    auto ashape = ta.shape;
    return push(std::move(out), needs(a), {a},
                [this, a, c0, c1, m, n, ashape](const Tensor<Real>& g) {
                  (void)n;
                  Tensor<Real> ga(ashape);
                  for (int64_t i = 0; i < m; ++i)
                    for (int64_t j = c0; j < c1; ++j) ga.at(i, j) = g.at(i, j - c0);
                  accum_move(a, std::move(ga));
                });
  }

  Var concat_rows(const std::vector<Var>& parts) {
    if (parts.empty()) throw ShapeMismatch("concat_rows: no inputs");
    const int64_t n = vals_[check(parts[0])].cols();
    int64_t rows = 0;
    bool ng = false;
    for (Var p : parts) {
      const auto& t = vals_[check(p)];
      if (t.rank() != 2 || t.cols() != n) throw ShapeMismatch("concat_rows: column mismatch");
      rows += t.rows();
      ng = ng || needs(p);
    }
    Tensor<Real> out({rows, n});
    int64_t r = 0;
    for (Var p : parts) {
      const auto& t = vals_[p];
      std::copy(t.data.begin(), t.data.end(), out.data.begin() + r * n);
      r += t.rows();
    }
    return push(std::move(out), ng, parts, [this, parts, n](const Tensor<Real>& g) {
      int64_t r = 0;
      for (Var p : parts) {
        const int64_t pr = vals_[p].rows();
        if (needs(p)) {
          Tensor<Real> gp({pr, n});
          std::copy(g.data.begin() + r * n, g.data.begin() + (r + pr) * n, gp.data.begin());
          accum_move(p, std::move(gp));
        }
        r += pr;
      }
    });
  }

  Var concat_cols(const std::vector<Var>& parts) {
    std::vector<Var> transposed;
    transposed.reserve(parts.size());
    for (Var p : parts) transposed.push_back(transpose(p));
    return transpose(concat_rows(transposed));
  }

  // Stack K scalar vars into a length-K vector.
  Var stack_scalars(const std::vector<Var>& parts) {
    if (parts.empty()) throw ShapeMismatch("stack_scalars: no inputs");
    Tensor<Real> out({static_cast<int64_t>(parts.size())});
    bool ng = false;
    for (size_t i = 0; i < parts.size(); ++i) {
      const auto& t = vals_[check(parts[i])];
      if (t.numel() != 1) throw ShapeMismatch("stack_scalars: inputs must be scalars");
      out[static_cast<int64_t>(i)] = t[0];
      ng = ng || needs(parts[i]);
    }
    return push(std::move(out), ng, parts, [this, parts](const Tensor<Real>& g) {
      for (size_t i = 0; i < parts.size(); ++i)
        if (needs(parts[i]))
          accum_move(parts[i], Tensor<Real>::scalar(g[static_cast<int64_t>(i)]));
    });
  }

  Var sum(Var a) {
    const auto& ta = vals_[check(a)];
    double acc = 0.0;
    for (const Real v : ta.data) acc += static_cast<double>(v);
    auto ashape = ta.shape;
    return push(Tensor<Real>::scalar(static_cast<Real>(acc)), needs(a), {a},
                [this, a, ashape](const Tensor<Real>& g) {
                  accum_move(a, Tensor<Real>::full(ashape, g[0]));
                });
  }

  Var mean(Var a) {
    const auto& ta = vals_[check(a)];
    const int64_t n = ta.numel();
    return scale(sum(a), Real(1) / static_cast<Real>(n));
  }

  Var add_rowvec(Var m, Var v) {
    const auto& tm = vals_[check(m)];
    const auto& tv = vals_[check(v)];
    if (tm.rank() != 2 || tv.numel() != tm.cols())
      throw ShapeMismatch("add_rowvec: vector length must equal columns");
    Tensor<Real> out = tm;
    for (int64_t i = 0; i < tm.rows(); ++i)
      for (int64_t j = 0; j < tm.cols(); ++j) out.at(i, j) += tv[j];
    return push(std::move(out), needs(m) || needs(v), {m, v}, [this, m, v](const Tensor<Real>& g) {
      accum(m, g);
      if (needs(v)) {
        Tensor<Real> gv(vals_[v].shape);
        for (int64_t i = 0; i < g.rows(); ++i)
          for (int64_t j = 0; j < g.cols(); ++j) gv[j] += g.at(i, j);
        accum_move(v, std::move(gv));
      }
    });
  }

  Var add_colvec(Var m, Var v) {
    const auto& tm = vals_[check(m)];
    const auto& tv = vals_[check(v)];
    if (tm.rank() != 2 || tv.numel() != tm.rows())
      throw ShapeMismatch("add_colvec: vector length must equal rows");
    Tensor<Real> out = tm;
    for (int64_t i = 0; i < tm.rows(); ++i)
      for (int64_t j = 0; j < tm.cols(); ++j) out.at(i, j) += tv[i];
    return push(std::move(out), needs(m) || needs(v), {m, v}, [this, m, v](const Tensor<Real>& g) {
      accum(m, g);
      if (needs(v)) {
        Tensor<Real> gv(vals_[v].shape);
        for (int64_t i = 0; i < g.rows(); ++i)
          for (int64_t j = 0; j < g.cols(); ++j) gv[i] += g.at(i, j);
        accum_move(v, std::move(gv));
      }
    });
  }

  Var mul_rowvec(Var m, Var v) {
    const auto& tm = vals_[check(m)];
    const auto& tv = vals_[check(v)];
    if (tm.rank() != 2 || tv.numel() != tm.cols())
      throw ShapeMismatch("mul_rowvec: vector length must equal columns");
    Tensor<Real> out = tm;
    for (int64_t i = 0; i < tm.rows(); ++i)
      for (int64_t j = 0; j < tm.cols(); ++j) out.at(i, j) *= tv[j];
    return push(std::move(out), needs(m) || needs(v), {m, v}, [this, m, v](const Tensor<Real>& g) {
      const auto& vm = vals_[m];
      const auto& vv = vals_[v];
      if (needs(m)) {
        Tensor<Real> gm(vm.shape);
        for (int64_t i = 0; i < g.rows(); ++i)
          for (int64_t j = 0; j < g.cols(); ++j) gm.at(i, j) = g.at(i, j) * vv[j];
        accum_move(m, std::move(gm));
      }
      if (needs(v)) {
        Tensor<Real> gv(vv.shape);
        for (int64_t i = 0; i < g.rows(); ++i)
          for (int64_t j = 0; j < g.cols(); ++j) gv[j] += g.at(i, j) * vm.at(i, j);
        accum_move(v, std::move(gv));
      }
    });
  }

  Var mul_colvec(Var m, Var v) {
    const auto& tm = vals_[check(m)];
    const auto& tv = vals_[check(v)];
    if (tm.rank() != 2 || tv.numel() != tm.rows())
      throw ShapeMismatch("mul_colvec: vector length must equal rows");
    Tensor<Real> out = tm;
    for (int64_t i = 0; i < tm.rows(); ++i)
      for (int64_t j = 0; j < tm.cols(); ++j) out.at(i, j) *= tv[i];
    return push(std::move(out), needs(m) || needs(v), {m, v}, [this, m, v](const Tensor<Real>& g) {
      const auto& vm = vals_[m];
      const auto& vv = vals_[v];
      if (needs(m)) {
        Tensor<Real> gm(vm.shape);
        for (int64_t i = 0; i < g.rows(); ++i)
          for (int64_t j = 0; j < g.cols(); ++j) gm.at(i, j) = g.at(i, j) * vv[i];
        accum_move(m, std::move(gm));
      }
      if (needs(v)) {
        Tensor<Real> gv(vv.shape);
        for (int64_t i = 0; i < g.rows(); ++i)
          for (int64_t j = 0; j < g.cols(); ++j) gv[i] += g.at(i, j) * vm.at(i, j);
        accum_move(v, std::move(gv));
      }
    });
  }

  Var diag(Var v) {
    const auto& tv = vals_[check(v)];
    if (tv.rank() != 1) throw ShapeMismatch("diag: rank-1 tensor expected");
    const int64_t n = tv.numel();
    Tensor<Real> out({n, n});
    for (int64_t i = 0; i < n; ++i) out.at(i, i) = tv[i];
    return push(std::move(out), needs(v), {v}, [this, v, n](const Tensor<Real>& g) {
      Tensor<Real> gv({n});
      for (int64_t i = 0; i < n; ++i) gv[i] = g.at(i, i);
      accum_move(v, std::move(gv));
    });
  }

  // Real 2n x 2n embedding [[X, -Y], [Y, X]] of the complex matrix X + iY.
  // Products/inverses of embeddings are embeddings of the complex results.
  Var complex_embed(Var re, Var im) {
    const auto& x = vals_[check(re)];
    const auto& y = vals_[check(im)];
    if (x.rank() != 2 || !x.same_shape(y)) throw ShapeMismatch("complex_embed: shape mismatch");
    const int64_t m = x.rows(), n = x.cols();
    Tensor<Real> out({2 * m, 2 * n});
    for (int64_t i = 0; i < m; ++i)
      for (int64_t j = 0; j < n; ++j) {
        out.at(i, j) = x.at(i, j);
        out.at(i, n + j) = -y.at(i, j);
        out.at(m + i, j) = y.at(i, j);
        out.at(m + i, n + j) = x.at(i, j);
      }
    return push(std::move(out), needs(re) || needs(im), {re, im},
                [this, re, im, m, n](const Tensor<Real>& g) {
                  if (needs(re)) {
                    Tensor<Real> gx({m, n});
                    for (int64_t i = 0; i < m; ++i)
                      for (int64_t j = 0; j < n; ++j)
                        gx.at(i, j) = g.at(i, j) + g.at(m + i, n + j);
                    accum_move(re, std::move(gx));
                  }
                  if (needs(im)) {
                    Tensor<Real> gy({m, n});
                    for (int64_t i = 0; i < m; ++i)
                      for (int64_t j = 0; j < n; ++j)
                        gy.at(i, j) = g.at(m + i, j) - g.at(i, n + j);
                    accum_move(im, std::move(gy));
                  }
                });
  }

  // X = A^{-1} B via partially pivoted LU in double precision.
  Var solve(Var a, Var b) {
    const auto& ta = vals_[check(a)];
    const auto& tb = vals_[check(b)];
    if (ta.rank() != 2 || ta.rows() != ta.cols() || tb.rank() != 2 || tb.rows() != ta.rows())
      throw ShapeMismatch("solve: need square A and conforming B");
    const int64_t m = ta.rows(), k = tb.cols();
    Eigen::MatrixXd A = to_eigen(ta);
    Eigen::MatrixXd B = to_eigen(tb);
    Eigen::PartialPivLU<Eigen::MatrixXd> lu(A);
    Eigen::MatrixXd X = lu.solve(B);
    Tensor<Real> out({m, k});
    from_eigen(X, out);
    Var o = push(std::move(out), needs(a) || needs(b), {a, b}, nullptr);
    set_backward(o, [this, a, b, o, m, k](const Tensor<Real>& g) {
      Eigen::MatrixXd A = to_eigen(vals_[a]);
      Eigen::MatrixXd G = to_eigen(g);
      Eigen::MatrixXd GB = A.transpose().partialPivLu().solve(G);  // A^{-T} G
      if (needs(b)) {
        Tensor<Real> gb({m, k});
        from_eigen(GB, gb);
        accum_move(b, std::move(gb));
      }
      if (needs(a)) {
        Eigen::MatrixXd X = to_eigen(vals_[o]);
        Eigen::MatrixXd GA = -GB * X.transpose();
        Tensor<Real> ga({m, m});
        from_eigen(GA, ga);
        accum_move(a, std::move(ga));
      }
    });
    return o;
  }

  // Causal 1-D convolution: y[k] = sum_{j<=k} kernel[j] u[k-j].
  Var causal_conv(Var kernel, Var u) {
    const auto& tk = vals_[check(kernel)];
    const auto& tu = vals_[check(u)];
    if (tk.rank() != 1 || tu.rank() != 1 || tk.numel() != tu.numel())
      throw ShapeMismatch("causal_conv: kernel and input must be equal-length vectors");
    const int64_t L = tu.numel();
    Tensor<Real> out({L});
    for (int64_t k = 0; k < L; ++k) {
      double acc = 0.0;
      for (int64_t j = 0; j <= k; ++j)
        acc += static_cast<double>(tk[j]) * static_cast<double>(tu[k - j]);
      out[k] = static_cast<Real>(acc);
    }
    return push(std::move(out), needs(kernel) || needs(u), {kernel, u},
                [this, kernel, u, L](const Tensor<Real>& g) {
                  const auto& vk = vals_[kernel];
                  const auto& vu = vals_[u];
                  if (needs(kernel)) {
                    Tensor<Real> gk({L});
                    for (int64_t j = 0; j < L; ++j) {
                      double acc = 0.0;
                      for (int64_t k = j; k < L; ++k)
                        acc += static_cast<double>(g[k]) * static_cast<double>(vu[k - j]);
                      gk[j] = static_cast<Real>(acc);
                    }
                    accum_move(kernel, std::move(gk));
                  }
                  if (needs(u)) {
                    Tensor<Real> gu({L});
                    for (int64_t t = 0; t < L; ++t) {
                      double acc = 0.0;
                      for (int64_t k = t; k < L; ++k)
                        acc += static_cast<double>(g[k]) * static_cast<double>(vk[k - t]);
                      gu[t] = static_cast<Real>(acc);
                    }
                    accum_move(u, std::move(gu));
                  }
                });
  }

  // ---- losses ----

  // Mean token cross entropy over rows of `logits` (shape T x V).
  Var cross_entropy_mean(Var logits, std::vector<int> targets) {
    const auto& tl = vals_[check(logits)];
    if (tl.rank() != 2 || static_cast<int64_t>(targets.size()) != tl.rows())
      throw ShapeMismatch("cross_entropy_mean: one target per logits row required");
    const int64_t T = tl.rows(), V = tl.cols();
    // Stable log-softmax; keep the probabilities for the backward pass.
    Tensor<Real> probs({T, V});
    double loss = 0.0;
    for (int64_t i = 0; i < T; ++i) {
      if (targets[static_cast<size_t>(i)] < 0 || targets[static_cast<size_t>(i)] >= V)
        throw ShapeMismatch("cross_entropy_mean: target id out of range");
      Real mx = tl.at(i, 0);
      for (int64_t j = 1; j < V; ++j) mx = std::max(mx, tl.at(i, j));
      double z = 0.0;
      for (int64_t j = 0; j < V; ++j) {
        const double e = std::exp(static_cast<double>(tl.at(i, j) - mx));
        probs.at(i, j) = static_cast<Real>(e);
        z += e;
      }
      for (int64_t j = 0; j < V; ++j)
        probs.at(i, j) = static_cast<Real>(static_cast<double>(probs.at(i, j)) / z);
      loss += std::log(z) -
              static_cast<double>(tl.at(i, targets[static_cast<size_t>(i)]) - mx);
    }
    loss /= static_cast<double>(T);
    return push(Tensor<Real>::scalar(static_cast<Real>(loss)), needs(logits), {logits},
                [this, logits, targets = std::move(targets), probs = std::move(probs), T,
                 V](const Tensor<Real>& g) {
                  Tensor<Real> gl({T, V});
                  const Real s = g[0] / static_cast<Real>(T);
                  for (int64_t i = 0; i < T; ++i)
                    for (int64_t j = 0; j < V; ++j)
                      gl.at(i, j) =
                          s * (probs.at(i, j) -
                               (j == targets[static_cast<size_t>(i)] ? Real(1) : Real(0)));
                  accum_move(logits, std::move(gl));
                });
  }

  // Mean absolute error against a constant target.
  Var l1_mean(Var pred, Tensor<Real> target) {
    const auto& tp = vals_[check(pred)];
    if (!tp.same_shape(target)) throw ShapeMismatch("l1_mean: shape mismatch");
    const int64_t n = tp.numel();
    double loss = 0.0;
    for (int64_t i = 0; i < n; ++i)
      loss += std::abs(static_cast<double>(tp[i]) - static_cast<double>(target[i]));
    loss /= static_cast<double>(n);
    return push(Tensor<Real>::scalar(static_cast<Real>(loss)), needs(pred), {pred},
                [this, pred, target = std::move(target), n](const Tensor<Real>& g) {
                  const auto& vp = vals_[pred];
                  Tensor<Real> gp(vp.shape);
                  const Real s = g[0] / static_cast<Real>(n);
                  for (int64_t i = 0; i < n; ++i) {
                    const Real d = vp[i] - target[i];
                    gp[i] = d > Real(0) ? s : (d < Real(0) ? -s : Real(0));
                  }
                  accum_move(pred, std::move(gp));
                });
  }

  // Generic entry point keyed by op name; the typed members above do the
  // work. Unknown names are rejected.
  Var record(const std::string& op, const std::vector<Var>& inputs) {
    auto need = [&](size_t n) {
      if (inputs.size() != n) throw ShapeMismatch("record(" + op + "): wrong input count");
    };
    if (op == "add") { need(2); return add(inputs[0], inputs[1]); }
    if (op == "sub") { need(2); return sub(inputs[0], inputs[1]); }
    if (op == "mul") { need(2); return mul(inputs[0], inputs[1]); }
    if (op == "matmul") { need(2); return matmul(inputs[0], inputs[1]); }
    if (op == "transpose") { need(1); return transpose(inputs[0]); }
    if (op == "exp") { need(1); return exp(inputs[0]); }
    if (op == "sigmoid") { need(1); return sigmoid(inputs[0]); }
    if (op == "relu") { need(1); return relu(inputs[0]); }
    if (op == "softmax") { need(1); return softmax_rows(inputs[0]); }
    if (op == "layer_norm") { need(1); return layer_norm_rows(inputs[0]); }
    if (op == "sum") { need(1); return sum(inputs[0]); }
    if (op == "mean") { need(1); return mean(inputs[0]); }
    if (op == "solve") { need(2); return solve(inputs[0], inputs[1]); }
    if (op == "causal_conv") { need(2); return causal_conv(inputs[0], inputs[1]); }
    if (op == "complex_embed") { need(2); return complex_embed(inputs[0], inputs[1]); }
    throw UnknownOp("record: unknown op '" + op + "'");
  }

  // Reverse sweep from `loss`, which must be a scalar recorded on this tape.
  // Running backward twice without recording anything new raises.
  void backward(Var loss) {
    if (loss < 0 || loss >= static_cast<Var>(vals_.size()))
      throw DetachedLoss("backward: loss is not on this tape");
    if (vals_[static_cast<size_t>(loss)].numel() != 1)
      throw NotScalar("backward: loss must be a scalar");
    if (backward_done_)
      throw Error("backward: tape already swept; record new ops before calling again");
    backward_done_ = true;
    grads_.assign(vals_.size(), Tensor<Real>{});
    grads_[static_cast<size_t>(loss)] = Tensor<Real>::scalar(Real(1));
    for (int64_t i = loss; i >= 0; --i) {
      const size_t idx = static_cast<size_t>(i);
      if (grads_[idx].data.empty() || !nodes_[idx].bw) continue;
      nodes_[idx].bw(grads_[idx]);
    }
  }

 private:
  struct Node {
    std::vector<Var> inputs;
    std::function<void(const Tensor<Real>&)> bw;
  };

  static Real stable_sigmoid(Real x) {
    if (x >= Real(0)) {
      const Real e = std::exp(-x);
      return Real(1) / (Real(1) + e);
    }
    const Real e = std::exp(x);
    return e / (Real(1) + e);
  }

  static Eigen::MatrixXd to_eigen(const Tensor<Real>& t) {
    Eigen::MatrixXd m(t.rows(), t.cols());
    for (int64_t i = 0; i < t.rows(); ++i)
      for (int64_t j = 0; j < t.cols(); ++j) m(i, j) = static_cast<double>(t.at(i, j));
    return m;
  }

  static void from_eigen(const Eigen::MatrixXd& m, Tensor<Real>& t) {
    for (int64_t i = 0; i < t.rows(); ++i)
      for (int64_t j = 0; j < t.cols(); ++j) t.at(i, j) = static_cast<Real>(m(i, j));
  }

  // out = a (m x k) * b (k x n), row-major, double accumulation.
  static void mm(const Real* a, const Real* b, Real* out, int64_t m, int64_t k, int64_t n) {
    std::vector<double> row(static_cast<size_t>(n));
    for (int64_t i = 0; i < m; ++i) {
      std::fill(row.begin(), row.end(), 0.0);
      for (int64_t p = 0; p < k; ++p) {
        const double av = static_cast<double>(a[i * k + p]);
        if (av == 0.0) continue;
        const Real* brow = b + p * n;
        for (int64_t j = 0; j < n; ++j) row[static_cast<size_t>(j)] += av * static_cast<double>(brow[j]);
      }
      for (int64_t j = 0; j < n; ++j) out[i * n + j] = static_cast<Real>(row[static_cast<size_t>(j)]);
    }
  }

  size_t check(Var v) const {
    if (v < 0 || v >= static_cast<Var>(vals_.size()))
      throw Error("tape: variable index out of range");
    return static_cast<size_t>(v);
  }

  bool needs(Var v) const { return needs_grad_[check(v)]; }

  Var push(Tensor<Real>&& value, bool needs_grad, std::vector<Var> inputs,
           std::function<void(const Tensor<Real>&)> bw) {
    vals_.push_back(std::move(value));
    needs_grad_.push_back(needs_grad);
    nodes_.push_back(Node{std::move(inputs), needs_grad ? std::move(bw) : nullptr});
    backward_done_ = false;
    return static_cast<Var>(vals_.size() - 1);
  }

  // For ops whose backward needs the output var id.
  void set_backward(Var v, std::function<void(const Tensor<Real>&)> bw) {
    if (needs_grad_[check(v)]) nodes_[static_cast<size_t>(v)].bw = std::move(bw);
  }

  void accum(Var v, const Tensor<Real>& g) {
    if (!needs(v)) return;
    auto& slot = grads_[static_cast<size_t>(v)];
    if (slot.data.empty()) {
      slot = g;
      return;
    }
    for (int64_t i = 0; i < g.numel(); ++i) slot[i] += g[i];
  }

  void accum_move(Var v, Tensor<Real>&& g) {
    if (!needs(v)) return;
    auto& slot = grads_[static_cast<size_t>(v)];
    if (slot.data.empty()) {
      slot = std::move(g);
      return;
    }
    for (int64_t i = 0; i < g.numel(); ++i) slot[i] += g[i];
  }

  void accum_scaled(Var v, const Tensor<Real>& g, Real c) {
    if (!needs(v)) return;
    auto& slot = grads_[static_cast<size_t>(v)];
    if (slot.data.empty()) slot = Tensor<Real>::zeros(g.shape);
    for (int64_t i = 0; i < g.numel(); ++i) slot[i] += c * g[i];
  }

  void same_shape(Var a, Var b, const char* op) const {
    if (!vals_[check(a)].same_shape(vals_[check(b)]))
      throw ShapeMismatch(std::string(op) + ": shape mismatch " + shape_str(vals_[check(a)].shape) +
                          " vs " + shape_str(vals_[check(b)].shape));
  }

  std::vector<Tensor<Real>> vals_;
  std::vector<bool> needs_grad_;
  std::vector<Node> nodes_;
  std::vector<Tensor<Real>> grads_;
  bool backward_done_ = false;
};

}  // namespace ssq::ad
