#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "ssq/autodiff.hpp"
#include "ssq/errors.hpp"
#include "ssq/optim.hpp"
#include "ssq/ssm.hpp"

namespace ssq::s4 {

// Diagonal-plus-low-rank parameters of one state space channel, extracted to
// double precision: A = diag(lambda) - p p*. `lambda` is the effective value;
// the trainable storage keeps Re(lambda) as -exp(r) so stability is
// structural rather than clipped.
struct DPLRParams {
  ssm::VectorC lambda;
  ssm::VectorC p;
  ssm::VectorC B;
  ssm::VectorC C;
  double log_delta = 0.0;

  double delta() const { return std::exp(log_delta); }
};

// Deterministic diagonal-line initialization: lambda_n = -1/2 + i pi n,
// p = 0 (the layer starts exactly diagonal), B = 1, C ~ N(0, 1/N) per
// component, delta log-uniform in [1e-3, 1e-1].
inline DPLRParams init_dplr(int n, uint64_t seed) {
  if (n <= 0 || n % 2 != 0) throw OddStateSize("init_dplr: state size must be positive and even");
  const double pi = 3.14159265358979323846;
  DPLRParams out;
  out.lambda = ssm::VectorC(n);
  out.p = ssm::VectorC::Zero(n);
  out.B = ssm::VectorC::Ones(n);
  out.C = ssm::VectorC(n);
  auto rng = make_rng(seed, 101);
  std::normal_distribution<double> normal(0.0, 1.0);
  const double c_scale = 1.0 / std::sqrt(static_cast<double>(n));
  for (int i = 0; i < n; ++i) {
    out.lambda(i) = ssm::Complex(-0.5, pi * static_cast<double>(i));
    out.C(i) = ssm::Complex(normal(rng) * c_scale, normal(rng) * c_scale);
  }
  std::uniform_real_distribution<double> logd(std::log(1e-3), std::log(1e-1));
  out.log_delta = logd(rng);
  return out;
}

// Dense continuous system A = diag(lambda) - p p^*, with the per-channel
// feedthrough supplied by the caller (it lives in the layer, not here).
inline ssm::ContinuousSSM dplr_to_dense(const DPLRParams& params, double d = 0.0) {
  ssm::ContinuousSSM out;
  const auto n = params.lambda.rows();
  out.A = ssm::MatrixC::Zero(n, n);
  for (Eigen::Index i = 0; i < n; ++i) out.A(i, i) = params.lambda(i);
  out.A -= params.p * params.p.adjoint();
  out.B = params.B;
  out.C = params.C.transpose();
  out.D = ssm::Complex(d, 0.0);
  return out;
}

// Gated linear unit: a * sigmoid(b), elementwise.
template <typename Real>
std::vector<Real> glu(const std::vector<Real>& a, const std::vector<Real>& b) {
  if (a.size() != b.size()) throw LengthMismatch("glu: halves differ in length");
  std::vector<Real> out(a.size());
  for (size_t i = 0; i < a.size(); ++i) {
    const double bx = static_cast<double>(b[i]);
    const double s = bx >= 0.0 ? 1.0 / (1.0 + std::exp(-bx)) : std::exp(bx) / (1.0 + std::exp(bx));
    out[i] = static_cast<Real>(static_cast<double>(a[i]) * s);
  }
  return out;
}

// Recurrent state of one layer: H independent N-dimensional complex states,
// reset to zero at sequence start.
struct S4State {
  ssm::MatrixC x;  // H x N

  static S4State zeros(int h, int n) { return S4State{ssm::MatrixC::Zero(h, n)}; }
};

// Per-session cache of the discretized channels; rebuilt whenever the
// parameters change, reused across steps of one decode.
struct S4Cache {
  std::vector<ssm::DiscreteSSM> channels;
};

// The trainable S4 layer: H single-input single-output state spaces (one per
// feature), a shared linear projection to 2*H_out rows, and a GLU. Parameters
// are registered in a ParamStore under `<prefix>{lambda_re,...}`; lambda_re
// stores r with Re(lambda) = -exp(r).
template <typename Real>
struct S4Layer {
  int H = 0, N = 0, H_out = 0;
  ad::Param<Real>* lambda_re = nullptr;  // {H,N}, raw r
  ad::Param<Real>* lambda_im = nullptr;  // {H,N}
  ad::Param<Real>* p_re = nullptr;
  ad::Param<Real>* p_im = nullptr;
  ad::Param<Real>* B_re = nullptr;
  ad::Param<Real>* B_im = nullptr;
  ad::Param<Real>* C_re = nullptr;
  ad::Param<Real>* C_im = nullptr;
  ad::Param<Real>* log_delta = nullptr;  // {H}
  ad::Param<Real>* D = nullptr;          // {H}
  ad::Param<Real>* out_w = nullptr;      // {2*H_out, H}
  ad::Param<Real>* out_b = nullptr;      // {2*H_out}

  // Registers zero-valued parameters; callers fill the values in.
  static S4Layer create_raw(ad::ParamStore<Real>& store, const std::string& prefix, int h, int n,
                            int h_out) {
    S4Layer l;
    l.H = h;
    l.N = n;
    l.H_out = h_out;
    auto reg = [&](const char* name, std::vector<int64_t> shape, bool no_decay) {
      return &store.add(prefix + name, Tensor<Real>::zeros(std::move(shape)), no_decay);
    };
    l.lambda_re = reg("lambda_re", {h, n}, true);
    l.lambda_im = reg("lambda_im", {h, n}, true);
    l.p_re = reg("p_re", {h, n}, true);
    l.p_im = reg("p_im", {h, n}, true);
    l.B_re = reg("B_re", {h, n}, true);
    l.B_im = reg("B_im", {h, n}, true);
    l.C_re = reg("C_re", {h, n}, true);
    l.C_im = reg("C_im", {h, n}, true);
    l.log_delta = reg("log_delta", {h}, true);
    l.D = reg("D", {h}, true);
    l.out_w = reg("out_linear", {2 * h_out, h}, false);
    l.out_b = reg("out_bias", {2 * h_out}, true);
    return l;
  }

  // Registers and initializes: each channel gets an independent draw of the
  // deterministic DPLR scheme, D = 1, out_linear ~ N(0, 1/H).
  static S4Layer create(ad::ParamStore<Real>& store, const std::string& prefix, int h, int n,
                        int h_out, uint64_t seed) {
    S4Layer l = create_raw(store, prefix, h, n, h_out);
    for (int ch = 0; ch < h; ++ch) {
      DPLRParams init = init_dplr(n, split_seed(seed, static_cast<uint64_t>(ch)));
      for (int i = 0; i < n; ++i) {
        l.lambda_re->value.at(ch, i) = static_cast<Real>(std::log(-init.lambda(i).real()));
        l.lambda_im->value.at(ch, i) = static_cast<Real>(init.lambda(i).imag());
        l.p_re->value.at(ch, i) = static_cast<Real>(init.p(i).real());
        l.p_im->value.at(ch, i) = static_cast<Real>(init.p(i).imag());
        l.B_re->value.at(ch, i) = static_cast<Real>(init.B(i).real());
        l.B_im->value.at(ch, i) = static_cast<Real>(init.B(i).imag());
        l.C_re->value.at(ch, i) = static_cast<Real>(init.C(i).real());
        l.C_im->value.at(ch, i) = static_cast<Real>(init.C(i).imag());
      }
      l.log_delta->value[ch] = static_cast<Real>(init.log_delta);
      l.D->value[ch] = Real(1);
    }
    auto rng = make_rng(seed, 707);
    l.out_w->value = randn<Real>({2 * h_out, h}, rng, static_cast<Real>(1.0 / std::sqrt(h)));
    return l;
  }

  // Effective double-precision parameters of channel `ch`.
  DPLRParams channel(int ch) const {
    DPLRParams out;
    out.lambda = ssm::VectorC(N);
    out.p = ssm::VectorC(N);
    out.B = ssm::VectorC(N);
    out.C = ssm::VectorC(N);
    for (int i = 0; i < N; ++i) {
      out.lambda(i) = ssm::Complex(-std::exp(static_cast<double>(lambda_re->value.at(ch, i))),
                                   static_cast<double>(lambda_im->value.at(ch, i)));
      out.p(i) = ssm::Complex(p_re->value.at(ch, i), p_im->value.at(ch, i));
      out.B(i) = ssm::Complex(B_re->value.at(ch, i), B_im->value.at(ch, i));
      out.C(i) = ssm::Complex(C_re->value.at(ch, i), C_im->value.at(ch, i));
    }
    out.log_delta = static_cast<double>(log_delta->value[ch]);
    return out;
  }

  ssm::DiscreteSSM discrete_channel(int ch) const {
    DPLRParams params = channel(ch);
    return ssm::discretize_bilinear(dplr_to_dense(params, static_cast<double>(D->value[ch])),
                                    params.delta());
  }

  // ---- convolutional (training) mode, recorded on the tape ----

  // Per-channel kernels materialized on a tape at a fixed length. Kernels
  // depend only on the parameters, so one plan is shared by every sequence
  // of a batch (prefixes are sliced off for shorter sequences).
  struct ConvPlan {
    int length = 0;
    std::vector<ad::Var> kernels;  // H vars, each {length, 1}
  };

  // Bilinear discretization at the current parameters and kernel taps by
  // iterated action. Complex arithmetic runs on the real 2Nx2N embedding so
  // the tape stays real-valued.
  ConvPlan prepare_conv(ad::Tape<Real>& tape, int max_len) const {
    ConvPlan plan;
    plan.length = max_len;
    plan.kernels.reserve(static_cast<size_t>(H));
    ad::Var eye2n = tape.leaf(Tensor<Real>::identity(2 * N));
    ad::Var log_delta_col = tape.reshape(log_delta->var, {H, 1});
    for (int ch = 0; ch < H; ++ch) {
      ad::Var r_row = tape.slice_rows(lambda_re->var, ch, ch + 1);           // {1,N}
      ad::Var lam_re = tape.neg(tape.exp(tape.reshape(r_row, {N})));        // {N}
      ad::Var lam_im = tape.reshape(tape.slice_rows(lambda_im->var, ch, ch + 1), {N});
      ad::Var pr = tape.slice_rows(p_re->var, ch, ch + 1);                  // {1,N}
      ad::Var pi = tape.slice_rows(p_im->var, ch, ch + 1);
      ad::Var pr_col = tape.transpose(pr);
      ad::Var pi_col = tape.transpose(pi);
      // p p^* = (pr pr^T + pi pi^T) + i (pi pr^T - pr pi^T)
      ad::Var pp_re = tape.add(tape.matmul(pr_col, pr), tape.matmul(pi_col, pi));
      ad::Var pp_im = tape.sub(tape.matmul(pi_col, pr), tape.matmul(pr_col, pi));
      ad::Var a_re = tape.sub(tape.diag(lam_re), pp_re);
      ad::Var a_im = tape.sub(tape.diag(lam_im), pp_im);
      ad::Var a_emb = tape.complex_embed(a_re, a_im);                       // {2N,2N}
      ad::Var delta = tape.exp(tape.slice_rows(log_delta_col, ch, ch + 1)); // {1,1}
      ad::Var half_da = tape.scale(tape.scale_by(a_emb, delta), Real(0.5));
      ad::Var lhs = tape.sub(eye2n, half_da);
      ad::Var a_bar = tape.solve(lhs, tape.add(eye2n, half_da));
      ad::Var b_col = tape.concat_rows({tape.transpose(tape.slice_rows(B_re->var, ch, ch + 1)),
                                        tape.transpose(tape.slice_rows(B_im->var, ch, ch + 1))});
      ad::Var b_bar = tape.solve(lhs, tape.scale_by(b_col, delta));         // {2N,1}
      ad::Var c_row = tape.concat_cols({tape.slice_rows(C_re->var, ch, ch + 1),
                                        tape.neg(tape.slice_rows(C_im->var, ch, ch + 1))});
      // Kernel by iterated action: v <- A_bar v from v = B_bar.
      std::vector<ad::Var> taps;
      taps.reserve(static_cast<size_t>(max_len));
      ad::Var v = b_bar;
      for (int k = 0; k < max_len; ++k) {
        taps.push_back(tape.matmul(c_row, v));
        if (k + 1 < max_len) v = tape.matmul(a_bar, v);
      }
      plan.kernels.push_back(tape.reshape(tape.stack_scalars(taps), {max_len, 1}));
    }
    return plan;
  }

  // Pre-projection channel outputs: kernel convolution plus the D skip.
  // Returns an {H, L} var; a shared plan covering at least L taps may be
  // supplied, otherwise one is built locally.
  ad::Var channel_outputs_conv(ad::Tape<Real>& tape, ad::Var u_mat,
                               const ConvPlan* shared = nullptr) const {
    const auto& U = tape.value(u_mat);
    if (U.rank() != 2 || U.rows() != H)
      throw DimensionMismatch("s4 forward: input must have H rows");
    const int64_t L = U.cols();
    ConvPlan local;
    if (!shared) {
      local = prepare_conv(tape, static_cast<int>(L));
      shared = &local;
    }
    if (shared->length < L || static_cast<int>(shared->kernels.size()) != H)
      throw DimensionMismatch("s4 forward: conv plan too short for this sequence");
    std::vector<ad::Var> rows;
    rows.reserve(static_cast<size_t>(H));
    for (int ch = 0; ch < H; ++ch) {
      ad::Var k_full = shared->kernels[static_cast<size_t>(ch)];
      ad::Var kernel = shared->length == L
                           ? tape.reshape(k_full, {L})
                           : tape.reshape(tape.slice_rows(k_full, 0, L), {L});
      ad::Var u_row = tape.reshape(tape.slice_rows(u_mat, ch, ch + 1), {L});
      rows.push_back(tape.reshape(tape.causal_conv(kernel, u_row), {1, L}));
    }
    ad::Var stacked = tape.concat_rows(rows);                               // {H,L}
    return tape.add(stacked, tape.mul_colvec(u_mat, D->var));
  }

  // Full block output: out_linear over channels, then GLU over the split
  // halves. Input and output are feature-major ({H, L} -> {H_out, L}).
  ad::Var forward_conv(ad::Tape<Real>& tape, ad::Var u_mat,
                       const ConvPlan* shared = nullptr) const {
    ad::Var y = channel_outputs_conv(tape, u_mat, shared);
    ad::Var z = tape.add_colvec(tape.matmul(out_w->var, y), out_b->var);    // {2H_out, L}
    ad::Var a = tape.slice_rows(z, 0, H_out);
    ad::Var b = tape.slice_rows(z, H_out, 2 * H_out);
    return tape.mul(a, tape.sigmoid(b));
  }

  // ---- recurrent (inference) mode ----

  S4Cache make_cache() const {
    S4Cache cache;
    cache.channels.reserve(static_cast<size_t>(H));
    for (int ch = 0; ch < H; ++ch) cache.channels.push_back(discrete_channel(ch));
    return cache;
  }

  S4State initial_state() const { return S4State::zeros(H, N); }

  // One autoregressive step through the cached recurrences plus the linear
  // and GLU stage; state is advanced in place.
  std::vector<Real> forward_step(const S4Cache& cache, S4State& state,
                                 const std::vector<Real>& u) const {
    if (static_cast<int>(u.size()) != H)
      throw DimensionMismatch("s4 forward_step: input size must be H");
    if (state.x.rows() != H || state.x.cols() != N)
      throw DimensionMismatch("s4 forward_step: state shape mismatch");
    std::vector<double> y(static_cast<size_t>(H));
    for (int ch = 0; ch < H; ++ch) {
      ssm::VectorC x = state.x.row(ch).transpose();
      auto [x_next, y_ch] = ssm::step(cache.channels[static_cast<size_t>(ch)], x,
                                      static_cast<double>(u[static_cast<size_t>(ch)]));
      state.x.row(ch) = x_next.transpose();
      y[static_cast<size_t>(ch)] = y_ch;
    }
    // out_linear + GLU.
    std::vector<Real> a(static_cast<size_t>(H_out)), b(static_cast<size_t>(H_out));
    for (int i = 0; i < 2 * H_out; ++i) {
      double acc = static_cast<double>(out_b->value[i]);
      for (int j = 0; j < H; ++j)
        acc += static_cast<double>(out_w->value.at(i, j)) * y[static_cast<size_t>(j)];
      if (i < H_out)
        a[static_cast<size_t>(i)] = static_cast<Real>(acc);
      else
        b[static_cast<size_t>(i - H_out)] = static_cast<Real>(acc);
    }
    return glu(a, b);
  }
};

}  // namespace ssq::s4
