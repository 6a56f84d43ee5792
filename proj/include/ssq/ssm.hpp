#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <complex>
#include <random>
#include <utility>
#include <vector>

#include "ssq/errors.hpp"
#include "ssq/fft.hpp"
#include "ssq/tensor.hpp"

namespace ssq::ssm {

using Complex = std::complex<double>;
using MatrixC = Eigen::MatrixXcd;
using VectorC = Eigen::VectorXcd;
using RowVectorC = Eigen::RowVectorXcd;

// Continuous-time linear state space x' = A x + B u, y = C x + D u.
// Dense and unstructured; reference math is double precision throughout.
struct ContinuousSSM {
  MatrixC A;     // N x N
  VectorC B;     // N x 1
  RowVectorC C;  // 1 x N
  Complex D = 0.0;

  int state_size() const { return static_cast<int>(A.rows()); }

  void check() const {
    const auto n = A.rows();
    if (A.cols() != n || B.rows() != n || C.cols() != n)
      throw DimensionMismatch("ContinuousSSM: inconsistent dimensions");
  }
};

// Discrete-time counterpart x_k = A_bar x_{k-1} + B_bar u_k,
// y_k = Re(C_bar x_k + D_bar u_k), obtained from a bilinear transform.
struct DiscreteSSM {
  MatrixC A_bar;
  VectorC B_bar;
  RowVectorC C_bar;
  Complex D_bar = 0.0;
  double delta = 0.0;

  int state_size() const { return static_cast<int>(A_bar.rows()); }
};

namespace detail {

inline double norm1(const MatrixC& m) {
  double best = 0.0;
  for (Eigen::Index c = 0; c < m.cols(); ++c) {
    double s = 0.0;
    for (Eigen::Index r = 0; r < m.rows(); ++r) s += std::abs(m(r, c));
    best = std::max(best, s);
  }
  return best;
}

// Reciprocal 1-norm condition estimate via the explicit inverse. Fine at the
// state sizes this library works with.
inline double rcond_estimate(const Eigen::PartialPivLU<MatrixC>& lu, const MatrixC& m) {
  const double nm = norm1(m);
  if (nm == 0.0) return 0.0;
  const MatrixC inv = lu.solve(MatrixC::Identity(m.rows(), m.cols()));
  if (!inv.allFinite()) return 0.0;
  const double ni = norm1(inv);
  if (ni == 0.0) return 0.0;
  return 1.0 / (nm * ni);
}

}  // namespace detail

// Bilinear (Tustin) discretization with step size delta:
//   A_bar = (I - delta/2 A)^{-1} (I + delta/2 A)
//   B_bar = (I - delta/2 A)^{-1} delta B
//   C_bar = C, D_bar = D.
// Implemented as an LU solve, never an explicit inverse on the product path.
inline DiscreteSSM discretize_bilinear(const ContinuousSSM& ssm, double delta) {
  ssm.check();
  if (!(delta > 0.0)) throw NonPositiveDelta("discretize_bilinear: delta must be > 0");
  const auto n = ssm.A.rows();
  const MatrixC eye = MatrixC::Identity(n, n);
  const MatrixC lhs = eye - (delta / 2.0) * ssm.A;
  Eigen::PartialPivLU<MatrixC> lu(lhs);
  if (detail::rcond_estimate(lu, lhs) < 1e-12)
    throw SingularMatrix("discretize_bilinear: (I - delta/2 A) is numerically singular");
  DiscreteSSM out;
  out.A_bar = lu.solve(eye + (delta / 2.0) * ssm.A);
  out.B_bar = lu.solve(delta * ssm.B);
  out.C_bar = ssm.C;
  out.D_bar = ssm.D;
  out.delta = delta;
  return out;
}

// One recurrence step. The output is projected to its real part; parameters
// are complex but the modeled signals are real.
inline std::pair<VectorC, double> step(const DiscreteSSM& dssm, const VectorC& x_prev, double u) {
  if (x_prev.rows() != dssm.A_bar.rows())
    throw DimensionMismatch("step: state dimension does not match system");
  VectorC x = dssm.A_bar * x_prev + dssm.B_bar * u;
  const Complex y = (dssm.C_bar * x).value() + dssm.D_bar * u;
  return {std::move(x), y.real()};
}

// Unrolled recurrence from the zero initial state.
inline std::vector<double> run_recurrent(const DiscreteSSM& dssm, const std::vector<double>& u) {
  if (u.empty()) throw EmptyInput("run_recurrent: input sequence is empty");
  VectorC x = VectorC::Zero(dssm.A_bar.rows());
  std::vector<double> y(u.size());
  for (size_t k = 0; k < u.size(); ++k) {
    auto [xk, yk] = step(dssm, x, u[k]);
    x = std::move(xk);
    y[k] = yk;
  }
  return y;
}

// Impulse-response kernel (C B, C A B, ..., C A^{L-1} B), real parts.
// Computed by iterating v <- A_bar v from v = B_bar; no explicit powers.
inline std::vector<double> materialize_kernel(const DiscreteSSM& dssm, int length) {
  if (length < 1) throw EmptyInput("materialize_kernel: length must be >= 1");
  std::vector<double> kernel(static_cast<size_t>(length));
  VectorC v = dssm.B_bar;
  for (int k = 0; k < length; ++k) {
    kernel[static_cast<size_t>(k)] = (dssm.C_bar * v).value().real();
    if (k + 1 < length) v = dssm.A_bar * v;
  }
  return kernel;
}

// y_k = sum_{j<=k} kernel[j] u[k-j] + d_bar u_k, direct O(L^2) form.
inline std::vector<double> causal_convolve_direct(const std::vector<double>& kernel, double d_bar,
                                                  const std::vector<double>& u) {
  if (kernel.size() != u.size())
    throw LengthMismatch("causal_convolve: kernel and input lengths differ");
  const size_t L = u.size();
  std::vector<double> y(L, 0.0);
  for (size_t k = 0; k < L; ++k) {
    double acc = 0.0;
    for (size_t j = 0; j <= k; ++j) acc += kernel[j] * u[k - j];
    y[k] = acc + d_bar * u[k];
  }
  return y;
}

// Same contract via FFT with zero-padding to the next power of two >= 2L-1.
inline std::vector<double> causal_convolve_fft(const std::vector<double>& kernel, double d_bar,
                                               const std::vector<double>& u) {
  if (kernel.size() != u.size())
    throw LengthMismatch("causal_convolve: kernel and input lengths differ");
  const size_t L = u.size();
  std::vector<double> full = fft::convolve(kernel, u);
  std::vector<double> y(L);
  for (size_t k = 0; k < L; ++k) y[k] = full[k] + d_bar * u[k];
  return y;
}

inline std::vector<double> causal_convolve(const std::vector<double>& kernel, double d_bar,
                                           const std::vector<double>& u) {
  return causal_convolve_direct(kernel, d_bar, u);
}

// Random stable dense system for tests and property checks: eigenvalue real
// parts drawn from [re_lo, re_hi] (all negative for stability).
inline ContinuousSSM random_stable_system(int n, Rng& rng, double re_lo = -2.0,
                                          double re_hi = -0.1) {
  std::uniform_real_distribution<double> re(re_lo, re_hi);
  std::uniform_real_distribution<double> im(-3.0, 3.0);
  std::normal_distribution<double> g(0.0, 1.0);
  MatrixC diag = MatrixC::Zero(n, n);
  for (int i = 0; i < n; ++i) diag(i, i) = Complex(re(rng), im(rng));
  // Similarity transform by a random well-conditioned matrix keeps the
  // spectrum while making A dense.
  MatrixC t(n, n);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) t(i, j) = Complex(g(rng), g(rng)) * 0.3;
  t += 2.0 * MatrixC::Identity(n, n);
  ContinuousSSM ssm;
  ssm.A = t * diag * t.partialPivLu().solve(MatrixC::Identity(n, n));
  ssm.B = VectorC(n);
  ssm.C = RowVectorC(n);
  for (int i = 0; i < n; ++i) {
    ssm.B(i) = Complex(g(rng), g(rng));
    ssm.C(i) = Complex(g(rng), g(rng));
  }
  ssm.D = Complex(g(rng), 0.0);
  return ssm;
}

}  // namespace ssq::ssm
