#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <functional>
#include <limits>
#include <vector>

#include "ssq/autodiff.hpp"
#include "ssq/optim.hpp"

using namespace ssq;
using ad::Tape;
using ad::Var;
using T = Tensor<double>;

namespace {

// Builds a scalar loss from parameter tensors on a fresh tape. Used both for
// the analytic gradient and for central finite differences.
using LossFn = std::function<Var(Tape<double>&, const std::vector<Var>&)>;

// Central finite differences vs tape gradients, relative tolerance.
void gradcheck(const LossFn& fn_builder, std::vector<T> inputs, double tol = 1e-5,
               double h = 1e-5) {
  Tape<double> tape;
  std::vector<Var> vars;
  for (const auto& t : inputs) vars.push_back(tape.param(t));
  Var loss = fn_builder(tape, vars);
  tape.backward(loss);
  std::vector<T> analytic;
  for (Var v : vars) analytic.push_back(tape.grad(v));

  auto value_at = [&](const std::vector<T>& xs) {
    Tape<double> t2;
    std::vector<Var> vs;
    for (const auto& x : xs) vs.push_back(t2.param(x));
    return t2.value(fn_builder(t2, vs))[0];
  };

  for (size_t p = 0; p < inputs.size(); ++p) {
    for (int64_t i = 0; i < inputs[p].numel(); ++i) {
      auto plus = inputs, minus = inputs;
      plus[p][i] += h;
      minus[p][i] -= h;
      const double fd = (value_at(plus) - value_at(minus)) / (2.0 * h);
      const double an = analytic[p][i];
      const double denom = std::max({std::abs(fd), std::abs(an), 1.0});
      INFO("param " << p << " element " << i << " fd=" << fd << " analytic=" << an);
      CHECK(std::abs(fd - an) / denom < tol);
    }
  }
}

T randt(std::vector<int64_t> shape, Rng& rng, double scale = 1.0) {
  return randn<double>(std::move(shape), rng, scale);
}

// Loss reducer: weighted sum against a fixed random constant so every output
// element influences the scalar differently. Deterministic per seed so the
// finite-difference re-evaluations see the same weights.
Var weighted_sum(Tape<double>& tape, Var out, uint64_t seed) {
  auto rng = make_rng(seed);
  auto w = randt(tape.value(out).shape, rng);
  return tape.sum(tape.mul(out, tape.leaf(w)));
}

}  // namespace

TEST_CASE("forward basics", "[autodiff]") {
  Tape<double> tape;
  SECTION("add of zeros is zeros") {
    Var a = tape.leaf(T::zeros({2, 3}));
    Var b = tape.leaf(T::zeros({2, 3}));
    for (double v : tape.value(tape.add(a, b)).data) CHECK(v == 0.0);
  }
  SECTION("matmul with identity returns the input") {
    auto rng = make_rng(1);
    auto x = randt({3, 3}, rng);
    Var v = tape.matmul(tape.leaf(x), tape.leaf(T::identity(3)));
    for (int64_t i = 0; i < 9; ++i) CHECK(tape.value(v)[i] == Catch::Approx(x[i]).margin(1e-14));
  }
  SECTION("softmax rows sum to one") {
    auto rng = make_rng(2);
    Var s = tape.softmax_rows(tape.leaf(randt({4, 7}, rng, 3.0)));
    const auto& y = tape.value(s);
    for (int64_t i = 0; i < 4; ++i) {
      double total = 0.0;
      for (int64_t j = 0; j < 7; ++j) total += y.at(i, j);
      CHECK_THAT(total, Catch::Matchers::WithinAbs(1.0, 1e-6));
    }
  }
}

TEST_CASE("backward basics", "[autodiff]") {
  SECTION("d(x*y)/dx = y for scalars") {
    Tape<double> tape;
    Var x = tape.param(T::scalar(3.0));
    Var y = tape.param(T::scalar(-2.5));
    Var l = tape.mul(x, y);
    tape.backward(l);
    CHECK(tape.grad(x)[0] == -2.5);
    CHECK(tape.grad(y)[0] == 3.0);
  }
  SECTION("sigmoid chain matches the closed form") {
    Tape<double> tape;
    Var x = tape.param(T::scalar(0.7));
    Var l = tape.sigmoid(x);
    tape.backward(l);
    const double s = 1.0 / (1.0 + std::exp(-0.7));
    CHECK_THAT(tape.grad(x)[0], Catch::Matchers::WithinAbs(s * (1.0 - s), 1e-12));
  }
  SECTION("random 3-op graph matches finite differences") {
    auto rng = make_rng(77);
    gradcheck(
        [](Tape<double>& t, const std::vector<Var>& v) {
          return t.sum(t.sigmoid(t.matmul(v[0], v[1])));
        },
        {randt({3, 4}, rng), randt({4, 2}, rng)}, 1e-6);
  }
  SECTION("non-participating parameters get zero gradients") {
    Tape<double> tape;
    Var used = tape.param(T::scalar(2.0));
    Var unused = tape.param(T::full({3}, 1.0));
    Var l = tape.mul(used, used);
    tape.backward(l);
    for (double v : tape.grad(unused).data) CHECK(v == 0.0);
  }
  SECTION("double backward without re-recording raises") {
    Tape<double> tape;
    Var x = tape.param(T::scalar(1.0));
    Var l = tape.mul(x, x);
    tape.backward(l);
    CHECK_THROWS_AS(tape.backward(l), Error);
  }
  SECTION("loss must be scalar and on the tape") {
    Tape<double> tape;
    Var x = tape.param(T::full({3}, 1.0));
    CHECK_THROWS_AS(tape.backward(x), NotScalar);
    CHECK_THROWS_AS(tape.backward(Var(12345)), DetachedLoss);
  }
}

TEST_CASE("finite-difference check for every registered op", "[autodiff][property]") {
  auto rng = make_rng(20240201);
  const uint64_t rngw = 555;

  SECTION("add sub mul scale neg") {
    gradcheck(
        [&](Tape<double>& t, const std::vector<Var>& v) {
          Var z = t.add(v[0], t.scale(t.sub(v[1], t.neg(v[0])), 0.7));
          return weighted_sum(t, t.mul(z, v[1]), rngw);
        },
        {randt({3, 5}, rng), randt({3, 5}, rng)});
  }
  SECTION("scale_by scalar variable") {
    gradcheck(
        [&](Tape<double>& t, const std::vector<Var>& v) {
          return weighted_sum(t, t.scale_by(v[0], v[1]), rngw);
        },
        {randt({4, 3}, rng), T::scalar(0.8)});
  }
  SECTION("matmul and transpose") {
    gradcheck(
        [&](Tape<double>& t, const std::vector<Var>& v) {
          return weighted_sum(t, t.matmul(v[0], t.transpose(v[1])), rngw);
        },
        {randt({3, 4}, rng), randt({5, 4}, rng)});
  }
  SECTION("exp sigmoid relu") {
    auto x = randt({4, 4}, rng);
    for (auto& e : x.data)
      if (std::abs(e) < 0.05) e += 0.2;  // keep relu away from the kink
    gradcheck(
        [&](Tape<double>& t, const std::vector<Var>& v) {
          return weighted_sum(t, t.relu(t.add(t.sigmoid(v[0]), t.exp(t.scale(v[0], 0.3)))), rngw);
        },
        {x});
  }
  SECTION("softmax") {
    gradcheck(
        [&](Tape<double>& t, const std::vector<Var>& v) {
          return weighted_sum(t, t.softmax_rows(v[0]), rngw);
        },
        {randt({3, 6}, rng)});
  }
  SECTION("layer norm") {
    gradcheck(
        [&](Tape<double>& t, const std::vector<Var>& v) {
          return weighted_sum(t, t.layer_norm_rows(v[0]), rngw);
        },
        {randt({3, 8}, rng)}, 1e-5, 1e-6);
  }
  SECTION("gather rows") {
    gradcheck(
        [&](Tape<double>& t, const std::vector<Var>& v) {
          return weighted_sum(t, t.gather_rows(v[0], {2, 0, 2, 1}), rngw);
        },
        {randt({4, 3}, rng)});
  }
  SECTION("slices and concats") {
    gradcheck(
        [&](Tape<double>& t, const std::vector<Var>& v) {
          Var top = t.slice_rows(v[0], 0, 2);
          Var bottom = t.slice_rows(v[0], 2, 5);
          Var left = t.slice_cols(v[0], 0, 2);
          Var joined = t.concat_rows({top, bottom});
          Var cols = t.concat_cols({joined, left});
          return weighted_sum(t, cols, rngw);
        },
        {randt({5, 4}, rng)});
  }
  SECTION("stack scalars and reshape") {
    gradcheck(
        [&](Tape<double>& t, const std::vector<Var>& v) {
          Var a = t.sum(v[0]);
          Var b = t.mean(v[1]);
          Var s = t.stack_scalars({a, b, t.mul(a, b)});
          return weighted_sum(t, t.reshape(s, {1, 3}), rngw);
        },
        {randt({2, 2}, rng), randt({3}, rng)});
  }
  SECTION("row and col broadcast ops") {
    gradcheck(
        [&](Tape<double>& t, const std::vector<Var>& v) {
          Var z = t.add_rowvec(t.mul_rowvec(v[0], v[1]), v[1]);
          Var w = t.add_colvec(t.mul_colvec(z, v[2]), v[2]);
          return weighted_sum(t, w, rngw);
        },
        {randt({3, 4}, rng), randt({4}, rng), randt({3}, rng)});
  }
  SECTION("diag and complex embed") {
    gradcheck(
        [&](Tape<double>& t, const std::vector<Var>& v) {
          return weighted_sum(t, t.complex_embed(t.diag(v[0]), v[1]), rngw);
        },
        {randt({3}, rng), randt({3, 3}, rng)});
  }
  SECTION("solve") {
    auto a = randt({4, 4}, rng, 0.3);
    for (int i = 0; i < 4; ++i) a.at(i, i) += 3.0;  // well-conditioned
    gradcheck(
        [&](Tape<double>& t, const std::vector<Var>& v) {
          return weighted_sum(t, t.solve(v[0], v[1]), rngw);
        },
        {a, randt({4, 2}, rng)});
  }
  SECTION("causal convolution") {
    gradcheck(
        [&](Tape<double>& t, const std::vector<Var>& v) {
          return weighted_sum(t, t.causal_conv(v[0], v[1]), rngw);
        },
        {randt({9}, rng), randt({9}, rng)});
  }
  SECTION("cross entropy") {
    gradcheck(
        [&](Tape<double>& t, const std::vector<Var>& v) {
          return t.cross_entropy_mean(v[0], {1, 0, 3});
        },
        {randt({3, 4}, rng)});
  }
  SECTION("l1 loss") {
    auto pred = randt({3, 4}, rng);
    auto target = randt({3, 4}, rng);
    for (int64_t i = 0; i < pred.numel(); ++i)
      if (std::abs(pred[i] - target[i]) < 1e-3) target[i] += 0.1;  // avoid the kink
    gradcheck(
        [&](Tape<double>& t, const std::vector<Var>& v) { return t.l1_mean(v[0], target); },
        {pred});
  }
}

TEST_CASE("generic record entry point", "[autodiff]") {
  Tape<double> tape;
  auto rng = make_rng(3);
  Var a = tape.leaf(randt({2, 2}, rng));
  Var b = tape.leaf(randt({2, 2}, rng));
  Var c = tape.record("matmul", {a, b});
  CHECK(tape.value(c).shape == std::vector<int64_t>{2, 2});
  CHECK_THROWS_AS(tape.record("conv_transpose_3d", {a}), UnknownOp);
  CHECK_THROWS_AS(tape.record("add", {a}), ShapeMismatch);
}

TEST_CASE("batch gradient linearity", "[autodiff][property]") {
  // Gradient of the summed batch loss equals the sum of per-sample gradients.
  auto rng = make_rng(4711);
  auto w = randt({3, 3}, rng);
  std::vector<T> xs;
  for (int i = 0; i < 4; ++i) xs.push_back(randt({3, 1}, rng));

  auto grad_for = [&](const std::vector<T>& batch) {
    Tape<double> tape;
    Var wv = tape.param(w);
    std::vector<Var> losses;
    for (const auto& x : batch)
      losses.push_back(tape.sum(tape.sigmoid(tape.matmul(wv, tape.leaf(x)))));
    Var total = losses[0];
    for (size_t i = 1; i < losses.size(); ++i) total = tape.add(total, losses[i]);
    tape.backward(total);
    return tape.grad(wv);
  };

  auto batch_grad = grad_for(xs);
  T sum_grad = T::zeros({3, 3});
  for (const auto& x : xs) {
    auto g = grad_for({x});
    for (int64_t i = 0; i < 9; ++i) sum_grad[i] += g[i];
  }
  for (int64_t i = 0; i < 9; ++i)
    CHECK_THAT(batch_grad[i], Catch::Matchers::WithinAbs(sum_grad[i], 1e-12));
}

TEST_CASE("adamw update", "[optim]") {
  SECTION("zero gradient, zero weight decay leaves parameters unchanged") {
    ad::ParamStore<double> store;
    store.add("w", T::full({3}, 2.0));
    ad::AdamWConfig cfg;
    cfg.weight_decay = 0.0;
    ad::adamw_step(store, {T::zeros({3})}, 0, 1e-3, cfg);
    for (double v : store.items[0].value.data) CHECK(v == 2.0);
  }
  SECTION("one step with g=1 matches the hand-computed update") {
    // m = 0.1, v = 0.001, mhat = 1, vhat = 1, upd = 1/(1+eps) + wd*p.
    ad::ParamStore<double> store;
    store.add("w", T::scalar(1.0));
    ad::AdamWConfig cfg;
    cfg.weight_decay = 0.01;
    const double lr = 0.5;
    ad::adamw_step(store, {T::scalar(1.0)}, 0, lr, cfg);
    const double expected = 1.0 - lr * (1.0 / (1.0 + cfg.eps) + 0.01 * 1.0);
    CHECK_THAT(store.items[0].value[0], Catch::Matchers::WithinAbs(expected, 1e-12));
  }
  SECTION("no-decay tag suppresses weight decay") {
    ad::ParamStore<double> store;
    store.add("layer.0.s4.lambda_re", T::scalar(1.0), /*no_decay=*/true);
    store.add("plain", T::scalar(1.0), /*no_decay=*/false);
    ad::AdamWConfig cfg;
    cfg.weight_decay = 0.01;
    ad::adamw_step(store, {T::scalar(1.0), T::scalar(1.0)}, 0, 0.5, cfg);
    const double no_decay = 1.0 - 0.5 * (1.0 / (1.0 + cfg.eps));
    const double with_decay = 1.0 - 0.5 * (1.0 / (1.0 + cfg.eps) + 0.01);
    CHECK_THAT(store.items[0].value[0], Catch::Matchers::WithinAbs(no_decay, 1e-12));
    CHECK_THAT(store.items[1].value[0], Catch::Matchers::WithinAbs(with_decay, 1e-12));
  }
  SECTION("non-finite gradients are rejected") {
    ad::ParamStore<double> store;
    store.add("w", T::scalar(1.0));
    T bad = T::scalar(std::numeric_limits<double>::quiet_NaN());
    CHECK_THROWS_AS(ad::adamw_step(store, {bad}, 0, 1e-3, ad::AdamWConfig{}), NonFiniteGradient);
  }
}

TEST_CASE("learning-rate schedule", "[optim]") {
  ad::LrSchedule sched{1e-3, 100, 1e-3};
  CHECK_THAT(sched.at(0), Catch::Matchers::WithinAbs(1e-5, 1e-12));
  CHECK_THAT(sched.at(49), Catch::Matchers::WithinAbs(0.5e-3, 1e-12));
  CHECK_THAT(sched.at(99), Catch::Matchers::WithinAbs(1e-3, 1e-12));
  // Decay side: lr(t) = peak * exp(-gamma (t+1-warmup)).
  CHECK_THAT(sched.at(199), Catch::Matchers::WithinAbs(1e-3 * std::exp(-0.1), 1e-12));
  for (int t = 100; t < 300; ++t) CHECK(sched.at(t) <= sched.at(t - 1) + 1e-18);
}
