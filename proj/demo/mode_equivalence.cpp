// Small demonstration: one S4 layer run in its two execution modes.
// The convolutional path materializes the per-channel kernel and convolves;
// the recurrent path steps the discretized systems one input at a time.
// Both come from the same parameters and agree to floating-point accuracy.

#include <cstdio>

#include "ssq/s4.hpp"

using namespace ssq;

int main() {
  const int H = 4, N = 8, L = 24;
  ad::ParamStore<double> store;
  auto layer = s4::S4Layer<double>::create(store, "layer.0.s4.", H, N, H, /*seed=*/7);

  auto rng = make_rng(123);
  auto u = randn<double>({H, L}, rng, 1.0);

  // Convolutional (training) mode.
  ad::Tape<double> tape;
  store.bind_all(tape);
  const auto& conv = tape.value(layer.forward_conv(tape, tape.leaf(u)));

  // Recurrent (inference) mode.
  auto cache = layer.make_cache();
  auto state = layer.initial_state();
  double worst = 0.0;
  for (int t = 0; t < L; ++t) {
    std::vector<double> ut(H);
    for (int h = 0; h < H; ++h) ut[static_cast<size_t>(h)] = u.at(h, t);
    auto y = layer.forward_step(cache, state, ut);
    for (int h = 0; h < H; ++h)
      worst = std::max(worst, std::abs(y[static_cast<size_t>(h)] - conv.at(h, t)));
  }

  std::printf("H=%d N=%d L=%d\n", H, N, L);
  std::printf("max |conv - step| = %.3e\n", worst);
  std::printf("%s\n", worst < 1e-9 ? "modes agree" : "MODES DISAGREE");
  return worst < 1e-9 ? 0 : 1;
}
