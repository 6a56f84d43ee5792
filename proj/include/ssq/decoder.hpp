#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include "ssq/autodiff.hpp"
#include "ssq/errors.hpp"
#include "ssq/optim.hpp"
#include "ssq/s4.hpp"

namespace ssq::dec {

enum class Variant { s4, transformer };
enum class HeadKind { token, continuous };

inline const char* variant_name(Variant v) { return v == Variant::s4 ? "s4" : "transformer"; }

struct DecoderConfig {
  int num_layers = 2;
  int d_model = 64;
  int n_heads = 4;
  int d_ffn = 128;
  int state_size = 16;  // S4 state size N per channel
  double dropout = 0.0;
  double stochastic_depth_p = 0.0;
  Variant variant = Variant::s4;
  HeadKind head = HeadKind::token;
  int vocab_size = 0;   // token head, includes BOS/EOS
  int feature_dim = 0;  // continuous head

  void validate() const {
    if (num_layers < 0) throw ConfigError("decoder: num_layers must be >= 0");
    if (d_model <= 0 || n_heads <= 0 || d_model % n_heads != 0)
      throw ConfigError("decoder: d_model must be a positive multiple of n_heads");
    if (d_ffn <= 0) throw ConfigError("decoder: d_ffn must be positive");
    if (state_size <= 0) throw ConfigError("decoder: state_size must be positive");
    if (dropout < 0.0 || dropout >= 1.0) throw ConfigError("decoder: dropout must be in [0,1)");
    if (stochastic_depth_p < 0.0 || stochastic_depth_p >= 1.0)
      throw ConfigError("decoder: stochastic_depth_p must be in [0,1)");
    if (head == HeadKind::token && vocab_size < 3)
      throw ConfigError("decoder: token head needs vocab_size >= 3 (tokens + BOS/EOS)");
    if (head == HeadKind::continuous && feature_dim <= 0)
      throw ConfigError("decoder: continuous head needs feature_dim > 0");
  }
};

// Thread-local count of sinusoidal-table lookups made by decoder forwards.
// The s4 variant must never touch the table; tests assert on this.
inline int64_t& pe_lookup_counter() {
  thread_local int64_t count = 0;
  return count;
}
inline void reset_pe_lookups() { pe_lookup_counter() = 0; }
inline int64_t pe_lookups() { return pe_lookup_counter(); }

// PE[pos, 2i] = sin(pos / 10000^{2i/d}), PE[pos, 2i+1] = cos(pos / 10000^{2i/d}).
template <typename Real>
Tensor<Real> sinusoidal_pe(int length, int d_model) {
  if (d_model <= 0 || d_model % 2 != 0)
    throw OddModelDim("sinusoidal_pe: d_model must be positive and even");
  Tensor<Real> pe({length, d_model});
  for (int pos = 0; pos < length; ++pos)
    for (int i = 0; i < d_model / 2; ++i) {
      const double freq = std::pow(10000.0, 2.0 * i / static_cast<double>(d_model));
      pe.at(pos, 2 * i) = static_cast<Real>(std::sin(pos / freq));
      pe.at(pos, 2 * i + 1) = static_cast<Real>(std::cos(pos / freq));
    }
  return pe;
}

// ---------------------------------------------------------------------------
// Multi-head attention
// ---------------------------------------------------------------------------

template <typename Real>
struct MhaWeights {
  ad::Param<Real>* wq = nullptr;  // {d, d}
  ad::Param<Real>* wk = nullptr;
  ad::Param<Real>* wv = nullptr;
  ad::Param<Real>* wo = nullptr;
  ad::Param<Real>* bq = nullptr;  // {d}
  ad::Param<Real>* bk = nullptr;
  ad::Param<Real>* bv = nullptr;
  ad::Param<Real>* bo = nullptr;

  static MhaWeights create(ad::ParamStore<Real>& store, const std::string& prefix, int d,
                           uint64_t seed) {
    MhaWeights w;
    auto rng = make_rng(seed);
    const Real s = static_cast<Real>(1.0 / std::sqrt(static_cast<double>(d)));
    w.wq = &store.add(prefix + "wq", randn<Real>({d, d}, rng, s));
    w.wk = &store.add(prefix + "wk", randn<Real>({d, d}, rng, s));
    w.wv = &store.add(prefix + "wv", randn<Real>({d, d}, rng, s));
    w.wo = &store.add(prefix + "wo", randn<Real>({d, d}, rng, s));
    w.bq = &store.add(prefix + "bq", Tensor<Real>::zeros({d}), true);
    w.bk = &store.add(prefix + "bk", Tensor<Real>::zeros({d}), true);
    w.bv = &store.add(prefix + "bv", Tensor<Real>::zeros({d}), true);
    w.bo = &store.add(prefix + "bo", Tensor<Real>::zeros({d}), true);
    return w;
  }
};

// Scaled dot-product attention over row-major time-major inputs. `mask`
// (Tq x Tk, row-major) marks the key positions each query may attend; an
// empty mask allows everything. Masked scores get -1e30 before the softmax so
// they underflow to an exact zero contribution. If `probs_out` is given, the
// per-head attention matrices are appended to it.
template <typename Real>
ad::Var multi_head_attention(ad::Tape<Real>& tape, const MhaWeights<Real>& w, ad::Var q_in,
                             ad::Var k_in, ad::Var v_in, const std::vector<uint8_t>& mask,
                             int n_heads, std::vector<ad::Var>* probs_out = nullptr) {
  const int64_t d = tape.value(q_in).cols();
  const int64_t tq = tape.value(q_in).rows();
  const int64_t tk = tape.value(k_in).rows();
  if (tape.value(k_in).cols() != d || tape.value(v_in).cols() != d ||
      tape.value(v_in).rows() != tk)
    throw DimensionMismatch("attention: Q/K/V dimensions disagree");
  if (n_heads <= 0 || d % n_heads != 0)
    throw DimensionMismatch("attention: d_model must be a multiple of n_heads");
  if (!mask.empty()) {
    if (static_cast<int64_t>(mask.size()) != tq * tk)
      throw DimensionMismatch("attention: mask must be Tq x Tk");
    for (int64_t i = 0; i < tq; ++i) {
      bool any = false;
      for (int64_t j = 0; j < tk; ++j) any = any || mask[static_cast<size_t>(i * tk + j)];
      if (!any) throw AllMaskedRow("attention: query row " + std::to_string(i) + " is fully masked");
    }
  }
  const int64_t dh = d / n_heads;
  ad::Var q = tape.add_rowvec(tape.matmul(q_in, tape.transpose(w.wq->var)), w.bq->var);
  ad::Var k = tape.add_rowvec(tape.matmul(k_in, tape.transpose(w.wk->var)), w.bk->var);
  ad::Var v = tape.add_rowvec(tape.matmul(v_in, tape.transpose(w.wv->var)), w.bv->var);

  std::optional<ad::Var> mask_add;
  if (!mask.empty()) {
    Tensor<Real> m({tq, tk});
    for (int64_t i = 0; i < tq * tk; ++i)
      m[i] = mask[static_cast<size_t>(i)] ? Real(0) : Real(-1e30);
    mask_add = tape.leaf(std::move(m));
  }

  std::vector<ad::Var> heads;
  heads.reserve(static_cast<size_t>(n_heads));
  const Real inv_sqrt_dh = static_cast<Real>(1.0 / std::sqrt(static_cast<double>(dh)));
  for (int h = 0; h < n_heads; ++h) {
    ad::Var qh = tape.slice_cols(q, h * dh, (h + 1) * dh);
    ad::Var kh = tape.slice_cols(k, h * dh, (h + 1) * dh);
    ad::Var vh = tape.slice_cols(v, h * dh, (h + 1) * dh);
    ad::Var scores = tape.scale(tape.matmul(qh, tape.transpose(kh)), inv_sqrt_dh);
    if (mask_add) scores = tape.add(scores, *mask_add);
    ad::Var probs = tape.softmax_rows(scores);
    if (probs_out) probs_out->push_back(probs);
    heads.push_back(tape.matmul(probs, vh));
  }
  ad::Var ctx = n_heads == 1 ? heads[0] : tape.concat_cols(heads);
  return tape.add_rowvec(tape.matmul(ctx, tape.transpose(w.wo->var)), w.bo->var);
}

// ---------------------------------------------------------------------------
// Encoder stub
// ---------------------------------------------------------------------------

// Two-layer feed-forward encoder over embedded source tokens with a +/-2
// neighborhood context window (zero rows past the boundaries, so sequence
// edges are content-marked). Sinusoidal position codes are added to the
// OUTPUT, so the position channel stays linear end to end and evaluates the
// same way at any length; the decoder variants share this encoder unchanged.
template <typename Real>
struct EncoderStub {
  static constexpr int kWindow = 2;  // neighbors on each side

  int vocab = 0, d_model = 0;
  ad::Param<Real>* embed = nullptr;  // {V, d}
  ad::Param<Real>* w1 = nullptr;     // {d, (2*kWindow+1)*d}
  ad::Param<Real>* b1 = nullptr;     // {d}
  ad::Param<Real>* w2 = nullptr;     // {d, d}
  ad::Param<Real>* b2 = nullptr;     // {d}

  static EncoderStub create(ad::ParamStore<Real>& store, const std::string& prefix, int vocab,
                            int d, uint64_t seed) {
    EncoderStub e;
    e.vocab = vocab;
    e.d_model = d;
    auto rng = make_rng(seed);
    const Real s = static_cast<Real>(1.0 / std::sqrt(static_cast<double>(d)));
    e.embed = &store.add(prefix + "embed", randn<Real>({vocab, d}, rng, s), true);
    e.w1 = &store.add(prefix + "w1", randn<Real>({d, (2 * kWindow + 1) * d}, rng, s));
    e.b1 = &store.add(prefix + "b1", Tensor<Real>::zeros({d}), true);
    e.w2 = &store.add(prefix + "w2", randn<Real>({d, d}, rng, s));
    e.b2 = &store.add(prefix + "b2", Tensor<Real>::zeros({d}), true);
    return e;
  }

  ad::Var forward(ad::Tape<Real>& tape, const std::vector<int>& src) const {
    if (src.empty()) throw EmptyInput("encoder: empty source");
    const int64_t t_len = static_cast<int64_t>(src.size());
    ad::Var e = tape.gather_rows(embed->var, src);  // {T, d}
    // Shifted copies provide the window context.
    std::vector<ad::Var> shifts;
    for (int off = -kWindow; off <= kWindow; ++off) {
      if (off == 0) {
        shifts.push_back(e);
        continue;
      }
      const int64_t keep = std::max<int64_t>(0, t_len - std::abs(off));
      ad::Var pad = tape.leaf(Tensor<Real>::zeros({t_len - keep, d_model}));
      if (keep == 0) {
        shifts.push_back(pad);
      } else if (off < 0) {
        shifts.push_back(tape.concat_rows({pad, tape.slice_rows(e, 0, keep)}));
      } else {
        shifts.push_back(tape.concat_rows({tape.slice_rows(e, t_len - keep, t_len), pad}));
      }
    }
    ad::Var ctx = tape.concat_cols(shifts);  // {T, (2w+1)d}
    ad::Var h = tape.relu(tape.add_rowvec(tape.matmul(ctx, tape.transpose(w1->var)), b1->var));
    ad::Var m = tape.add_rowvec(tape.matmul(h, tape.transpose(w2->var)), b2->var);
    return tape.add(m, tape.leaf(sinusoidal_pe<Real>(static_cast<int>(t_len), d_model)));
  }

  // Inference-path forward in double precision.
  Eigen::MatrixXd forward_plain(const std::vector<int>& src) const {
    if (src.empty()) throw EmptyInput("encoder: empty source");
    const int t_len = static_cast<int>(src.size());
    const int d = d_model;
    const int win = 2 * kWindow + 1;
    Eigen::MatrixXd e(t_len, d);
    for (int t = 0; t < t_len; ++t) {
      if (src[static_cast<size_t>(t)] < 0 || src[static_cast<size_t>(t)] >= vocab)
        throw DimensionMismatch("encoder: source token out of range");
      for (int j = 0; j < d; ++j)
        e(t, j) = static_cast<double>(embed->value.at(src[static_cast<size_t>(t)], j));
    }
    auto pe = sinusoidal_pe<double>(t_len, d);
    Eigen::MatrixXd out(t_len, d);
    std::vector<double> ctx(static_cast<size_t>(win * d));
    for (int t = 0; t < t_len; ++t) {
      std::fill(ctx.begin(), ctx.end(), 0.0);
      for (int off = -kWindow; off <= kWindow; ++off) {
        const int p = t + off;
        if (p < 0 || p >= t_len) continue;
        const int slot = off + kWindow;
        for (int j = 0; j < d; ++j) ctx[static_cast<size_t>(slot * d + j)] = e(p, j);
      }
      std::vector<double> h(static_cast<size_t>(d));
      for (int i = 0; i < d; ++i) {
        double acc = static_cast<double>(b1->value[i]);
        for (int j = 0; j < win * d; ++j)
          acc += static_cast<double>(w1->value.at(i, j)) * ctx[static_cast<size_t>(j)];
        h[static_cast<size_t>(i)] = acc > 0.0 ? acc : 0.0;
      }
      for (int i = 0; i < d; ++i) {
        double acc = static_cast<double>(b2->value[i]);
        for (int j = 0; j < d; ++j)
          acc += static_cast<double>(w2->value.at(i, j)) * h[static_cast<size_t>(j)];
        out(t, i) = acc + pe.at(t, i);
      }
    }
    return out;
  }
};

// Encoder output handed to the decoder: memory rows plus a validity mask.
struct EncoderOutput {
  Eigen::MatrixXd memory;     // T_src x d_model
  std::vector<uint8_t> mask;  // length T_src, nonzero = attendable

  void check() const {
    if (static_cast<int64_t>(mask.size()) != memory.rows())
      throw DimensionMismatch("EncoderOutput: mask length must match memory rows");
  }
};

// ---------------------------------------------------------------------------
// Decoder stack (both variants)
// ---------------------------------------------------------------------------

template <typename Real>
struct DecoderStack {
  DecoderConfig cfg;

  ad::Param<Real>* tok_embed = nullptr;  // {V, d} (token head)
  ad::Param<Real>* in_w = nullptr;       // {d, F} (continuous head)
  ad::Param<Real>* in_b = nullptr;       // {d}

  struct Layer {
    s4::S4Layer<Real> s4;            // variant s4
    MhaWeights<Real> self_attn;      // variant transformer
    MhaWeights<Real> src_attn;
    ad::Param<Real>*ffn_w1 = nullptr, *ffn_b1 = nullptr, *ffn_w2 = nullptr, *ffn_b2 = nullptr;
    ad::Param<Real>*ln1_g = nullptr, *ln1_b = nullptr;
    ad::Param<Real>*ln2_g = nullptr, *ln2_b = nullptr;
    ad::Param<Real>*ln3_g = nullptr, *ln3_b = nullptr;
  };
  std::vector<Layer> layers;
  ad::Param<Real>*out_ln_g = nullptr, *out_ln_b = nullptr;
  ad::Param<Real>*head_w = nullptr, *head_b = nullptr;

  static DecoderStack create(ad::ParamStore<Real>& store, const DecoderConfig& cfg,
                             uint64_t seed) {
    cfg.validate();
    DecoderStack m;
    m.cfg = cfg;
    const int d = cfg.d_model;
    uint64_t stream = 0;
    auto rng = make_rng(seed, stream++);
    const Real s = static_cast<Real>(1.0 / std::sqrt(static_cast<double>(d)));
    if (cfg.head == HeadKind::token) {
      m.tok_embed = &store.add("decoder.embed", randn<Real>({cfg.vocab_size, d}, rng, s), true);
    } else {
      m.in_w = &store.add("decoder.in_proj.weight", randn<Real>({d, cfg.feature_dim}, rng, s));
      m.in_b = &store.add("decoder.in_proj.bias", Tensor<Real>::zeros({d}), true);
    }
    for (int i = 0; i < cfg.num_layers; ++i) {
      Layer l;
      const std::string base = "decoder." + std::to_string(i) + ".";
      if (cfg.variant == Variant::s4)
        l.s4 = s4::S4Layer<Real>::create(store, base + "s4.", d, cfg.state_size, d,
                                         split_seed(seed, stream++));
      else
        l.self_attn = MhaWeights<Real>::create(store, base + "self_attn.", d,
                                               split_seed(seed, stream++));
      l.src_attn = MhaWeights<Real>::create(store, base + "src_attn.", d,
                                            split_seed(seed, stream++));
      auto rngl = make_rng(seed, stream++);
      l.ffn_w1 = &store.add(base + "ffn.w1", randn<Real>({cfg.d_ffn, d}, rngl, s));
      l.ffn_b1 = &store.add(base + "ffn.b1", Tensor<Real>::zeros({cfg.d_ffn}), true);
      l.ffn_w2 = &store.add(
          base + "ffn.w2",
          randn<Real>({d, cfg.d_ffn}, rngl,
                      static_cast<Real>(1.0 / std::sqrt(static_cast<double>(cfg.d_ffn)))));
      l.ffn_b2 = &store.add(base + "ffn.b2", Tensor<Real>::zeros({d}), true);
      auto norm = [&](const char* name, Real fill) -> ad::Param<Real>* {
        return &store.add(base + "norms." + name, Tensor<Real>::full({d}, fill), true);
      };
      l.ln1_g = norm("ln1.gain", Real(1));
      l.ln1_b = norm("ln1.bias", Real(0));
      l.ln2_g = norm("ln2.gain", Real(1));
      l.ln2_b = norm("ln2.bias", Real(0));
      l.ln3_g = norm("ln3.gain", Real(1));
      l.ln3_b = norm("ln3.bias", Real(0));
      m.layers.push_back(l);
    }
    m.out_ln_g = &store.add("decoder.out_norm.gain", Tensor<Real>::full({d}, Real(1)), true);
    m.out_ln_b = &store.add("decoder.out_norm.bias", Tensor<Real>::zeros({d}), true);
    auto rngh = make_rng(seed, stream++);
    const int out_dim = cfg.head == HeadKind::token ? cfg.vocab_size : cfg.feature_dim;
    m.head_w = &store.add("decoder.head.weight", randn<Real>({out_dim, d}, rngh, s));
    m.head_b = &store.add("decoder.head.bias", Tensor<Real>::zeros({out_dim}), true);
    return m;
  }

  // ---- teacher-forced parallel forward (training mode on the tape) ----

  // S4 kernels prepared once per tape and shared across the sequences of a
  // batch (they depend only on the parameters and the longest length).
  struct BatchPlan {
    std::vector<typename s4::S4Layer<Real>::ConvPlan> s4_plans;  // one per layer
  };

  BatchPlan prepare_batch(ad::Tape<Real>& tape, int max_len) const {
    BatchPlan plan;
    if (cfg.variant == Variant::s4)
      for (const auto& l : layers) plan.s4_plans.push_back(l.s4.prepare_conv(tape, max_len));
    return plan;
  }

  struct ForwardOpts {
    bool training = false;
    Rng* rng = nullptr;  // required when training with dropout or stochastic depth
    const BatchPlan* plan = nullptr;
  };

  // Token-head entry; `inputs` is the shifted-right target (starts with BOS).
  // Returns {T, V} logits.
  ad::Var forward_train(ad::Tape<Real>& tape, const std::vector<int>& inputs, ad::Var memory,
                        const std::vector<uint8_t>& memory_mask,
                        const ForwardOpts& opts = {}) const {
    if (cfg.head != HeadKind::token)
      throw VariantMismatch("forward_train: token input on a continuous-head decoder");
    ad::Var x = tape.gather_rows(tok_embed->var, inputs);
    if (cfg.variant == Variant::transformer) {
      x = tape.scale(x, static_cast<Real>(std::sqrt(static_cast<double>(cfg.d_model))));
      pe_lookup_counter() += static_cast<int64_t>(inputs.size());
      x = tape.add(x, tape.leaf(sinusoidal_pe<Real>(static_cast<int>(inputs.size()), cfg.d_model)));
    }
    return head(tape, trunk(tape, x, memory, memory_mask, opts));
  }

  // Continuous-head entry; `frames` rows are the previous target frames
  // (row 0 is the zero frame). Returns {T, F} predictions.
  ad::Var forward_train_continuous(ad::Tape<Real>& tape, const Tensor<Real>& frames,
                                   ad::Var memory, const std::vector<uint8_t>& memory_mask,
                                   const ForwardOpts& opts = {}) const {
    if (cfg.head != HeadKind::continuous)
      throw VariantMismatch("forward_train_continuous: frame input on a token-head decoder");
    if (frames.rank() != 2 || frames.cols() != cfg.feature_dim)
      throw DimensionMismatch("forward_train_continuous: frames must be T x feature_dim");
    ad::Var x = tape.add_rowvec(tape.matmul(tape.leaf(frames), tape.transpose(in_w->var)),
                                in_b->var);
    if (cfg.variant == Variant::transformer) {
      x = tape.scale(x, static_cast<Real>(std::sqrt(static_cast<double>(cfg.d_model))));
      pe_lookup_counter() += frames.rows();
      x = tape.add(x, tape.leaf(sinusoidal_pe<Real>(static_cast<int>(frames.rows()), cfg.d_model)));
    }
    return head(tape, trunk(tape, x, memory, memory_mask, opts));
  }

  // Variant-checked wrappers mirroring the per-variant training entries.
  ad::Var s4_forward_train(ad::Tape<Real>& tape, const std::vector<int>& inputs, ad::Var memory,
                           const std::vector<uint8_t>& memory_mask,
                           const ForwardOpts& opts = {}) const {
    if (cfg.variant != Variant::s4)
      throw VariantMismatch("s4_forward_train called on a transformer decoder");
    return forward_train(tape, inputs, memory, memory_mask, opts);
  }
  ad::Var transformer_forward_train(ad::Tape<Real>& tape, const std::vector<int>& inputs,
                                    ad::Var memory, const std::vector<uint8_t>& memory_mask,
                                    const ForwardOpts& opts = {}) const {
    if (cfg.variant != Variant::transformer)
      throw VariantMismatch("transformer_forward_train called on an s4 decoder");
    return forward_train(tape, inputs, memory, memory_mask, opts);
  }

  // ---- incremental inference ----

  struct Session {
    std::vector<s4::S4Cache> s4_caches;  // per layer, s4 variant only
  };

  struct State {
    int k = 0;
    std::vector<s4::S4State> s4_states;       // per layer (s4)
    std::vector<Eigen::MatrixXd> self_k;      // per layer, k x d (transformer)
    std::vector<Eigen::MatrixXd> self_v;
    std::vector<Eigen::MatrixXd> src_k;       // per layer, T_src x d
    std::vector<Eigen::MatrixXd> src_v;
    std::vector<uint8_t> src_mask;
  };

  Session make_session() const {
    Session s;
    if (cfg.variant == Variant::s4)
      for (const auto& l : layers) s.s4_caches.push_back(l.s4.make_cache());
    return s;
  }

  State init_state(const EncoderOutput& enc) const {
    enc.check();
    if (enc.memory.cols() != cfg.d_model)
      throw DimensionMismatch("init_state: encoder width must equal d_model");
    State st;
    st.src_mask = enc.mask;
    for (const auto& l : layers) {
      if (cfg.variant == Variant::s4)
        st.s4_states.push_back(l.s4.initial_state());
      else {
        st.self_k.emplace_back(0, cfg.d_model);
        st.self_v.emplace_back(0, cfg.d_model);
      }
      st.src_k.push_back(project_rows(enc.memory, l.src_attn.wk, l.src_attn.bk));
      st.src_v.push_back(project_rows(enc.memory, l.src_attn.wv, l.src_attn.bv));
    }
    return st;
  }

  // One autoregressive step from the previous token. Returns the logits row.
  std::vector<double> step(const Session& session, State& st, int prev_token) const {
    if (cfg.head != HeadKind::token) throw VariantMismatch("step: decoder has a continuous head");
    if (prev_token < 0 || prev_token >= cfg.vocab_size)
      throw DimensionMismatch("step: token out of range");
    std::vector<double> x(static_cast<size_t>(cfg.d_model));
    for (int j = 0; j < cfg.d_model; ++j)
      x[static_cast<size_t>(j)] = static_cast<double>(tok_embed->value.at(prev_token, j));
    return step_common(session, st, std::move(x));
  }

  // One autoregressive step from the previous output frame.
  std::vector<double> step_continuous(const Session& session, State& st,
                                      const std::vector<double>& prev_frame) const {
    if (cfg.head != HeadKind::continuous) throw VariantMismatch("step_continuous: token head");
    if (static_cast<int>(prev_frame.size()) != cfg.feature_dim)
      throw DimensionMismatch("step_continuous: frame width mismatch");
    std::vector<double> x(static_cast<size_t>(cfg.d_model));
    for (int i = 0; i < cfg.d_model; ++i) {
      double acc = static_cast<double>(in_b->value[i]);
      for (int j = 0; j < cfg.feature_dim; ++j)
        acc += static_cast<double>(in_w->value.at(i, j)) * prev_frame[static_cast<size_t>(j)];
      x[static_cast<size_t>(i)] = acc;
    }
    return step_common(session, st, std::move(x));
  }

 private:
  // ---- shared trunk on the tape ----

  ad::Var affine_norm(ad::Tape<Real>& tape, ad::Var x, ad::Param<Real>* g,
                      ad::Param<Real>* b) const {
    return tape.add_rowvec(tape.mul_rowvec(tape.layer_norm_rows(x), g->var), b->var);
  }

  // Pre-LN residual block with dropout and per-sample stochastic depth:
  // kept sublayers are scaled by 1/(1-p) during training, identity at eval.
  template <typename Fn>
  ad::Var block(ad::Tape<Real>& tape, ad::Var x, ad::Param<Real>* g, ad::Param<Real>* b,
                const ForwardOpts& opts, Fn&& sublayer) const {
    if (opts.training && cfg.stochastic_depth_p > 0.0) {
      if (!opts.rng) throw ConfigError("training forward requires an rng");
      std::uniform_real_distribution<double> u(0.0, 1.0);
      if (u(*opts.rng) < cfg.stochastic_depth_p) return x;  // drop: identity path
    }
    ad::Var h = sublayer(affine_norm(tape, x, g, b));
    if (opts.training && cfg.dropout > 0.0) {
      if (!opts.rng) throw ConfigError("training forward requires an rng");
      const auto& shape = tape.value(h).shape;
      Tensor<Real> m(shape);
      std::uniform_real_distribution<double> u(0.0, 1.0);
      const Real keep_scale = static_cast<Real>(1.0 / (1.0 - cfg.dropout));
      for (auto& v : m.data) v = u(*opts.rng) < cfg.dropout ? Real(0) : keep_scale;
      h = tape.mul(h, tape.leaf(std::move(m)));
    }
    if (opts.training && cfg.stochastic_depth_p > 0.0)
      h = tape.scale(h, static_cast<Real>(1.0 / (1.0 - cfg.stochastic_depth_p)));
    return tape.add(x, h);
  }

  ad::Var trunk(ad::Tape<Real>& tape, ad::Var x, ad::Var memory,
                const std::vector<uint8_t>& memory_mask, const ForwardOpts& opts) const {
    const int64_t t_len = tape.value(x).rows();
    const int64_t t_src = tape.value(memory).rows();
    std::vector<uint8_t> causal;
    if (cfg.variant == Variant::transformer) {
      causal.assign(static_cast<size_t>(t_len * t_len), 0);
      for (int64_t i = 0; i < t_len; ++i)
        for (int64_t j = 0; j <= i; ++j) causal[static_cast<size_t>(i * t_len + j)] = 1;
    }
    std::vector<uint8_t> src_mask;
    if (!memory_mask.empty()) {
      if (static_cast<int64_t>(memory_mask.size()) != t_src)
        throw DimensionMismatch("trunk: memory mask length mismatch");
      src_mask.assign(static_cast<size_t>(t_len * t_src), 0);
      for (int64_t i = 0; i < t_len; ++i)
        for (int64_t j = 0; j < t_src; ++j)
          src_mask[static_cast<size_t>(i * t_src + j)] = memory_mask[static_cast<size_t>(j)];
    }
    for (size_t li = 0; li < layers.size(); ++li) {
      const Layer& l = layers[li];
      if (cfg.variant == Variant::s4) {
        const auto* plan = opts.plan ? &opts.plan->s4_plans[li] : nullptr;
        x = block(tape, x, l.ln1_g, l.ln1_b, opts, [&](ad::Var h) {
          return tape.transpose(l.s4.forward_conv(tape, tape.transpose(h), plan));
        });
      } else {
        x = block(tape, x, l.ln1_g, l.ln1_b, opts, [&](ad::Var h) {
          return multi_head_attention(tape, l.self_attn, h, h, h, causal, cfg.n_heads);
        });
      }
      x = block(tape, x, l.ln2_g, l.ln2_b, opts, [&](ad::Var h) {
        return multi_head_attention(tape, l.src_attn, h, memory, memory, src_mask, cfg.n_heads);
      });
      x = block(tape, x, l.ln3_g, l.ln3_b, opts, [&](ad::Var h) {
        ad::Var z = tape.relu(
            tape.add_rowvec(tape.matmul(h, tape.transpose(l.ffn_w1->var)), l.ffn_b1->var));
        return tape.add_rowvec(tape.matmul(z, tape.transpose(l.ffn_w2->var)), l.ffn_b2->var);
      });
    }
    return affine_norm(tape, x, out_ln_g, out_ln_b);
  }

  ad::Var head(ad::Tape<Real>& tape, ad::Var x) const {
    return tape.add_rowvec(tape.matmul(x, tape.transpose(head_w->var)), head_b->var);
  }

  // ---- shared trunk, plain double math, one position ----

  Eigen::MatrixXd project_rows(const Eigen::MatrixXd& m, ad::Param<Real>* w,
                               ad::Param<Real>* b) const {
    const int d = cfg.d_model;
    Eigen::MatrixXd out(m.rows(), d);
    for (Eigen::Index t = 0; t < m.rows(); ++t)
      for (int i = 0; i < d; ++i) {
        double acc = static_cast<double>(b->value[i]);
        for (int j = 0; j < d; ++j) acc += static_cast<double>(w->value.at(i, j)) * m(t, j);
        out(t, i) = acc;
      }
    return out;
  }

  std::vector<double> layer_norm_plain(const std::vector<double>& x, ad::Param<Real>* g,
                                       ad::Param<Real>* b) const {
    const size_t n = x.size();
    double mu = 0.0;
    for (double v : x) mu += v;
    mu /= static_cast<double>(n);
    double var = 0.0;
    for (double v : x) var += (v - mu) * (v - mu);
    var /= static_cast<double>(n);
    const double is = 1.0 / std::sqrt(var + 1e-5);
    std::vector<double> out(n);
    for (size_t i = 0; i < n; ++i)
      out[i] = (x[i] - mu) * is * static_cast<double>(g->value[static_cast<int64_t>(i)]) +
               static_cast<double>(b->value[static_cast<int64_t>(i)]);
    return out;
  }

  std::vector<double> linear_plain(const std::vector<double>& x, ad::Param<Real>* w,
                                   ad::Param<Real>* b) const {
    const int64_t rows = w->value.rows(), cols = w->value.cols();
    std::vector<double> out(static_cast<size_t>(rows));
    for (int64_t i = 0; i < rows; ++i) {
      double acc = b ? static_cast<double>(b->value[i]) : 0.0;
      for (int64_t j = 0; j < cols; ++j)
        acc += static_cast<double>(w->value.at(i, j)) * x[static_cast<size_t>(j)];
      out[static_cast<size_t>(i)] = acc;
    }
    return out;
  }

  // Single-query multi-head attention over cached K/V rows.
  std::vector<double> attend_plain(const MhaWeights<Real>& w, const std::vector<double>& h,
                                   const Eigen::MatrixXd& K, const Eigen::MatrixXd& V,
                                   const std::vector<uint8_t>& mask) const {
    const int d = cfg.d_model;
    const int dh = d / cfg.n_heads;
    const auto t_len = K.rows();
    if (!mask.empty()) {
      bool any = false;
      for (Eigen::Index j = 0; j < t_len; ++j) any = any || mask[static_cast<size_t>(j)];
      if (!any) throw AllMaskedRow("attention: every key masked");
    }
    std::vector<double> q = linear_plain(h, w.wq, w.bq);
    std::vector<double> ctx(static_cast<size_t>(d), 0.0);
    const double inv_sqrt_dh = 1.0 / std::sqrt(static_cast<double>(dh));
    std::vector<double> scores(static_cast<size_t>(t_len));
    for (int head_i = 0; head_i < cfg.n_heads; ++head_i) {
      const int off = head_i * dh;
      double mx = -std::numeric_limits<double>::infinity();
      for (Eigen::Index j = 0; j < t_len; ++j) {
        double s = 0.0;
        for (int i = 0; i < dh; ++i) s += q[static_cast<size_t>(off + i)] * K(j, off + i);
        s *= inv_sqrt_dh;
        if (!mask.empty() && !mask[static_cast<size_t>(j)]) s = -1e30;
        scores[static_cast<size_t>(j)] = s;
        mx = std::max(mx, s);
      }
      double z = 0.0;
      for (Eigen::Index j = 0; j < t_len; ++j) {
        scores[static_cast<size_t>(j)] = std::exp(scores[static_cast<size_t>(j)] - mx);
        z += scores[static_cast<size_t>(j)];
      }
      for (Eigen::Index j = 0; j < t_len; ++j) {
        const double p = scores[static_cast<size_t>(j)] / z;
        if (p == 0.0) continue;
        for (int i = 0; i < dh; ++i) ctx[static_cast<size_t>(off + i)] += p * V(j, off + i);
      }
    }
    return linear_plain(ctx, w.wo, w.bo);
  }

  std::vector<double> step_common(const Session& session, State& st, std::vector<double> x) const {
    const int d = cfg.d_model;
    if (cfg.variant == Variant::transformer) {
      if (!st.self_k.empty() && st.self_k[0].rows() != st.k)
        throw StateCorrupt("decoder step: cache length disagrees with position counter");
      const double scale = std::sqrt(static_cast<double>(d));
      auto pe = sinusoidal_pe<double>(st.k + 1, d);
      pe_lookup_counter() += 1;
      for (int j = 0; j < d; ++j) x[static_cast<size_t>(j)] = x[static_cast<size_t>(j)] * scale +
                                                              pe.at(st.k, j);
    } else {
      if (static_cast<int>(st.s4_states.size()) != cfg.num_layers ||
          static_cast<int>(session.s4_caches.size()) != cfg.num_layers)
        throw StateCorrupt("decoder step: s4 state/cache shape mismatch");
    }
    if (static_cast<int>(st.src_k.size()) != cfg.num_layers)
      throw StateCorrupt("decoder step: missing source projections");

    for (size_t li = 0; li < layers.size(); ++li) {
      const Layer& l = layers[li];
      // Self block.
      {
        std::vector<double> h = layer_norm_plain(x, l.ln1_g, l.ln1_b);
        std::vector<double> s;
        if (cfg.variant == Variant::s4) {
          std::vector<Real> hr(h.size());
          for (size_t i = 0; i < h.size(); ++i) hr[i] = static_cast<Real>(h[i]);
          auto yr = l.s4.forward_step(session.s4_caches[li], st.s4_states[li], hr);
          s.assign(yr.begin(), yr.end());
        } else {
          // Append projections of h to the cache, then attend over it.
          std::vector<double> kn = linear_plain(h, l.self_attn.wk, l.self_attn.bk);
          std::vector<double> vn = linear_plain(h, l.self_attn.wv, l.self_attn.bv);
          auto& K = st.self_k[li];
          auto& V = st.self_v[li];
          K.conservativeResize(K.rows() + 1, d);
          V.conservativeResize(V.rows() + 1, d);
          for (int j = 0; j < d; ++j) {
            K(K.rows() - 1, j) = kn[static_cast<size_t>(j)];
            V(V.rows() - 1, j) = vn[static_cast<size_t>(j)];
          }
          s = attend_plain(l.self_attn, h, K, V, {});
        }
        for (int j = 0; j < d; ++j) x[static_cast<size_t>(j)] += s[static_cast<size_t>(j)];
      }
      // Source block.
      {
        std::vector<double> h = layer_norm_plain(x, l.ln2_g, l.ln2_b);
        auto s = attend_plain(l.src_attn, h, st.src_k[li], st.src_v[li], st.src_mask);
        for (int j = 0; j < d; ++j) x[static_cast<size_t>(j)] += s[static_cast<size_t>(j)];
      }
      // Feed-forward block.
      {
        std::vector<double> h = layer_norm_plain(x, l.ln3_g, l.ln3_b);
        auto z = linear_plain(h, l.ffn_w1, l.ffn_b1);
        for (auto& v : z) v = v > 0.0 ? v : 0.0;
        auto s = linear_plain(z, l.ffn_w2, l.ffn_b2);
        for (int j = 0; j < d; ++j) x[static_cast<size_t>(j)] += s[static_cast<size_t>(j)];
      }
    }
    st.k += 1;
    return linear_plain(layer_norm_plain(x, out_ln_g, out_ln_b), head_w, head_b);
  }
};

}  // namespace ssq::dec
