#pragma once

#include <algorithm>
#include <atomic>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "ssq/checkpoint.hpp"
#include "ssq/config.hpp"
#include "ssq/decoder.hpp"
#include "ssq/tasks.hpp"

namespace ssq::harness {

// ---------------------------------------------------------------------------
// Model assembly
// ---------------------------------------------------------------------------

template <typename Real = float>
struct Seq2Seq {
  RunConfig cfg;
  ad::ParamStore<Real> store;
  dec::EncoderStub<Real> encoder;
  dec::DecoderStack<Real> decoder;
};

template <typename Real = float>
Seq2Seq<Real> build_model(const RunConfig& cfg) {
  cfg.validate();
  Seq2Seq<Real> m;
  m.cfg = cfg;
  m.encoder = dec::EncoderStub<Real>::create(m.store, "encoder.", cfg.vocab, cfg.model.d_model,
                                             split_seed(cfg.seed, 100));
  m.decoder = dec::DecoderStack<Real>::create(m.store, cfg.decoder_config(),
                                              split_seed(cfg.seed, 101));
  return m;
}

template <typename Real = float>
Seq2Seq<Real> model_from_checkpoint(const Checkpoint& ckpt) {
  RunConfig cfg = config_from_json(ckpt.config);
  auto m = build_model<Real>(cfg);
  load_into_store(ckpt, m.store);
  return m;
}

// ---------------------------------------------------------------------------
// Evaluation parallelism
// ---------------------------------------------------------------------------

// SSQ_THREADS caps the number of evaluation workers.
inline int eval_thread_cap(int n_items) {
  int threads = static_cast<int>(std::thread::hardware_concurrency());
  if (threads <= 0) threads = 1;
  if (const char* env = std::getenv("SSQ_THREADS")) {
    const int v = std::atoi(env);
    if (v >= 1) threads = std::min(threads, v);
  }
  return std::max(1, std::min(threads, n_items));
}

template <typename Fn>
void parallel_for(int n, int threads, Fn&& fn) {
  if (threads <= 1 || n <= 1) {
    for (int i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<int> next{0};
  auto worker = [&]() {
    for (;;) {
      const int i = next.fetch_add(1);
      if (i >= n) return;
      fn(i);
    }
  };
  std::vector<std::thread> pool;
  for (int t = 0; t < threads; ++t) pool.emplace_back(worker);
  for (auto& t : pool) t.join();
}

// ---------------------------------------------------------------------------
// Beam search
// ---------------------------------------------------------------------------

struct BeamResult {
  std::vector<int> tokens;  // generated tokens, BOS/EOS excluded
  double logp = 0.0;        // total log probability, EOS included when finished
  double norm_score = 0.0;  // logp / generated step count
  bool finished = false;
};

// Length-normalized beam search over an arbitrary stepper. `step_fn` advances
// a state with the previous token and returns log-probabilities for the next
// one. Finished hypotheses compete with the surviving live ones under the
// normalized score; max_len caps generation, so termination is guaranteed.
template <typename State, typename StepFn>
BeamResult beam_search(StepFn&& step_fn, const State& init_state, int bos, int eos, int beam,
                       int max_len, int vocab) {
  if (beam < 1) throw ConfigError("beam_search: beam must be >= 1");
  struct Hyp {
    State state;
    std::vector<int> tokens;
    double logp = 0.0;
  };
  auto norm = [](double logp, size_t steps) {
    return logp / static_cast<double>(std::max<size_t>(1, steps));
  };

  std::vector<Hyp> live;
  live.push_back(Hyp{init_state, {}, 0.0});
  std::vector<BeamResult> finished;

  for (int t = 0; t < max_len && !live.empty(); ++t) {
    struct Cand {
      size_t parent;
      int token;
      double logp;
    };
    std::vector<State> advanced;
    std::vector<const std::vector<int>*> parent_tokens;
    std::vector<Cand> cands;
    advanced.reserve(live.size());
    for (size_t h = 0; h < live.size(); ++h) {
      State s = live[h].state;
      const int prev = live[h].tokens.empty() ? bos : live[h].tokens.back();
      const std::vector<double> lp = step_fn(s, prev);
      if (static_cast<int>(lp.size()) != vocab)
        throw DimensionMismatch("beam_search: stepper vocabulary mismatch");
      advanced.push_back(std::move(s));
      parent_tokens.push_back(&live[h].tokens);
      for (int v = 0; v < vocab; ++v)
        cands.push_back(Cand{h, v, live[h].logp + lp[static_cast<size_t>(v)]});
    }
    std::sort(cands.begin(), cands.end(), [&](const Cand& a, const Cand& b) {
      if (a.logp != b.logp) return a.logp > b.logp;
      if (*parent_tokens[a.parent] != *parent_tokens[b.parent])
        return *parent_tokens[a.parent] < *parent_tokens[b.parent];
      return a.token < b.token;
    });
    std::vector<Hyp> next_live;
    for (const Cand& c : cands) {
      if (c.token == eos) {
        BeamResult r;
        r.tokens = *parent_tokens[c.parent];
        r.logp = c.logp;
        r.norm_score = norm(c.logp, r.tokens.size() + 1);  // EOS counts as a step
        r.finished = true;
        finished.push_back(std::move(r));
      } else if (static_cast<int>(next_live.size()) < beam) {
        Hyp h;
        h.state = advanced[c.parent];
        h.tokens = *parent_tokens[c.parent];
        h.tokens.push_back(c.token);
        h.logp = c.logp;
        next_live.push_back(std::move(h));
      }
    }
    // The finished pool keeps only the best `beam` hypotheses under the
    // normalized score.
    std::sort(finished.begin(), finished.end(), [](const BeamResult& a, const BeamResult& b) {
      if (a.norm_score != b.norm_score) return a.norm_score > b.norm_score;
      return a.tokens < b.tokens;
    });
    if (static_cast<int>(finished.size()) > beam) finished.resize(static_cast<size_t>(beam));
    live = std::move(next_live);
  }
  // Hypotheses alive at the cap compete without an EOS bonus.
  for (const Hyp& h : live) {
    BeamResult r;
    r.tokens = h.tokens;
    r.logp = h.logp;
    r.norm_score = norm(h.logp, h.tokens.size());
    r.finished = false;
    finished.push_back(std::move(r));
  }
  if (finished.empty()) return BeamResult{};  // max_len == 0
  std::sort(finished.begin(), finished.end(), [](const BeamResult& a, const BeamResult& b) {
    if (a.norm_score != b.norm_score) return a.norm_score > b.norm_score;
    return a.tokens < b.tokens;
  });
  return finished.front();
}

inline std::vector<double> log_softmax(const std::vector<double>& logits) {
  double mx = logits[0];
  for (double v : logits) mx = std::max(mx, v);
  double z = 0.0;
  for (double v : logits) z += std::exp(v - mx);
  const double lse = mx + std::log(z);
  std::vector<double> out(logits.size());
  for (size_t i = 0; i < logits.size(); ++i) out[i] = logits[i] - lse;
  return out;
}

// Greedy argmax decoding (ties broken toward the lowest token id).
template <typename Real>
std::vector<int> greedy_decode(const Seq2Seq<Real>& model,
                               const typename dec::DecoderStack<Real>::Session& session,
                               const dec::EncoderOutput& enc, int max_len) {
  auto state = model.decoder.init_state(enc);
  const int vocab = model.cfg.vocab;
  std::vector<int> out;
  int prev = tasks::bos_id(vocab);
  for (int t = 0; t < max_len; ++t) {
    const auto logits = model.decoder.step(session, state, prev);
    int best = 0;
    for (int v = 1; v < static_cast<int>(logits.size()); ++v)
      if (logits[static_cast<size_t>(v)] > logits[static_cast<size_t>(best)]) best = v;
    if (best == tasks::eos_id(vocab)) break;
    out.push_back(best);
    prev = best;
  }
  return out;
}

// Beam decoding of one source sequence through the incremental decoder.
template <typename Real>
BeamResult beam_decode(const Seq2Seq<Real>& model,
                       const typename dec::DecoderStack<Real>::Session& session,
                       const dec::EncoderOutput& enc, int beam, int max_len) {
  using State = typename dec::DecoderStack<Real>::State;
  auto step_fn = [&](State& st, int prev) {
    return log_softmax(model.decoder.step(session, st, prev));
  };
  return beam_search(step_fn, model.decoder.init_state(enc), tasks::bos_id(model.cfg.vocab),
                     tasks::eos_id(model.cfg.vocab), beam, max_len,
                     model.cfg.vocab + 2);
}

// ---------------------------------------------------------------------------
// Losses on the tape
// ---------------------------------------------------------------------------

template <typename Real>
ad::Var example_loss_token(ad::Tape<Real>& tape, const Seq2Seq<Real>& model,
                           const tasks::DiscreteExample& ex,
                           const typename dec::DecoderStack<Real>::ForwardOpts& opts) {
  ad::Var memory = model.encoder.forward(tape, ex.source);
  std::vector<uint8_t> mask(ex.source.size(), 1);
  std::vector<int> inputs(ex.target.begin(), ex.target.end() - 1);
  std::vector<int> labels(ex.target.begin() + 1, ex.target.end());
  ad::Var logits = model.decoder.forward_train(tape, inputs, memory, mask, opts);
  return tape.cross_entropy_mean(logits, labels);
}

template <typename Real>
ad::Var example_loss_continuous(ad::Tape<Real>& tape, const Seq2Seq<Real>& model,
                                const tasks::ContinuousExample& ex,
                                const typename dec::DecoderStack<Real>::ForwardOpts& opts) {
  ad::Var memory = model.encoder.forward(tape, ex.source);
  std::vector<uint8_t> mask(ex.source.size(), 1);
  const int T = ex.frames, F = ex.feature_dim;
  Tensor<Real> inputs({T, F});
  Tensor<Real> target({T, F});
  for (int t = 0; t < T; ++t)
    for (int f = 0; f < F; ++f) {
      target.at(t, f) = static_cast<Real>(ex.target[static_cast<size_t>(t * F + f)]);
      inputs.at(t, f) =
          t == 0 ? Real(0) : static_cast<Real>(ex.target[static_cast<size_t>((t - 1) * F + f)]);
    }
  ad::Var pred = model.decoder.forward_train_continuous(tape, inputs, memory, mask, opts);
  return tape.l1_mean(pred, target);
}

// ---------------------------------------------------------------------------
// Validation metrics (teacher forced)
// ---------------------------------------------------------------------------

template <typename Real>
std::pair<double, double> validate_token(const Seq2Seq<Real>& model,
                                         const tasks::DiscreteDataset& ds) {
  double loss_sum = 0.0;
  int64_t correct = 0, total = 0;
  ad::Tape<Real> tape;
  const_cast<ad::ParamStore<Real>&>(model.store).bind_all(tape);
  int max_len = 1;
  for (const auto& ex : ds.items)
    max_len = std::max(max_len, static_cast<int>(ex.target.size()) - 1);
  auto plan = model.decoder.prepare_batch(tape, max_len);
  typename dec::DecoderStack<Real>::ForwardOpts opts;
  opts.plan = &plan;
  for (const auto& ex : ds.items) {
    std::vector<uint8_t> mask(ex.source.size(), 1);
    std::vector<int> inputs(ex.target.begin(), ex.target.end() - 1);
    std::vector<int> labels(ex.target.begin() + 1, ex.target.end());
    ad::Var memory = model.encoder.forward(tape, ex.source);
    ad::Var logits = model.decoder.forward_train(tape, inputs, memory, mask, opts);
    loss_sum += static_cast<double>(tape.value(tape.cross_entropy_mean(logits, labels))[0]);
    const auto& lg = tape.value(logits);
    for (int64_t t = 0; t < lg.rows(); ++t) {
      int best = 0;
      for (int64_t v = 1; v < lg.cols(); ++v)
        if (lg.at(t, v) > lg.at(t, best)) best = static_cast<int>(v);
      correct += best == labels[static_cast<size_t>(t)];
      ++total;
    }
  }
  const double n = static_cast<double>(std::max<size_t>(1, ds.items.size()));
  return {loss_sum / n, total > 0 ? static_cast<double>(correct) / static_cast<double>(total) : 0.0};
}

template <typename Real>
double validate_continuous(const Seq2Seq<Real>& model, const tasks::ContinuousDataset& ds) {
  double loss_sum = 0.0;
  ad::Tape<Real> tape;
  const_cast<ad::ParamStore<Real>&>(model.store).bind_all(tape);
  int max_len = 1;
  for (const auto& ex : ds.items) max_len = std::max(max_len, ex.frames);
  auto plan = model.decoder.prepare_batch(tape, max_len);
  typename dec::DecoderStack<Real>::ForwardOpts opts;
  opts.plan = &plan;
  for (const auto& ex : ds.items)
    loss_sum += static_cast<double>(
        tape.value(example_loss_continuous(tape, model, ex, opts))[0]);
  return loss_sum / static_cast<double>(std::max<size_t>(1, ds.items.size()));
}

// ---------------------------------------------------------------------------
// Datasets for a run
// ---------------------------------------------------------------------------

struct RunData {
  tasks::DiscreteDataset train_d, valid_d, eval_d;
  tasks::ContinuousDataset train_c, valid_c, eval_c;
};

inline RunData make_run_data(const RunConfig& cfg) {
  RunData d;
  const uint64_t s = cfg.seed;
  if (cfg.is_continuous()) {
    auto dict = tasks::make_dictionary(cfg.vocab, cfg.feature_dim, split_seed(s, 9));
    d.train_c = tasks::gen_continuous_task(cfg.n_train, cfg.train_len_min, cfg.train_len_max,
                                           dict, split_seed(s, 1));
    d.valid_c = tasks::gen_continuous_task(cfg.n_valid, cfg.train_len_min, cfg.train_len_max,
                                           dict, split_seed(s, 2));
    d.eval_c = tasks::gen_continuous_task(cfg.n_eval, cfg.train_len_min, cfg.train_len_max, dict,
                                          split_seed(s, 3));
  } else if (cfg.task == "copy") {
    d.train_d = tasks::gen_copy_task(cfg.n_train, cfg.train_len_min, cfg.train_len_max, cfg.vocab,
                                     split_seed(s, 1));
    d.valid_d = tasks::gen_copy_task(cfg.n_valid, cfg.train_len_min, cfg.train_len_max, cfg.vocab,
                                     split_seed(s, 2));
    d.eval_d = tasks::gen_copy_task(cfg.n_eval, cfg.train_len_min, cfg.train_len_max, cfg.vocab,
                                    split_seed(s, 3));
  } else {
    d.train_d = tasks::gen_reverse_task(cfg.n_train, cfg.train_len_min, cfg.train_len_max,
                                        cfg.vocab, split_seed(s, 1));
    d.valid_d = tasks::gen_reverse_task(cfg.n_valid, cfg.train_len_min, cfg.train_len_max,
                                        cfg.vocab, split_seed(s, 2));
    d.eval_d = tasks::gen_reverse_task(cfg.n_eval, cfg.train_len_min, cfg.train_len_max, cfg.vocab,
                                       split_seed(s, 3));
  }
  return d;
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

struct TrainResult {
  std::vector<std::string> best_paths;  // best first
  std::string averaged_path;
  std::string metrics_path;
  std::vector<nlohmann::ordered_json> epoch_logs;
  double best_metric = -1e300;
  int64_t steps = 0;
  int epochs_run = 0;
};

// Teacher-forced training with AdamW, warmup + exponential decay, per-epoch
// validation, k-best checkpoint retention, and post-training averaging of
// the kept checkpoints. The numeric path is single threaded; a (config,
// seed) pair reproduces the metrics log bit-exactly on one build.
template <typename Real = float>
TrainResult train(const RunConfig& cfg, Seq2Seq<Real>* model_out = nullptr) {
  cfg.validate();
  std::filesystem::create_directories(cfg.out_dir);
  auto model = build_model<Real>(cfg);
  RunData data = make_run_data(cfg);

  const auto cfg_json = config_to_json(cfg);
  const auto cfg_hash = config_hash(cfg);
  ad::AdamWConfig opt;
  opt.beta1 = cfg.beta1;
  opt.beta2 = cfg.beta2;
  opt.eps = cfg.adam_eps;
  opt.weight_decay = cfg.weight_decay;
  ad::LrSchedule sched{cfg.peak_lr, cfg.warmup_steps, cfg.lr_decay_gamma};

  const size_t n_train =
      cfg.is_continuous() ? data.train_c.items.size() : data.train_d.items.size();
  Rng shuffle_rng = make_rng(cfg.seed, 200);
  Rng dropout_rng = make_rng(cfg.seed, 300);

  TrainResult result;
  result.metrics_path = cfg.out_dir + "/metrics.jsonl";

  struct Kept {
    double metric;
    int epoch;
    std::string path;
  };
  std::vector<Kept> kept;

  auto validate_now = [&]() -> std::pair<double, double> {
    if (cfg.is_continuous()) {
      const double l1 = validate_continuous(model, data.valid_c);
      return {l1, -l1};  // metric: higher is better
    }
    auto [loss, acc] = validate_token(model, data.valid_d);
    return {loss, acc};
  };

  auto save_epoch = [&](int epoch, double metric) {
    const std::string path = cfg.out_dir + "/ckpt_epoch_" + std::to_string(epoch) + ".ssq";
    save_checkpoint(path,
                    checkpoint_from_store(model.store, cfg_json, cfg_hash, result.steps, metric));
    kept.push_back({metric, epoch, path});
    std::sort(kept.begin(), kept.end(), [](const Kept& a, const Kept& b) {
      if (a.metric != b.metric) return a.metric > b.metric;
      return a.epoch > b.epoch;
    });
    while (static_cast<int>(kept.size()) > cfg.keep_best) {
      std::filesystem::remove(kept.back().path);
      kept.pop_back();
    }
  };

  int64_t step = 0;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::vector<size_t> order(n_train);
    for (size_t i = 0; i < n_train; ++i) order[i] = i;
    std::shuffle(order.begin(), order.end(), shuffle_rng);

    double train_loss_sum = 0.0;
    int64_t batches = 0;
    for (size_t start = 0; start < n_train; start += static_cast<size_t>(cfg.batch_size)) {
      const size_t end = std::min(n_train, start + static_cast<size_t>(cfg.batch_size));
      ad::Tape<Real> tape;
      model.store.bind_all(tape);
      int max_len = 1;
      for (size_t i = start; i < end; ++i) {
        if (cfg.is_continuous())
          max_len = std::max(max_len, data.train_c.items[order[i]].frames);
        else
          max_len = std::max(
              max_len, static_cast<int>(data.train_d.items[order[i]].target.size()) - 1);
      }
      auto plan = model.decoder.prepare_batch(tape, max_len);
      typename dec::DecoderStack<Real>::ForwardOpts opts;
      opts.training = true;
      opts.rng = &dropout_rng;
      opts.plan = &plan;
      std::vector<ad::Var> losses;
      for (size_t i = start; i < end; ++i) {
        if (cfg.is_continuous())
          losses.push_back(
              example_loss_continuous(tape, model, data.train_c.items[order[i]], opts));
        else
          losses.push_back(example_loss_token(tape, model, data.train_d.items[order[i]], opts));
      }
      ad::Var batch_loss = tape.mean(tape.stack_scalars(losses));
      const double loss_value = static_cast<double>(tape.value(batch_loss)[0]);
      if (!std::isfinite(loss_value))
        throw NonFiniteLoss("train: non-finite loss at epoch " + std::to_string(epoch) +
                            " step " + std::to_string(step) + " (loss=" +
                            std::to_string(loss_value) + ")");
      tape.backward(batch_loss);
      auto grads = ad::collect_grads(tape, model.store);
      ad::adamw_step(model.store, grads, step, sched.at(step), opt);
      train_loss_sum += loss_value;
      ++batches;
      ++step;
    }
    result.steps = step;
    result.epochs_run = epoch + 1;

    auto [val_loss, val_metric] = validate_now();
    nlohmann::ordered_json log;
    log["epoch"] = epoch;
    log["steps"] = step;
    log["lr"] = sched.at(step - 1);
    log["train_loss"] = batches > 0 ? train_loss_sum / static_cast<double>(batches) : 0.0;
    log["val_loss"] = val_loss;
    log["val_metric"] = val_metric;
    result.epoch_logs.push_back(log);
    save_epoch(epoch, val_metric);

    if (!cfg.is_continuous() && cfg.early_stop_token_acc >= 0.0 &&
        val_metric >= cfg.early_stop_token_acc)
      break;
  }

  if (cfg.epochs == 0) {
    // Untrained model: record the initial validation state so evaluation has
    // a checkpoint to load.
    auto [val_loss, val_metric] = validate_now();
    nlohmann::ordered_json log;
    log["epoch"] = -1;
    log["steps"] = 0;
    log["lr"] = 0.0;
    log["train_loss"] = 0.0;
    log["val_loss"] = val_loss;
    log["val_metric"] = val_metric;
    result.epoch_logs.push_back(log);
    save_epoch(0, val_metric);
  }

  {
    std::ofstream f(result.metrics_path, std::ios::binary);
    for (const auto& log : result.epoch_logs) f << log.dump() << "\n";
  }

  std::vector<std::string> best_paths;
  for (const auto& k : kept) best_paths.push_back(k.path);
  result.best_paths = best_paths;
  result.best_metric = kept.empty() ? 0.0 : kept.front().metric;
  result.averaged_path = cfg.out_dir + "/averaged.ssq";
  save_checkpoint(result.averaged_path, average_checkpoint_files(best_paths));
  if (model_out) *model_out = std::move(model);
  return result;
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

inline std::vector<double> default_bucket_edges(int train_len_max) {
  const double m = static_cast<double>(train_len_max);
  return {0.0, m, 2.0 * m, 3.0 * m};
}

struct EvalOutputs {
  tasks::Metrics metrics;
  std::vector<std::vector<int>> hyps;
};

// Decode every example (beam search; beam 1 follows the same path as greedy)
// and bucket error rates by reference length. Examples are independent, so
// decoding runs on up to SSQ_THREADS workers; aggregation is by index and
// identical for any worker count.
template <typename Real>
EvalOutputs evaluate_discrete(const Seq2Seq<Real>& model, const tasks::DiscreteDataset& ds,
                              int beam, const std::vector<double>& edges, int max_len_slack = 0) {
  if (ds.vocab != model.cfg.vocab)
    throw ManifestMismatch("evaluate: dataset vocabulary differs from the checkpoint config");
  const int n = static_cast<int>(ds.items.size());
  auto session = model.decoder.make_session();
  std::vector<std::vector<int>> refs(static_cast<size_t>(n)), hyps(static_cast<size_t>(n));
  parallel_for(n, eval_thread_cap(n), [&](int i) {
    const auto& ex = ds.items[static_cast<size_t>(i)];
    dec::EncoderOutput enc{model.encoder.forward_plain(ex.source),
                           std::vector<uint8_t>(ex.source.size(), 1)};
    auto ref = tasks::strip_specials(ex.target);
    const int max_len = static_cast<int>(ref.size()) + max_len_slack;
    auto result = beam_decode(model, session, enc, beam, max_len);
    refs[static_cast<size_t>(i)] = std::move(ref);
    hyps[static_cast<size_t>(i)] = std::move(result.tokens);
  });
  EvalOutputs out;
  out.metrics = tasks::error_rate(refs, hyps, edges);
  out.hyps = std::move(hyps);
  return out;
}

// Exact-sequence accuracy under greedy decoding.
template <typename Real>
double exact_sequence_accuracy(const Seq2Seq<Real>& model, const tasks::DiscreteDataset& ds,
                               int max_len_slack = 0) {
  const int n = static_cast<int>(ds.items.size());
  auto session = model.decoder.make_session();
  std::vector<uint8_t> ok(static_cast<size_t>(n), 0);
  parallel_for(n, eval_thread_cap(n), [&](int i) {
    const auto& ex = ds.items[static_cast<size_t>(i)];
    dec::EncoderOutput enc{model.encoder.forward_plain(ex.source),
                           std::vector<uint8_t>(ex.source.size(), 1)};
    auto ref = tasks::strip_specials(ex.target);
    auto hyp = greedy_decode(model, session, enc,
                             static_cast<int>(ref.size()) + max_len_slack);
    ok[static_cast<size_t>(i)] = hyp == ref;
  });
  int64_t good = 0;
  for (uint8_t v : ok) good += v;
  return n > 0 ? static_cast<double>(good) / static_cast<double>(n) : 0.0;
}

// L1 metrics for the continuous task, bucketed by frame count. Generation is
// fully autoregressive: each predicted frame is fed back as the next input.
struct L1Bucket {
  double lo = 0.0, hi = 0.0;  // hi < 0 means unbounded
  int64_t count = 0;
  int64_t frames = 0;
  double l1_sum = 0.0;     // summed per-example mean absolute errors
  double l1_mean = 0.0;    // l1_sum / count
};

struct L1Metrics {
  std::vector<L1Bucket> buckets;
  int64_t count = 0;
  double aggregate = 0.0;  // count-weighted mean of bucket means
};

inline nlohmann::ordered_json l1_metrics_to_json(const L1Metrics& m) {
  nlohmann::ordered_json out;
  out["count"] = m.count;
  out["aggregate_l1"] = m.aggregate;
  out["buckets"] = nlohmann::ordered_json::array();
  for (const auto& b : m.buckets) {
    nlohmann::ordered_json jb;
    jb["len_gt"] = b.lo;
    if (b.hi >= 0.0) jb["len_le"] = b.hi;
    jb["count"] = b.count;
    jb["frames"] = b.frames;
    jb["l1"] = b.l1_mean;
    out["buckets"].push_back(jb);
  }
  return out;
}

template <typename Real>
L1Metrics evaluate_continuous(const Seq2Seq<Real>& model, const tasks::ContinuousDataset& ds,
                              const std::vector<double>& edges) {
  const int n = static_cast<int>(ds.items.size());
  auto session = model.decoder.make_session();
  std::vector<double> l1(static_cast<size_t>(n), 0.0);
  parallel_for(n, eval_thread_cap(n), [&](int i) {
    const auto& ex = ds.items[static_cast<size_t>(i)];
    dec::EncoderOutput enc{model.encoder.forward_plain(ex.source),
                           std::vector<uint8_t>(ex.source.size(), 1)};
    auto state = model.decoder.init_state(enc);
    std::vector<double> prev(static_cast<size_t>(ex.feature_dim), 0.0);
    double err = 0.0;
    for (int t = 0; t < ex.frames; ++t) {
      auto frame = model.decoder.step_continuous(session, state, prev);
      for (int f = 0; f < ex.feature_dim; ++f)
        err += std::abs(frame[static_cast<size_t>(f)] -
                        static_cast<double>(ex.target[static_cast<size_t>(t * ex.feature_dim + f)]));
      prev = std::move(frame);
    }
    l1[static_cast<size_t>(i)] = err / static_cast<double>(ex.frames * ex.feature_dim);
  });
  L1Metrics m;
  for (size_t i = 0; i + 1 < edges.size(); ++i)
    m.buckets.push_back({edges[i], edges[i + 1], 0, 0, 0.0, 0.0});
  m.buckets.push_back({edges.empty() ? 0.0 : edges.back(), -1.0, 0, 0, 0.0, 0.0});
  for (int i = 0; i < n; ++i) {
    const double len = static_cast<double>(ds.items[static_cast<size_t>(i)].frames);
    size_t b = m.buckets.size() - 1;
    for (size_t j = 0; j + 1 < m.buckets.size(); ++j)
      if (len > m.buckets[j].lo && len <= m.buckets[j].hi) {
        b = j;
        break;
      }
    m.buckets[b].count += 1;
    m.buckets[b].frames += ds.items[static_cast<size_t>(i)].frames;
    m.buckets[b].l1_sum += l1[static_cast<size_t>(i)];
  }
  double weighted = 0.0;
  for (auto& b : m.buckets) {
    b.l1_mean = b.count > 0 ? b.l1_sum / static_cast<double>(b.count) : 0.0;
    weighted += b.l1_mean * static_cast<double>(b.count);
    m.count += b.count;
  }
  m.aggregate = m.count > 0 ? weighted / static_cast<double>(m.count) : 0.0;
  return m;
}

// ---------------------------------------------------------------------------
// Long-form robustness experiment
// ---------------------------------------------------------------------------

struct LongformReport {
  nlohmann::ordered_json json;
  std::string report_path;
  std::string buckets_csv_path;
  std::string loss_curves_path;
};

// Trains both decoder variants on short sequences with identical data and
// seeds, evaluates each on the held-out set and on its k-fold concatenation,
// and emits error-rate-versus-length tables plus per-epoch loss curves.
inline LongformReport run_longform_experiment(const RunConfig& base_cfg) {
  base_cfg.validate();
  std::filesystem::create_directories(base_cfg.out_dir);
  const auto edges = default_bucket_edges(base_cfg.train_len_max);

  LongformReport report;
  report.json["task"] = base_cfg.task;
  report.json["longform_k"] = base_cfg.longform_k;
  report.json["seed"] = base_cfg.seed;
  report.json["train_len_max"] = base_cfg.train_len_max;
  report.json["variants"] = nlohmann::ordered_json::object();

  std::ostringstream buckets_csv;
  buckets_csv << "variant,set,bucket_lo,bucket_hi,count,value\n";
  std::ostringstream curves_csv;
  curves_csv << "variant,epoch,steps,train_loss,val_loss,val_metric\n";

  for (dec::Variant variant : {dec::Variant::s4, dec::Variant::transformer}) {
    RunConfig cfg = base_cfg;
    cfg.model.variant = variant;
    cfg.out_dir = base_cfg.out_dir + "/" + dec::variant_name(variant);
    auto tres = train<float>(cfg);
    auto model = model_from_checkpoint<float>(load_checkpoint(tres.averaged_path));

    for (const auto& log : tres.epoch_logs)
      curves_csv << dec::variant_name(variant) << "," << log["epoch"] << "," << log["steps"]
                 << "," << log["train_loss"] << "," << log["val_loss"] << ","
                 << log["val_metric"] << "\n";

    nlohmann::ordered_json vj;
    vj["train"] = {{"epochs_run", tres.epochs_run},
                   {"steps", tres.steps},
                   {"best_val_metric", tres.best_metric}};
    auto emit_buckets = [&](const char* set_name, const nlohmann::ordered_json& mj) {
      for (const auto& b : mj.at("buckets")) {
        buckets_csv << dec::variant_name(variant) << "," << set_name << "," << b.at("len_gt");
        if (b.contains("len_le"))
          buckets_csv << "," << b.at("len_le");
        else
          buckets_csv << ",inf";
        buckets_csv << "," << b.at("count") << ","
                    << (b.contains("error_rate") ? b.at("error_rate") : b.at("l1")) << "\n";
      }
    };

    RunData data = make_run_data(cfg);
    if (cfg.is_continuous()) {
      auto in_dist = evaluate_continuous(model, data.eval_c, edges);
      auto longform =
          evaluate_continuous(model, tasks::concat_longform(data.eval_c, cfg.longform_k), edges);
      vj["in_dist"] = l1_metrics_to_json(in_dist);
      vj["longform"] = l1_metrics_to_json(longform);
      vj["degradation_ratio"] =
          longform.aggregate / std::max(in_dist.aggregate, 1e-12);
      emit_buckets("in_dist", vj["in_dist"]);
      emit_buckets("longform", vj["longform"]);
    } else {
      auto in_dist =
          evaluate_discrete(model, data.eval_d, cfg.beam_size, edges, cfg.eval_max_len_slack);
      auto longform =
          evaluate_discrete(model, tasks::concat_longform(data.eval_d, cfg.longform_k),
                            cfg.beam_size, edges, cfg.eval_max_len_slack);
      vj["in_dist"] = tasks::metrics_to_json(in_dist.metrics);
      vj["longform"] = tasks::metrics_to_json(longform.metrics);
      vj["degradation_ratio"] =
          longform.metrics.aggregate / std::max(in_dist.metrics.aggregate, 1e-12);
      emit_buckets("in_dist", vj["in_dist"]);
      emit_buckets("longform", vj["longform"]);
    }
    report.json["variants"][dec::variant_name(variant)] = vj;
  }

  report.report_path = base_cfg.out_dir + "/report.json";
  report.buckets_csv_path = base_cfg.out_dir + "/report_buckets.csv";
  report.loss_curves_path = base_cfg.out_dir + "/loss_curves.csv";
  std::ofstream(report.report_path, std::ios::binary) << report.json.dump(2) << "\n";
  std::ofstream(report.buckets_csv_path, std::ios::binary) << buckets_csv.str();
  std::ofstream(report.loss_curves_path, std::ios::binary) << curves_csv.str();
  return report;
}

}  // namespace ssq::harness
