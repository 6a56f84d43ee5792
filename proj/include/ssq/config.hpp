#pragma once

#include <cstdint>
#include <fstream>
#include <sstream>
#include <string>

#include <json.hpp>

#include "ssq/decoder.hpp"
#include "ssq/errors.hpp"

namespace ssq::harness {

// Run configuration for the training/evaluation harness. Accepts flat JSON
// objects or key=value text; unknown keys are rejected. Desk-scale defaults
// throughout; the full-scale recipe (6 layers, d_model 512, N 64, warmup
// 40000, peak lr 0.025, beam 25-60, 10-best averaging) stays expressible.
struct RunConfig {
  dec::DecoderConfig model;

  std::string task = "copy";  // copy | reverse | continuous
  int vocab = 16;             // task tokens (BOS/EOS added on top)
  int feature_dim = 8;        // continuous task frame width
  int train_len_min = 5;
  int train_len_max = 20;
  int n_train = 2000;
  int n_valid = 200;
  int n_eval = 200;

  int epochs = 20;
  int batch_size = 16;
  int beam_size = 5;
  int keep_best = 3;  // k-best checkpoints kept and averaged
  uint64_t seed = 1;
  std::string out_dir = "runs/out";

  double peak_lr = 1e-3;
  int warmup_steps = 500;
  double lr_decay_gamma = 1e-4;
  double weight_decay = 0.01;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;

  // Stop as soon as teacher-forced validation token accuracy reaches this
  // value; disabled when negative.
  double early_stop_token_acc = -1.0;
  int longform_k = 3;
  // Extra decode steps allowed past the reference length at evaluation time.
  int eval_max_len_slack = 0;

  RunConfig() {
    model.num_layers = 2;
    model.d_model = 64;
    model.n_heads = 4;
    model.d_ffn = 128;
    model.state_size = 16;
    model.dropout = 0.0;
    model.stochastic_depth_p = 0.1;
    model.variant = dec::Variant::s4;
  }

  bool is_continuous() const { return task == "continuous"; }

  // Decoder config with the head fields derived from the task.
  dec::DecoderConfig decoder_config() const {
    dec::DecoderConfig c = model;
    if (is_continuous()) {
      c.head = dec::HeadKind::continuous;
      c.feature_dim = feature_dim;
      c.vocab_size = 0;
    } else {
      c.head = dec::HeadKind::token;
      c.vocab_size = vocab + 2;
      c.feature_dim = 0;
    }
    return c;
  }

  void validate() const {
    if (task != "copy" && task != "reverse" && task != "continuous")
      throw ConfigError("config: task must be copy, reverse or continuous");
    if (vocab < 2) throw ConfigError("config: vocab must be >= 2");
    if (feature_dim < 1) throw ConfigError("config: feature_dim must be >= 1");
    if (train_len_min < 1 || train_len_max < train_len_min)
      throw ConfigError("config: train length range invalid");
    if (n_train < 0 || n_valid < 0 || n_eval < 0) throw ConfigError("config: sizes must be >= 0");
    if (epochs < 0) throw ConfigError("config: epochs must be >= 0");
    if (batch_size < 1) throw ConfigError("config: batch_size must be >= 1");
    if (beam_size < 1) throw ConfigError("config: beam_size must be >= 1");
    if (keep_best < 1) throw ConfigError("config: keep_best must be >= 1");
    if (peak_lr <= 0.0) throw ConfigError("config: peak_lr must be > 0");
    if (warmup_steps < 1) throw ConfigError("config: warmup_steps must be >= 1");
    if (lr_decay_gamma < 0.0) throw ConfigError("config: lr_decay_gamma must be >= 0");
    if (weight_decay < 0.0) throw ConfigError("config: weight_decay must be >= 0");
    if (longform_k < 2) throw ConfigError("config: longform_k must be >= 2");
    if (eval_max_len_slack < 0) throw ConfigError("config: eval_max_len_slack must be >= 0");
    decoder_config().validate();
  }
};

namespace detail {

template <typename T>
void assign_number(T& field, const nlohmann::json& v, const std::string& key) {
  if constexpr (std::is_same_v<T, std::string>) {
    if (!v.is_string()) throw ConfigError("config: " + key + " must be a string");
    field = v.get<std::string>();
  } else {
    if (v.is_string()) {
      std::istringstream is(v.get<std::string>());
      is >> field;
      if (is.fail()) throw ConfigError("config: cannot parse value for " + key);
    } else if (v.is_number() || v.is_boolean()) {
      field = v.get<T>();
    } else {
      throw ConfigError("config: bad value type for " + key);
    }
  }
}

}  // namespace detail

inline void apply_config_key(RunConfig& cfg, const std::string& key, const nlohmann::json& v) {
  using detail::assign_number;
  if (key == "model.variant") {
    std::string s;
    assign_number(s, v, key);
    if (s == "s4")
      cfg.model.variant = dec::Variant::s4;
    else if (s == "transformer")
      cfg.model.variant = dec::Variant::transformer;
    else
      throw ConfigError("config: model.variant must be s4 or transformer");
  } else if (key == "model.num_layers") assign_number(cfg.model.num_layers, v, key);
  else if (key == "model.d_model") assign_number(cfg.model.d_model, v, key);
  else if (key == "model.n_heads") assign_number(cfg.model.n_heads, v, key);
  else if (key == "model.d_ffn") assign_number(cfg.model.d_ffn, v, key);
  else if (key == "model.state_size") assign_number(cfg.model.state_size, v, key);
  else if (key == "model.dropout") assign_number(cfg.model.dropout, v, key);
  else if (key == "model.stochastic_depth_p") assign_number(cfg.model.stochastic_depth_p, v, key);
  else if (key == "task") assign_number(cfg.task, v, key);
  else if (key == "vocab") assign_number(cfg.vocab, v, key);
  else if (key == "feature_dim") assign_number(cfg.feature_dim, v, key);
  else if (key == "train_len_min") assign_number(cfg.train_len_min, v, key);
  else if (key == "train_len_max") assign_number(cfg.train_len_max, v, key);
  else if (key == "n_train") assign_number(cfg.n_train, v, key);
  else if (key == "n_valid") assign_number(cfg.n_valid, v, key);
  else if (key == "n_eval") assign_number(cfg.n_eval, v, key);
  else if (key == "epochs") assign_number(cfg.epochs, v, key);
  else if (key == "batch_size") assign_number(cfg.batch_size, v, key);
  else if (key == "beam_size") assign_number(cfg.beam_size, v, key);
  else if (key == "keep_best") assign_number(cfg.keep_best, v, key);
  else if (key == "seed") assign_number(cfg.seed, v, key);
  else if (key == "out_dir") assign_number(cfg.out_dir, v, key);
  else if (key == "peak_lr") assign_number(cfg.peak_lr, v, key);
  else if (key == "warmup_steps") assign_number(cfg.warmup_steps, v, key);
  else if (key == "lr_decay_gamma") assign_number(cfg.lr_decay_gamma, v, key);
  else if (key == "weight_decay") assign_number(cfg.weight_decay, v, key);
  else if (key == "beta1") assign_number(cfg.beta1, v, key);
  else if (key == "beta2") assign_number(cfg.beta2, v, key);
  else if (key == "adam_eps") assign_number(cfg.adam_eps, v, key);
  else if (key == "early_stop_token_acc") assign_number(cfg.early_stop_token_acc, v, key);
  else if (key == "longform_k") assign_number(cfg.longform_k, v, key);
  else if (key == "eval_max_len_slack") assign_number(cfg.eval_max_len_slack, v, key);
  else throw ConfigError("config: unknown key '" + key + "'");
}

inline RunConfig parse_config_text(const std::string& text) {
  RunConfig cfg;
  // First non-space character decides the format.
  size_t i = text.find_first_not_of(" \t\r\n");
  if (i != std::string::npos && text[i] == '{') {
    auto j = nlohmann::json::parse(text);
    if (!j.is_object()) throw ConfigError("config: top level must be an object");
    for (auto it = j.begin(); it != j.end(); ++it) apply_config_key(cfg, it.key(), it.value());
  } else {
    std::istringstream is(text);
    std::string line;
    while (std::getline(is, line)) {
      const size_t hash = line.find('#');
      if (hash != std::string::npos) line = line.substr(0, hash);
      const size_t a = line.find_first_not_of(" \t\r");
      if (a == std::string::npos) continue;
      const size_t b = line.find_last_not_of(" \t\r");
      line = line.substr(a, b - a + 1);
      const size_t eq = line.find('=');
      if (eq == std::string::npos) throw ConfigError("config: expected key=value, got '" + line + "'");
      auto trim = [](std::string s) {
        const size_t x = s.find_first_not_of(" \t");
        const size_t y = s.find_last_not_of(" \t");
        return x == std::string::npos ? std::string() : s.substr(x, y - x + 1);
      };
      apply_config_key(cfg, trim(line.substr(0, eq)), nlohmann::json(trim(line.substr(eq + 1))));
    }
  }
  cfg.validate();
  return cfg;
}

inline RunConfig load_config(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw ConfigError("config: cannot open " + path);
  std::ostringstream ss;
  ss << f.rdbuf();
  return parse_config_text(ss.str());
}

// Canonical flat JSON (fixed key order) used for hashing and for embedding
// the configuration in checkpoints.
inline nlohmann::ordered_json config_to_json(const RunConfig& cfg) {
  nlohmann::ordered_json j;
  j["model.variant"] = dec::variant_name(cfg.model.variant);
  j["model.num_layers"] = cfg.model.num_layers;
  j["model.d_model"] = cfg.model.d_model;
  j["model.n_heads"] = cfg.model.n_heads;
  j["model.d_ffn"] = cfg.model.d_ffn;
  j["model.state_size"] = cfg.model.state_size;
  j["model.dropout"] = cfg.model.dropout;
  j["model.stochastic_depth_p"] = cfg.model.stochastic_depth_p;
  j["task"] = cfg.task;
  j["vocab"] = cfg.vocab;
  j["feature_dim"] = cfg.feature_dim;
  j["train_len_min"] = cfg.train_len_min;
  j["train_len_max"] = cfg.train_len_max;
  j["n_train"] = cfg.n_train;
  j["n_valid"] = cfg.n_valid;
  j["n_eval"] = cfg.n_eval;
  j["epochs"] = cfg.epochs;
  j["batch_size"] = cfg.batch_size;
  j["beam_size"] = cfg.beam_size;
  j["keep_best"] = cfg.keep_best;
  j["seed"] = cfg.seed;
  j["out_dir"] = cfg.out_dir;
  j["peak_lr"] = cfg.peak_lr;
  j["warmup_steps"] = cfg.warmup_steps;
  j["lr_decay_gamma"] = cfg.lr_decay_gamma;
  j["weight_decay"] = cfg.weight_decay;
  j["beta1"] = cfg.beta1;
  j["beta2"] = cfg.beta2;
  j["adam_eps"] = cfg.adam_eps;
  j["early_stop_token_acc"] = cfg.early_stop_token_acc;
  j["longform_k"] = cfg.longform_k;
  j["eval_max_len_slack"] = cfg.eval_max_len_slack;
  return j;
}

inline RunConfig config_from_json(const nlohmann::ordered_json& j) {
  RunConfig cfg;
  for (auto it = j.begin(); it != j.end(); ++it) apply_config_key(cfg, it.key(), it.value());
  cfg.validate();
  return cfg;
}

inline std::string config_hash(const RunConfig& cfg) {
  const std::string s = config_to_json(cfg).dump();
  uint64_t h = 0xcbf29ce484222325ULL;  // FNV-1a 64
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return std::string(buf);
}

}  // namespace ssq::harness
