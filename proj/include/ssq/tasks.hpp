#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "ssq/errors.hpp"
#include "ssq/tensor.hpp"

namespace ssq::tasks {

// Token id conventions: task tokens are 0..vocab-1, BOS = vocab,
// EOS = vocab+1. Model vocabularies are therefore vocab+2 wide.
inline int bos_id(int vocab) { return vocab; }
inline int eos_id(int vocab) { return vocab + 1; }

struct DiscreteExample {
  std::vector<int> source;  // raw tokens
  std::vector<int> target;  // BOS + tokens + EOS
};

struct DiscreteDataset {
  int vocab = 0;
  std::vector<DiscreteExample> items;
};

struct ContinuousExample {
  std::vector<int> source;
  int frames = 0;
  int feature_dim = 0;
  std::vector<float> target;  // frames x feature_dim, row-major, in [-1, 1]
};

struct ContinuousDataset {
  int vocab = 0;
  int feature_dim = 0;
  std::vector<ContinuousExample> items;
};

namespace detail {

inline std::vector<int> random_tokens(Rng& rng, int len, int vocab) {
  std::uniform_int_distribution<int> tok(0, vocab - 1);
  std::vector<int> out(static_cast<size_t>(len));
  for (auto& t : out) t = tok(rng);
  return out;
}

inline std::vector<int> wrap_target(std::vector<int> tokens, int vocab) {
  std::vector<int> out;
  out.reserve(tokens.size() + 2);
  out.push_back(bos_id(vocab));
  for (int t : tokens) out.push_back(t);
  out.push_back(eos_id(vocab));
  return out;
}

}  // namespace detail

// Inner tokens of a target (BOS/EOS stripped).
inline std::vector<int> strip_specials(const std::vector<int>& target) {
  if (target.size() < 2) return {};
  return std::vector<int>(target.begin() + 1, target.end() - 1);
}

inline DiscreteDataset gen_copy_task(int n, int len_lo, int len_hi, int vocab, uint64_t seed) {
  if (n < 0 || len_lo < 1 || len_hi < len_lo || vocab < 1)
    throw ConfigError("gen_copy_task: bad parameters");
  DiscreteDataset ds;
  ds.vocab = vocab;
  auto rng = make_rng(seed, 11);
  std::uniform_int_distribution<int> len(len_lo, len_hi);
  for (int i = 0; i < n; ++i) {
    auto src = detail::random_tokens(rng, len(rng), vocab);
    ds.items.push_back({src, detail::wrap_target(src, vocab)});
  }
  return ds;
}

inline std::vector<int> reverse_target_tokens(const std::vector<int>& source) {
  return std::vector<int>(source.rbegin(), source.rend());
}

inline DiscreteDataset gen_reverse_task(int n, int len_lo, int len_hi, int vocab, uint64_t seed) {
  if (n < 0 || len_lo < 1 || len_hi < len_lo || vocab < 1)
    throw ConfigError("gen_reverse_task: bad parameters");
  DiscreteDataset ds;
  ds.vocab = vocab;
  auto rng = make_rng(seed, 13);
  std::uniform_int_distribution<int> len(len_lo, len_hi);
  for (int i = 0; i < n; ++i) {
    auto src = detail::random_tokens(rng, len(rng), vocab);
    ds.items.push_back({src, detail::wrap_target(reverse_target_tokens(src), vocab)});
  }
  return ds;
}

// Per-token sinusoid dictionary for the continuous task: one frequency
// (cycles per frame) and phase per (token, feature).
struct SinusoidDictionary {
  int vocab = 0, feature_dim = 0;
  std::vector<float> freq;   // vocab x F
  std::vector<float> phase;  // vocab x F

  float f(int tok, int feat) const { return freq[static_cast<size_t>(tok * feature_dim + feat)]; }
  float ph(int tok, int feat) const {
    return phase[static_cast<size_t>(tok * feature_dim + feat)];
  }
};

inline SinusoidDictionary make_dictionary(int vocab, int feature_dim, uint64_t seed) {
  SinusoidDictionary d;
  d.vocab = vocab;
  d.feature_dim = feature_dim;
  d.freq.resize(static_cast<size_t>(vocab * feature_dim));
  d.phase.resize(static_cast<size_t>(vocab * feature_dim));
  auto rng = make_rng(seed, 17);
  std::uniform_real_distribution<double> fr(0.02, 0.2);
  std::uniform_real_distribution<double> ph(0.0, 2.0 * 3.14159265358979323846);
  for (auto& v : d.freq) v = static_cast<float>(fr(rng));
  for (auto& v : d.phase) v = static_cast<float>(ph(rng));
  return d;
}

// One frame per source token; frame t averages the sinusoids of the tokens
// active in the window |i - t| <= 1. Values stay in [-1, 1] by construction.
inline std::vector<float> render_continuous_target(const std::vector<int>& source,
                                                   const SinusoidDictionary& dict) {
  const int frames = static_cast<int>(source.size());
  const int fdim = dict.feature_dim;
  std::vector<float> out(static_cast<size_t>(frames * fdim), 0.0f);
  const double two_pi = 2.0 * 3.14159265358979323846;
  for (int t = 0; t < frames; ++t) {
    const int lo = std::max(0, t - 1);
    const int hi = std::min(frames - 1, t + 1);
    for (int f = 0; f < fdim; ++f) {
      double acc = 0.0;
      for (int i = lo; i <= hi; ++i) {
        const int tok = source[static_cast<size_t>(i)];
        acc += std::sin(two_pi * dict.f(tok, f) * t + dict.ph(tok, f));
      }
      out[static_cast<size_t>(t * fdim + f)] = static_cast<float>(acc / (hi - lo + 1));
    }
  }
  return out;
}

// Overload with an explicit dictionary so training/validation/evaluation
// splits can share one token-to-sinusoid mapping while sampling with
// different seeds.
inline ContinuousDataset gen_continuous_task(int n, int len_lo, int len_hi,
                                             const SinusoidDictionary& dict, uint64_t seed) {
  if (n < 0 || len_lo < 1 || len_hi < len_lo)
    throw ConfigError("gen_continuous_task: bad parameters");
  ContinuousDataset ds;
  ds.vocab = dict.vocab;
  ds.feature_dim = dict.feature_dim;
  auto rng = make_rng(seed, 19);
  std::uniform_int_distribution<int> len(len_lo, len_hi);
  for (int i = 0; i < n; ++i) {
    ContinuousExample ex;
    ex.source = detail::random_tokens(rng, len(rng), dict.vocab);
    ex.frames = static_cast<int>(ex.source.size());
    ex.feature_dim = dict.feature_dim;
    ex.target = render_continuous_target(ex.source, dict);
    ds.items.push_back(std::move(ex));
  }
  return ds;
}

inline ContinuousDataset gen_continuous_task(int n, int len_lo, int len_hi, int feature_dim,
                                             uint64_t seed, int vocab = 16) {
  if (n < 0 || len_lo < 1 || len_hi < len_lo || feature_dim < 1 || vocab < 1)
    throw ConfigError("gen_continuous_task: bad parameters");
  ContinuousDataset ds;
  ds.vocab = vocab;
  ds.feature_dim = feature_dim;
  auto dict = make_dictionary(vocab, feature_dim, seed);
  auto rng = make_rng(seed, 19);
  std::uniform_int_distribution<int> len(len_lo, len_hi);
  for (int i = 0; i < n; ++i) {
    ContinuousExample ex;
    ex.source = detail::random_tokens(rng, len(rng), vocab);
    ex.frames = static_cast<int>(ex.source.size());
    ex.feature_dim = feature_dim;
    ex.target = render_continuous_target(ex.source, dict);
    ds.items.push_back(std::move(ex));
  }
  return ds;
}

// Merge consecutive groups of k examples: sources concatenated, inner target
// tokens concatenated, one BOS/EOS pair kept.
inline DiscreteDataset concat_longform(const DiscreteDataset& ds, int k) {
  if (k < 2) throw ConfigError("concat_longform: k must be >= 2");
  DiscreteDataset out;
  out.vocab = ds.vocab;
  const size_t groups = ds.items.size() / static_cast<size_t>(k);
  for (size_t g = 0; g < groups; ++g) {
    DiscreteExample merged;
    std::vector<int> inner;
    for (int j = 0; j < k; ++j) {
      const auto& ex = ds.items[g * static_cast<size_t>(k) + static_cast<size_t>(j)];
      merged.source.insert(merged.source.end(), ex.source.begin(), ex.source.end());
      auto part = strip_specials(ex.target);
      inner.insert(inner.end(), part.begin(), part.end());
    }
    merged.target = detail::wrap_target(std::move(inner), ds.vocab);
    out.items.push_back(std::move(merged));
  }
  return out;
}

inline ContinuousDataset concat_longform(const ContinuousDataset& ds, int k) {
  if (k < 2) throw ConfigError("concat_longform: k must be >= 2");
  ContinuousDataset out;
  out.vocab = ds.vocab;
  out.feature_dim = ds.feature_dim;
  const size_t groups = ds.items.size() / static_cast<size_t>(k);
  for (size_t g = 0; g < groups; ++g) {
    ContinuousExample merged;
    merged.feature_dim = ds.feature_dim;
    for (int j = 0; j < k; ++j) {
      const auto& ex = ds.items[g * static_cast<size_t>(k) + static_cast<size_t>(j)];
      merged.source.insert(merged.source.end(), ex.source.begin(), ex.source.end());
      merged.target.insert(merged.target.end(), ex.target.begin(), ex.target.end());
      merged.frames += ex.frames;
    }
    out.items.push_back(std::move(merged));
  }
  return out;
}

// Levenshtein distance with unit insert/delete/substitute costs.
inline int edit_distance(const std::vector<int>& a, const std::vector<int>& b) {
  const size_t n = a.size(), m = b.size();
  std::vector<int> prev(m + 1), cur(m + 1);
  for (size_t j = 0; j <= m; ++j) prev[j] = static_cast<int>(j);
  for (size_t i = 1; i <= n; ++i) {
    cur[0] = static_cast<int>(i);
    for (size_t j = 1; j <= m; ++j) {
      const int sub = prev[j - 1] + (a[i - 1] == b[j - 1] ? 0 : 1);
      cur[j] = std::min({prev[j] + 1, cur[j - 1] + 1, sub});
    }
    std::swap(prev, cur);
  }
  return prev[m];
}

// Error rates bucketed by reference length. Bucket i covers reference
// lengths in (edges[i], edges[i+1]]; a final open bucket catches the rest.
struct BucketStat {
  double lo = 0.0, hi = 0.0;  // hi < 0 means unbounded
  int64_t count = 0;
  int64_t edits = 0;
  int64_t ref_tokens = 0;
  double error_rate = 0.0;
};

struct Metrics {
  std::vector<BucketStat> buckets;
  int64_t count = 0;
  double aggregate = 0.0;  // count-weighted mean of bucket error rates
};

inline Metrics error_rate(const std::vector<std::vector<int>>& refs,
                          const std::vector<std::vector<int>>& hyps,
                          std::vector<double> edges) {
  if (refs.size() != hyps.size()) throw LengthMismatch("error_rate: refs/hyps size mismatch");
  if (edges.size() < 2) edges = {0.0, 1e18};
  Metrics m;
  for (size_t i = 0; i + 1 < edges.size(); ++i)
    m.buckets.push_back({edges[i], edges[i + 1], 0, 0, 0, 0.0});
  m.buckets.push_back({edges.back(), -1.0, 0, 0, 0, 0.0});
  for (size_t i = 0; i < refs.size(); ++i) {
    const double len = static_cast<double>(refs[i].size());
    size_t b = m.buckets.size() - 1;
    for (size_t j = 0; j + 1 < m.buckets.size(); ++j)
      if (len > m.buckets[j].lo && len <= m.buckets[j].hi) {
        b = j;
        break;
      }
    m.buckets[b].count += 1;
    m.buckets[b].edits += edit_distance(refs[i], hyps[i]);
    m.buckets[b].ref_tokens += static_cast<int64_t>(refs[i].size());
  }
  double weighted = 0.0;
  for (auto& bkt : m.buckets) {
    bkt.error_rate = bkt.ref_tokens > 0
                         ? static_cast<double>(bkt.edits) / static_cast<double>(bkt.ref_tokens)
                         : 0.0;
    weighted += bkt.error_rate * static_cast<double>(bkt.count);
    m.count += bkt.count;
  }
  m.aggregate = m.count > 0 ? weighted / static_cast<double>(m.count) : 0.0;
  return m;
}

inline nlohmann::ordered_json metrics_to_json(const Metrics& m) {
  nlohmann::ordered_json out;
  out["count"] = m.count;
  out["aggregate_error_rate"] = m.aggregate;
  out["buckets"] = nlohmann::ordered_json::array();
  for (const auto& b : m.buckets) {
    nlohmann::ordered_json jb;
    jb["len_gt"] = b.lo;
    if (b.hi >= 0.0) jb["len_le"] = b.hi;
    jb["count"] = b.count;
    jb["edits"] = b.edits;
    jb["ref_tokens"] = b.ref_tokens;
    jb["error_rate"] = b.error_rate;
    out["buckets"].push_back(jb);
  }
  return out;
}

inline std::string metrics_to_csv(const Metrics& m) {
  std::ostringstream os;
  os << "bucket_lo,bucket_hi,count,edits,ref_tokens,error_rate\n";
  for (const auto& b : m.buckets) {
    os << b.lo << ",";
    if (b.hi >= 0.0)
      os << b.hi;
    else
      os << "inf";
    os << "," << b.count << "," << b.edits << "," << b.ref_tokens << "," << b.error_rate << "\n";
  }
  return os.str();
}

// ---------------------------------------------------------------------------
// Serialization: line-delimited JSON records
// ---------------------------------------------------------------------------

namespace detail {

inline const char* b64_alphabet() {
  return "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789+/";
}

inline std::string base64_encode(const uint8_t* data, size_t len) {
  const char* tab = b64_alphabet();
  std::string out;
  out.reserve((len + 2) / 3 * 4);
  for (size_t i = 0; i < len; i += 3) {
    uint32_t chunk = static_cast<uint32_t>(data[i]) << 16;
    if (i + 1 < len) chunk |= static_cast<uint32_t>(data[i + 1]) << 8;
    if (i + 2 < len) chunk |= static_cast<uint32_t>(data[i + 2]);
    out.push_back(tab[(chunk >> 18) & 63]);
    out.push_back(tab[(chunk >> 12) & 63]);
    out.push_back(i + 1 < len ? tab[(chunk >> 6) & 63] : '=');
    out.push_back(i + 2 < len ? tab[chunk & 63] : '=');
  }
  return out;
}

inline std::vector<uint8_t> base64_decode(const std::string& s) {
  auto val = [](char c) -> int {
    if (c >= 'A' && c <= 'Z') return c - 'A';
    if (c >= 'a' && c <= 'z') return c - 'a' + 26;
    if (c >= '0' && c <= '9') return c - '0' + 52;
    if (c == '+') return 62;
    if (c == '/') return 63;
    return -1;
  };
  std::vector<uint8_t> out;
  uint32_t chunk = 0;
  int bits = 0;
  for (char c : s) {
    if (c == '=') break;
    const int v = val(c);
    if (v < 0) throw Error("base64: invalid character");
    chunk = (chunk << 6) | static_cast<uint32_t>(v);
    bits += 6;
    if (bits >= 8) {
      bits -= 8;
      out.push_back(static_cast<uint8_t>((chunk >> bits) & 0xff));
    }
  }
  return out;
}

// Little-endian f32 bytes of a float vector (byte-swapped on big-endian
// hosts; all supported targets here are little-endian).
inline std::string floats_to_b64(const std::vector<float>& v) {
  return base64_encode(reinterpret_cast<const uint8_t*>(v.data()), v.size() * 4);
}

inline std::vector<float> b64_to_floats(const std::string& s) {
  auto bytes = base64_decode(s);
  if (bytes.size() % 4 != 0) throw Error("base64 float payload not a multiple of 4 bytes");
  std::vector<float> out(bytes.size() / 4);
  std::memcpy(out.data(), bytes.data(), bytes.size());
  return out;
}

}  // namespace detail

inline void save_discrete(const std::string& path, const DiscreteDataset& ds) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw Error("save_discrete: cannot open " + path);
  for (const auto& ex : ds.items) {
    nlohmann::ordered_json j;
    j["src"] = ex.source;
    j["tgt"] = ex.target;
    f << j.dump() << "\n";
  }
}

inline DiscreteDataset load_discrete(const std::string& path, int vocab) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw Error("load_discrete: cannot open " + path);
  DiscreteDataset ds;
  ds.vocab = vocab;
  std::string line;
  while (std::getline(f, line)) {
    if (line.empty()) continue;
    auto j = nlohmann::json::parse(line);
    DiscreteExample ex;
    ex.source = j.at("src").get<std::vector<int>>();
    ex.target = j.at("tgt").get<std::vector<int>>();
    ds.items.push_back(std::move(ex));
  }
  return ds;
}

inline void save_continuous(const std::string& path, const ContinuousDataset& ds) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw Error("save_continuous: cannot open " + path);
  for (const auto& ex : ds.items) {
    nlohmann::ordered_json j;
    j["src"] = ex.source;
    j["tgt_shape"] = {ex.frames, ex.feature_dim};
    j["tgt"] = detail::floats_to_b64(ex.target);
    f << j.dump() << "\n";
  }
}

inline ContinuousDataset load_continuous(const std::string& path, int vocab) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw Error("load_continuous: cannot open " + path);
  ContinuousDataset ds;
  ds.vocab = vocab;
  std::string line;
  while (std::getline(f, line)) {
    if (line.empty()) continue;
    auto j = nlohmann::json::parse(line);
    ContinuousExample ex;
    ex.source = j.at("src").get<std::vector<int>>();
    ex.frames = j.at("tgt_shape")[0].get<int>();
    ex.feature_dim = j.at("tgt_shape")[1].get<int>();
    ex.target = detail::b64_to_floats(j.at("tgt").get<std::string>());
    if (static_cast<int>(ex.target.size()) != ex.frames * ex.feature_dim)
      throw Error("load_continuous: payload size disagrees with tgt_shape");
    if (ds.feature_dim == 0) ds.feature_dim = ex.feature_dim;
    ds.items.push_back(std::move(ex));
  }
  return ds;
}

}  // namespace ssq::tasks
