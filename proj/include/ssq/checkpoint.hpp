#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "ssq/errors.hpp"
#include "ssq/optim.hpp"
#include "ssq/ssm.hpp"
#include "ssq/tensor.hpp"

namespace ssq::harness {

// Checkpoint file layout: 4-byte magic "SSQ1", u32 little-endian manifest
// byte length, manifest JSON, then one flat blob of little-endian f32 values
// concatenated in manifest order. Save is deterministic, so load -> save
// round-trips byte-identically.
struct TensorEntry {
  std::string name;
  std::vector<int64_t> shape;
  std::string dtype = "f32";

  int64_t numel() const { return Tensor<float>::numel_of(shape); }
};

struct Checkpoint {
  int format_version = 1;
  std::string config_hash;
  nlohmann::ordered_json config;  // flat key/value run configuration
  int64_t step = 0;
  double metric = 0.0;
  std::vector<TensorEntry> entries;
  std::vector<float> blob;
};

inline nlohmann::ordered_json checkpoint_manifest(const Checkpoint& c) {
  nlohmann::ordered_json m;
  m["format_version"] = c.format_version;
  m["config_hash"] = c.config_hash;
  m["step"] = c.step;
  m["metric"] = c.metric;
  m["config"] = c.config;
  m["tensors"] = nlohmann::ordered_json::array();
  for (const auto& e : c.entries) {
    nlohmann::ordered_json je;
    je["name"] = e.name;
    je["shape"] = e.shape;
    je["dtype"] = e.dtype;
    m["tensors"].push_back(je);
  }
  return m;
}

inline void save_checkpoint(const std::string& path, const Checkpoint& c) {
  int64_t total = 0;
  for (const auto& e : c.entries) total += e.numel();
  if (total != static_cast<int64_t>(c.blob.size()))
    throw ManifestMismatch("save_checkpoint: blob length disagrees with manifest");
  std::ofstream f(path, std::ios::binary);
  if (!f) throw Error("save_checkpoint: cannot open " + path);
  const std::string manifest = checkpoint_manifest(c).dump();
  const uint32_t len = static_cast<uint32_t>(manifest.size());
  f.write("SSQ1", 4);
  char lenb[4] = {static_cast<char>(len & 0xff), static_cast<char>((len >> 8) & 0xff),
                  static_cast<char>((len >> 16) & 0xff), static_cast<char>((len >> 24) & 0xff)};
  f.write(lenb, 4);
  f.write(manifest.data(), static_cast<std::streamsize>(manifest.size()));
  f.write(reinterpret_cast<const char*>(c.blob.data()),
          static_cast<std::streamsize>(c.blob.size() * sizeof(float)));
  if (!f) throw Error("save_checkpoint: write failed for " + path);
}

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw Error("load_checkpoint: cannot open " + path);
  char magic[4];
  f.read(magic, 4);
  if (!f || std::memcmp(magic, "SSQ1", 4) != 0)
    throw ManifestMismatch("load_checkpoint: bad magic in " + path);
  unsigned char lenb[4];
  f.read(reinterpret_cast<char*>(lenb), 4);
  const uint32_t len = static_cast<uint32_t>(lenb[0]) | (static_cast<uint32_t>(lenb[1]) << 8) |
                       (static_cast<uint32_t>(lenb[2]) << 16) |
                       (static_cast<uint32_t>(lenb[3]) << 24);
  std::string manifest(len, '\0');
  f.read(manifest.data(), len);
  if (!f) throw ManifestMismatch("load_checkpoint: truncated manifest in " + path);
  auto m = nlohmann::ordered_json::parse(manifest);
  Checkpoint c;
  c.format_version = m.at("format_version").get<int>();
  if (c.format_version != 1)
    throw ManifestMismatch("load_checkpoint: unsupported format_version");
  c.config_hash = m.at("config_hash").get<std::string>();
  c.step = m.at("step").get<int64_t>();
  c.metric = m.at("metric").get<double>();
  c.config = m.at("config");
  int64_t total = 0;
  for (const auto& je : m.at("tensors")) {
    TensorEntry e;
    e.name = je.at("name").get<std::string>();
    e.shape = je.at("shape").get<std::vector<int64_t>>();
    e.dtype = je.at("dtype").get<std::string>();
    if (e.dtype != "f32") throw ManifestMismatch("load_checkpoint: unsupported dtype " + e.dtype);
    total += e.numel();
    c.entries.push_back(std::move(e));
  }
  c.blob.resize(static_cast<size_t>(total));
  f.read(reinterpret_cast<char*>(c.blob.data()),
         static_cast<std::streamsize>(c.blob.size() * sizeof(float)));
  if (!f) throw ManifestMismatch("load_checkpoint: truncated blob in " + path);
  return c;
}

// Arithmetic mean of the tensors of several checkpoints. Manifests must
// agree on tensor names and shapes. Accumulation runs in double so that the
// mean of identical checkpoints reproduces them bit-exactly.
inline Checkpoint average_checkpoints(const std::vector<Checkpoint>& cks) {
  if (cks.empty()) throw ManifestMismatch("average_checkpoints: no inputs");
  const Checkpoint& first = cks.front();
  for (const auto& c : cks) {
    if (c.entries.size() != first.entries.size())
      throw ManifestMismatch("average_checkpoints: tensor counts differ");
    for (size_t i = 0; i < c.entries.size(); ++i)
      if (c.entries[i].name != first.entries[i].name ||
          c.entries[i].shape != first.entries[i].shape)
        throw ManifestMismatch("average_checkpoints: manifest disagreement at " +
                               c.entries[i].name);
  }
  Checkpoint out = first;
  std::vector<double> acc(first.blob.size(), 0.0);
  for (const auto& c : cks)
    for (size_t i = 0; i < acc.size(); ++i) acc[i] += static_cast<double>(c.blob[i]);
  const double k = static_cast<double>(cks.size());
  for (size_t i = 0; i < acc.size(); ++i) out.blob[i] = static_cast<float>(acc[i] / k);
  int64_t max_step = 0;
  double metric_sum = 0.0;
  for (const auto& c : cks) {
    max_step = std::max(max_step, c.step);
    metric_sum += c.metric;
  }
  out.step = max_step;
  out.metric = metric_sum / k;
  return out;
}

inline Checkpoint average_checkpoint_files(const std::vector<std::string>& paths) {
  std::vector<Checkpoint> cks;
  cks.reserve(paths.size());
  for (const auto& p : paths) cks.push_back(load_checkpoint(p));
  return average_checkpoints(cks);
}

// ---- parameter store bridging ----

template <typename Real>
Checkpoint checkpoint_from_store(const ad::ParamStore<Real>& store, nlohmann::ordered_json config,
                                 const std::string& config_hash, int64_t step, double metric) {
  Checkpoint c;
  c.config = std::move(config);
  c.config_hash = config_hash;
  c.step = step;
  c.metric = metric;
  for (const auto& p : store.items) {
    TensorEntry e;
    e.name = p.name;
    e.shape = p.value.shape;
    c.entries.push_back(e);
    for (const Real v : p.value.data) c.blob.push_back(static_cast<float>(v));
  }
  return c;
}

template <typename Real>
void load_into_store(const Checkpoint& c, ad::ParamStore<Real>& store) {
  if (c.entries.size() != store.items.size())
    throw ManifestMismatch("load_into_store: tensor count mismatch");
  size_t offset = 0, idx = 0;
  for (auto& p : store.items) {
    const TensorEntry& e = c.entries[idx++];
    if (e.name != p.name || e.shape != p.value.shape)
      throw ManifestMismatch("load_into_store: mismatch at " + e.name + " vs " + p.name);
    for (int64_t i = 0; i < p.value.numel(); ++i)
      p.value[i] = static_cast<Real>(c.blob[offset++]);
  }
}

// ---- dense state-space fixtures ----

// Complex matrices stored as paired re/im f32 tensors so dense reference
// systems can ride the same checkpoint format in test fixtures.
inline void dssm_to_store(ad::ParamStore<float>& store, const std::string& prefix,
                          const ssm::DiscreteSSM& d) {
  const int n = d.state_size();
  auto put = [&](const std::string& name, std::vector<int64_t> shape,
                 std::vector<float> vals) {
    store.add(prefix + name, Tensor<float>(std::move(shape), std::move(vals)), true);
  };
  std::vector<float> are, aim, bre, bim, cre, cim;
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) {
      are.push_back(static_cast<float>(d.A_bar(i, j).real()));
      aim.push_back(static_cast<float>(d.A_bar(i, j).imag()));
    }
  for (int i = 0; i < n; ++i) {
    bre.push_back(static_cast<float>(d.B_bar(i).real()));
    bim.push_back(static_cast<float>(d.B_bar(i).imag()));
    cre.push_back(static_cast<float>(d.C_bar(i).real()));
    cim.push_back(static_cast<float>(d.C_bar(i).imag()));
  }
  put("A_bar_re", {n, n}, std::move(are));
  put("A_bar_im", {n, n}, std::move(aim));
  put("B_bar_re", {n}, std::move(bre));
  put("B_bar_im", {n}, std::move(bim));
  put("C_bar_re", {n}, std::move(cre));
  put("C_bar_im", {n}, std::move(cim));
  put("D_bar", {2}, {static_cast<float>(d.D_bar.real()), static_cast<float>(d.D_bar.imag())});
  put("delta", {1}, {static_cast<float>(d.delta)});
}

inline ssm::DiscreteSSM dssm_from_store(ad::ParamStore<float>& store, const std::string& prefix) {
  auto get = [&](const std::string& name) -> Tensor<float>& {
    auto* p = store.find(prefix + name);
    if (!p) throw ManifestMismatch("dssm_from_store: missing tensor " + prefix + name);
    return p->value;
  };
  const auto& are = get("A_bar_re");
  const int n = static_cast<int>(are.rows());
  ssm::DiscreteSSM d;
  d.A_bar = ssm::MatrixC(n, n);
  d.B_bar = ssm::VectorC(n);
  d.C_bar = ssm::RowVectorC(n);
  const auto& aim = get("A_bar_im");
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) d.A_bar(i, j) = ssm::Complex(are.at(i, j), aim.at(i, j));
  const auto& bre = get("B_bar_re");
  const auto& bim = get("B_bar_im");
  const auto& cre = get("C_bar_re");
  const auto& cim = get("C_bar_im");
  for (int i = 0; i < n; ++i) {
    d.B_bar(i) = ssm::Complex(bre[i], bim[i]);
    d.C_bar(i) = ssm::Complex(cre[i], cim[i]);
  }
  const auto& db = get("D_bar");
  d.D_bar = ssm::Complex(db[0], db[1]);
  d.delta = static_cast<double>(get("delta")[0]);
  return d;
}

}  // namespace ssq::harness
