// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "mote/model.hpp"

namespace mote {

/// Accounting of which experts are held in memory. Bytes are in-memory
/// 64-bit element bytes; only experts of routed blocks count as expert
/// bytes (single-expert blocks are shared parameters).
struct ResidencyState {
  std::set<std::pair<std::size_t, std::size_t>> resident_experts;
  std::size_t resident_bytes = 0;
  std::size_t evicted_bytes = 0;
};

namespace detail {

inline const char* const kExpertTensors[8] = {
    "pre_norm.gain", "pre_norm.bias", "mlp.w1", "mlp.b1",
    "mlp.w2",        "mlp.b2",        "post_norm.gain", "post_norm.bias"};

inline std::vector<std::pair<std::size_t, std::size_t>> routed_experts(
    const EncoderConfig& cfg) {
  std::vector<std::pair<std::size_t, std::size_t>> out;
  for (std::size_t layer = 0; layer < cfg.num_layers; ++layer)
    if (cfg.routed_block(layer))
      for (std::size_t e = 0; e < cfg.experts_in_block(layer); ++e)
        out.emplace_back(layer, e);
  return out;
}

inline bool expert_resident(const ModelCheckpoint& m, std::size_t layer,
                            std::size_t expert) {
  const std::string ep = expert_prefix(layer, expert);
  for (const char* t : kExpertTensors)
    if (!m.params[m.param_id(ep + t)].resident) return false;
  return true;
}

inline std::size_t expert_bytes(const ModelCheckpoint& m, std::size_t layer,
                                std::size_t expert) {
  const std::string ep = expert_prefix(layer, expert);
  std::size_t bytes = 0;
  for (const char* t : kExpertTensors)
    bytes += Tensor::numel_of(m.params[m.param_id(ep + t)].tensor.shape) *
             sizeof(double);
  return bytes;
}

// Spill layout mirrors the checkpoint manifest/payload split with one
// segment per expert. The payload keeps full 64-bit values so offloading
// stays bitwise lossless even mid-training.
inline void write_spill(const ModelCheckpoint& m, const std::string& base) {
  const auto experts = routed_experts(m.config);
  std::ostringstream manifest;
  manifest << "mote-spill v1\n";
  std::size_t offset = 0;
  std::ostringstream body;
  std::ofstream payload(base + ".payload", std::ios::binary);
  if (!payload)
    throw ResidencyError("offload: cannot write '" + base + ".payload'");
  for (auto [layer, expert] : experts) {
    manifest << "segment " << layer << ' ' << expert << '\n';
    const std::string ep = expert_prefix(layer, expert);
    for (const char* t : kExpertTensors) {
      const NamedParam& p = m.params[m.param_id(ep + t)];
      if (!p.resident)
        throw ResidencyError("offload: parameter '" + p.path +
                             "' is not resident while writing the spill file");
      manifest << "param " << p.path << ' ' << p.tensor.numel() << ' ' << offset
               << '\n';
      payload.write(reinterpret_cast<const char*>(p.tensor.data.data()),
                    static_cast<std::streamsize>(p.tensor.numel() *
                                                 sizeof(double)));
      offset += p.tensor.numel() * sizeof(double);
    }
  }
  manifest << "end\n";
  payload.flush();
  if (!payload)
    throw ResidencyError("offload: write failed for '" + base + ".payload'");
  std::ofstream mf(base + ".manifest", std::ios::binary);
  if (!mf) throw ResidencyError("offload: cannot write '" + base + ".manifest'");
  mf << manifest.str();
  mf.flush();
  if (!mf) throw ResidencyError("offload: write failed for '" + base + ".manifest'");
}

/// Reads one expert's tensors back from the spill file.
inline void reload_expert(ModelCheckpoint& m, std::size_t layer,
                          std::size_t expert) {
  if (m.spill_base.empty())
    throw ResidencyError("offload: no spill file recorded for this model");
  std::ifstream mf(m.spill_base + ".manifest", std::ios::binary);
  if (!mf)
    throw ResidencyError("offload: cannot read '" + m.spill_base + ".manifest'");
  std::string line;
  if (!std::getline(mf, line) || line != "mote-spill v1")
    throw ResidencyError("offload: bad spill manifest");
  std::ifstream payload(m.spill_base + ".payload", std::ios::binary);
  if (!payload)
    throw ResidencyError("offload: cannot read '" + m.spill_base + ".payload'");
  const std::string want = expert_prefix(layer, expert);
  std::size_t restored = 0;
  while (std::getline(mf, line)) {
    std::istringstream ss(line);
    std::string kind;
    ss >> kind;
    if (kind != "param") continue;
    std::string path;
    std::size_t numel, offset;
    if (!(ss >> path >> numel >> offset))
      throw ResidencyError("offload: malformed spill manifest line");
    if (path.rfind(want, 0) != 0) continue;
    NamedParam& p = m.params[m.param_id(path)];
    if (numel != Tensor::numel_of(p.tensor.shape))
      throw ResidencyError("offload: spill size mismatch for '" + path + "'");
    p.tensor.data.assign(numel, 0.0);
    payload.seekg(static_cast<std::streamoff>(offset));
    payload.read(reinterpret_cast<char*>(p.tensor.data.data()),
                 static_cast<std::streamsize>(numel * sizeof(double)));
    if (!payload)
      throw ResidencyError("offload: truncated spill payload at '" + path + "'");
    p.resident = true;
    ++restored;
  }
  if (restored != 8)
    throw ResidencyError("offload: spill file lacks expert " +
                         std::to_string(expert) + " of block " +
                         std::to_string(layer));
}

inline void ensure_expert_resident(ModelCheckpoint& model, std::size_t layer,
                                   std::size_t expert) {
  if (!model.config.routed_block(layer)) return;
  if (expert_resident(model, layer, expert)) return;
  reload_expert(model, layer, expert);
}

}  // namespace detail

/// Recomputes the residency ledger from parameter state.
inline ResidencyState residency_state(const ModelCheckpoint& model) {
  ResidencyState st;
  for (auto [layer, expert] : detail::routed_experts(model.config)) {
    const std::size_t bytes = detail::expert_bytes(model, layer, expert);
    if (detail::expert_resident(model, layer, expert)) {
      st.resident_experts.insert({layer, expert});
      st.resident_bytes += bytes;
    } else {
      st.evicted_bytes += bytes;
    }
  }
  return st;
}

/// Offloads every expert not routed by the active task. All experts are
/// serialized to the spill file first; eviction only happens after the
/// spill is safely on disk, so failures roll back to all-resident. A later
/// encode for an evicted task transparently reloads it.
inline ResidencyState set_residency(ModelCheckpoint& model,
                                    const std::string& active_task,
                                    const std::string& spill_base) {
  if (model.config.ff_kind != FfKind::mote)
    throw ResidencyError("set_residency: model ff_kind must be mote");
  const TaskEntry& entry = model.registry.entry(active_task);
  const auto experts = detail::routed_experts(model.config);
  if (experts.empty())
    throw ResidencyError("set_residency: model has no routed blocks");

  if (model.spill_base != spill_base) {
    // fresh spill target: everything must be in memory to serialize
    for (auto [layer, expert] : experts)
      if (!detail::expert_resident(model, layer, expert))
        detail::reload_expert(model, layer, expert);
    detail::write_spill(model, spill_base);
    model.spill_base = spill_base;
  }

  for (auto [layer, expert] : experts) {
    const std::size_t active = entry.expert_index <
                                       model.config.experts_in_block(layer)
                                   ? entry.expert_index
                                   : 0;
    const std::string ep = detail::expert_prefix(layer, expert);
    if (expert == active) {
      detail::ensure_expert_resident(model, layer, expert);
    } else if (detail::expert_resident(model, layer, expert)) {
      for (const char* t : detail::kExpertTensors) {
        NamedParam& p = model.params[model.param_id(ep + t)];
        p.tensor.data.clear();
        p.tensor.data.shrink_to_fit();
        p.resident = false;
      }
    }
  }
  return residency_state(model);
}

/// Brings every offloaded expert back into memory.
inline void restore_all_resident(ModelCheckpoint& model) {
  for (auto [layer, expert] : detail::routed_experts(model.config))
    if (!detail::expert_resident(model, layer, expert))
      detail::reload_expert(model, layer, expert);
}

}  // namespace mote
