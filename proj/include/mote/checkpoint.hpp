// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "mote/model.hpp"

namespace mote {

// Checkpoint layout: a UTF-8 manifest (<base>.manifest) listing format
// version, config, task registry and ordered parameter paths with shapes
// and byte offsets, plus a binary payload (<base>.payload) of little-endian
// IEEE-754 32-bit floats concatenated in manifest order.

namespace detail {

inline std::string g17(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline std::string quoted(const std::string& s) {
  if (s.find('"') != std::string::npos)
    throw ConfigError("manifest: instruction text must not contain quotes");
  return "\"" + s + "\"";
}

/// Extracts the text between the first and last double quote of a line.
inline std::string unquote_tail(const std::string& line, std::size_t line_no) {
  const auto first = line.find('"');
  const auto last = line.rfind('"');
  if (first == std::string::npos || last <= first)
    throw LoadError("manifest: malformed quoted text at line " +
                    std::to_string(line_no));
  return line.substr(first + 1, last - first - 1);
}

}  // namespace detail

inline std::string checkpoint_manifest_text(const ModelCheckpoint& model) {
  const EncoderConfig& c = model.config;
  std::ostringstream out;
  out << "mote-checkpoint v1\n";
  out << "config vocab_size " << c.vocab_size << '\n';
  out << "config max_seq_len " << c.max_seq_len << '\n';
  out << "config hidden_dim " << c.hidden_dim << '\n';
  out << "config num_heads " << c.num_heads << '\n';
  out << "config num_layers " << c.num_layers << '\n';
  out << "config mlp_hidden_dim " << c.mlp_hidden_dim << '\n';
  out << "config num_experts " << c.num_experts << '\n';
  out << "config ff_kind " << to_string(c.ff_kind) << '\n';
  out << "config placement " << to_string(c.placement) << '\n';
  out << "config seed " << c.seed << '\n';
  for (const TaskEntry& e : model.registry)
    out << "task " << e.task_id << ' ' << e.expert_index << ' '
        << to_string(e.batching) << ' ' << detail::g17(e.temperature) << ' '
        << detail::quoted(e.prefix_text) << '\n';
  std::size_t offset = 0;
  for (const NamedParam& p : model.params) {
    out << "param " << p.path << ' ' << p.tensor.shape.size();
    for (std::size_t d : p.tensor.shape) out << ' ' << d;
    out << ' ' << offset << '\n';
    offset += p.tensor.numel() * sizeof(float);
  }
  out << "end\n";
  return out.str();
}

/// Writes <base>.manifest and <base>.payload. Storage precision is 32-bit;
/// compute stays 64-bit.
inline void save_checkpoint(const ModelCheckpoint& model, const std::string& base) {
  for (const NamedParam& p : model.params)
    if (!p.resident)
      throw ResidencyError("save_checkpoint: parameter '" + p.path +
                           "' is offloaded; restore residency first");
  {
    std::ofstream out(base + ".payload", std::ios::binary);
    if (!out) throw IoError("checkpoint: cannot write '" + base + ".payload'");
    std::vector<float> buf;
    for (const NamedParam& p : model.params) {
      buf.resize(p.tensor.numel());
      for (std::size_t i = 0; i < buf.size(); ++i)
        buf[i] = static_cast<float>(p.tensor.data[i]);
      out.write(reinterpret_cast<const char*>(buf.data()),
                static_cast<std::streamsize>(buf.size() * sizeof(float)));
    }
    if (!out) throw IoError("checkpoint: write failed for '" + base + ".payload'");
  }
  std::ofstream out(base + ".manifest", std::ios::binary);
  if (!out) throw IoError("checkpoint: cannot write '" + base + ".manifest'");
  out << checkpoint_manifest_text(model);
  if (!out) throw IoError("checkpoint: write failed for '" + base + ".manifest'");
}

/// Loads a checkpoint. The manifest is fully validated against the layout
/// its config implies before any tensor data is read; on any mismatch no
/// partial model is returned.
inline ModelCheckpoint load_checkpoint(const std::string& base) {
  std::ifstream in(base + ".manifest", std::ios::binary);
  if (!in) throw IoError("checkpoint: cannot read '" + base + ".manifest'");
  std::string line;
  std::size_t line_no = 0;
  if (!std::getline(in, line) || line.rfind("mote-checkpoint ", 0) != 0)
    throw LoadError("manifest: not a checkpoint manifest");
  if (line != "mote-checkpoint v1")
    throw LoadError("manifest: unknown format version '" + line.substr(16) + "'");
  line_no = 1;

  EncoderConfig cfg;
  TaskRegistry registry;
  std::vector<std::pair<std::string, std::vector<std::size_t>>> listed;
  std::vector<std::size_t> offsets;
  bool saw_end = false;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::istringstream ss(line);
    std::string kind;
    ss >> kind;
    if (kind == "config") {
      std::string key, value;
      if (!(ss >> key >> value))
        throw LoadError("manifest: malformed config at line " +
                        std::to_string(line_no));
      try {
        if (key == "vocab_size") cfg.vocab_size = std::stoull(value);
        else if (key == "max_seq_len") cfg.max_seq_len = std::stoull(value);
        else if (key == "hidden_dim") cfg.hidden_dim = std::stoull(value);
        else if (key == "num_heads") cfg.num_heads = std::stoull(value);
        else if (key == "num_layers") cfg.num_layers = std::stoull(value);
        else if (key == "mlp_hidden_dim") cfg.mlp_hidden_dim = std::stoull(value);
        else if (key == "num_experts") cfg.num_experts = std::stoull(value);
        else if (key == "ff_kind") cfg.ff_kind = ff_kind_from_string(value);
        else if (key == "placement") cfg.placement = placement_from_string(value);
        else if (key == "seed") cfg.seed = std::stoull(value);
        else throw LoadError("manifest: unknown config key '" + key + "'");
      } catch (const std::invalid_argument&) {
        throw LoadError("manifest: bad config value at line " +
                        std::to_string(line_no));
      }
    } else if (kind == "task") {
      TaskEntry e;
      std::string batching, temperature;
      if (!(ss >> e.task_id >> e.expert_index >> batching >> temperature))
        throw LoadError("manifest: malformed task at line " +
                        std::to_string(line_no));
      e.batching = batching_from_string(batching);
      e.temperature = std::stod(temperature);
      e.prefix_text = detail::unquote_tail(line, line_no);
      registry.add(std::move(e));
    } else if (kind == "param") {
      std::string path;
      std::size_t ndims;
      if (!(ss >> path >> ndims))
        throw LoadError("manifest: malformed param at line " +
                        std::to_string(line_no));
      std::vector<std::size_t> shape(ndims);
      for (std::size_t& d : shape)
        if (!(ss >> d))
          throw LoadError("manifest: malformed shape at line " +
                          std::to_string(line_no));
      std::size_t offset;
      if (!(ss >> offset))
        throw LoadError("manifest: missing offset at line " +
                        std::to_string(line_no));
      listed.emplace_back(std::move(path), std::move(shape));
      offsets.push_back(offset);
    } else if (kind == "end") {
      saw_end = true;
      break;
    } else {
      throw LoadError("manifest: unknown record '" + kind + "' at line " +
                      std::to_string(line_no));
    }
  }
  if (!saw_end) throw LoadError("manifest: truncated (no end marker)");
  cfg.validate();

  // The manifest must list exactly the layout the config implies.
  const auto expected = parameter_layout(cfg);
  if (listed.size() != expected.size())
    throw LoadError("manifest: lists " + std::to_string(listed.size()) +
                    " parameters, config implies " +
                    std::to_string(expected.size()));
  std::size_t offset = 0;
  for (std::size_t i = 0; i < expected.size(); ++i) {
    if (listed[i].first != expected[i].first)
      throw LoadError("manifest: parameter '" + listed[i].first +
                      "' out of place; expected '" + expected[i].first + "'");
    if (listed[i].second != expected[i].second)
      throw LoadError("manifest: shape mismatch for '" + listed[i].first + "'");
    if (offsets[i] != offset)
      throw LoadError("manifest: offset mismatch for '" + listed[i].first + "'");
    offset += Tensor::numel_of(listed[i].second) * sizeof(float);
  }

  const std::string payload_path = base + ".payload";
  std::error_code ec;
  const auto actual_size = std::filesystem::file_size(payload_path, ec);
  if (ec) throw IoError("checkpoint: cannot read '" + payload_path + "'");
  if (actual_size != offset)
    throw LoadError("payload: length mismatch (" + std::to_string(actual_size) +
                    " bytes, manifest expects " + std::to_string(offset) + ")");

  std::ifstream payload(payload_path, std::ios::binary);
  if (!payload) throw IoError("checkpoint: cannot read '" + payload_path + "'");
  ModelCheckpoint model;
  model.config = cfg;
  model.registry = std::move(registry);
  std::vector<float> buf;
  for (auto& [path, shape] : expected) {
    Tensor t(shape);
    buf.resize(t.numel());
    payload.read(reinterpret_cast<char*>(buf.data()),
                 static_cast<std::streamsize>(buf.size() * sizeof(float)));
    if (!payload)
      throw LoadError("payload: length mismatch while reading '" + path + "'");
    for (std::size_t i = 0; i < buf.size(); ++i)
      t.data[i] = static_cast<double>(buf[i]);
    model.params.push_back({path, std::move(t), true});
  }
  model.rebuild_index();
  return model;
}

}  // namespace mote
