// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "mote/error.hpp"
#include "mote/registry.hpp"
#include "mote/rng.hpp"
#include "mote/routing.hpp"
#include "mote/tape.hpp"
#include "mote/tensor.hpp"
#include "mote/vocab.hpp"

namespace mote {

enum class FfKind { dense, mote, token_moe };
enum class Placement { every_block, every_other_block };

inline const char* to_string(FfKind k) {
  switch (k) {
    case FfKind::dense: return "dense";
    case FfKind::mote: return "mote";
    case FfKind::token_moe: return "token_moe";
  }
  return "?";
}

inline const char* to_string(Placement p) {
  return p == Placement::every_block ? "every_block" : "every_other_block";
}

inline FfKind ff_kind_from_string(const std::string& s) {
  if (s == "dense") return FfKind::dense;
  if (s == "mote") return FfKind::mote;
  if (s == "token_moe") return FfKind::token_moe;
  throw ConfigError("ff_kind: unknown value '" + s + "'");
}

inline Placement placement_from_string(const std::string& s) {
  if (s == "every_block") return Placement::every_block;
  if (s == "every_other_block") return Placement::every_other_block;
  throw ConfigError("placement: unknown value '" + s + "'");
}

struct EncoderConfig {
  std::size_t vocab_size = 1024;
  std::size_t max_seq_len = 64;
  std::size_t hidden_dim = 64;
  std::size_t num_heads = 4;
  std::size_t num_layers = 4;
  std::size_t mlp_hidden_dim = 256;
  std::size_t num_experts = 4;
  FfKind ff_kind = FfKind::dense;
  Placement placement = Placement::every_block;  // ignored when dense
  std::uint64_t seed = 0;

  void validate() const {
    if (vocab_size == 0) throw ConfigError("config: vocab_size must be positive");
    if (max_seq_len == 0) throw ConfigError("config: max_seq_len must be positive");
    if (hidden_dim == 0) throw ConfigError("config: hidden_dim must be positive");
    if (num_heads == 0 || hidden_dim % num_heads != 0)
      throw ConfigError("config: num_heads must be positive and divide hidden_dim");
    if (num_layers == 0) throw ConfigError("config: num_layers must be positive");
    if (mlp_hidden_dim == 0)
      throw ConfigError("config: mlp_hidden_dim must be positive");
    if (num_experts == 0) throw ConfigError("config: num_experts must be positive");
  }

  /// Experts instantiated in a given block; dense models always hold one.
  std::size_t experts_in_block(std::size_t layer) const {
    if (ff_kind == FfKind::dense) return 1;
    const bool selected =
        placement == Placement::every_block || (layer % 2 == 1);
    return selected ? num_experts : 1;
  }

  bool routed_block(std::size_t layer) const { return experts_in_block(layer) > 1; }
};

struct NamedParam {
  std::string path;
  Tensor tensor;
  bool resident = true;  // false while spilled to disk
};

/// Counts of what a forward pass touched; used to verify that sequence-level
/// routing keeps active compute equal to the dense model's.
struct ForwardStats {
  std::size_t param_elements_touched = 0;
  std::vector<std::pair<std::size_t, std::size_t>> expert_blocks;  // (layer, expert)
};

/// Named parameter tree plus architecture descriptor and task registry.
struct ModelCheckpoint {
  EncoderConfig config;
  TaskRegistry registry;
  std::vector<NamedParam> params;
  std::string spill_base;  // set while experts are offloaded

  std::size_t param_id(const std::string& path) const {
    auto it = index_.find(path);
    if (it == index_.end())
      throw ConfigError("checkpoint: no parameter at path '" + path + "'");
    return it->second;
  }

  Tensor& param(const std::string& path) { return params[param_id(path)].tensor; }
  const Tensor& param(const std::string& path) const {
    return params[param_id(path)].tensor;
  }

  void rebuild_index() {
    index_.clear();
    for (std::size_t i = 0; i < params.size(); ++i) index_[params[i].path] = i;
  }

  std::size_t total_parameters() const {
    std::size_t n = 0;
    for (const NamedParam& p : params) n += Tensor::numel_of(p.tensor.shape);
    return n;
  }

 private:
  std::map<std::string, std::size_t> index_;
};

namespace detail {

inline std::string block_prefix(std::size_t layer) {
  return "block." + std::to_string(layer) + ".";
}

inline std::string expert_prefix(std::size_t layer, std::size_t expert) {
  return block_prefix(layer) + "ff.expert." + std::to_string(expert) + ".";
}

}  // namespace detail

/// Canonical parameter enumeration implied by a config: path and shape, in
/// checkpoint order. Single source of truth for init, save and load.
inline std::vector<std::pair<std::string, std::vector<std::size_t>>>
parameter_layout(const EncoderConfig& cfg) {
  const std::size_t h = cfg.hidden_dim, f = cfg.mlp_hidden_dim;
  std::vector<std::pair<std::string, std::vector<std::size_t>>> out;
  out.emplace_back("embed.token", std::vector<std::size_t>{cfg.vocab_size, h});
  out.emplace_back("embed.position", std::vector<std::size_t>{cfg.max_seq_len, h});
  for (std::size_t layer = 0; layer < cfg.num_layers; ++layer) {
    const std::string bp = detail::block_prefix(layer);
    for (const char* w : {"wq", "wk", "wv", "wo"})
      out.emplace_back(bp + "attn." + w, std::vector<std::size_t>{h, h});
    for (const char* b : {"bq", "bk", "bv", "bo"})
      out.emplace_back(bp + "attn." + b, std::vector<std::size_t>{h});
    out.emplace_back(bp + "attn_norm.gain", std::vector<std::size_t>{h});
    out.emplace_back(bp + "attn_norm.bias", std::vector<std::size_t>{h});
    if (cfg.ff_kind == FfKind::token_moe && cfg.routed_block(layer))
      out.emplace_back(bp + "gate",
                       std::vector<std::size_t>{h, cfg.experts_in_block(layer)});
    for (std::size_t e = 0; e < cfg.experts_in_block(layer); ++e) {
      const std::string ep = detail::expert_prefix(layer, e);
      out.emplace_back(ep + "pre_norm.gain", std::vector<std::size_t>{h});
      out.emplace_back(ep + "pre_norm.bias", std::vector<std::size_t>{h});
      out.emplace_back(ep + "mlp.w1", std::vector<std::size_t>{h, f});
      out.emplace_back(ep + "mlp.b1", std::vector<std::size_t>{f});
      out.emplace_back(ep + "mlp.w2", std::vector<std::size_t>{f, h});
      out.emplace_back(ep + "mlp.b2", std::vector<std::size_t>{h});
      out.emplace_back(ep + "post_norm.gain", std::vector<std::size_t>{h});
      out.emplace_back(ep + "post_norm.bias", std::vector<std::size_t>{h});
    }
  }
  return out;
}

/// Deterministic initialization. Two-dimensional weights draw from a
/// symmetric uniform with bound sqrt(6/(fan_in+fan_out)); biases start at
/// zero and norm gains at one. Values are rounded to 32-bit storage
/// precision at birth so identity invariants hold across checkpoint
/// round-trips.
inline ModelCheckpoint init_model(const EncoderConfig& cfg,
                                  const TaskRegistry& registry = standard_registry()) {
  cfg.validate();
  ModelCheckpoint m;
  m.config = cfg;
  m.registry = registry;
  Rng rng(mix_seed(cfg.seed, 0x1717));
  for (auto& [path, shape] : parameter_layout(cfg)) {
    Tensor t(shape);
    const bool is_gain = path.size() > 5 && path.rfind(".gain") == path.size() - 5;
    if (shape.size() == 2) {
      const double bound =
          std::sqrt(6.0 / static_cast<double>(shape[0] + shape[1]));
      for (double& v : t.data)
        v = static_cast<double>(static_cast<float>(rng.next_symmetric(bound)));
    } else if (is_gain) {
      std::fill(t.data.begin(), t.data.end(), 1.0);
    }
    m.params.push_back({path, std::move(t), true});
  }
  m.rebuild_index();
  return m;
}

/// Up-cycles a dense encoder into a MoTE encoder: selected blocks gain
/// num_experts expert blocks, every one a bit-exact copy of the dense
/// block's feed-forward parameters. Non-selected blocks keep their single
/// expert.
inline ModelCheckpoint upcycle(const ModelCheckpoint& dense,
                               std::size_t num_experts, Placement placement,
                               FfKind target = FfKind::mote) {
  if (dense.config.ff_kind != FfKind::dense)
    throw ConfigError("upcycle: model is already routed (ff_kind=" +
                      std::string(to_string(dense.config.ff_kind)) + ")");
  if (num_experts == 0) throw ConfigError("upcycle: num_experts must be positive");
  if (target == FfKind::dense) throw ConfigError("upcycle: target must be routed");
  ModelCheckpoint out;
  out.config = dense.config;
  out.config.ff_kind = target;
  out.config.num_experts = num_experts;
  out.config.placement = placement;
  out.registry = dense.registry;
  Rng gate_rng(mix_seed(dense.config.seed, 0x6A7E));
  for (auto& [path, shape] : parameter_layout(out.config)) {
    Tensor t(shape);
    const auto expert_pos = path.find(".ff.expert.");
    if (expert_pos != std::string::npos) {
      // block.<i>.ff.expert.<e>.<rest> -> copy from the dense expert 0
      const auto rest_pos = path.find('.', expert_pos + 11);
      const std::string source =
          path.substr(0, expert_pos) + ".ff.expert.0" + path.substr(rest_pos);
      t = dense.param(source);
    } else if (path.size() > 5 && path.rfind(".gate") == path.size() - 5) {
      const double bound =
          std::sqrt(6.0 / static_cast<double>(shape[0] + shape[1]));
      for (double& v : t.data)
        v = static_cast<double>(static_cast<float>(gate_rng.next_symmetric(bound)));
    } else {
      t = dense.param(path);
    }
    out.params.push_back({path, std::move(t), true});
  }
  out.rebuild_index();
  return out;
}

/// Expert Averaging: collapses a MoTE model back to dense form by replacing
/// each block's experts with their element-wise arithmetic mean (norms and
/// MLP alike). Accumulation runs in ascending expert order.
inline ModelCheckpoint expert_average(const ModelCheckpoint& mote_model) {
  if (mote_model.config.ff_kind != FfKind::mote)
    throw ConfigError("expert_average: model ff_kind must be mote");
  ModelCheckpoint out;
  out.config = mote_model.config;
  out.config.ff_kind = FfKind::dense;
  out.config.num_experts = 1;
  out.registry = mote_model.registry;
  for (auto& [path, shape] : parameter_layout(out.config)) {
    Tensor t(shape);
    const auto expert_pos = path.find(".ff.expert.0.");
    if (expert_pos != std::string::npos) {
      const std::string layer_str = path.substr(6, path.find('.', 6) - 6);
      const std::size_t layer = std::stoul(layer_str);
      const std::size_t experts = mote_model.config.experts_in_block(layer);
      const std::string rest = path.substr(expert_pos + 13);
      for (std::size_t e = 0; e < experts; ++e) {
        const Tensor& src = mote_model.param(
            detail::expert_prefix(layer, e) + rest);
        for (std::size_t i = 0; i < t.numel(); ++i) t.data[i] += src.data[i];
      }
      const double inv_count = 1.0 / static_cast<double>(experts);
      for (double& v : t.data) v *= inv_count;
    } else {
      t = mote_model.param(path);
    }
    out.params.push_back({path, std::move(t), true});
  }
  out.rebuild_index();
  return out;
}

// ---------------------------------------------------------------------------
// Forward pass

namespace detail {
// defined in residency.hpp, which is pulled in at the end of this header
inline void ensure_expert_resident(ModelCheckpoint& model, std::size_t layer,
                                   std::size_t expert);
}

struct TraceResult {
  int embedding = -1;  // node holding the unit-norm pooled embedding
  int aux_loss = -1;   // node holding the summed load-balancing loss, or -1
};

namespace detail {

/// Per-tape cache of parameter leaves so each parameter appears once.
struct LeafCache {
  Tape* tape;
  ModelCheckpoint* model;
  std::vector<int> node_of;
  ForwardStats* stats;

  LeafCache(Tape& t, ModelCheckpoint& m, ForwardStats* s)
      : tape(&t), model(&m), node_of(m.params.size(), -1), stats(s) {}

  int leaf(const std::string& path) {
    const std::size_t id = model->param_id(path);
    if (node_of[id] < 0) {
      const NamedParam& p = model->params[id];
      if (!p.resident)
        throw ResidencyError("forward: parameter '" + path + "' is not resident");
      node_of[id] = tape->leaf(&p.tensor, static_cast<int>(id));
      if (stats != nullptr)
        stats->param_elements_touched += p.tensor.numel();
    }
    return node_of[id];
  }
};

inline constexpr double kNormEps = 1e-5;

/// Expert block: layer norm, two-layer GELU MLP, layer norm.
inline int expert_block_forward(Tape& tape, LeafCache& leaves,
                                std::size_t layer, std::size_t expert, int x) {
  const std::string ep = expert_prefix(layer, expert);
  int h = tape.layer_norm(x, leaves.leaf(ep + "pre_norm.gain"),
                          leaves.leaf(ep + "pre_norm.bias"), kNormEps);
  h = tape.add_bias(tape.matmul(h, leaves.leaf(ep + "mlp.w1")),
                    leaves.leaf(ep + "mlp.b1"));
  h = tape.gelu(h);
  h = tape.add_bias(tape.matmul(h, leaves.leaf(ep + "mlp.w2")),
                    leaves.leaf(ep + "mlp.b2"));
  h = tape.layer_norm(h, leaves.leaf(ep + "post_norm.gain"),
                      leaves.leaf(ep + "post_norm.bias"), kNormEps);
  return h;
}

inline int attention_forward(Tape& tape, LeafCache& leaves,
                             const EncoderConfig& cfg, std::size_t layer, int x) {
  const std::string bp = block_prefix(layer);
  const std::size_t head_dim = cfg.hidden_dim / cfg.num_heads;
  int a = tape.layer_norm(x, leaves.leaf(bp + "attn_norm.gain"),
                          leaves.leaf(bp + "attn_norm.bias"), kNormEps);
  const int q = tape.add_bias(tape.matmul(a, leaves.leaf(bp + "attn.wq")),
                              leaves.leaf(bp + "attn.bq"));
  const int k = tape.add_bias(tape.matmul(a, leaves.leaf(bp + "attn.wk")),
                              leaves.leaf(bp + "attn.bk"));
  const int v = tape.add_bias(tape.matmul(a, leaves.leaf(bp + "attn.wv")),
                              leaves.leaf(bp + "attn.bv"));
  std::vector<int> heads;
  heads.reserve(cfg.num_heads);
  for (std::size_t hd = 0; hd < cfg.num_heads; ++hd) {
    const std::size_t c0 = hd * head_dim, c1 = c0 + head_dim;
    const int qh = tape.slice_cols(q, c0, c1);
    const int kh = tape.slice_cols(k, c0, c1);
    const int vh = tape.slice_cols(v, c0, c1);
    int scores = tape.matmul_nt(qh, kh);
    scores = tape.scale(scores, 1.0 / std::sqrt(static_cast<double>(head_dim)));
    const int probs = tape.softmax_rows(scores);
    heads.push_back(tape.matmul(probs, vh));
  }
  const int mixed = tape.concat_cols(heads);
  const int o = tape.add_bias(tape.matmul(mixed, leaves.leaf(bp + "attn.wo")),
                              leaves.leaf(bp + "attn.bo"));
  return o;
}

/// Token-level (switch-style) routed feed-forward: top-1 expert per token,
/// output scaled by the winning gate probability, plus the load-balancing
/// objective for this block.
inline std::pair<int, int> token_moe_forward(Tape& tape, LeafCache& leaves,
                                             const EncoderConfig& cfg,
                                             std::size_t layer, int x) {
  const std::string bp = block_prefix(layer);
  const std::size_t experts = cfg.experts_in_block(layer);
  const int logits = tape.matmul(x, leaves.leaf(bp + "gate"));
  const int probs = tape.softmax_rows(logits);
  const Tensor& pv = tape.value(probs);
  const std::size_t n = pv.rows();

  // hard top-1 assignment (ties to the lowest index), treated as constant
  std::vector<std::uint32_t> assign(n);
  std::vector<std::uint32_t> win_flat(n);
  for (std::size_t t = 0; t < n; ++t) {
    std::size_t best = 0;
    for (std::size_t e = 1; e < experts; ++e)
      if (pv.data[t * experts + e] > pv.data[t * experts + best]) best = e;
    assign[t] = static_cast<std::uint32_t>(best);
    win_flat[t] = static_cast<std::uint32_t>(t * experts + best);
  }

  int combined = -1;
  for (std::size_t e = 0; e < experts; ++e) {
    std::vector<std::uint32_t> rows;
    for (std::size_t t = 0; t < n; ++t)
      if (assign[t] == e) rows.push_back(static_cast<std::uint32_t>(t));
    if (rows.empty()) continue;
    std::vector<std::uint32_t> flat;
    for (std::uint32_t t : rows) flat.push_back(win_flat[t]);
    const int xe = tape.gather_rows(x, rows);
    const int ye = expert_block_forward(tape, leaves, layer, e, xe);
    const int scaled = tape.scale_rows(ye, tape.gather_elems(probs, flat));
    const int placed = tape.scatter_rows(scaled, rows, n);
    combined = combined < 0 ? placed : tape.add(combined, placed);
  }

  // switch-style balance loss: experts * sum_e fraction_e * mean_prob_e
  Tensor fractions({experts});
  for (std::size_t t = 0; t < n; ++t) fractions.data[assign[t]] += 1.0;
  for (double& f : fractions.data) f /= static_cast<double>(n);
  const int mean_probs = tape.mean_rows(probs);
  const int frac_leaf = tape.constant(std::move(fractions));
  const int lb = tape.scale(tape.dot(mean_probs, frac_leaf),
                            static_cast<double>(experts));
  return {combined, lb};
}

}  // namespace detail

/// Builds the full instruction-conditioned forward pass on the given tape
/// and returns the embedding node (and load-balancing loss node for
/// token-routed models). token_ids must already include the instruction
/// prefix.
inline TraceResult encode_on_tape(ModelCheckpoint& model,
                                  const std::string& instruction_id,
                                  const std::vector<std::uint32_t>& prefixed_tokens,
                                  Tape& tape, ForwardStats* stats = nullptr) {
  const EncoderConfig& cfg = model.config;
  const std::size_t n = prefixed_tokens.size();
  if (n == 0) throw LengthError("encode: empty token sequence");
  if (n > cfg.max_seq_len)
    throw LengthError("encode: sequence of " + std::to_string(n) +
                      " tokens exceeds max length " +
                      std::to_string(cfg.max_seq_len));
  for (std::uint32_t t : prefixed_tokens)
    if (t >= cfg.vocab_size)
      throw ConfigError("encode: token id " + std::to_string(t) +
                        " outside vocabulary of " + std::to_string(cfg.vocab_size));
  const std::size_t routed_expert = route_sequence(model.registry, instruction_id);

  detail::LeafCache leaves(tape, model, stats);
  std::vector<std::uint32_t> positions(n);
  for (std::size_t i = 0; i < n; ++i) positions[i] = static_cast<std::uint32_t>(i);

  int x = tape.add(tape.gather_rows(leaves.leaf("embed.token"), prefixed_tokens),
                   tape.gather_rows(leaves.leaf("embed.position"), positions));
  int aux_total = -1;
  for (std::size_t layer = 0; layer < cfg.num_layers; ++layer) {
    x = tape.add(x, detail::attention_forward(tape, leaves, cfg, layer, x));
    if (cfg.ff_kind == FfKind::token_moe && cfg.routed_block(layer)) {
      auto [combined, lb] = detail::token_moe_forward(tape, leaves, cfg, layer, x);
      if (combined >= 0) x = tape.add(x, combined);
      aux_total = aux_total < 0 ? lb : tape.add(aux_total, lb);
      if (stats != nullptr) stats->expert_blocks.emplace_back(layer, SIZE_MAX);
    } else {
      const std::size_t experts = cfg.experts_in_block(layer);
      const std::size_t e = routed_expert < experts ? routed_expert : 0;
      if (experts > 1) detail::ensure_expert_resident(model, layer, e);
      x = tape.add(x, detail::expert_block_forward(tape, leaves, layer, e, x));
      if (stats != nullptr) stats->expert_blocks.emplace_back(layer, e);
    }
  }
  TraceResult result;
  result.embedding = tape.l2_normalize(tape.mean_rows(x));
  result.aux_loss = aux_total;
  return result;
}

/// Instruction-conditioned embedding: prepends the task's instruction
/// tokens, runs the encoder with routing per ff_kind, mean-pools the final
/// hidden states and L2-normalizes. Deterministic in (model, task, tokens).
inline Tensor encode(ModelCheckpoint& model, const std::string& instruction_id,
                     const std::vector<std::uint32_t>& token_ids,
                     const Vocabulary& vocab, ForwardStats* stats = nullptr) {
  const TaskEntry& entry = model.registry.entry(instruction_id);
  const std::vector<std::uint32_t> full =
      prefix_instruction(vocab, entry.prefix_text, token_ids,
                         model.config.max_seq_len);
  Tape tape;
  const TraceResult r = encode_on_tape(model, instruction_id, full, tape, stats);
  return tape.value(r.embedding);
}

}  // namespace mote

#include "mote/residency.hpp"  // completes detail::ensure_expert_resident
