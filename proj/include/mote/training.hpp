// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstdint>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "mote/corpus.hpp"
#include "mote/csv.hpp"
#include "mote/model.hpp"
#include "mote/registry.hpp"
#include "mote/rng.hpp"
#include "mote/tape.hpp"

namespace mote {

// ---------------------------------------------------------------------------
// InfoNCE

/// InfoNCE over a precomputed similarity matrix: entry (i, j) is the
/// similarity between anchor i and positive j, the diagonal holds the true
/// pairs, and every positive in the batch is a candidate.
inline double info_nce_from_similarities(const Tensor& sims, double temperature) {
  if (!(temperature > 0.0))
    throw ConfigError("info_nce: temperature must be positive");
  const std::size_t bsz = sims.rows();
  if (bsz == 0) throw EmptyBatchError("info_nce: empty batch");
  if (sims.cols() != bsz) throw ShapeError("info_nce: similarity matrix not square");
  double loss = 0.0;
  std::vector<double> logits(bsz);
  for (std::size_t i = 0; i < bsz; ++i) {
    for (std::size_t j = 0; j < bsz; ++j)
      logits[j] = sims.data[i * bsz + j] / temperature;
    double mx = logits[0];
    for (std::size_t j = 1; j < bsz; ++j) mx = std::max(mx, logits[j]);
    double sum = 0.0;
    for (std::size_t j = 0; j < bsz; ++j) sum += std::exp(logits[j] - mx);
    loss += mx + std::log(sum) - logits[i];
  }
  return loss / static_cast<double>(bsz);
}

/// InfoNCE with in-batch negatives over unit-norm embeddings: the candidate
/// set of each anchor is exactly the batch's positives.
inline double info_nce(const std::vector<Tensor>& anchors,
                       const std::vector<Tensor>& positives,
                       double temperature) {
  if (anchors.empty()) throw EmptyBatchError("info_nce: empty batch");
  if (anchors.size() != positives.size())
    throw ShapeError("info_nce: anchor/positive counts differ");
  auto check_unit = [](const Tensor& t, const char* side, std::size_t i) {
    const double norm = detail::l2_norm(t.data.data(), t.numel());
    if (std::abs(norm - 1.0) > 1e-6)
      throw DegenerateInputError("info_nce: " + std::string(side) + " " +
                                 std::to_string(i) + " has norm " +
                                 std::to_string(norm) + ", expected unit");
  };
  const std::size_t bsz = anchors.size();
  for (std::size_t i = 0; i < bsz; ++i) {
    check_unit(anchors[i], "anchor", i);
    check_unit(positives[i], "positive", i);
  }
  Tensor sims({bsz, bsz});
  for (std::size_t i = 0; i < bsz; ++i)
    for (std::size_t j = 0; j < bsz; ++j)
      sims.data[i * bsz + j] = cosine_similarity(anchors[i], positives[j]);
  return info_nce_from_similarities(sims, temperature);
}

// ---------------------------------------------------------------------------
// Task-aware batch construction

struct MiniBatch {
  std::string task_id;
  std::vector<TrainingPair> pairs;
  double temperature;
  Batching strategy;
  std::set<std::string> source_datasets;
};

/// Epoch-scoped sampler over a TaskStore: tasks are drawn with probability
/// proportional to their remaining examples; pairs are consumed without
/// replacement. Homogeneous tasks take each batch from one uniformly chosen
/// dataset, heterogeneous tasks sample uniformly across all of the task's
/// datasets.
class EpochSampler {
 public:
  EpochSampler(const TaskStore& store, const TaskRegistry& registry)
      : store_(&store), registry_(&registry) {
    for (const TaskGroup& g : store.tasks) {
      registry.entry(g.task_id);  // all tasks must be registered
      for (const Dataset& d : g.datasets)
        if (d.pairs.empty())
          throw ConfigError("sampler: dataset '" + d.dataset_id + "' is empty");
    }
    reset();
  }

  void reset() {
    remaining_.clear();
    for (const TaskGroup& g : store_->tasks) {
      std::vector<std::vector<std::size_t>> per_dataset;
      for (const Dataset& d : g.datasets) {
        std::vector<std::size_t> idx(d.pairs.size());
        for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
        per_dataset.push_back(std::move(idx));
      }
      remaining_.push_back(std::move(per_dataset));
    }
  }

  std::size_t remaining() const {
    std::size_t n = 0;
    for (const auto& task : remaining_)
      for (const auto& ds : task) n += ds.size();
    return n;
  }

  /// Next mini-batch, or nullopt at epoch end. A batch_size beyond the
  /// remaining examples of the drawn source yields a short final batch.
  std::optional<MiniBatch> next(std::size_t batch_size, Rng& rng) {
    const std::size_t total = remaining();
    if (total == 0) return std::nullopt;
    if (batch_size == 0) throw ConfigError("sampler: batch_size must be positive");

    // task choice weighted by remaining examples
    std::size_t pick = static_cast<std::size_t>(rng.next_below(total));
    std::size_t task_idx = 0;
    for (; task_idx < remaining_.size(); ++task_idx) {
      std::size_t task_total = 0;
      for (const auto& ds : remaining_[task_idx]) task_total += ds.size();
      if (pick < task_total) break;
      pick -= task_total;
    }
    const TaskGroup& group = store_->tasks[task_idx];
    const TaskEntry& entry = registry_->entry(group.task_id);

    MiniBatch batch;
    batch.task_id = group.task_id;
    batch.temperature = entry.temperature;
    batch.strategy = entry.batching;

    auto take = [&](std::size_t ds_idx) {
      auto& pool = remaining_[task_idx][ds_idx];
      const std::size_t at = static_cast<std::size_t>(rng.next_below(pool.size()));
      const std::size_t pair_idx = pool[at];
      pool[at] = pool.back();
      pool.pop_back();
      batch.pairs.push_back(group.datasets[ds_idx].pairs[pair_idx]);
      batch.source_datasets.insert(group.datasets[ds_idx].dataset_id);
    };

    if (entry.batching == Batching::homogeneous) {
      std::vector<std::size_t> nonempty;
      for (std::size_t d = 0; d < remaining_[task_idx].size(); ++d)
        if (!remaining_[task_idx][d].empty()) nonempty.push_back(d);
      const std::size_t ds_idx =
          nonempty[static_cast<std::size_t>(rng.next_below(nonempty.size()))];
      const std::size_t n =
          std::min(batch_size, remaining_[task_idx][ds_idx].size());
      for (std::size_t i = 0; i < n; ++i) take(ds_idx);
    } else {
      std::size_t task_total = 0;
      for (const auto& ds : remaining_[task_idx]) task_total += ds.size();
      const std::size_t n = std::min(batch_size, task_total);
      for (std::size_t i = 0; i < n; ++i) {
        std::size_t r = static_cast<std::size_t>(rng.next_below(task_total));
        std::size_t ds_idx = 0;
        for (; ds_idx < remaining_[task_idx].size(); ++ds_idx) {
          if (r < remaining_[task_idx][ds_idx].size()) break;
          r -= remaining_[task_idx][ds_idx].size();
        }
        take(ds_idx);
        --task_total;
      }
    }
    return batch;
  }

 private:
  const TaskStore* store_;
  const TaskRegistry* registry_;
  // remaining_[task][dataset] = indices of unconsumed pairs
  std::vector<std::vector<std::vector<std::size_t>>> remaining_;
};

inline std::optional<MiniBatch> build_minibatch(EpochSampler& sampler,
                                                std::size_t batch_size, Rng& rng) {
  return sampler.next(batch_size, rng);
}

// ---------------------------------------------------------------------------
// AdamW

struct AdamWParams {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
};

/// Named presets. "paper" mirrors the full-scale recipe and is kept for
/// documentation; "desk" is the laptop-scale default.
inline AdamWParams adamw_preset(const std::string& name) {
  if (name == "desk") return AdamWParams{};
  if (name == "paper") return AdamWParams{5e-6, 0.9, 0.999, 1e-8, 0.1};
  throw ConfigError("adamw preset: unknown name '" + name + "'");
}

struct OptimizerState {
  AdamWParams hp;
  std::size_t step = 0;
  std::vector<std::vector<double>> m;  // first moments, aligned with params
  std::vector<std::vector<double>> v;  // second moments

  explicit OptimizerState(const AdamWParams& p = {}) : hp(p) {}
};

/// Decoupled-weight-decay Adam with bias correction. Parameters whose
/// gradient slot is empty are treated as zero-gradient (decay still
/// applies).
inline void adamw_step(std::vector<NamedParam>& params, const GradSink& grads,
                       OptimizerState& state) {
  if (state.m.empty()) {
    state.m.resize(params.size());
    state.v.resize(params.size());
  }
  if (state.m.size() != params.size())
    throw ShapeError("adamw: optimizer state does not match parameter count");
  ++state.step;
  const AdamWParams& hp = state.hp;
  const double bc1 = 1.0 - std::pow(hp.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(hp.beta2, static_cast<double>(state.step));
  static const std::vector<double> kNoGrad;
  for (std::size_t p = 0; p < params.size(); ++p) {
    Tensor& t = params[p].tensor;
    const std::vector<double>& g =
        p < grads.slots.size() && !grads.slots[p].empty() ? grads.slots[p]
                                                          : kNoGrad;
    if (!g.empty()) {
      if (g.size() != t.numel())
        throw ShapeError("adamw: gradient size mismatch at '" + params[p].path + "'");
      for (double gv : g)
        if (std::isnan(gv))
          throw DivergenceError("adamw: NaN gradient at parameter '" +
                                params[p].path + "'");
    }
    if (state.m[p].empty()) {
      state.m[p].assign(t.numel(), 0.0);
      state.v[p].assign(t.numel(), 0.0);
    }
    for (std::size_t i = 0; i < t.numel(); ++i) {
      const double gv = g.empty() ? 0.0 : g[i];
      state.m[p][i] = hp.beta1 * state.m[p][i] + (1.0 - hp.beta1) * gv;
      state.v[p][i] = hp.beta2 * state.v[p][i] + (1.0 - hp.beta2) * gv * gv;
      const double mhat = state.m[p][i] / bc1;
      const double vhat = state.v[p][i] / bc2;
      t.data[i] -= hp.lr * (mhat / (std::sqrt(vhat) + hp.eps) +
                            hp.weight_decay * t.data[i]);
    }
  }
}

// ---------------------------------------------------------------------------
// Training loop

struct TrainSchedule {
  std::size_t steps = 200;
  std::size_t batch_size = 32;
  AdamWParams opt;
  std::uint64_t seed = 0;
  double tlr_aux_weight = 0.01;  // token_moe only
  std::size_t threads = 2;
};

struct LossLogRow {
  std::size_t step;
  std::string task_id;
  Batching strategy;
  double temperature;
  double contrastive_loss;
  double aux_loss;
};

struct LossLog {
  std::vector<LossLogRow> rows;

  std::string to_csv() const {
    std::ostringstream out;
    out << "step,task_id,strategy,temperature,contrastive_loss,aux_loss\n";
    for (const LossLogRow& r : rows)
      out << r.step << ',' << r.task_id << ',' << to_string(r.strategy) << ','
          << format_g17(r.temperature) << ',' << format_g17(r.contrastive_loss)
          << ',' << format_g17(r.aux_loss) << '\n';
    return out.str();
  }

  void save_csv(const std::string& path) const {
    CsvWriter csv(path);
    std::istringstream in(to_csv());
    std::string line;
    while (std::getline(in, line)) csv.raw_line(line);
    csv.close();
  }
};

struct BatchGradients {
  double contrastive_loss = 0.0;
  double aux_loss = 0.0;
  GradSink sink;
};

/// Forward + backward over one mini-batch: anchors under their task's
/// instruction, positives under theirs, InfoNCE at the batch temperature
/// plus the load-balancing objective for token-routed models. Gradients
/// land in the returned sink, aligned with model.params.
///
/// Sequences are split over `threads` workers in contiguous chunks; each
/// worker accumulates into its own sink and sinks merge in worker order, so
/// results are reproducible for a fixed thread setting.
inline BatchGradients compute_batch_gradients(ModelCheckpoint& model,
                                              const MiniBatch& batch,
                                              const Vocabulary& vocab,
                                              double tlr_aux_weight,
                                              std::size_t threads) {
  const std::size_t bsz = batch.pairs.size();
  if (bsz == 0) throw EmptyBatchError("train: empty mini-batch");
  const std::size_t total = 2 * bsz;  // anchors then positives

  struct SeqSpec {
    const std::string* task;
    std::vector<std::uint32_t> tokens;
  };
  std::vector<SeqSpec> specs(total);
  for (std::size_t i = 0; i < bsz; ++i) {
    const TrainingPair& p = batch.pairs[i];
    const TaskEntry& ae = model.registry.entry(p.anchor_task);
    const TaskEntry& pe = model.registry.entry(p.positive_task);
    specs[i] = {&p.anchor_task,
                prefix_instruction(vocab, ae.prefix_text, p.anchor_tokens,
                                   model.config.max_seq_len)};
    specs[bsz + i] = {&p.positive_task,
                      prefix_instruction(vocab, pe.prefix_text, p.positive_tokens,
                                         model.config.max_seq_len)};
  }

  // Forward passes. Every parameter a worker may touch must already be
  // resident because workers must not mutate shared model state.
  for (std::size_t layer = 0; layer < model.config.num_layers; ++layer)
    if (model.config.routed_block(layer))
      for (std::size_t e = 0; e < model.config.experts_in_block(layer); ++e)
        detail::ensure_expert_resident(model, layer, e);

  const std::size_t n_workers = std::max<std::size_t>(1, threads);
  std::vector<Tape> tapes(total);
  std::vector<TraceResult> traces(total);
  std::vector<std::string> worker_errors(n_workers);
  auto forward_range = [&](std::size_t w, std::size_t lo, std::size_t hi) {
    try {
      for (std::size_t i = lo; i < hi; ++i)
        traces[i] = encode_on_tape(model, *specs[i].task, specs[i].tokens, tapes[i]);
    } catch (const std::exception& e) {
      worker_errors[w] = e.what();
    }
  };
  auto run_parallel = [&](auto&& body) {
    const std::size_t chunk = (total + n_workers - 1) / n_workers;
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < n_workers; ++w) {
      const std::size_t lo = std::min(total, w * chunk);
      const std::size_t hi = std::min(total, lo + chunk);
      pool.emplace_back([&, w, lo, hi] { body(w, lo, hi); });
    }
    for (auto& th : pool) th.join();
    for (const std::string& err : worker_errors)
      if (!err.empty()) throw Error("train worker: " + err);
  };
  run_parallel(forward_range);

  // InfoNCE head over the collected embeddings.
  Tape head;
  std::vector<int> anchor_leaves(bsz), positive_leaves(bsz);
  std::vector<Tensor> embedding_values(total);
  for (std::size_t i = 0; i < total; ++i)
    embedding_values[i] = tapes[i].value(traces[i].embedding);
  for (std::size_t i = 0; i < bsz; ++i) {
    anchor_leaves[i] = head.leaf(&embedding_values[i]);
    positive_leaves[i] = head.leaf(&embedding_values[bsz + i]);
  }
  const int anchors_node = head.stack_rows(anchor_leaves);
  const int positives_node = head.stack_rows(positive_leaves);
  const int sims = head.matmul_nt(anchors_node, positives_node);
  const int loss_node = head.cross_entropy_diag(sims, batch.temperature);
  head.backward({{loss_node, {1.0}}}, nullptr);

  BatchGradients out;
  out.contrastive_loss = head.value(loss_node).data[0];

  double aux_total = 0.0;
  for (std::size_t i = 0; i < total; ++i)
    if (traces[i].aux_loss >= 0)
      aux_total += tapes[i].value(traces[i].aux_loss).data[0];
  out.aux_loss = aux_total / static_cast<double>(total);

  // Backward through each sequence tape, seeded with the head's embedding
  // gradients (and the aux weight for token-routed models).
  std::vector<GradSink> sinks(n_workers, GradSink(model.params.size()));
  std::fill(worker_errors.begin(), worker_errors.end(), std::string());
  auto backward_range = [&](std::size_t w, std::size_t lo, std::size_t hi) {
    try {
      for (std::size_t i = lo; i < hi; ++i) {
        std::vector<std::pair<int, std::vector<double>>> seeds;
        const int leaf =
            i < bsz ? anchor_leaves[i] : positive_leaves[i - bsz];
        seeds.emplace_back(traces[i].embedding, head.grad(leaf));
        if (traces[i].aux_loss >= 0)
          seeds.emplace_back(
              traces[i].aux_loss,
              std::vector<double>{tlr_aux_weight / static_cast<double>(total)});
        tapes[i].backward(seeds, &sinks[w]);
      }
    } catch (const std::exception& e) {
      worker_errors[w] = e.what();
    }
  };
  run_parallel(backward_range);

  out.sink = std::move(sinks[0]);
  for (std::size_t w = 1; w < n_workers; ++w) out.sink.merge(sinks[w]);
  return out;
}

/// One optimization step: gradients from the batch, mirrored into the
/// parameters' grad slots for inspection, then an AdamW update.
inline LossLogRow train_step(ModelCheckpoint& model, const MiniBatch& batch,
                             const Vocabulary& vocab, OptimizerState& opt,
                             const TrainSchedule& schedule, std::size_t step) {
  BatchGradients grads = compute_batch_gradients(
      model, batch, vocab, schedule.tlr_aux_weight, schedule.threads);
  // fold the balance objective into the applied gradients via its weight
  for (std::size_t p = 0; p < model.params.size(); ++p) {
    NamedParam& np = model.params[p];
    if (np.tensor.grad.empty()) np.tensor.alloc_grad();
    np.tensor.zero_grad();
    if (!grads.sink.slots[p].empty())
      for (std::size_t i = 0; i < np.tensor.numel(); ++i)
        np.tensor.grad[i] = grads.sink.slots[p][i];
  }
  adamw_step(model.params, grads.sink, opt);
  LossLogRow row;
  row.step = step;
  row.task_id = batch.task_id;
  row.strategy = batch.strategy;
  row.temperature = batch.temperature;
  row.contrastive_loss = grads.contrastive_loss;
  row.aux_loss = grads.aux_loss;
  return row;
}

/// Full training run: task-aware mini-batches, InfoNCE, AdamW. The batching
/// registry controls batch construction and temperatures (it may be a
/// static-regime override of the model's own registry); instructions and
/// routing always come from the model's registry. Deterministic in
/// (model, store, schedule).
inline LossLog train(ModelCheckpoint& model, const TaskStore& store,
                     const TaskRegistry& batching_registry,
                     const Vocabulary& vocab, const TrainSchedule& schedule) {
  EpochSampler sampler(store, batching_registry);
  OptimizerState opt(schedule.opt);
  LossLog log;
  for (std::size_t step = 0; step < schedule.steps; ++step) {
    Rng rng(mix_seed(schedule.seed, 0xBA7C, step));
    std::optional<MiniBatch> batch = sampler.next(schedule.batch_size, rng);
    if (!batch.has_value()) {  // epoch end
      sampler.reset();
      batch = sampler.next(schedule.batch_size, rng);
      if (!batch.has_value()) throw EmptyBatchError("train: store is empty");
    }
    log.rows.push_back(train_step(model, *batch, vocab, opt, schedule, step));
  }
  return log;
}

}  // namespace mote
