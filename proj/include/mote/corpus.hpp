// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <fstream>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "mote/error.hpp"
#include "mote/registry.hpp"
#include "mote/rng.hpp"
#include "mote/vocab.hpp"

namespace mote {

/// One contrastive training example. Retrieval pairs carry distinct anchor
/// and positive tasks (query vs document); other tasks use one task for
/// both sides.
struct TrainingPair {
  std::string anchor_text;
  std::string positive_text;
  std::vector<std::uint32_t> anchor_tokens;
  std::vector<std::uint32_t> positive_tokens;
  std::string anchor_task;
  std::string positive_task;
  std::string dataset_id;
};

struct Dataset {
  std::string dataset_id;
  std::vector<TrainingPair> pairs;
};

struct TaskGroup {
  std::string task_id;  // anchor-side task
  std::vector<Dataset> datasets;
};

/// Training samples organized by task, then dataset.
struct TaskStore {
  std::vector<TaskGroup> tasks;

  TaskGroup& group(const std::string& task_id) {
    for (TaskGroup& g : tasks)
      if (g.task_id == task_id) return g;
    tasks.push_back({task_id, {}});
    return tasks.back();
  }

  const TaskGroup* find(const std::string& task_id) const {
    for (const TaskGroup& g : tasks)
      if (g.task_id == task_id) return &g;
    return nullptr;
  }

  std::size_t total_pairs() const {
    std::size_t n = 0;
    for (const TaskGroup& g : tasks)
      for (const Dataset& d : g.datasets) n += d.pairs.size();
    return n;
  }
};

/// Parameters of the synthetic multi-task corpus. The generated corpus is a
/// pure function of this struct.
struct CorpusSpec {
  std::size_t num_topics = 8;
  std::size_t num_entities = 192;
  std::size_t pairs_per_dataset = 256;
  std::size_t datasets_per_task = 4;
  double noise_rate = 0.0;
  std::uint64_t seed = 0;

  void validate() const {
    if (num_topics == 0) throw ConfigError("corpus spec: num_topics must be positive");
    if (num_entities == 0) throw ConfigError("corpus spec: num_entities must be positive");
    if (pairs_per_dataset == 0)
      throw ConfigError("corpus spec: pairs_per_dataset must be positive");
    if (datasets_per_task == 0)
      throw ConfigError("corpus spec: datasets_per_task must be positive");
    if (!(noise_rate >= 0.0 && noise_rate < 1.0))
      throw ConfigError("corpus spec: noise_rate must be in [0,1)");
    if (datasets_per_task > num_topics)
      throw ConfigError("corpus spec: datasets_per_task exceeds num_topics");
  }

  std::size_t num_labels() const { return 2 * datasets_per_task; }
};

struct Corpus {
  TaskStore store;
  Vocabulary vocab;
};

namespace detail {

inline constexpr std::size_t kTopicWords = 8;

struct CorpusLexicon {
  // token ids by pool
  std::vector<std::vector<std::uint32_t>> topics;  // [topic][word]
  std::vector<std::uint32_t> entities;
  std::vector<std::uint32_t> labels;
  std::vector<std::uint32_t> content;  // union, for noise draws
};

inline CorpusLexicon build_lexicon(const CorpusSpec& spec, Vocabulary& vocab) {
  CorpusLexicon lex;
  lex.topics.resize(spec.num_topics);
  for (std::size_t t = 0; t < spec.num_topics; ++t)
    for (std::size_t w = 0; w < kTopicWords; ++w)
      lex.topics[t].push_back(
          vocab.add("t" + std::to_string(t) + "w" + std::to_string(w)));
  for (std::size_t e = 0; e < spec.num_entities; ++e)
    lex.entities.push_back(vocab.add("ent" + std::to_string(e)));
  for (std::size_t c = 0; c < spec.num_labels(); ++c)
    lex.labels.push_back(vocab.add("lab" + std::to_string(c)));
  for (const auto& pool : lex.topics)
    lex.content.insert(lex.content.end(), pool.begin(), pool.end());
  lex.content.insert(lex.content.end(), lex.entities.begin(), lex.entities.end());
  lex.content.insert(lex.content.end(), lex.labels.begin(), lex.labels.end());
  return lex;
}

/// k distinct draws from pool, order randomized.
inline std::vector<std::uint32_t> sample_distinct(
    const std::vector<std::uint32_t>& pool, std::size_t k, Rng& rng) {
  std::vector<std::size_t> picked;
  std::vector<std::uint32_t> out;
  while (out.size() < k) {
    const std::size_t j = static_cast<std::size_t>(rng.next_below(pool.size()));
    bool seen = false;
    for (std::size_t p : picked) seen = seen || p == j;
    if (!seen) {
      picked.push_back(j);
      out.push_back(pool[j]);
    }
  }
  return out;
}

inline void apply_noise(std::vector<std::uint32_t>& tokens,
                        const CorpusLexicon& lex, double rate, Rng& rng) {
  if (rate <= 0.0) return;
  for (std::uint32_t& t : tokens)
    if (rng.next_bool(rate))
      t = lex.content[rng.next_below(lex.content.size())];
}

}  // namespace detail

/// Deterministic synthetic corpus with deliberately conflicting task
/// semantics:
///   - retrieval: anchor and positive share a rare entity token and have
///     disjoint topic tokens; every retrieval dataset is pinned to one topic
///     so in-batch negatives from the same dataset are hard.
///   - clustering: the two sides share at least one topic token and carry
///     different entities.
///   - classification: the two sides share a label token over mixed topics.
inline Corpus generate_corpus(const CorpusSpec& spec,
                              const TaskRegistry& registry = standard_registry()) {
  spec.validate();
  Corpus corpus;
  corpus.vocab = vocabulary_with_instructions(registry);
  const detail::CorpusLexicon lex = detail::build_lexicon(spec, corpus.vocab);

  auto finish = [&](std::vector<std::uint32_t> tokens, Rng& rng) {
    detail::apply_noise(tokens, lex, spec.noise_rate, rng);
    rng.shuffle(tokens);
    return tokens;
  };
  auto text_of = [&](const std::vector<std::uint32_t>& tokens) {
    return detokenize(corpus.vocab, tokens);
  };

  // retrieval: dataset d covers topic d; query has 2 topic words, document
  // has 3 drawn from the remaining pool, both carry the same entity.
  {
    TaskGroup& g = corpus.store.group("retrieval-query");
    for (std::size_t d = 0; d < spec.datasets_per_task; ++d) {
      Rng rng(mix_seed(spec.seed, 101, d));
      Dataset ds{"retrieval-" + std::to_string(d), {}};
      const auto& topic = lex.topics[d % spec.num_topics];
      for (std::size_t p = 0; p < spec.pairs_per_dataset; ++p) {
        const std::uint32_t entity = lex.entities[rng.next_below(lex.entities.size())];
        auto words = detail::sample_distinct(topic, 5, rng);
        std::vector<std::uint32_t> q(words.begin(), words.begin() + 2);
        std::vector<std::uint32_t> doc(words.begin() + 2, words.end());
        q.push_back(entity);
        doc.push_back(entity);
        TrainingPair pair;
        pair.anchor_tokens = finish(std::move(q), rng);
        pair.positive_tokens = finish(std::move(doc), rng);
        pair.anchor_text = text_of(pair.anchor_tokens);
        pair.positive_text = text_of(pair.positive_tokens);
        pair.anchor_task = "retrieval-query";
        pair.positive_task = "retrieval-doc";
        pair.dataset_id = ds.dataset_id;
        ds.pairs.push_back(std::move(pair));
      }
      g.datasets.push_back(std::move(ds));
    }
  }

  // classification: dataset d owns labels {2d, 2d+1}; both sides share the
  // label and mix topic words from anywhere.
  {
    TaskGroup& g = corpus.store.group("classification");
    for (std::size_t d = 0; d < spec.datasets_per_task; ++d) {
      Rng rng(mix_seed(spec.seed, 202, d));
      Dataset ds{"classification-" + std::to_string(d), {}};
      for (std::size_t p = 0; p < spec.pairs_per_dataset; ++p) {
        const std::uint32_t label = lex.labels[2 * d + rng.next_below(2)];
        auto mixed = [&](std::size_t k) {
          std::vector<std::uint32_t> words;
          for (std::size_t i = 0; i < k; ++i) {
            const auto& pool = lex.topics[rng.next_below(lex.topics.size())];
            words.push_back(pool[rng.next_below(pool.size())]);
          }
          return words;
        };
        std::vector<std::uint32_t> a = mixed(3);
        std::vector<std::uint32_t> b = mixed(3);
        a.push_back(label);
        b.push_back(label);
        TrainingPair pair;
        pair.anchor_tokens = finish(std::move(a), rng);
        pair.positive_tokens = finish(std::move(b), rng);
        pair.anchor_text = text_of(pair.anchor_tokens);
        pair.positive_text = text_of(pair.positive_tokens);
        pair.anchor_task = "classification";
        pair.positive_task = "classification";
        pair.dataset_id = ds.dataset_id;
        ds.pairs.push_back(std::move(pair));
      }
      g.datasets.push_back(std::move(ds));
    }
  }

  // clustering: dataset d covers topic d; the two sides overlap in at least
  // one topic word and never share an entity.
  {
    TaskGroup& g = corpus.store.group("clustering");
    for (std::size_t d = 0; d < spec.datasets_per_task; ++d) {
      Rng rng(mix_seed(spec.seed, 303, d));
      Dataset ds{"clustering-" + std::to_string(d), {}};
      const auto& topic = lex.topics[d % spec.num_topics];
      for (std::size_t p = 0; p < spec.pairs_per_dataset; ++p) {
        auto words = detail::sample_distinct(topic, 5, rng);
        // first three for the anchor; positive reuses words[0]
        std::vector<std::uint32_t> a(words.begin(), words.begin() + 3);
        std::vector<std::uint32_t> b{words[0], words[3], words[4]};
        auto ents = detail::sample_distinct(lex.entities, 2, rng);
        a.push_back(ents[0]);
        b.push_back(ents[1]);
        TrainingPair pair;
        pair.anchor_tokens = finish(std::move(a), rng);
        pair.positive_tokens = finish(std::move(b), rng);
        pair.anchor_text = text_of(pair.anchor_tokens);
        pair.positive_text = text_of(pair.positive_tokens);
        pair.anchor_task = "clustering";
        pair.positive_task = "clustering";
        pair.dataset_id = ds.dataset_id;
        ds.pairs.push_back(std::move(pair));
      }
      g.datasets.push_back(std::move(ds));
    }
  }

  return corpus;
}

/// Generic probe sequences for similarity studies: a mix of topic words, an
/// entity and a label, deterministic in (spec, seed).
inline std::vector<std::vector<std::uint32_t>> probe_sequences(
    const CorpusSpec& spec, std::size_t count, std::uint64_t seed,
    const TaskRegistry& registry = standard_registry()) {
  spec.validate();
  Vocabulary vocab = vocabulary_with_instructions(registry);
  const detail::CorpusLexicon lex = detail::build_lexicon(spec, vocab);
  std::vector<std::vector<std::uint32_t>> out;
  Rng rng(mix_seed(seed, 404));
  for (std::size_t i = 0; i < count; ++i) {
    std::vector<std::uint32_t> tokens;
    const auto& ta = lex.topics[rng.next_below(lex.topics.size())];
    const auto& tb = lex.topics[rng.next_below(lex.topics.size())];
    tokens.push_back(ta[rng.next_below(ta.size())]);
    tokens.push_back(ta[rng.next_below(ta.size())]);
    tokens.push_back(tb[rng.next_below(tb.size())]);
    tokens.push_back(lex.entities[rng.next_below(lex.entities.size())]);
    tokens.push_back(lex.labels[rng.next_below(lex.labels.size())]);
    rng.shuffle(tokens);
    out.push_back(std::move(tokens));
  }
  return out;
}

/// Writes one JSON record per line: task, dataset, anchor, positive, and
/// positive_task when it differs from the anchor task.
inline void save_jsonl(const TaskStore& store, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("jsonl: cannot write '" + path + "'");
  for (const TaskGroup& g : store.tasks) {
    for (const Dataset& ds : g.datasets) {
      for (const TrainingPair& p : ds.pairs) {
        nlohmann::json rec;
        rec["task"] = p.anchor_task;
        if (p.positive_task != p.anchor_task) rec["positive_task"] = p.positive_task;
        rec["dataset"] = p.dataset_id;
        rec["anchor"] = p.anchor_text;
        rec["positive"] = p.positive_text;
        out << rec.dump() << '\n';
      }
    }
  }
  if (!out) throw IoError("jsonl: write failed for '" + path + "'");
}

/// Loads and validates a JSONL pair file. Nothing is returned unless every
/// line parses and every task is registered.
inline TaskStore load_jsonl(const std::string& path, const TaskRegistry& registry,
                            const Vocabulary& vocab) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("jsonl: cannot read '" + path + "'");
  TaskStore store;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    nlohmann::json rec;
    try {
      rec = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw ParseError("jsonl: line " + std::to_string(line_no) + ": " + e.what());
    }
    if (!rec.is_object() || !rec.contains("task") || !rec.contains("dataset") ||
        !rec.contains("anchor") || !rec.contains("positive"))
      throw ParseError("jsonl: line " + std::to_string(line_no) +
                       ": record needs task, dataset, anchor, positive");
    const std::string task = rec["task"].get<std::string>();
    if (!registry.has(task))
      throw UnregisteredTaskError("jsonl: line " + std::to_string(line_no) +
                                  ": unregistered task '" + task + "'");
    std::string positive_task =
        rec.contains("positive_task") ? rec["positive_task"].get<std::string>()
                                      : positive_task_for(task);
    if (!registry.has(positive_task))
      throw UnregisteredTaskError("jsonl: line " + std::to_string(line_no) +
                                  ": unregistered task '" + positive_task + "'");
    TrainingPair p;
    p.anchor_task = task;
    p.positive_task = std::move(positive_task);
    p.dataset_id = rec["dataset"].get<std::string>();
    p.anchor_text = rec["anchor"].get<std::string>();
    p.positive_text = rec["positive"].get<std::string>();
    p.anchor_tokens = tokenize(vocab, p.anchor_text);
    p.positive_tokens = tokenize(vocab, p.positive_text);
    if (p.anchor_tokens.empty() || p.positive_tokens.empty())
      throw ParseError("jsonl: line " + std::to_string(line_no) +
                       ": empty anchor or positive");
    TaskGroup& g = store.group(p.anchor_task);
    Dataset* ds = nullptr;
    for (Dataset& cand : g.datasets)
      if (cand.dataset_id == p.dataset_id) ds = &cand;
    if (ds == nullptr) {
      g.datasets.push_back({p.dataset_id, {}});
      ds = &g.datasets.back();
    }
    ds->pairs.push_back(std::move(p));
  }
  return store;
}

}  // namespace mote
