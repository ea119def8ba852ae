// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "mote/error.hpp"

namespace mote {

enum class Batching { homogeneous, heterogeneous };

inline const char* to_string(Batching b) {
  return b == Batching::homogeneous ? "homogeneous" : "heterogeneous";
}

inline Batching batching_from_string(const std::string& s) {
  if (s == "homogeneous") return Batching::homogeneous;
  if (s == "heterogeneous") return Batching::heterogeneous;
  throw ConfigError("batching: unknown value '" + s + "'");
}

struct TaskEntry {
  std::string task_id;
  std::string prefix_text;     // instruction prepended to every input
  std::size_t expert_index;    // target expert under sequence-level routing
  Batching batching;
  double temperature;          // contrastive temperature for this task
};

/// Ordered task table: instruction text, expert assignment, batching
/// strategy and contrastive temperature per task.
class TaskRegistry {
 public:
  void add(TaskEntry e) {
    if (!(e.temperature > 0.0))
      throw ConfigError("registry: temperature for task '" + e.task_id +
                        "' must be positive");
    for (const TaskEntry& old : entries_) {
      if (old.task_id == e.task_id)
        throw ConfigError("registry: duplicate task id '" + e.task_id + "'");
      if (old.expert_index == e.expert_index)
        throw ConfigError("registry: expert " + std::to_string(e.expert_index) +
                          " already mapped to task '" + old.task_id + "'");
    }
    entries_.push_back(std::move(e));
  }

  bool has(const std::string& task_id) const {
    for (const TaskEntry& e : entries_)
      if (e.task_id == task_id) return true;
    return false;
  }

  const TaskEntry& entry(const std::string& task_id) const {
    for (const TaskEntry& e : entries_)
      if (e.task_id == task_id) return e;
    throw UnregisteredTaskError("unregistered task '" + task_id + "'");
  }

  std::size_t size() const { return entries_.size(); }
  const std::vector<TaskEntry>& entries() const { return entries_; }
  auto begin() const { return entries_.begin(); }
  auto end() const { return entries_.end(); }

 private:
  std::vector<TaskEntry> entries_;
};

/// Sequence-level routing: a pure task-id lookup, independent of content.
inline std::size_t route_sequence(const TaskRegistry& registry,
                                  const std::string& task_id) {
  return registry.entry(task_id).expert_index;
}

/// The four-task table used throughout: retrieval query/document,
/// classification and clustering, with per-task batching and temperatures.
/// with_prefixes=false empties the instruction strings (the unconditioned
/// baseline) while keeping ids, experts and training settings.
inline TaskRegistry standard_registry(bool with_prefixes = true) {
  TaskRegistry r;
  auto p = [&](const char* s) { return with_prefixes ? std::string(s) : std::string(); };
  r.add({"retrieval-query", p("search query: "), 0, Batching::homogeneous, 0.03});
  r.add({"retrieval-doc", p("search document: "), 1, Batching::homogeneous, 0.03});
  r.add({"classification", p("classification: "), 2, Batching::heterogeneous, 0.03});
  r.add({"clustering", p("clustering: "), 3, Batching::heterogeneous, 0.06});
  return r;
}

/// Static training regime: heterogeneous batching and one temperature for
/// every task. Prefixes and expert assignments are untouched.
inline TaskRegistry static_regime(const TaskRegistry& base,
                                  double temperature = 0.03) {
  TaskRegistry r;
  for (TaskEntry e : base) {
    e.batching = Batching::heterogeneous;
    e.temperature = temperature;
    r.add(std::move(e));
  }
  return r;
}

/// The anchor-side task whose positives carry a different instruction.
/// Retrieval queries pair with documents; every other task pairs with
/// itself.
inline std::string positive_task_for(const std::string& anchor_task) {
  if (anchor_task == "retrieval-query") return "retrieval-doc";
  return anchor_task;
}

}  // namespace mote
