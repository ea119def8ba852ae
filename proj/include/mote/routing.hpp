// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <vector>

#include "mote/error.hpp"
#include "mote/tensor.hpp"

namespace mote {

/// Learned token-level routing outcome: per-token top-1 expert choice and
/// the full gate distribution behind it.
struct TokenRouteDecision {
  std::vector<std::size_t> expert_index;  // one per token
  Tensor gate_probabilities;              // [tokens x experts], rows sum to 1
};

/// Token-level routing: per-token softmax over gate logits and top-1
/// selection, ties broken by the lowest expert index.
inline TokenRouteDecision route_tokens(const Tensor& gate,
                                       const Tensor& hidden_states) {
  if (gate.shape.size() != 2 || hidden_states.shape.size() != 2 ||
      hidden_states.shape[1] != gate.shape[0])
    throw ShapeError("route_tokens: incompatible shapes " +
                     Tensor::shape_str(hidden_states.shape) + " and " +
                     Tensor::shape_str(gate.shape));
  const std::size_t n = hidden_states.rows();
  const std::size_t experts = gate.shape[1];
  TokenRouteDecision decision;
  decision.gate_probabilities = Tensor({n, experts});
  decision.expert_index.resize(n);
  Tensor logits = matmul(hidden_states, gate);
  for (std::size_t t = 0; t < n; ++t) {
    detail::softmax_row(logits.data.data() + t * experts, experts,
                        decision.gate_probabilities.data.data() + t * experts);
    std::size_t best = 0;
    const double* row = decision.gate_probabilities.data.data() + t * experts;
    for (std::size_t e = 1; e < experts; ++e)
      if (row[e] > row[best]) best = e;
    decision.expert_index[t] = best;
  }
  return decision;
}

/// Switch-style balance objective: experts * sum_e fraction_e * mean_prob_e,
/// minimized at 1 under uniform assignment and uniform probabilities.
inline double load_balancing_loss(const TokenRouteDecision& decision) {
  const std::size_t n = decision.expert_index.size();
  if (n == 0) throw EmptyBatchError("load_balancing_loss: no tokens");
  const std::size_t experts = decision.gate_probabilities.cols();
  std::vector<double> fraction(experts, 0.0), mean_prob(experts, 0.0);
  for (std::size_t t = 0; t < n; ++t) {
    fraction[decision.expert_index[t]] += 1.0;
    for (std::size_t e = 0; e < experts; ++e)
      mean_prob[e] += decision.gate_probabilities.data[t * experts + e];
  }
  double loss = 0.0;
  for (std::size_t e = 0; e < experts; ++e)
    loss += (fraction[e] / static_cast<double>(n)) *
            (mean_prob[e] / static_cast<double>(n));
  return loss * static_cast<double>(experts);
}

}  // namespace mote
