#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <stdexcept>
#include <utility>
#include <vector>

#include "mrg/data.hpp"

namespace mrg {

struct DecodeConfig {
  std::size_t beam = 4;
  /// Minimum number of tokens before eos may be emitted.
  std::size_t min_len = 10;
  /// Maximum number of decoder steps.
  std::size_t max_len = 20;
  TokenId sos = Vocabulary::kSos;
  TokenId eos = Vocabulary::kEos;
  /// Never emitted.
  std::vector<TokenId> banned{Vocabulary::kPad, Vocabulary::kSos};

  void validate() const {
    if (beam == 0) throw std::invalid_argument("beam width must be at least 1");
    if (max_len == 0 || min_len > max_len) throw std::invalid_argument("decode lengths need 0 < min_len <= max_len");
  }
};

template <typename State>
struct Hypothesis {
  /// Starts with sos.
  std::vector<TokenId> tokens;
  double log_prob = 0.0;
  State state;

  std::size_t generated() const { return tokens.size() - 1; }
  /// Length-normalized log-probability used for the final ranking.
  double score() const { return generated() == 0 ? log_prob : log_prob / static_cast<double>(generated()); }
  /// Generated tokens without sos or a trailing eos.
  std::vector<TokenId> content(TokenId eos) const {
    std::vector<TokenId> out(tokens.begin() + 1, tokens.end());
    if (!out.empty() && out.back() == eos) out.pop_back();
    return out;
  }
};

namespace detail {

inline bool allowed(const DecodeConfig& cfg, TokenId v, std::size_t step) {
  if (v == cfg.eos) return step > cfg.min_len;
  return std::find(cfg.banned.begin(), cfg.banned.end(), v) == cfg.banned.end();
}

}  // namespace detail

/// Length-bounded beam search.
///
/// `step(state, prev_token)` returns {log-probabilities over the vocabulary,
/// next state}. Each step expands every live hypothesis, keeps the `beam`
/// best candidates by accumulated log-probability (ties: lexicographically
/// smaller token sequence), moves those ending in eos to the finished pool,
/// and finalizes survivors at max_len. The winner is the finished hypothesis
/// with the best average per-token log-probability, same tie-break.
template <typename State, typename StepFn>
Hypothesis<State> beam_search(State initial, StepFn&& step, const DecodeConfig& cfg) {
  cfg.validate();
  struct Candidate {
    std::size_t parent;
    TokenId token;
    double log_prob;
  };

  std::vector<Hypothesis<State>> live{{{cfg.sos}, 0.0, std::move(initial)}};
  std::vector<Hypothesis<State>> finished;

  auto lex_less = [](const std::vector<TokenId>& a, TokenId a_last, const std::vector<TokenId>& b, TokenId b_last) {
    const auto n = std::min(a.size(), b.size());
    for (std::size_t i = 0; i < n; ++i)
      if (a[i] != b[i]) return a[i] < b[i];
    if (a.size() != b.size()) return a.size() < b.size();
    return a_last < b_last;
  };

  for (std::size_t t = 1; t <= cfg.max_len && !live.empty(); ++t) {
    std::vector<Candidate> cands;
    std::vector<State> next_states;
    next_states.reserve(live.size());
    for (std::size_t h = 0; h < live.size(); ++h) {
      auto [log_probs, next] = step(live[h].state, live[h].tokens.back());
      next_states.push_back(std::move(next));
      for (TokenId v = 0; v < log_probs.size(); ++v) {
        if (!detail::allowed(cfg, v, t)) continue;
        cands.push_back({h, v, live[h].log_prob + static_cast<double>(log_probs[v])});
      }
    }
    const auto keep = std::min(cfg.beam, cands.size());
    std::partial_sort(cands.begin(), cands.begin() + static_cast<std::ptrdiff_t>(keep), cands.end(),
                      [&](const Candidate& a, const Candidate& b) {
                        if (a.log_prob != b.log_prob) return a.log_prob > b.log_prob;
                        return lex_less(live[a.parent].tokens, a.token, live[b.parent].tokens, b.token);
                      });
    std::vector<Hypothesis<State>> next_live;
    for (std::size_t k = 0; k < keep; ++k) {
      const auto& c = cands[k];
      Hypothesis<State> hyp{live[c.parent].tokens, c.log_prob, next_states[c.parent]};
      hyp.tokens.push_back(c.token);
      if (c.token == cfg.eos || t == cfg.max_len) finished.push_back(std::move(hyp));
      else next_live.push_back(std::move(hyp));
    }
    live = std::move(next_live);
  }
  if (finished.empty()) throw std::logic_error("beam search finished no hypothesis");
  return *std::min_element(finished.begin(), finished.end(), [](const auto& a, const auto& b) {
    if (a.score() != b.score()) return a.score() > b.score();
    return a.tokens < b.tokens;
  });
}

/// Argmax decoding under the same length and banned-token rules.
template <typename State, typename StepFn>
Hypothesis<State> greedy_decode(State initial, StepFn&& step, const DecodeConfig& cfg) {
  cfg.validate();
  Hypothesis<State> hyp{{cfg.sos}, 0.0, std::move(initial)};
  for (std::size_t t = 1; t <= cfg.max_len; ++t) {
    auto [log_probs, next] = step(hyp.state, hyp.tokens.back());
    TokenId best = log_probs.size();
    double best_total = -std::numeric_limits<double>::infinity();
    for (TokenId v = 0; v < log_probs.size(); ++v) {
      if (!detail::allowed(cfg, v, t)) continue;
      const double total = hyp.log_prob + static_cast<double>(log_probs[v]);
      if (best == log_probs.size() || total > best_total) {
        best = v;
        best_total = total;
      }
    }
    if (best == log_probs.size()) throw std::logic_error("greedy decode: no allowed token");
    hyp.tokens.push_back(best);
    hyp.log_prob = best_total;
    hyp.state = std::move(next);
    if (best == cfg.eos) break;
  }
  return hyp;
}

}  // namespace mrg
