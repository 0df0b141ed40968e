#pragma once

#include <array>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "mrg/data.hpp"

namespace mrg {

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Reasoning categories of the omitted-entity templates.
enum class ReasoningType { Paraphrasing = 0, LexicalMatch = 1, Pragmatics = 2 };

struct SynthConfig {
  /// Candidate entities; multi-word entries yield multi-token answers.
  std::vector<std::string> entity_pool;
  /// How many distinct entities the corpus draws from (the first `diversity` of the pool).
  std::size_t diversity = 12;
  /// Mixture over {paraphrasing, lexical match, pragmatics}.
  std::array<double, 3> mixture{0.49, 0.285, 0.225};
  /// Probability of prefixing a greeting utterance.
  double greeting_probability = 0.5;

  static SynthConfig defaults();
};

struct SynthRecord {
  RawDialog dialog;
  ReasoningType type;
  std::string entity;
};

/// Deterministic in (seed, n, config). Every record mentions an entity in an
/// early utterance, omits it from the final one, asks for it, and reuses it
/// in the response; answer indices cover exactly the entity's tokens.
std::vector<SynthRecord> synth_generate(std::uint64_t seed, std::size_t n, const SynthConfig& config);
std::vector<RawDialog> synth_corpus(std::uint64_t seed, std::size_t n, const SynthConfig& config);

}  // namespace mrg
