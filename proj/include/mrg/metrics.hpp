#pragma once

#include <array>
#include <cstddef>
#include <filesystem>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include "json.hpp"

namespace mrg {

using Tokens = std::vector<std::string>;

struct BleuScore {
  double value = 0.0;
  bool empty_hypothesis = false;
};

/// Sentence-level BLEU-n against one reference with uniform weights 1/max_n.
/// Smoothing 7 (method 4 then method 5 of Chen & Cherry) is applied when some
/// order up to max_n has no clipped match.
BleuScore bleu(const Tokens& hypothesis, const Tokens& reference, std::size_t max_n);

/// Corpus-level BLEU-n: clipped counts and lengths are summed before the
/// precisions are formed; smoothing as in bleu().
BleuScore corpus_bleu(const std::vector<Tokens>& hypotheses, const std::vector<Tokens>& references,
                      std::size_t max_n);

class EmbeddingTable {
 public:
  EmbeddingTable() = default;
  explicit EmbeddingTable(std::size_t dim) : dim_(dim) {}

  /// One token per line followed by whitespace-separated floats.
  static EmbeddingTable load(const std::filesystem::path& path);

  void add(const std::string& token, std::vector<double> vector);
  std::size_t dim() const { return dim_; }
  std::size_t size() const { return table_.size(); }
  const std::vector<double>* find(const std::string& token) const;

 private:
  std::size_t dim_ = 0;
  std::unordered_map<std::string, std::vector<double>> table_;
};

struct BowScores {
  double average = 0.0;
  double extrema = 0.0;
  double greedy = 0.0;
};

/// nullopt when either side has no token with an embedding.
std::optional<BowScores> bow_metrics(const Tokens& hypothesis, const Tokens& reference, const EmbeddingTable& table);

struct AnswerScores {
  double exact_match = 0.0;
  double f1 = 0.0;
};

AnswerScores answer_metrics(const std::vector<std::size_t>& predicted, const std::vector<std::size_t>& gold);

struct ExampleScores {
  Tokens hypothesis;
  Tokens reference;
  std::vector<std::size_t> predicted_answer;
  std::vector<std::size_t> gold_answer;
  std::optional<std::array<double, 4>> bleu;  // BLEU-1..4
  bool empty_hypothesis = false;
  std::optional<BowScores> bow;
  std::optional<AnswerScores> answer;
};

struct EvalReport {
  bool has_generation = false;
  bool has_answer = false;
  double bleu1 = 0.0, bleu2 = 0.0, bleu3 = 0.0, bleu4 = 0.0;
  double bow_average = 0.0, bow_extrema = 0.0, bow_greedy = 0.0;
  double answer_exact_match = 0.0, answer_f1 = 0.0;
  std::size_t examples = 0;
  std::size_t empty_hypotheses = 0;
  std::size_t bow_skipped = 0;
  std::optional<std::array<double, 4>> corpus_bleu;
  std::vector<ExampleScores> per_example;

  nlohmann::ordered_json to_json() const;
};

/// Fills the corpus means from per_example. Metrics absent from an example are
/// left out of the corresponding mean.
void aggregate(EvalReport& report);

}  // namespace mrg
