#pragma once

#include <vector>

#include "mrg/beam.hpp"
#include "mrg/data.hpp"
#include "mrg/metrics.hpp"
#include "mrg/model.hpp"

namespace mrg {

struct EvalOptions {
  DecodeConfig decode;
  bool greedy = false;
  bool generation = true;
  bool answer = true;
  bool corpus_bleu = false;
  /// BOW embeddings; the model's own embedding matrix when null.
  const EmbeddingTable* embeddings = nullptr;
};

/// Rows of the embedding matrix keyed by token, reserved tokens excluded.
EmbeddingTable model_embeddings(const MrgModel<float>& model, const Vocabulary& vocab);

/// Gold answer as indices into the flattened (truncated) context.
std::vector<std::size_t> gold_answer(const DialogExample& example);

struct Prediction {
  Tokens response;
  std::vector<TokenId> response_ids;
  double log_prob = 0.0;
  std::vector<std::size_t> answer;
};

Prediction predict(const MrgModel<float>& model, const Vocabulary& vocab, const DialogExample& example,
                   const EvalOptions& options);

EvalReport evaluate_model(const MrgModel<float>& model, const Vocabulary& vocab,
                          const std::vector<DialogExample>& examples, const EvalOptions& options);

}  // namespace mrg
