#include "mrg/evaluate.hpp"

namespace mrg {

EmbeddingTable model_embeddings(const MrgModel<float>& model, const Vocabulary& vocab) {
  const auto& table = model.embedding().table();
  const auto dim = table.cols();
  const auto values = table.values();
  EmbeddingTable out(dim);
  for (TokenId id = Vocabulary::kReserved; id < vocab.size(); ++id) {
    out.add(vocab.token(id), std::vector<double>(values.begin() + static_cast<std::ptrdiff_t>(id * dim),
                                                 values.begin() + static_cast<std::ptrdiff_t>((id + 1) * dim)));
  }
  return out;
}

std::vector<std::size_t> gold_answer(const DialogExample& example) {
  std::vector<std::size_t> gold;
  for (std::size_t i = 0; i < example.answer_mask.size(); ++i)
    if (example.answer_mask[i]) gold.push_back(i);
  return gold;
}

Prediction predict(const MrgModel<float>& model, const Vocabulary& vocab, const DialogExample& example,
                   const EvalOptions& options) {
  Prediction p;
  if (options.generation) {
    const auto hyp = options.greedy ? model.generate_greedy(example, options.decode)
                                    : model.generate(example, options.decode);
    p.response_ids = hyp.content(options.decode.eos);
    p.response = vocab.decode(p.response_ids);
    p.log_prob = hyp.log_prob;
  }
  if (options.answer) p.answer = model.predict_answer(example);
  return p;
}

EvalReport evaluate_model(const MrgModel<float>& model, const Vocabulary& vocab,
                          const std::vector<DialogExample>& examples, const EvalOptions& options) {
  EmbeddingTable own;
  const EmbeddingTable* table = options.embeddings;
  if (options.generation && !table) {
    own = model_embeddings(model, vocab);
    table = &own;
  }
  EvalReport report;
  std::vector<Tokens> hyps, refs;
  for (const auto& ex : examples) {
    const auto pred = predict(model, vocab, ex, options);
    ExampleScores row;
    if (options.generation) {
      row.hypothesis = pred.response;
      row.reference = ex.response_tokens;
      if (!row.reference.empty()) {
        std::array<double, 4> b{};
        for (std::size_t n = 1; n <= 4; ++n) {
          const auto s = bleu(row.hypothesis, row.reference, n);
          b[n - 1] = s.value;
          row.empty_hypothesis = s.empty_hypothesis;
        }
        row.bleu = b;
        row.bow = bow_metrics(row.hypothesis, row.reference, *table);
        hyps.push_back(row.hypothesis);
        refs.push_back(row.reference);
      }
    }
    if (options.answer) {
      row.predicted_answer = pred.answer;
      row.gold_answer = gold_answer(ex);
      row.answer = answer_metrics(row.predicted_answer, row.gold_answer);
    }
    report.per_example.push_back(std::move(row));
  }
  aggregate(report);
  if (options.corpus_bleu && !hyps.empty()) {
    std::array<double, 4> c{};
    for (std::size_t n = 1; n <= 4; ++n) c[n - 1] = corpus_bleu(hyps, refs, n).value;
    report.corpus_bleu = c;
  }
  return report;
}

}  // namespace mrg
