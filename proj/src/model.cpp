#include "mrg/model.hpp"

#include <algorithm>
#include <stdexcept>

namespace mrg {

std::string to_string(TaskMode mode) {
  switch (mode) {
    case TaskMode::Joint: return "joint";
    case TaskMode::ResponseOnly: return "response_only";
    case TaskMode::AnswerOnly: return "answer_only";
  }
  return "joint";
}

TaskMode parse_task_mode(const std::string& text) {
  if (text == "joint") return TaskMode::Joint;
  if (text == "response_only") return TaskMode::ResponseOnly;
  if (text == "answer_only") return TaskMode::AnswerOnly;
  throw std::invalid_argument("unknown mode '" + text + "' (expected joint, response_only or answer_only)");
}

void ModelConfig::validate() const {
  auto positive = [](std::size_t v, const char* name) {
    if (v == 0) throw std::invalid_argument(std::string(name) + " must be positive");
  };
  positive(vocab_size, "vocab_size");
  positive(emb_dim, "emb_dim");
  positive(hidden, "hidden");
  positive(heads, "heads");
  positive(answer_hidden, "answer_hidden");
  positive(layout.max_utterances, "max_utterances");
  positive(layout.max_utterance_len, "max_utterance_len");
  positive(layout.max_question_len, "max_question_len");
  if (layout.max_response_len < 2) throw std::invalid_argument("max_response_len must be at least 2");
  if (vocab_size < Vocabulary::kReserved) throw std::invalid_argument("vocab_size must cover the reserved tokens");
  if (hidden % 2 != 0) throw std::invalid_argument("hidden must be even (two LSTM directions)");
  if (hidden % heads != 0) throw std::invalid_argument("hidden must be divisible by heads");
  if (!(ln_eps > 0.0)) throw std::invalid_argument("ln_eps must be positive");
}

namespace {

const ModelConfig& validated(const ModelConfig& c) {
  c.validate();
  return c;
}

}  // namespace

template <typename T>
MrgModel<T>::MrgModel(ModelConfig config)
    : config_(validated(config)),
      embedding_(params_, "embedding", config_.vocab_size, config_.emb_dim),
      context_rnn_(params_, "encoder.context", config_.emb_dim, config_.hidden),
      question_rnn_(params_, "encoder.question", config_.emb_dim, config_.hidden),
      mcam_(params_, "mcam", config_.hidden, config_.layout.max_utterance_len,
            McamOptions{config_.layers, config_.heads, config_.use_memupd, config_.learned_initial_memory},
            config_.ln_eps),
      hier_(params_, "hier", config_.hidden, config_.heads, config_.word_mam_layers, config_.ln_eps),
      selector_(params_, "answer", config_.hidden, config_.layout.max_utterances, config_.answer_hidden,
                config_.layout.context_capacity()),
      decoder_(params_, "decoder", embedding_, config_.hidden, config_.vocab_size) {}

template <typename T>
Encoding<T> MrgModel<T>::encode(const DialogExample& example, ForwardTrace<T>* trace) const {
  const auto& layout = config_.layout;
  Encoding<T> enc;
  enc.context = pad(example, layout);
  const std::size_t n = example.utterances.size();
  if (n == 0) throw std::invalid_argument("example has no utterances");
  if (example.question.empty()) throw std::invalid_argument("example has an empty question");

  // Utterances are encoded at the longest real length; masked positions
  // contribute exact zeros, so this matches the full padded width.
  std::size_t width = 1;
  for (const auto& u : example.utterances) width = std::max(width, u.size());
  if (width > layout.max_utterance_len) throw std::invalid_argument("utterance longer than max_utterance_len");
  std::vector<TokenId> ids(n * width, Vocabulary::kPad);
  std::vector<Mask> masks(n, Mask(width, 0));
  for (std::size_t j = 0; j < n; ++j) {
    const auto& u = example.utterances[j];
    if (u.empty()) throw std::invalid_argument("utterance " + std::to_string(j) + " is empty");
    std::copy(u.begin(), u.end(), ids.begin() + static_cast<std::ptrdiff_t>(j * width));
    std::fill_n(masks[j].begin(), u.size(), 1);
  }
  const auto states = context_rnn_.encode(embedding_.lookup(ids), masks);
  std::vector<Tensor<T>> utterances;
  utterances.reserve(n);
  for (std::size_t j = 0; j < n; ++j) utterances.push_back(n == 1 ? states : slice(states, 0, j * width, width));

  enc.question_mask.assign(example.question.size(), 1);
  enc.question = question_rnn_.encode(embedding_.lookup(example.question), enc.question_mask);

  enc.mcam = config_.use_mcam ? mcam_.forward(utterances, masks, enc.question, enc.question_mask, trace) : utterances;
  enc.hier = config_.use_mam ? hier_.forward(enc.mcam, masks, layout.max_utterances, trace)
                             : pool_without_attention(enc.mcam, masks, layout.max_utterances);
  return enc;
}

template <typename T>
Tensor<T> MrgModel<T>::answer_logits(const Encoding<T>& enc) const {
  return selector_.logits(enc.hier.utterances, enc.question, enc.question_mask);
}

template <typename T>
std::vector<TokenId> MrgModel<T>::response_targets(const DialogExample& example) {
  std::vector<TokenId> targets(example.response);
  targets.push_back(Vocabulary::kEos);
  return targets;
}

template <typename T>
Tensor<T> MrgModel<T>::response_nll(const Encoding<T>& enc, const DialogExample& example,
                                    ForwardTrace<T>* trace) const {
  const auto targets = response_targets(example);
  if (targets.size() > config_.layout.max_response_len) {
    throw std::invalid_argument("response longer than max_response_len; truncate the example first");
  }
  const auto memory = decoder_.prepare(enc.hier.utterances, enc.hier.utterance_mask);
  return decoder_.nll(memory, enc.hier.dialog, targets, trace);
}

template <typename T>
LossParts<T> MrgModel<T>::loss(const DialogExample& example, TaskMode mode, double answer_weight,
                               ForwardTrace<T>* trace) const {
  const auto enc = encode(example, trace);
  LossParts<T> parts;
  Tensor<T> generation, answer;
  if (mode != TaskMode::AnswerOnly) {
    generation = response_nll(enc, example, trace);
    parts.response_nll = static_cast<double>(generation.item());
    parts.response_tokens = example.response.size() + 1;
  }
  if (mode != TaskMode::ResponseOnly) {
    answer = bce_with_logits(answer_logits(enc), enc.context.answer_target, enc.context.token_mask);
    parts.answer_bce = static_cast<double>(answer.item());
  }
  switch (mode) {
    case TaskMode::Joint: parts.total = add(generation, scale(answer, static_cast<T>(answer_weight))); break;
    case TaskMode::ResponseOnly: parts.total = generation; break;
    case TaskMode::AnswerOnly: parts.total = answer; break;
  }
  return parts;
}

template <typename T>
std::vector<std::size_t> MrgModel<T>::predict_answer(const Encoding<T>& enc, double threshold) const {
  const auto logits = answer_logits(enc);
  return unpad_positions(enc.context, extract_answer<T>(logits.values(), enc.context.token_mask, threshold));
}

template <typename T>
std::vector<std::size_t> MrgModel<T>::predict_answer(const DialogExample& example, double threshold) const {
  NoGradGuard no_grad;
  return predict_answer(encode(example), threshold);
}

template <typename T>
Hypothesis<typename MrgModel<T>::DecoderState> MrgModel<T>::generate(const DialogExample& example,
                                                                     const DecodeConfig& cfg) const {
  NoGradGuard no_grad;
  const auto enc = encode(example);
  const auto memory = decoder_.prepare(enc.hier.utterances, enc.hier.utterance_mask);
  return beam_search(decoder_.init_state(memory, enc.hier.dialog), step_function(memory), cfg);
}

template <typename T>
Hypothesis<typename MrgModel<T>::DecoderState> MrgModel<T>::generate_greedy(const DialogExample& example,
                                                                            const DecodeConfig& cfg) const {
  NoGradGuard no_grad;
  const auto enc = encode(example);
  const auto memory = decoder_.prepare(enc.hier.utterances, enc.hier.utterance_mask);
  return greedy_decode(decoder_.init_state(memory, enc.hier.dialog), step_function(memory), cfg);
}

std::vector<std::size_t> unpad_positions(const PaddedContext& context, const std::vector<std::size_t>& padded) {
  std::vector<std::size_t> flat_index(context.token_mask.size(), 0);
  std::size_t next = 0;
  for (std::size_t i = 0; i < context.token_mask.size(); ++i)
    if (context.token_mask[i]) flat_index[i] = next++;
  std::vector<std::size_t> out;
  out.reserve(padded.size());
  for (auto p : padded) {
    if (p >= context.token_mask.size() || !context.token_mask[p]) {
      throw std::out_of_range("position " + std::to_string(p) + " is not a real context token");
    }
    out.push_back(flat_index[p]);
  }
  return out;
}

template class MrgModel<float>;
template class MrgModel<double>;

}  // namespace mrg
