#pragma once

#include <memory>
#include <string>
#include <vector>

#include "mrg/answer.hpp"
#include "mrg/beam.hpp"
#include "mrg/data.hpp"
#include "mrg/decoder.hpp"
#include "mrg/encoder.hpp"
#include "mrg/hier_attn.hpp"
#include "mrg/mcam.hpp"
#include "mrg/params.hpp"
#include "mrg/trace.hpp"

namespace mrg {

enum class TaskMode { Joint, ResponseOnly, AnswerOnly };

std::string to_string(TaskMode mode);
TaskMode parse_task_mode(const std::string& text);

struct ModelConfig {
  std::size_t vocab_size = 0;
  std::size_t emb_dim = 128;
  std::size_t hidden = 256;
  std::size_t layers = 2;
  std::size_t heads = 4;
  std::size_t word_mam_layers = 1;
  std::size_t answer_hidden = 256;
  Layout layout;
  bool use_mcam = true;
  bool use_mam = true;
  bool use_memupd = true;
  bool learned_initial_memory = false;
  double ln_eps = 1e-5;

  void validate() const;
};

/// Everything the two task heads consume, produced by one encoder pass.
template <typename T>
struct Encoding {
  PaddedContext context;
  Tensor<T> question;          // h^q_i, [N^q×d]
  Mask question_mask;
  std::vector<Tensor<T>> mcam;  // m^{L,j} per real utterance
  HierarchicalResult<T> hier;
};

template <typename T>
struct LossParts {
  Tensor<T> total;
  double response_nll = 0.0;   // Σ_t -log P(y_t), 0 when the head is off
  std::size_t response_tokens = 0;
  double answer_bce = 0.0;     // masked mean BCE, 0 when the head is off
};

/// Answer extraction and response generation over one shared encoder.
template <typename T>
class MrgModel {
 public:
  explicit MrgModel(ModelConfig config);
  MrgModel(const MrgModel&) = delete;
  MrgModel& operator=(const MrgModel&) = delete;

  const ModelConfig& config() const { return config_; }
  ParamStore<T>& params() { return params_; }
  const ParamStore<T>& params() const { return params_; }
  void initialize(std::uint64_t seed, double stddev) { params_.initialize(seed, stddev); }

  Encoding<T> encode(const DialogExample& example, ForwardTrace<T>* trace = nullptr) const;
  Tensor<T> answer_logits(const Encoding<T>& enc) const;
  /// Targets are the response tokens followed by eos.
  static std::vector<TokenId> response_targets(const DialogExample& example);
  Tensor<T> response_nll(const Encoding<T>& enc, const DialogExample& example, ForwardTrace<T>* trace = nullptr) const;
  LossParts<T> loss(const DialogExample& example, TaskMode mode, double answer_weight,
                    ForwardTrace<T>* trace = nullptr) const;

  /// Extracted answer as indices into the flattened (unpadded) context.
  std::vector<std::size_t> predict_answer(const DialogExample& example, double threshold = 0.5) const;
  std::vector<std::size_t> predict_answer(const Encoding<T>& enc, double threshold = 0.5) const;

  using DecoderState = typename ResponseDecoder<T>::State;
  Hypothesis<DecoderState> generate(const DialogExample& example, const DecodeConfig& cfg) const;
  Hypothesis<DecoderState> generate_greedy(const DialogExample& example, const DecodeConfig& cfg) const;
  /// Step function over P^v for the beam search, bound to one encoding.
  auto step_function(const typename ResponseDecoder<T>::Memory& memory) const {
    return [this, &memory](const DecoderState& state, TokenId prev) {
      auto s = decoder_.step(memory, state, prev);
      const auto lp = log_softmax(decoder_.logits(s.features), 1);
      std::vector<double> out(lp.values().begin(), lp.values().end());
      return std::pair<std::vector<double>, DecoderState>(std::move(out), std::move(s.state));
    };
  }

  const Embedding<T>& embedding() const { return embedding_; }
  const BiRnn<T>& context_rnn() const { return context_rnn_; }
  const BiRnn<T>& question_rnn() const { return question_rnn_; }
  const McamStack<T>& mcam() const { return mcam_; }
  const HierarchicalAttention<T>& hierarchy() const { return hier_; }
  const AnswerSelector<T>& selector() const { return selector_; }
  const ResponseDecoder<T>& decoder() const { return decoder_; }

 private:
  ModelConfig config_;
  ParamStore<T> params_;
  Embedding<T> embedding_;
  BiRnn<T> context_rnn_;
  BiRnn<T> question_rnn_;
  McamStack<T> mcam_;
  HierarchicalAttention<T> hier_;
  AnswerSelector<T> selector_;
  ResponseDecoder<T> decoder_;
};

/// Maps padded context positions (slot*len + i) to flattened unpadded indices.
std::vector<std::size_t> unpad_positions(const PaddedContext& context, const std::vector<std::size_t>& padded);

}  // namespace mrg
