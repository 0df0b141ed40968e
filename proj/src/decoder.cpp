#include "mrg/decoder.hpp"

#include <algorithm>

namespace mrg {

template <typename T>
ResponseDecoder<T>::ResponseDecoder(ParamStore<T>& params, const std::string& prefix, const Embedding<T>& embedding,
                                    std::size_t dim, std::size_t vocab)
    : embedding_(embedding),
      dim_(dim),
      w_g_(params.add(prefix + ".W_g", {dim, dim})),
      b_g_(params.add(prefix + ".b_g", {1, dim}, Init::constant(0.0))),
      cell_(params, prefix + ".lstm", dim + embedding.dim(), dim),
      w_s_(params.add(prefix + ".W_s", {dim, dim})),
      w_h_(params.add(prefix + ".W_h", {dim, dim})),
      w_n_(params.add(prefix + ".W_n", {dim, 1})),
      w_v_(params.add(prefix + ".W_v", {2 * dim, vocab})),
      b_v_(params.add(prefix + ".b_v", {1, vocab}, Init::constant(0.0))) {}

template <typename T>
typename ResponseDecoder<T>::Memory ResponseDecoder<T>::prepare(const Tensor<T>& utterances, const Mask& mask) const {
  if (mask.size() != utterances.rows()) throw ShapeError("decoder: utterance mask length mismatch");
  return {utterances, matmul(utterances, w_h_), mask};
}

template <typename T>
typename ResponseDecoder<T>::Attention ResponseDecoder<T>::attend(const Memory& memory, const Tensor<T>& s) const {
  if (std::none_of(memory.mask.begin(), memory.mask.end(), [](auto v) { return v != 0; })) {
    throw std::invalid_argument("decoder attention: every utterance is masked");
  }
  const auto pre = tanh(add_bias(memory.projected, matmul(s, w_s_)));
  const auto scores = add(transpose(matmul(pre, w_n_)), mask_bias<T>(memory.mask, 1));
  auto gamma = softmax(scores, 1);
  auto context = matmul(gamma, memory.utterances);
  return {std::move(gamma), std::move(context)};
}

template <typename T>
typename ResponseDecoder<T>::State ResponseDecoder<T>::init_state(const Memory& memory, const Tensor<T>& dialog) const {
  State st;
  st.h = add_bias(matmul(dialog, w_g_), b_g_);
  st.c = Tensor<T>::zeros({1, dim_});
  st.f = attend(memory, st.h).context;
  return st;
}

template <typename T>
typename ResponseDecoder<T>::Step ResponseDecoder<T>::step(const Memory& memory, const State& state,
                                                           TokenId prev_token) const {
  const TokenId ids[] = {prev_token};
  const auto input = concat({state.f, embedding_.lookup(ids)}, 1);
  auto next = cell_.step(input, {state.h, state.c});
  Step out;
  out.attention = attend(memory, next.h);
  out.features = concat({next.h, out.attention.context}, 1);
  out.state = {std::move(next.h), std::move(next.c), out.attention.context, state.t + 1};
  return out;
}

template <typename T>
Tensor<T> ResponseDecoder<T>::logits(const Tensor<T>& features) const {
  return add_bias(matmul(features, w_v_), b_v_);
}

template <typename T>
Tensor<T> ResponseDecoder<T>::nll(const Memory& memory, const Tensor<T>& dialog, std::span<const TokenId> targets,
                                  ForwardTrace<T>* trace) const {
  if (targets.empty()) throw std::invalid_argument("decoder: empty target sequence");
  auto state = init_state(memory, dialog);
  std::vector<Tensor<T>> features;
  features.reserve(targets.size());
  TokenId prev = Vocabulary::kSos;
  for (auto target : targets) {
    auto s = step(memory, state, prev);
    if (trace) {
      trace->decoder_attention.push_back(s.attention.gamma);
      trace->output_distributions.push_back(probabilities(s.features));
    }
    features.push_back(std::move(s.features));
    state = std::move(s.state);
    prev = target;
  }
  const auto all = logits(concat<T>(std::span<const Tensor<T>>(features), 0));
  return nll_loss(all, targets);
}

template class ResponseDecoder<float>;
template class ResponseDecoder<double>;

}  // namespace mrg
