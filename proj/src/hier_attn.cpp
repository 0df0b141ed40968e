#include "mrg/hier_attn.hpp"

namespace mrg {

namespace {

template <typename T>
std::pair<Tensor<T>, Mask> stack_pooled(const std::vector<Tensor<T>>& states, const std::vector<Mask>& masks,
                                        std::size_t slots) {
  if (states.empty() || states.size() > slots || states.size() != masks.size()) {
    throw ShapeError("hierarchical attention: need 1.." + std::to_string(slots) + " utterances with masks");
  }
  const auto dim = states[0].cols();
  std::vector<Tensor<T>> rows;
  for (std::size_t j = 0; j < states.size(); ++j) rows.push_back(mean_pool(states[j], 0, masks[j]));
  if (states.size() < slots) rows.push_back(Tensor<T>::zeros({slots - states.size(), dim}));
  Mask utt_mask(slots, 0);
  std::fill(utt_mask.begin(), utt_mask.begin() + static_cast<std::ptrdiff_t>(states.size()), 1);
  return {concat<T>(std::span<const Tensor<T>>(rows), 0), std::move(utt_mask)};
}

}  // namespace

template <typename T>
HierarchicalAttention<T>::HierarchicalAttention(ParamStore<T>& params, const std::string& prefix, std::size_t dim,
                                                std::size_t word_heads, std::size_t word_layers, double ln_eps)
    : utterance_(params, prefix + ".utterance_mam", dim, 1, ln_eps) {
  // utterance_ registers first; keep word layers after it in the store order.
  word_.reserve(word_layers);
  for (std::size_t l = 0; l < word_layers; ++l)
    word_.emplace_back(params, prefix + ".word_mam" + std::to_string(l), dim, word_heads, ln_eps);
}

template <typename T>
Tensor<T> HierarchicalAttention<T>::word_mam(const Tensor<T>& states, const Mask& mask, ForwardTrace<T>* trace) const {
  const auto keep = row_mask<T>(mask, states.cols());
  Tensor<T> x = states;
  for (const auto& layer : word_) {
    auto r = layer.forward(x, x, mask);
    if (trace) {
      for (auto& w : r.weights) trace->word_attention.push_back(w);
    }
    x = mul(r.output, keep);
  }
  return x;
}

template <typename T>
HierarchicalResult<T> HierarchicalAttention<T>::utterance_level(const std::vector<Tensor<T>>& word_states,
                                                                const std::vector<Mask>& masks, std::size_t slots,
                                                                ForwardTrace<T>* trace) const {
  HierarchicalResult<T> r;
  std::tie(r.pooled, r.utterance_mask) = stack_pooled(word_states, masks, slots);
  auto attn = utterance_.forward(r.pooled, r.pooled, r.utterance_mask);
  if (trace) {
    for (auto& w : attn.weights) trace->utterance_attention.push_back(w);
  }
  r.utterances = mul(attn.output, row_mask<T>(r.utterance_mask, r.pooled.cols()));
  r.dialog = mean_pool(r.utterances, 0, r.utterance_mask);
  return r;
}

template <typename T>
HierarchicalResult<T> HierarchicalAttention<T>::forward(const std::vector<Tensor<T>>& states,
                                                        const std::vector<Mask>& masks, std::size_t slots,
                                                        ForwardTrace<T>* trace) const {
  std::vector<Tensor<T>> words;
  words.reserve(states.size());
  for (std::size_t j = 0; j < states.size(); ++j) words.push_back(word_mam(states[j], masks.at(j), trace));
  return utterance_level(words, masks, slots, trace);
}

template <typename T>
HierarchicalResult<T> pool_without_attention(const std::vector<Tensor<T>>& states, const std::vector<Mask>& masks,
                                             std::size_t slots) {
  HierarchicalResult<T> r;
  std::tie(r.pooled, r.utterance_mask) = stack_pooled(states, masks, slots);
  r.utterances = r.pooled;
  r.dialog = mean_pool(r.utterances, 0, r.utterance_mask);
  return r;
}

template class HierarchicalAttention<float>;
template class HierarchicalAttention<double>;
template HierarchicalResult<float> pool_without_attention(const std::vector<Tensor<float>>&, const std::vector<Mask>&,
                                                          std::size_t);
template HierarchicalResult<double> pool_without_attention(const std::vector<Tensor<double>>&,
                                                           const std::vector<Mask>&, std::size_t);

}  // namespace mrg
