#pragma once

#include <string>
#include <vector>

#include "mrg/attention.hpp"
#include "mrg/trace.hpp"

namespace mrg {

template <typename T>
struct HierarchicalResult {
  /// h^{u',j}: masked mean of word states, [slots×d], zero rows for padding.
  Tensor<T> pooled;
  /// h^{u,j}: after utterance-level self-attention, [slots×d].
  Tensor<T> utterances;
  Mask utterance_mask;
  /// h^d, [1×d].
  Tensor<T> dialog;
};

/// Word-level self-attention inside each utterance, mean-pooling to
/// utterance vectors, utterance-level self-attention, and a final mean to
/// the dialog vector. No positional encoding is used at either level.
template <typename T>
class HierarchicalAttention {
 public:
  HierarchicalAttention(ParamStore<T>& params, const std::string& prefix, std::size_t dim, std::size_t word_heads,
                        std::size_t word_layers, double ln_eps = 1e-5);

  Tensor<T> word_mam(const Tensor<T>& states, const Mask& mask, ForwardTrace<T>* trace = nullptr) const;

  /// `word_states` holds the real utterances; `slots` is the padded utterance capacity.
  HierarchicalResult<T> utterance_level(const std::vector<Tensor<T>>& word_states, const std::vector<Mask>& masks,
                                        std::size_t slots, ForwardTrace<T>* trace = nullptr) const;

  HierarchicalResult<T> forward(const std::vector<Tensor<T>>& states, const std::vector<Mask>& masks,
                                std::size_t slots, ForwardTrace<T>* trace = nullptr) const;

  const std::vector<MultiHeadAttention<T>>& word_layers() const { return word_; }
  const MultiHeadAttention<T>& utterance_attention() const { return utterance_; }

 private:
  std::vector<MultiHeadAttention<T>> word_;
  MultiHeadAttention<T> utterance_;
};

/// Pools each utterance and the dialog without any attention (the "w/o MAM" arm).
template <typename T>
HierarchicalResult<T> pool_without_attention(const std::vector<Tensor<T>>& states, const std::vector<Mask>& masks,
                                             std::size_t slots);

}  // namespace mrg
