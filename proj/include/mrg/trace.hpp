#pragma once

#include <vector>

#include "mrg/tensor.hpp"

namespace mrg {

/// Optional record of intermediate distributions and gates from one forward
/// pass. Only filled when a pointer is passed in; used by invariant checks.
template <typename T>
struct ForwardTrace {
  struct Gate {
    Tensor<T> m, c, z, n;
    Mask mask;
  };

  /// Cross-attention weights, one [n_q×n_k] tensor per (utterance, layer, head).
  std::vector<Tensor<T>> cam_attention;
  std::vector<Tensor<T>> memory_attention;
  std::vector<Tensor<T>> word_attention;
  std::vector<Tensor<T>> utterance_attention;
  std::vector<Gate> gates;
  /// γ per decoder step, [1×N] each.
  std::vector<Tensor<T>> decoder_attention;
  /// P^v per decoder step, [1×V] each.
  std::vector<Tensor<T>> output_distributions;
  /// Query-row masks matching cam_attention/word_attention entries.
  std::vector<Mask> cam_query_masks;
  std::vector<Mask> cam_key_masks;
};

}  // namespace mrg
