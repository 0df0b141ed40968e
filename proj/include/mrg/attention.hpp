#pragma once

#include <string>
#include <vector>

#include "mrg/params.hpp"
#include "mrg/tensor.hpp"

namespace mrg {

/// Multi-head scaled dot-product attention with a residual connection and
/// layer normalization around it. Queries come from one sequence, keys and
/// values from another; self-attention passes the same tensor twice.
///
/// Per head h with width d/H:
///   scores = (q W^Q_h)(kv W^K_h)^T / sqrt(d/H), masked keys at -1e9
///   weights = softmax over keys
///   head_h = weights (kv W^V_h)
/// output = LayerNorm(q + concat(head_1..head_H) W^O)
template <typename T>
class MultiHeadAttention {
 public:
  struct Result {
    Tensor<T> output;
    /// Concatenated heads before the output mix.
    Tensor<T> attended;
    std::vector<Tensor<T>> weights;
  };

  MultiHeadAttention(ParamStore<T>& params, const std::string& prefix, std::size_t dim, std::size_t heads,
                     double ln_eps = 1e-5);

  Result forward(const Tensor<T>& query, const Tensor<T>& kv, const Mask& kv_mask) const;
  Tensor<T> operator()(const Tensor<T>& query, const Tensor<T>& kv, const Mask& kv_mask) const {
    return forward(query, kv, kv_mask).output;
  }

  std::size_t heads() const { return heads_; }
  std::size_t dim() const { return dim_; }
  const Tensor<T>& w_query() const { return w_q_; }
  const Tensor<T>& w_key() const { return w_k_; }
  const Tensor<T>& w_value() const { return w_v_; }
  const Tensor<T>& w_out() const { return w_o_; }
  const Tensor<T>& ln_gain() const { return ln_gain_; }
  const Tensor<T>& ln_bias() const { return ln_bias_; }
  T ln_eps() const { return eps_; }

 private:
  std::size_t dim_, heads_;
  T eps_;
  Tensor<T> w_q_, w_k_, w_v_, w_o_, ln_gain_, ln_bias_;
};

}  // namespace mrg
