#pragma once

#include <span>
#include <string>
#include <vector>

#include "mrg/data.hpp"
#include "mrg/params.hpp"
#include "mrg/tensor.hpp"

namespace mrg {

/// Shared token embedding e(·) used by the context, question and decoder.
template <typename T>
class Embedding {
 public:
  Embedding(ParamStore<T>& params, const std::string& name, std::size_t vocab, std::size_t dim);

  Tensor<T> lookup(std::span<const TokenId> ids) const;
  const Tensor<T>& table() const { return table_; }
  std::size_t dim() const { return table_.cols(); }

 private:
  Tensor<T> table_;
};

/// Single-direction LSTM with [i f g o] gate blocks.
template <typename T>
class Lstm {
 public:
  struct State {
    Tensor<T> h, c;
  };

  Lstm(ParamStore<T>& params, const std::string& prefix, std::size_t input, std::size_t hidden,
       double forget_bias = 1.0);

  State zero_state(std::size_t batch) const;
  State step(const Tensor<T>& x, const State& prev) const;
  /// Rows with keep == 0 carry `prev` through unchanged.
  State step(const Tensor<T>& x, const State& prev, const Tensor<T>& keep) const;

  std::size_t hidden() const { return hidden_; }
  const Tensor<T>& input_weights() const { return w_ih_; }
  const Tensor<T>& recurrent_weights() const { return w_hh_; }
  const Tensor<T>& bias() const { return b_; }

 private:
  std::size_t hidden_;
  Tensor<T> w_ih_, w_hh_, b_;
};

/// Bidirectional LSTM; each direction has hidden/2 units and the outputs are
/// concatenated per step. Padded steps produce zero rows.
template <typename T>
class BiRnn {
 public:
  BiRnn(ParamStore<T>& params, const std::string& prefix, std::size_t input, std::size_t hidden);

  /// `embedded` holds `masks.size()` sequences of equal padded length,
  /// sequence-major: row b*len + t is step t of sequence b.
  Tensor<T> encode(const Tensor<T>& embedded, const std::vector<Mask>& masks) const;
  Tensor<T> encode(const Tensor<T>& embedded, const Mask& mask) const {
    return encode(embedded, std::vector<Mask>{mask});
  }

  const Lstm<T>& forward_cell() const { return fw_; }
  const Lstm<T>& backward_cell() const { return bw_; }
  std::size_t hidden() const { return 2 * fw_.hidden(); }

 private:
  Lstm<T> fw_, bw_;
};

}  // namespace mrg
