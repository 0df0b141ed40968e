#pragma once

#include <span>
#include <string>
#include <vector>

#include "mrg/encoder.hpp"
#include "mrg/trace.hpp"

namespace mrg {

/// Attention-based LSTM decoder over the utterance representations.
///
///   s_0 = W_g h^d + b_g, cell state 0
///   s_t = LSTM(s_{t-1}, [f_{t-1}; e(y_{t-1})])
///   γ_i = softmax_i(w_n^T tanh(W_s s + W_h h^{u,i})),  f = Σ γ_i h^{u,i}
///   P^v_t = softmax(W_v [s_t; f_t] + b_v)
template <typename T>
class ResponseDecoder {
 public:
  /// Utterance keys with their W_h projection computed once per example.
  struct Memory {
    Tensor<T> utterances;
    Tensor<T> projected;
    Mask mask;
  };
  struct State {
    Tensor<T> h, c, f;
    std::size_t t = 0;
  };
  struct Attention {
    Tensor<T> gamma;  // [1×slots]
    Tensor<T> context;  // [1×d]
  };
  struct Step {
    State state;
    Tensor<T> features;  // [s_t; f_t], [1×2d]
    Attention attention;
  };

  ResponseDecoder(ParamStore<T>& params, const std::string& prefix, const Embedding<T>& embedding, std::size_t dim,
                  std::size_t vocab);

  Memory prepare(const Tensor<T>& utterances, const Mask& mask) const;
  Attention attend(const Memory& memory, const Tensor<T>& s) const;
  State init_state(const Memory& memory, const Tensor<T>& dialog) const;
  Step step(const Memory& memory, const State& state, TokenId prev_token) const;
  Tensor<T> logits(const Tensor<T>& features) const;
  Tensor<T> probabilities(const Tensor<T>& features) const { return softmax(logits(features), 1); }

  /// Teacher-forced Σ_t -log P^v_t(y_t); inputs are sos followed by targets[0..n-2].
  Tensor<T> nll(const Memory& memory, const Tensor<T>& dialog, std::span<const TokenId> targets,
                ForwardTrace<T>* trace = nullptr) const;

  const Lstm<T>& cell() const { return cell_; }
  const Tensor<T>& w_g() const { return w_g_; }
  const Tensor<T>& b_g() const { return b_g_; }
  const Tensor<T>& w_s() const { return w_s_; }
  const Tensor<T>& w_h() const { return w_h_; }
  const Tensor<T>& w_n() const { return w_n_; }
  const Tensor<T>& w_v() const { return w_v_; }
  const Tensor<T>& b_v() const { return b_v_; }

 private:
  const Embedding<T>& embedding_;
  std::size_t dim_;
  Tensor<T> w_g_, b_g_;
  Lstm<T> cell_;
  Tensor<T> w_s_, w_h_, w_n_, w_v_, b_v_;
};

}  // namespace mrg
