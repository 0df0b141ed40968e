#pragma once

#include <span>
#include <string>
#include <vector>

#include "mrg/params.hpp"
#include "mrg/tensor.hpp"

namespace mrg {

/// MLP over [h^{u,1}; ...; h^{u,U}; h^q] producing one extraction logit per
/// padded context position (U × tokens-per-utterance).
template <typename T>
class AnswerSelector {
 public:
  AnswerSelector(ParamStore<T>& params, const std::string& prefix, std::size_t dim, std::size_t utterance_slots,
                 std::size_t hidden, std::size_t positions);

  /// Masked mean of the question states, [1×d].
  Tensor<T> question_vector(const Tensor<T>& question_states, const Mask& question_mask) const;
  /// `utterances` is [slots×d] with zero rows for padded utterances.
  Tensor<T> logits(const Tensor<T>& utterances, const Tensor<T>& question_states, const Mask& question_mask) const;

  const Tensor<T>& w_e() const { return w_e_; }
  const Tensor<T>& b_e() const { return b_e_; }
  const Tensor<T>& w_f() const { return w_f_; }
  const Tensor<T>& b_f() const { return b_f_; }

 private:
  std::size_t dim_, slots_;
  Tensor<T> w_e_, b_e_, w_f_, b_f_;
};

/// Positions whose sigmoid probability exceeds `threshold`, restricted to mask != 0.
template <typename T>
std::vector<std::size_t> extract_answer(std::span<const T> logits, const Mask& mask, double threshold = 0.5);

}  // namespace mrg
