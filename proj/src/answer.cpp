#include "mrg/answer.hpp"

#include <cmath>

namespace mrg {

template <typename T>
AnswerSelector<T>::AnswerSelector(ParamStore<T>& params, const std::string& prefix, std::size_t dim,
                                  std::size_t utterance_slots, std::size_t hidden, std::size_t positions)
    : dim_(dim),
      slots_(utterance_slots),
      w_e_(params.add(prefix + ".W_e", {(utterance_slots + 1) * dim, hidden})),
      b_e_(params.add(prefix + ".b_e", {1, hidden}, Init::constant(0.0))),
      w_f_(params.add(prefix + ".W_f", {hidden, positions})),
      b_f_(params.add(prefix + ".b_f", {1, positions}, Init::constant(0.0))) {}

template <typename T>
Tensor<T> AnswerSelector<T>::question_vector(const Tensor<T>& question_states, const Mask& question_mask) const {
  return mean_pool(question_states, 0, question_mask);
}

template <typename T>
Tensor<T> AnswerSelector<T>::logits(const Tensor<T>& utterances, const Tensor<T>& question_states,
                                    const Mask& question_mask) const {
  if (utterances.rows() != slots_ || utterances.cols() != dim_) {
    throw ShapeError("answer selector: expected utterances [" + std::to_string(slots_) + "x" + std::to_string(dim_) +
                     "], got " + shape_string(utterances.shape()));
  }
  const auto features = concat({reshape(utterances, {1, slots_ * dim_}), question_vector(question_states, question_mask)}, 1);
  const auto hidden = tanh(add_bias(matmul(features, w_e_), b_e_));
  return add_bias(matmul(hidden, w_f_), b_f_);
}

template <typename T>
std::vector<std::size_t> extract_answer(std::span<const T> logits, const Mask& mask, double threshold) {
  if (mask.size() != logits.size()) throw ShapeError("extract_answer: mask length does not match logits");
  std::vector<std::size_t> picked;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    if (!mask[i]) continue;
    const double p = 1.0 / (1.0 + std::exp(-static_cast<double>(logits[i])));
    if (p > threshold) picked.push_back(i);
  }
  return picked;
}

template class AnswerSelector<float>;
template class AnswerSelector<double>;
template std::vector<std::size_t> extract_answer(std::span<const float>, const Mask&, double);
template std::vector<std::size_t> extract_answer(std::span<const double>, const Mask&, double);

}  // namespace mrg
