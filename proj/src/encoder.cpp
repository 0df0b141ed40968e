#include "mrg/encoder.hpp"

namespace mrg {

template <typename T>
Embedding<T>::Embedding(ParamStore<T>& params, const std::string& name, std::size_t vocab, std::size_t dim)
    : table_(params.add(name, {vocab, dim})) {}

template <typename T>
Tensor<T> Embedding<T>::lookup(std::span<const TokenId> ids) const {
  return gather_rows(table_, ids);
}

template <typename T>
Lstm<T>::Lstm(ParamStore<T>& params, const std::string& prefix, std::size_t input, std::size_t hidden,
              double forget_bias)
    : hidden_(hidden),
      w_ih_(params.add(prefix + ".W_ih", {input, 4 * hidden})),
      w_hh_(params.add(prefix + ".W_hh", {hidden, 4 * hidden})),
      b_(params.add(prefix + ".b", {1, 4 * hidden}, Init::lstm_bias(forget_bias))) {}

template <typename T>
typename Lstm<T>::State Lstm<T>::zero_state(std::size_t batch) const {
  return {Tensor<T>::zeros({batch, hidden_}), Tensor<T>::zeros({batch, hidden_})};
}

template <typename T>
typename Lstm<T>::State Lstm<T>::step(const Tensor<T>& x, const State& prev) const {
  const auto h = hidden_;
  const auto gates = add_bias(add(matmul(x, w_ih_), matmul(prev.h, w_hh_)), b_);
  const auto i = sigmoid(slice(gates, 1, 0, h));
  const auto f = sigmoid(slice(gates, 1, h, h));
  const auto g = tanh(slice(gates, 1, 2 * h, h));
  const auto o = sigmoid(slice(gates, 1, 3 * h, h));
  auto c = add(mul(f, prev.c), mul(i, g));
  auto out = mul(o, tanh(c));
  return {std::move(out), std::move(c)};
}

template <typename T>
typename Lstm<T>::State Lstm<T>::step(const Tensor<T>& x, const State& prev, const Tensor<T>& keep) const {
  const auto next = step(x, prev);
  return {add(prev.h, mul(keep, sub(next.h, prev.h))), add(prev.c, mul(keep, sub(next.c, prev.c)))};
}

template <typename T>
BiRnn<T>::BiRnn(ParamStore<T>& params, const std::string& prefix, std::size_t input, std::size_t hidden)
    : fw_(params, prefix + ".fw", input, hidden / 2), bw_(params, prefix + ".bw", input, hidden / 2) {
  if (hidden % 2 != 0) throw std::invalid_argument("BiRnn hidden size must be even");
}

template <typename T>
Tensor<T> BiRnn<T>::encode(const Tensor<T>& embedded, const std::vector<Mask>& masks) const {
  if (masks.empty() || masks[0].empty()) throw ShapeError("BiRnn::encode: zero-length input");
  const std::size_t batch = masks.size();
  const std::size_t len = masks[0].size();
  for (const auto& m : masks)
    if (m.size() != len) throw ShapeError("BiRnn::encode: masks of unequal length");
  if (embedded.rows() != batch * len) {
    throw ShapeError("BiRnn::encode: " + std::to_string(embedded.rows()) + " rows for " + std::to_string(batch) +
                     " sequences of length " + std::to_string(len));
  }
  const auto h = fw_.hidden();

  std::vector<Tensor<T>> inputs, keeps;
  inputs.reserve(len);
  keeps.reserve(len);
  for (std::size_t t = 0; t < len; ++t) {
    std::vector<std::size_t> rows(batch);
    Mask step_mask(batch);
    for (std::size_t b = 0; b < batch; ++b) {
      rows[b] = b * len + t;
      step_mask[b] = masks[b][t];
    }
    inputs.push_back(gather_rows(embedded, std::span<const std::size_t>(rows)));
    keeps.push_back(row_mask<T>(step_mask, h));
  }

  std::vector<Tensor<T>> fw_out(len), bw_out(len);
  auto state = fw_.zero_state(batch);
  for (std::size_t t = 0; t < len; ++t) {
    state = fw_.step(inputs[t], state, keeps[t]);
    fw_out[t] = mul(state.h, keeps[t]);
  }
  state = bw_.zero_state(batch);
  for (std::size_t t = len; t-- > 0;) {
    state = bw_.step(inputs[t], state, keeps[t]);
    bw_out[t] = mul(state.h, keeps[t]);
  }

  // Step-major stacks -> sequence-major rows.
  std::vector<std::size_t> order(batch * len);
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t t = 0; t < len; ++t) order[b * len + t] = t * batch + b;
  const auto fw_all = gather_rows(concat<T>(std::span<const Tensor<T>>(fw_out), 0), std::span<const std::size_t>(order));
  const auto bw_all = gather_rows(concat<T>(std::span<const Tensor<T>>(bw_out), 0), std::span<const std::size_t>(order));
  return concat({fw_all, bw_all}, 1);
}

template class Embedding<float>;
template class Embedding<double>;
template class Lstm<float>;
template class Lstm<double>;
template class BiRnn<float>;
template class BiRnn<double>;

}  // namespace mrg
