#include "mrg/attention.hpp"

#include <algorithm>
#include <cmath>

namespace mrg {

template <typename T>
MultiHeadAttention<T>::MultiHeadAttention(ParamStore<T>& params, const std::string& prefix, std::size_t dim,
                                          std::size_t heads, double ln_eps)
    : dim_(dim),
      heads_(heads),
      eps_(static_cast<T>(ln_eps)),
      w_q_(params.add(prefix + ".W_Q", {dim, dim})),
      w_k_(params.add(prefix + ".W_K", {dim, dim})),
      w_v_(params.add(prefix + ".W_V", {dim, dim})),
      w_o_(params.add(prefix + ".W_O", {dim, dim})),
      ln_gain_(params.add(prefix + ".ln.gain", {1, dim}, Init::constant(1.0))),
      ln_bias_(params.add(prefix + ".ln.bias", {1, dim}, Init::constant(0.0))) {
  if (heads == 0 || dim % heads != 0) {
    throw std::invalid_argument("attention dim " + std::to_string(dim) + " is not divisible by " +
                                std::to_string(heads) + " heads");
  }
}

template <typename T>
typename MultiHeadAttention<T>::Result MultiHeadAttention<T>::forward(const Tensor<T>& query, const Tensor<T>& kv,
                                                                      const Mask& kv_mask) const {
  if (query.cols() != dim_ || kv.cols() != dim_) {
    throw ShapeError("attention: query " + shape_string(query.shape()) + " and keys " + shape_string(kv.shape()) +
                     " must share model dimension " + std::to_string(dim_));
  }
  if (kv_mask.size() != kv.rows()) throw ShapeError("attention: key mask length does not match key count");
  if (std::none_of(kv_mask.begin(), kv_mask.end(), [](auto v) { return v != 0; })) {
    throw std::invalid_argument("attention: every key is masked");
  }

  const std::size_t head_dim = dim_ / heads_;
  const T inv_scale = T(1) / std::sqrt(static_cast<T>(head_dim));
  const auto q = matmul(query, w_q_);
  const auto k = matmul(kv, w_k_);
  const auto v = matmul(kv, w_v_);
  const auto bias = mask_bias<T>(kv_mask, query.rows());

  Result r;
  std::vector<Tensor<T>> heads;
  heads.reserve(heads_);
  for (std::size_t h = 0; h < heads_; ++h) {
    const auto qh = heads_ == 1 ? q : slice(q, 1, h * head_dim, head_dim);
    const auto kh = heads_ == 1 ? k : slice(k, 1, h * head_dim, head_dim);
    const auto vh = heads_ == 1 ? v : slice(v, 1, h * head_dim, head_dim);
    const auto scores = add(scale(matmul(qh, transpose(kh)), inv_scale), bias);
    auto weights = softmax(scores, 1);
    heads.push_back(matmul(weights, vh));
    r.weights.push_back(std::move(weights));
  }
  r.attended = concat<T>(std::span<const Tensor<T>>(heads), 1);
  r.output = layer_norm(add(query, matmul(r.attended, w_o_)), ln_gain_, ln_bias_, eps_);
  return r;
}

template class MultiHeadAttention<float>;
template class MultiHeadAttention<double>;

}  // namespace mrg
