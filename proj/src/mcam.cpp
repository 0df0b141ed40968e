#include "mrg/mcam.hpp"

namespace mrg {

template <typename T>
MemoryUpdater<T>::MemoryUpdater(ParamStore<T>& params, const std::string& prefix, std::size_t dim,
                                std::size_t heads, double ln_eps)
    : attention_(params, prefix + ".attn", dim, heads, ln_eps),
      w_a_(params.add(prefix + ".W_a", {dim, dim})),
      w_b_(params.add(prefix + ".W_b", {dim, dim})),
      w_c_(params.add(prefix + ".W_c", {dim, dim})),
      w_d_(params.add(prefix + ".W_d", {dim, dim})) {}

template <typename T>
typename MemoryUpdater<T>::Result MemoryUpdater<T>::forward(const Tensor<T>& m, const Mask& m_mask,
                                                            const Tensor<T>& memory, const Mask& memory_mask) const {
  if (m.shape() != memory.shape()) {
    throw ShapeError("memory_update: memory " + shape_string(memory.shape()) + " vs query " + shape_string(m.shape()));
  }
  Mask kv_mask(memory_mask);
  kv_mask.insert(kv_mask.end(), m_mask.begin(), m_mask.end());

  Result r;
  r.attention = attention_.forward(m, concat({memory, m}, 0), kv_mask);
  r.s = r.attention.output;
  r.c = tanh(add(matmul(m, w_a_), matmul(r.s, w_b_)));
  r.z = sigmoid(add(matmul(m, w_c_), matmul(r.s, w_d_)));
  r.n = add(sub(r.c, mul(r.z, r.c)), mul(r.z, m));
  return r;
}

template <typename T>
McamStack<T>::McamStack(ParamStore<T>& params, const std::string& prefix, std::size_t dim, std::size_t slots,
                        const McamOptions& options, double ln_eps)
    : dim_(dim), slots_(slots), options_(options) {
  layers_.reserve(options.layers);
  for (std::size_t l = 0; l < options.layers; ++l) {
    const auto p = prefix + ".layer" + std::to_string(l);
    Layer layer{MemoryUpdater<T>(params, p + ".memory", dim, options.heads, ln_eps),
                MultiHeadAttention<T>(params, p + ".cam", dim, options.heads, ln_eps), Tensor<T>()};
    if (options.learned_initial_memory) layer.initial_memory = params.add(p + ".initial_memory", {slots, dim});
    layers_.push_back(std::move(layer));
  }
}

template <typename T>
std::vector<Tensor<T>> McamStack<T>::forward(const std::vector<Tensor<T>>& utterances,
                                             const std::vector<Mask>& masks, const Tensor<T>& question,
                                             const Mask& question_mask, ForwardTrace<T>* trace) const {
  if (utterances.size() != masks.size()) throw ShapeError("mcam: one mask per utterance required");
  if (utterances.empty()) return {};
  const std::size_t width = utterances[0].rows();
  if (width == 0 || width > slots_) {
    throw ShapeError("mcam: utterances need 1.." + std::to_string(slots_) + " rows, got " + std::to_string(width));
  }
  std::vector<SegmentMemory<T>> memory;
  memory.reserve(layers_.size());
  for (const auto& layer : layers_) {
    memory.emplace_back(options_.learned_initial_memory ? slice(layer.initial_memory, 0, 0, width)
                                                        : Tensor<T>::zeros({width, dim_}));
  }

  std::vector<Tensor<T>> out;
  out.reserve(utterances.size());
  for (std::size_t j = 0; j < utterances.size(); ++j) {
    const auto& mask = masks[j];
    if (utterances[j].rows() != width || mask.size() != width) {
      throw ShapeError("mcam: utterance " + std::to_string(j) + " must have " + std::to_string(width) + " rows");
    }
    const auto keep = row_mask<T>(mask, dim_);
    Tensor<T> m = utterances[j];
    for (std::size_t l = 0; l < layers_.size(); ++l) {
      const auto& layer = layers_[l];
      Tensor<T> n = m;
      if (options_.memory_updater) {
        auto [slots, slot_mask] = memory[l].read(mask);
        auto upd = layer.updater.forward(m, mask, slots, slot_mask);
        n = upd.n;
        if (trace) {
          trace->gates.push_back({m, upd.c, upd.z, upd.n, mask});
          for (auto& w : upd.attention.weights) trace->memory_attention.push_back(w);
        }
      }
      auto cam = layer.cam.forward(n, question, question_mask);
      if (trace) {
        for (auto& w : cam.weights) {
          trace->cam_attention.push_back(w);
          trace->cam_query_masks.push_back(mask);
          trace->cam_key_masks.push_back(question_mask);
        }
      }
      m = mul(cam.output, keep);
      memory[l].write(m, mask);
    }
    out.push_back(m);
  }
  return out;
}

template class MemoryUpdater<float>;
template class MemoryUpdater<double>;
template class McamStack<float>;
template class McamStack<double>;

}  // namespace mrg
