#pragma once

#include <optional>
#include <string>
#include <vector>

#include "mrg/attention.hpp"
#include "mrg/params.hpp"
#include "mrg/trace.hpp"

namespace mrg {

/// Gated blend of the current query rows with stored dialog-history memory:
///   s = CAM(m, [m̂; m])
///   c = tanh(m W_a + s W_b)
///   z = sigmoid(m W_c + s W_d)
///   n = (1 - z) ⊙ c + z ⊙ m
template <typename T>
class MemoryUpdater {
 public:
  struct Result {
    Tensor<T> s, c, z, n;
    typename MultiHeadAttention<T>::Result attention;
  };

  MemoryUpdater(ParamStore<T>& params, const std::string& prefix, std::size_t dim, std::size_t heads,
                double ln_eps = 1e-5);

  Result forward(const Tensor<T>& m, const Mask& m_mask, const Tensor<T>& memory, const Mask& memory_mask) const;

  const MultiHeadAttention<T>& attention() const { return attention_; }
  const Tensor<T>& w_a() const { return w_a_; }
  const Tensor<T>& w_b() const { return w_b_; }
  const Tensor<T>& w_c() const { return w_c_; }
  const Tensor<T>& w_d() const { return w_d_; }

 private:
  MultiHeadAttention<T> attention_;
  Tensor<T> w_a_, w_b_, w_c_, w_d_;
};

/// Memory slots of one layer. Reading m̂ for utterance j returns what was
/// written after utterance j-1; swapping this class swaps the reading of m̂.
template <typename T>
class SegmentMemory {
 public:
  explicit SegmentMemory(Tensor<T> initial) : slots_(std::move(initial)) {}

  /// Slots paired with their validity mask. Before the first write the slots
  /// are the initial memory and share the current utterance's mask, so the
  /// number of padded positions never changes the attention normalizer.
  std::pair<Tensor<T>, Mask> read(const Mask& current_mask) const {
    return {slots_, written_ ? mask_ : current_mask};
  }
  void write(Tensor<T> slots, Mask mask) {
    slots_ = std::move(slots);
    mask_ = std::move(mask);
    written_ = true;
  }

 private:
  Tensor<T> slots_;
  Mask mask_;
  bool written_ = false;
};

struct McamOptions {
  std::size_t layers = 2;
  std::size_t heads = 4;
  bool memory_updater = true;
  bool learned_initial_memory = false;
};

/// L layers of question cross-attention over each utterance in dialog order,
/// each layer's query refreshed by the memory updater first.
template <typename T>
class McamStack {
 public:
  struct Layer {
    MemoryUpdater<T> updater;
    MultiHeadAttention<T> cam;
    Tensor<T> initial_memory;  // defined only with learned_initial_memory
  };

  McamStack(ParamStore<T>& params, const std::string& prefix, std::size_t dim, std::size_t slots,
            const McamOptions& options, double ln_eps = 1e-5);

  /// `utterances` holds the N^u real utterances as encoder states sharing one
  /// row count of at most `slots`. Returns m^{L,j} for each, with padded rows zeroed.
  std::vector<Tensor<T>> forward(const std::vector<Tensor<T>>& utterances, const std::vector<Mask>& masks,
                                 const Tensor<T>& question, const Mask& question_mask,
                                 ForwardTrace<T>* trace = nullptr) const;

  const std::vector<Layer>& layers() const { return layers_; }
  const McamOptions& options() const { return options_; }

 private:
  std::size_t dim_, slots_;
  McamOptions options_;
  std::vector<Layer> layers_;
};

}  // namespace mrg
