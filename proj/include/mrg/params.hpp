#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <string_view>
#include <vector>

#include "mrg/tensor.hpp"

namespace mrg {

/// How a parameter is filled by ParamStore::initialize.
struct Init {
  enum class Kind { Gaussian, Constant, LstmBias };
  Kind kind = Kind::Gaussian;
  double value = 0.0;

  static Init gaussian() { return {Kind::Gaussian, 0.0}; }
  static Init constant(double v) { return {Kind::Constant, v}; }
  /// Zeros except the forget-gate block of an [i f g o] bias, which gets `forget`.
  static Init lstm_bias(double forget) { return {Kind::LstmBias, forget}; }
};

/// Named, ordered collection of trainable tensors.
///
/// Registration order is the initialization order, so two stores built from
/// the same config and seed hold bit-identical values.
template <typename T>
class ParamStore {
 public:
  struct Entry {
    std::string name;
    Tensor<T> tensor;
    Init init;
  };

  ParamStore() = default;
  ParamStore(const ParamStore&) = delete;
  ParamStore& operator=(const ParamStore&) = delete;

  Tensor<T> add(std::string name, Shape shape, Init init = Init::gaussian());
  const Tensor<T>& get(std::string_view name) const;
  bool contains(std::string_view name) const;

  void initialize(std::uint64_t seed, double stddev);
  void zero_grad();
  std::size_t parameter_count() const;

  std::vector<Entry>& entries() { return entries_; }
  const std::vector<Entry>& entries() const { return entries_; }

 private:
  std::vector<Entry> entries_;
};

}  // namespace mrg
