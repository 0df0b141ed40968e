#include "mrg/params.hpp"

#include <algorithm>
#include <stdexcept>

namespace mrg {

template <typename T>
Tensor<T> ParamStore<T>::add(std::string name, Shape shape, Init init) {
  if (contains(name)) throw std::invalid_argument("duplicate parameter name: " + name);
  auto t = Tensor<T>::zeros(std::move(shape), true);
  entries_.push_back({std::move(name), t, init});
  return t;
}

template <typename T>
const Tensor<T>& ParamStore<T>::get(std::string_view name) const {
  for (const auto& e : entries_)
    if (e.name == name) return e.tensor;
  throw std::out_of_range("unknown parameter: " + std::string(name));
}

template <typename T>
bool ParamStore<T>::contains(std::string_view name) const {
  return std::any_of(entries_.begin(), entries_.end(), [&](const Entry& e) { return e.name == name; });
}

template <typename T>
void ParamStore<T>::initialize(std::uint64_t seed, double stddev) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, stddev);
  for (auto& e : entries_) {
    auto values = e.tensor.mutable_values();
    switch (e.init.kind) {
      case Init::Kind::Gaussian:
        for (auto& v : values) v = static_cast<T>(normal(rng));
        break;
      case Init::Kind::Constant:
        std::fill(values.begin(), values.end(), static_cast<T>(e.init.value));
        break;
      case Init::Kind::LstmBias: {
        std::fill(values.begin(), values.end(), T(0));
        const auto hidden = values.size() / 4;
        std::fill(values.begin() + hidden, values.begin() + 2 * hidden, static_cast<T>(e.init.value));
        break;
      }
    }
  }
}

template <typename T>
void ParamStore<T>::zero_grad() {
  for (auto& e : entries_) e.tensor.zero_grad();
}

template <typename T>
std::size_t ParamStore<T>::parameter_count() const {
  std::size_t n = 0;
  for (const auto& e : entries_) n += e.tensor.size();
  return n;
}

template class ParamStore<float>;
template class ParamStore<double>;

}  // namespace mrg
