#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "mrg/data.hpp"
#include "mrg/model.hpp"
#include "mrg/tensor.hpp"

namespace mrg {

struct GradcheckEntry {
  std::string name;
  std::size_t checked = 0;
  double max_rel_error = 0.0;
  bool passed = false;
};

struct GradcheckReport {
  std::vector<GradcheckEntry> entries;
  double tolerance = 0.0;
  double seconds = 0.0;

  bool passed() const;
  std::vector<std::string> failures() const;
};

struct GradcheckOptions {
  double step = 1e-5;
  double model_step = 1e-4;
  double tolerance = 1e-4;
  bool operations = true;
  bool model = true;
};

/// |a - n| / max(|a|, |n|, 1e-6).
double relative_error(double analytic, double numeric);

/// Compares the reverse pass of Σ seed ⊙ f(leaves) with the fourth-order
/// central difference (8(f(x+h) - f(x-h)) - (f(x+2h) - f(x-2h))) / 12h over
/// every element of every leaf. Returns the largest relative error per leaf.
std::vector<double> check_gradients(const std::function<Tensor<double>()>& f, const std::vector<Tensor<double>>& leaves,
                                    std::span<const double> seed, double step);

/// emb 8, hidden 16, 2 layers, 2 heads, 3 utterances × 5 tokens, question
/// length 4, vocabulary 16.
ModelConfig tiny_model_config();
DialogExample tiny_example(std::uint64_t seed, const ModelConfig& config);

/// Op names accepted by testing::inject_adjoint_fault.
const std::vector<std::string>& known_operations();

GradcheckReport run_gradcheck(std::uint64_t seed, const GradcheckOptions& options = {});

}  // namespace mrg
