#include "mrg/gradcheck.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <random>

namespace mrg {

bool GradcheckReport::passed() const {
  return !entries.empty() && std::all_of(entries.begin(), entries.end(), [](const auto& e) { return e.passed; });
}

std::vector<std::string> GradcheckReport::failures() const {
  std::vector<std::string> out;
  for (const auto& e : entries)
    if (!e.passed) out.push_back(e.name);
  return out;
}

double relative_error(double analytic, double numeric) {
  const double denom = std::max({std::abs(analytic), std::abs(numeric), 1e-6});
  return std::abs(analytic - numeric) / denom;
}

std::vector<double> check_gradients(const std::function<Tensor<double>()>& f, const std::vector<Tensor<double>>& leaves,
                                    std::span<const double> seed, double step) {
  for (auto leaf : leaves) leaf.zero_grad();
  f().backward(seed);
  std::vector<double> worst;
  for (auto leaf : leaves) {
    const std::vector<double> analytic(leaf.grad().begin(), leaf.grad().end());
    auto values = leaf.mutable_values();
    double max_err = 0.0;
    NoGradGuard no_grad;
    auto objective = [&] {
      const auto out = f();
      const auto y = out.values();
      double total = 0.0;
      for (std::size_t i = 0; i < y.size(); ++i) total += seed[i] * y[i];
      return total;
    };
    for (std::size_t i = 0; i < values.size(); ++i) {
      const double original = values[i];
      auto at = [&](double offset) {
        values[i] = original + offset;
        return objective();
      };
      const double numeric = (8.0 * (at(step) - at(-step)) - (at(2.0 * step) - at(-2.0 * step))) / (12.0 * step);
      values[i] = original;
      max_err = std::max(max_err, relative_error(analytic[i], numeric));
    }
    worst.push_back(max_err);
  }
  return worst;
}

ModelConfig tiny_model_config() {
  ModelConfig c;
  c.vocab_size = 16;
  c.emb_dim = 8;
  c.hidden = 16;
  c.layers = 2;
  c.heads = 2;
  c.word_mam_layers = 1;
  c.answer_hidden = 16;
  c.layout = Layout{3, 5, 4, 6};
  return c;
}

DialogExample tiny_example(std::uint64_t seed, const ModelConfig& config) {
  std::mt19937_64 rng(seed);
  const auto content = config.vocab_size - Vocabulary::kReserved;
  auto token = [&] { return static_cast<TokenId>(Vocabulary::kReserved + rng() % content); };
  DialogExample ex;
  for (std::size_t j = 0; j < config.layout.max_utterances; ++j) {
    std::vector<TokenId> u(config.layout.max_utterance_len);
    for (auto& t : u) t = token();
    ex.utterances.push_back(std::move(u));
  }
  ex.question.resize(config.layout.max_question_len);
  for (auto& t : ex.question) t = token();
  ex.response.resize(config.layout.max_response_len - 2);
  for (auto& t : ex.response) t = token();
  ex.answer_mask.assign(ex.context_tokens(), 0);
  const auto start = rng() % (ex.answer_mask.size() - 1);
  ex.answer_mask[start] = ex.answer_mask[start + 1] = 1;
  return ex;
}

namespace {

using TensorD = Tensor<double>;

struct OpCase {
  std::string name;
  std::vector<Shape> inputs;
  std::function<TensorD(const std::vector<TensorD>&)> apply;
};

std::vector<OpCase> operation_cases() {
  const std::size_t nll_targets[] = {1, 4, 0};
  const std::size_t rows[] = {0, 2, 2, 4};
  const std::uint8_t bce_targets[] = {1, 0, 0, 1, 1, 0};
  const Mask bce_mask{1, 1, 0, 1, 1, 1};
  std::vector<OpCase> cases = {
      {"matmul", {{3, 4}, {4, 5}}, [](const auto& x) { return matmul(x[0], x[1]); }},
      {"add", {{3, 4}, {3, 4}}, [](const auto& x) { return add(x[0], x[1]); }},
      {"sub", {{3, 4}, {3, 4}}, [](const auto& x) { return sub(x[0], x[1]); }},
      {"mul", {{3, 4}, {3, 4}}, [](const auto& x) { return mul(x[0], x[1]); }},
      {"add_bias", {{3, 4}, {1, 4}}, [](const auto& x) { return add_bias(x[0], x[1]); }},
      {"scale", {{3, 4}}, [](const auto& x) { return scale(x[0], 0.7); }},
      {"add_scalar", {{3, 4}}, [](const auto& x) { return add_scalar(x[0], 0.3); }},
      {"tanh", {{3, 4}}, [](const auto& x) { return tanh(x[0]); }},
      {"sigmoid", {{3, 4}}, [](const auto& x) { return sigmoid(x[0]); }},
      {"softmax(axis=0)", {{3, 4}}, [](const auto& x) { return softmax(x[0], 0); }},
      {"softmax(axis=1)", {{3, 4}}, [](const auto& x) { return softmax(x[0], 1); }},
      {"log_softmax(axis=0)", {{3, 4}}, [](const auto& x) { return log_softmax(x[0], 0); }},
      {"log_softmax(axis=1)", {{3, 4}}, [](const auto& x) { return log_softmax(x[0], 1); }},
      {"concat(axis=0)", {{2, 3}, {3, 3}}, [](const auto& x) { return concat({x[0], x[1]}, 0); }},
      {"concat(axis=1)", {{2, 3}, {2, 4}}, [](const auto& x) { return concat({x[0], x[1]}, 1); }},
      {"slice(axis=0)", {{4, 3}}, [](const auto& x) { return slice(x[0], 0, 1, 2); }},
      {"slice(axis=1)", {{3, 5}}, [](const auto& x) { return slice(x[0], 1, 2, 3); }},
      {"transpose", {{3, 4}}, [](const auto& x) { return transpose(x[0]); }},
      {"reshape", {{3, 4}}, [](const auto& x) { return reshape(x[0], {2, 6}); }},
      {"gather_rows", {{5, 3}}, [rows](const auto& x) { return gather_rows(x[0], std::span<const std::size_t>(rows)); }},
      {"mean_pool(axis=0)", {{3, 4}}, [](const auto& x) { return mean_pool(x[0], 0, Mask{1, 0, 1}); }},
      {"mean_pool(axis=1)", {{3, 4}}, [](const auto& x) { return mean_pool(x[0], 1, Mask{0, 1, 1, 1}); }},
      {"layer_norm", {{3, 5}, {1, 5}, {1, 5}}, [](const auto& x) { return layer_norm(x[0], x[1], x[2], 1e-5); }},
      {"sum", {{3, 4}}, [](const auto& x) { return sum(x[0]); }},
      {"mean", {{3, 4}}, [](const auto& x) { return mean(x[0]); }},
      {"nll_loss", {{3, 5}},
       [nll_targets](const auto& x) { return nll_loss(x[0], std::span<const std::size_t>(nll_targets)); }},
      {"bce_with_logits", {{1, 6}},
       [bce_targets, bce_mask](const auto& x) {
         return bce_with_logits(x[0], std::span<const std::uint8_t>(bce_targets), bce_mask);
       }},
  };
  return cases;
}

}  // namespace

const std::vector<std::string>& known_operations() {
  static const std::vector<std::string> ops = {
      "matmul",  "add",        "sub",  "mul",         "add_bias",  "scale",      "add_scalar", "tanh",
      "sigmoid", "softmax",    "log_softmax", "concat", "slice",    "transpose",  "reshape",    "gather_rows",
      "mean_pool", "layer_norm", "sum", "mean",       "nll_loss",  "bce_with_logits"};
  return ops;
}

GradcheckReport run_gradcheck(std::uint64_t seed, const GradcheckOptions& options) {
  const auto start = std::chrono::steady_clock::now();
  GradcheckReport report;
  report.tolerance = options.tolerance;
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);

  if (options.operations) {
    for (const auto& op : operation_cases()) {
      std::vector<TensorD> leaves;
      for (const auto& shape : op.inputs) {
        std::vector<double> v(shape_size(shape));
        for (auto& x : v) x = normal(rng);
        leaves.push_back(TensorD::from(shape, std::move(v), true));
      }
      auto f = [&] { return op.apply(leaves); };
      std::vector<double> weights;
      {
        NoGradGuard no_grad;
        weights.resize(f().size());
      }
      for (auto& w : weights) w = normal(rng);
      const auto errors = check_gradients(f, leaves, weights, options.step);
      GradcheckEntry e{op.name, 0, *std::max_element(errors.begin(), errors.end()), false};
      for (const auto& l : leaves) e.checked += l.size();
      e.passed = e.max_rel_error <= options.tolerance;
      report.entries.push_back(std::move(e));
    }
  }

  if (options.model) {
    const auto config = tiny_model_config();
    MrgModel<double> model(config);
    model.initialize(seed, 0.3);
    const auto example = tiny_example(seed, config);
    std::vector<TensorD> leaves;
    for (const auto& p : model.params().entries()) leaves.push_back(p.tensor);
    auto f = [&] { return model.loss(example, TaskMode::Joint, 1.0).total; };
    const double one[] = {1.0};
    const auto errors = check_gradients(f, leaves, one, options.model_step);
    const auto& entries = model.params().entries();
    for (std::size_t p = 0; p < entries.size(); ++p) {
      GradcheckEntry e{"joint_loss/" + entries[p].name, entries[p].tensor.size(), errors[p], false};
      e.passed = e.max_rel_error <= options.tolerance;
      report.entries.push_back(std::move(e));
    }
  }
  report.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return report;
}

}  // namespace mrg
