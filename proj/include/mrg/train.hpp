#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <limits>
#include <memory>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"
#include "mrg/data.hpp"
#include "mrg/model.hpp"
#include "mrg/params.hpp"

namespace mrg {

class TrainingError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct TrainConfig {
  std::size_t batch_size = 16;
  std::size_t steps = 2000;
  std::size_t eval_interval = 100;
  double lr = 0.15;
  double adagrad_init_acc = 0.1;
  /// Gradients are clamped elementwise to [-clip, clip].
  double clip = 2.0;
  double answer_weight = 1.0;
  TaskMode mode = TaskMode::Joint;
  std::uint64_t seed = 1;
  double init_std = 0.1;

  void validate() const;
};

nlohmann::ordered_json to_json(const ModelConfig& config);
nlohmann::ordered_json to_json(const TrainConfig& config);
ModelConfig model_config_from_json(const nlohmann::json& j);
TrainConfig train_config_from_json(const nlohmann::json& j);

/// acc += g²; θ -= lr·g / (√acc + 1e-8), after clamping g to [-clip, clip].
template <typename T>
class Adagrad {
 public:
  static constexpr double kEpsilon = 1e-8;

  Adagrad(ParamStore<T>& params, double lr, double init_acc, double clip);

  /// Throws TrainingError naming the parameter if any gradient is non-finite;
  /// in that case nothing is updated. Parameters without a gradient are skipped.
  void step();

  std::vector<std::vector<T>>& accumulators() { return acc_; }
  const std::vector<std::vector<T>>& accumulators() const { return acc_; }

 private:
  ParamStore<T>& params_;
  double lr_, clip_;
  std::vector<std::vector<T>> acc_;
};

struct NamedTensor {
  std::string name;
  Shape shape;
  std::vector<float> values;
  bool operator==(const NamedTensor&) const = default;
};

/// Model parameters, optimizer accumulators ("adagrad/<name>"), the vocabulary
/// and both configs. On disk: magic, version, a JSON header listing every
/// tensor's (name, dtype, shape, offset), then little-endian float32 payload.
struct Checkpoint {
  static constexpr std::uint32_t kVersion = 1;
  static constexpr char kMagic[8] = {'M', 'R', 'G', 'C', 'K', 'P', 'T', '\0'};

  ModelConfig model;
  TrainConfig train;
  std::vector<std::string> vocab;
  /// Tokenization the vocabulary was built with.
  bool char_level = false;
  std::size_t step = 0;
  double val_loss = std::numeric_limits<double>::quiet_NaN();
  std::vector<NamedTensor> tensors;

  std::vector<std::uint8_t> serialize() const;
  static Checkpoint deserialize(std::span<const std::uint8_t> bytes);
  void save(const std::filesystem::path& path) const;
  static Checkpoint load(const std::filesystem::path& path);

  const NamedTensor* find(std::string_view name) const;
};

Checkpoint snapshot(const MrgModel<float>& model, const Adagrad<float>* optimizer, const TrainConfig& train,
                    const Vocabulary& vocab, std::size_t step, double val_loss);
/// Copies parameter values (and accumulators when an optimizer is given) back.
void restore(const Checkpoint& checkpoint, MrgModel<float>& model, Adagrad<float>* optimizer = nullptr);
std::unique_ptr<MrgModel<float>> model_from_checkpoint(const Checkpoint& checkpoint);

struct LossSummary {
  double loss = 0.0;           // mean total loss over examples
  double nll_per_token = 0.0;  // Σ response NLL / Σ target tokens
  double answer_bce = 0.0;     // mean answer BCE
  std::size_t examples = 0;
};

template <typename T>
LossSummary evaluate_loss(const MrgModel<T>& model, const std::vector<DialogExample>& examples, TaskMode mode,
                          double answer_weight);

struct EvalPoint {
  std::size_t step = 0;
  double train_loss = 0.0;  // mean batch loss since the previous eval point
  LossSummary validation;
};

struct TrainResult {
  Checkpoint best;
  Checkpoint last;
  std::vector<EvalPoint> history;
};

/// Fisher-Yates with modulo draws, independent of the standard library's
/// distribution implementations.
std::vector<std::size_t> shuffled_order(std::size_t n, std::mt19937_64& rng);

using EvalObserver = std::function<void(const EvalPoint&)>;

/// Initializes a model from train.seed, runs train.steps Adagrad steps and
/// keeps the checkpoint with the smallest validation loss.
TrainResult train_loop(const TrainConfig& train, const ModelConfig& model_config, const Vocabulary& vocab,
                       const std::vector<DialogExample>& train_set, const std::vector<DialogExample>& valid_set,
                       const EvalObserver& observer = {});

}  // namespace mrg
