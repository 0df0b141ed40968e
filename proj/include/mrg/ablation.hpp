#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "json.hpp"
#include "mrg/data.hpp"
#include "mrg/evaluate.hpp"
#include "mrg/model.hpp"
#include "mrg/train.hpp"

namespace mrg {

struct AblationArm {
  std::string name;
  TaskMode mode = TaskMode::Joint;
  bool use_mcam = true;
  bool use_mam = true;
  bool use_memupd = true;
};

/// joint, response_only, answer_only, no_mcam, no_mam, no_memupd.
std::vector<AblationArm> default_arms();

struct AblationConfig {
  ModelConfig model;  // vocab_size is filled from the training split
  TrainConfig train;  // seed and mode are set per run and arm
  DecodeConfig decode;
  std::size_t runs = 3;
  double test_fraction = 0.1;
  double valid_fraction = 0.1;
  std::size_t vocab_cap = Vocabulary::kDefaultMaxSize;
  bool char_level = false;
  /// BOW embeddings shared by every arm; each model's own matrix when null.
  const EmbeddingTable* embeddings = nullptr;
};

struct AblationRun {
  std::uint64_t seed = 0;
  std::size_t best_step = 0;
  double best_val_loss = 0.0;
  EvalReport report;
};

struct AblationResult {
  std::size_t train_size = 0, valid_size = 0, test_size = 0, vocab_size = 0;
  std::uint64_t seed = 0;
  std::vector<AblationArm> arms;
  std::vector<std::vector<AblationRun>> runs;  // runs[arm][run]
  bool shared_embeddings = false;

  nlohmann::ordered_json to_json(const AblationConfig& config) const;
  /// Generation table (BLEU-1..4, Average, Extrema, Greedy) and answer table
  /// (exact match, F1) as mean ± sample std over runs.
  std::string to_markdown() const;
};

/// Splits the corpus deterministically from `seed`, then trains and evaluates
/// every arm `config.runs` times with seeds seed, seed+1, ...
AblationResult run_ablation(const std::vector<RawDialog>& corpus, const AblationConfig& config, std::uint64_t seed,
                            const std::vector<AblationArm>& arms = default_arms(),
                            const std::function<void(const std::string&)>& progress = {});

}  // namespace mrg
