#include "mrg/ablation.hpp"

#include <cmath>
#include <iomanip>
#include <sstream>

namespace mrg {

std::vector<AblationArm> default_arms() {
  return {
      {"joint", TaskMode::Joint, true, true, true},
      {"response_only", TaskMode::ResponseOnly, true, true, true},
      {"answer_only", TaskMode::AnswerOnly, true, true, true},
      {"no_mcam", TaskMode::Joint, false, true, true},
      {"no_mam", TaskMode::Joint, true, false, true},
      {"no_memupd", TaskMode::Joint, true, true, false},
  };
}

namespace {

struct Stat {
  double mean = 0.0, std = 0.0;
};

Stat stat(const std::vector<double>& v) {
  Stat s;
  if (v.empty()) return s;
  for (double x : v) s.mean += x;
  s.mean /= static_cast<double>(v.size());
  if (v.size() > 1) {
    double ss = 0.0;
    for (double x : v) ss += (x - s.mean) * (x - s.mean);
    s.std = std::sqrt(ss / static_cast<double>(v.size() - 1));
  }
  return s;
}

using Getter = double (*)(const EvalReport&);

const std::vector<std::pair<const char*, Getter>>& generation_metrics() {
  static const std::vector<std::pair<const char*, Getter>> m = {
      {"bleu1", [](const EvalReport& r) { return r.bleu1; }},
      {"bleu2", [](const EvalReport& r) { return r.bleu2; }},
      {"bleu3", [](const EvalReport& r) { return r.bleu3; }},
      {"bleu4", [](const EvalReport& r) { return r.bleu4; }},
      {"bow_average", [](const EvalReport& r) { return r.bow_average; }},
      {"bow_extrema", [](const EvalReport& r) { return r.bow_extrema; }},
      {"bow_greedy", [](const EvalReport& r) { return r.bow_greedy; }},
  };
  return m;
}

const std::vector<std::pair<const char*, Getter>>& answer_metric_getters() {
  static const std::vector<std::pair<const char*, Getter>> m = {
      {"answer_exact_match", [](const EvalReport& r) { return r.answer_exact_match; }},
      {"answer_f1", [](const EvalReport& r) { return r.answer_f1; }},
  };
  return m;
}

bool has_generation(const AblationArm& arm) { return arm.mode != TaskMode::AnswerOnly; }
bool has_answer(const AblationArm& arm) { return arm.mode != TaskMode::ResponseOnly; }

std::vector<double> collect(const std::vector<AblationRun>& runs, Getter get) {
  std::vector<double> v;
  for (const auto& r : runs) v.push_back(get(r.report));
  return v;
}

}  // namespace

AblationResult run_ablation(const std::vector<RawDialog>& corpus, const AblationConfig& config, std::uint64_t seed,
                            const std::vector<AblationArm>& arms,
                            const std::function<void(const std::string&)>& progress) {
  if (config.runs == 0) throw std::invalid_argument("ablation needs at least one run per arm");
  if (!(config.test_fraction > 0.0) || !(config.valid_fraction > 0.0) ||
      config.test_fraction + config.valid_fraction >= 1.0) {
    throw std::invalid_argument("test and validation fractions must be positive and sum below 1");
  }
  const auto n = corpus.size();
  const auto n_test = static_cast<std::size_t>(std::ceil(static_cast<double>(n) * config.test_fraction));
  const auto n_valid = static_cast<std::size_t>(std::ceil(static_cast<double>(n) * config.valid_fraction));
  if (n_test + n_valid >= n) throw std::invalid_argument("corpus too small for the requested split");

  std::mt19937_64 rng(seed);
  const auto order = shuffled_order(n, rng);
  std::vector<RawDialog> test_raw, valid_raw, train_raw;
  for (std::size_t i = 0; i < n; ++i) {
    auto& dst = i < n_test ? test_raw : (i < n_test + n_valid ? valid_raw : train_raw);
    dst.push_back(corpus[order[i]]);
  }
  const auto vocab = build_vocab(train_raw, config.char_level, config.vocab_cap);
  auto prep = [&](const std::vector<RawDialog>& raw) {
    std::vector<DialogExample> out;
    out.reserve(raw.size());
    for (const auto& r : raw) out.push_back(preprocess(r, vocab, config.model.layout, config.char_level));
    return out;
  };
  const auto train_set = prep(train_raw), valid_set = prep(valid_raw), test_set = prep(test_raw);

  AblationResult result;
  result.train_size = train_set.size();
  result.valid_size = valid_set.size();
  result.test_size = test_set.size();
  result.vocab_size = vocab.size();
  result.seed = seed;
  result.arms = arms;
  result.shared_embeddings = config.embeddings != nullptr;
  for (const auto& arm : arms) {
    std::vector<AblationRun> runs;
    for (std::size_t r = 0; r < config.runs; ++r) {
      ModelConfig mc = config.model;
      mc.vocab_size = vocab.size();
      mc.use_mcam = arm.use_mcam;
      mc.use_mam = arm.use_mam;
      mc.use_memupd = arm.use_memupd;
      TrainConfig tc = config.train;
      tc.mode = arm.mode;
      tc.seed = seed + r;
      const auto trained = train_loop(tc, mc, vocab, train_set, valid_set);
      const auto model = model_from_checkpoint(trained.best);
      EvalOptions eo;
      eo.decode = config.decode;
      eo.generation = has_generation(arm);
      eo.answer = has_answer(arm);
      eo.embeddings = config.embeddings;
      AblationRun run{tc.seed, trained.best.step, trained.best.val_loss, evaluate_model(*model, vocab, test_set, eo)};
      run.report.per_example.clear();
      runs.push_back(std::move(run));
      if (progress) progress(arm.name + " run " + std::to_string(r + 1) + "/" + std::to_string(config.runs) + " done");
    }
    result.runs.push_back(std::move(runs));
  }
  return result;
}

nlohmann::ordered_json AblationResult::to_json(const AblationConfig& config) const {
  using json = nlohmann::ordered_json;
  json j;
  j["seed"] = seed;
  j["split"] = {{"train", train_size}, {"valid", valid_size}, {"test", test_size}};
  j["vocab_size"] = vocab_size;
  j["runs_per_arm"] = config.runs;
  j["model_config"] = mrg::to_json(config.model);
  j["train_config"] = mrg::to_json(config.train);
  j["decode"] = {{"beam", config.decode.beam}, {"min_len", config.decode.min_len}, {"max_len", config.decode.max_len}};
  j["bow_embeddings"] = shared_embeddings ? "external" : "model";
  auto& list = j["arms"] = json::array();
  for (std::size_t a = 0; a < arms.size(); ++a) {
    const auto& arm = arms[a];
    json entry;
    entry["name"] = arm.name;
    entry["mode"] = to_string(arm.mode);
    entry["use_mcam"] = arm.use_mcam;
    entry["use_mam"] = arm.use_mam;
    entry["use_memupd"] = arm.use_memupd;
    json summary = json::object();
    auto add = [&](const auto& getters, bool present) {
      for (const auto& [name, get] : getters) {
        if (!present) {
          summary[name] = nullptr;
          continue;
        }
        const auto s = stat(collect(runs[a], get));
        summary[name] = {{"mean", s.mean}, {"std", s.std}};
      }
    };
    add(generation_metrics(), has_generation(arm));
    add(answer_metric_getters(), has_answer(arm));
    entry["summary"] = summary;
    auto& per_run = entry["runs"] = json::array();
    for (const auto& r : runs[a]) {
      json row = r.report.to_json();
      row.erase("per_example");
      per_run.push_back({{"seed", r.seed}, {"best_step", r.best_step}, {"best_val_loss", r.best_val_loss},
                         {"metrics", row}});
    }
    list.push_back(std::move(entry));
  }
  return j;
}

std::string AblationResult::to_markdown() const {
  std::ostringstream out;
  out << std::fixed;
  auto cell = [&](const std::vector<AblationRun>& rs, Getter get, double scale) {
    const auto s = stat(collect(rs, get));
    std::ostringstream c;
    c << std::fixed << std::setprecision(scale == 1.0 ? 4 : 2) << s.mean * scale << " ± " << s.std * scale;
    return c.str();
  };
  out << "## Response generation (test split, " << test_size << " dialogs)\n\n";
  out << "| Arm | BLEU1 | BLEU2 | BLEU3 | BLEU4 | Average | Extrema | Greedy |\n";
  out << "|---|---|---|---|---|---|---|---|\n";
  for (std::size_t a = 0; a < arms.size(); ++a) {
    if (!has_generation(arms[a])) continue;
    out << "| " << arms[a].name;
    for (const auto& [name, get] : generation_metrics()) out << " | " << cell(runs[a], get, 1.0);
    out << " |\n";
  }
  out << "\n## Answer extraction\n\n";
  out << "| Arm | Accuracy (exact match, %) | F1 (%) |\n";
  out << "|---|---|---|\n";
  for (std::size_t a = 0; a < arms.size(); ++a) {
    if (!has_answer(arms[a])) continue;
    out << "| " << arms[a].name;
    for (const auto& [name, get] : answer_metric_getters()) out << " | " << cell(runs[a], get, 100.0);
    out << " |\n";
  }
  const std::size_t seeds = runs.empty() ? 0 : runs[0].size();
  out << "\nMean ± sample standard deviation over " << seeds << (seeds == 1 ? " seed" : " seeds")
      << " per arm. Split: " << train_size << " train / " << valid_size << " valid / " << test_size
      << " test; vocabulary " << vocab_size << ". BOW metrics use "
      << (shared_embeddings ? "the supplied embedding file." : "each model's own embedding matrix.") << "\n";
  return out.str();
}

}  // namespace mrg
