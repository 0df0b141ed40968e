// Acceptance gate: one PASS/FAIL line per criterion, exit status 1 if any fail.
//   mrg_acceptance <mrg binary> <work dir> [--only 1,5,8]

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <sys/wait.h>

#include "CLI11.hpp"
#include "json.hpp"
#include "mrg/beam.hpp"
#include "mrg/evaluate.hpp"
#include "mrg/gradcheck.hpp"
#include "mrg/metrics.hpp"
#include "mrg/synth.hpp"
#include "mrg/train.hpp"
#include "support/checks.hpp"
#include "support/decode_fixtures.hpp"
#include "support/metric_fixtures.hpp"

namespace fs = std::filesystem;
using namespace mrg;

namespace {

struct Outcome {
  bool passed = false;
  std::string detail;
};

struct Criterion {
  int id;
  std::string name;
  std::function<Outcome()> run;
};

std::string fmt(double v) {
  std::ostringstream s;
  s.precision(3);
  s << v;
  return s.str();
}

double seconds_since(std::chrono::steady_clock::time_point start) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

std::string quote(const std::string& s) {
  std::string q = "'";
  for (char c : s) q += c == '\'' ? std::string("'\\''") : std::string(1, c);
  return q + "'";
}

struct Shell {
  fs::path binary;
  fs::path log;
  /// Runs the CLI with stdout and stderr appended to the log; returns the exit code.
  int operator()(const std::vector<std::string>& args) const {
    std::string cmd = quote(binary.string());
    for (const auto& a : args) cmd += " " + quote(a);
    cmd += " >>" + quote(log.string()) + " 2>&1";
    const int status = std::system(cmd.c_str());
    return status == 0 ? 0 : (WIFEXITED(status) ? WEXITSTATUS(status) : -1);
  }
};

Outcome gradient_integrity() {
  const auto start = std::chrono::steady_clock::now();
  const auto report = run_gradcheck(1);
  const double secs = seconds_since(start);
  double worst = 0.0;
  std::size_t checked = 0;
  for (const auto& e : report.entries) {
    worst = std::max(worst, e.max_rel_error);
    checked += e.checked;
  }
  std::string detail = std::to_string(report.entries.size()) + " checks over " + std::to_string(checked) +
                       " elements, max rel error " + fmt(worst) + " (tol 1e-4), " + fmt(secs) + " s (limit 60)";
  for (const auto& f : report.failures()) detail += ", failed: " + f;
  return {report.passed() && report.tolerance <= 1e-4 && secs < 60.0, detail};
}

Outcome oracle_equivalence() {
  double cam = 0, upd = 0, stack = 0, dec = 0;
  for (std::uint64_t seed = 1; seed <= 20; ++seed) {
    cam = std::max(cam, checks::cam_oracle_error(seed));
    upd = std::max(upd, checks::updater_oracle_error(seed));
    stack = std::max(stack, checks::mcam_stack_oracle_error(seed));
    dec = std::max(dec, checks::decoder_oracle_error(seed));
  }
  const double worst = std::max({cam, upd, stack, dec});
  return {worst <= 1e-6, "20 seeds, max abs deviation: cross attention " + fmt(cam) + ", memory updater " + fmt(upd) +
                             ", full stack " + fmt(stack) + ", decoder " + fmt(dec) + " (tol 1e-6)"};
}

Outcome normalization_invariants() {
  std::size_t distributions = 0;
  double sum_error = 0.0, masked = 0.0;
  bool gates = true, between = true;
  for (std::uint64_t seed = 1; seed <= 20; ++seed) {
    const auto n = checks::normalization(seed);
    distributions += n.distributions;
    sum_error = std::max(sum_error, n.worst_sum_error);
    masked = std::max(masked, n.masked_mass);
    gates = gates && n.gates_strict;
    between = between && n.n_between;
  }
  return {distributions > 0 && sum_error <= 1e-6 && masked == 0.0 && gates && between,
          std::to_string(distributions) + " distributions, max |sum - 1| " + fmt(sum_error) + ", masked mass " +
              fmt(masked) + ", gate in (0,1): " + (gates ? "yes" : "no") +
              ", blend between inputs: " + (between ? "yes" : "no")};
}

Outcome padding_invariance() {
  double worst = 0.0;
  for (std::uint64_t seed = 1; seed <= 20; ++seed) worst = std::max(worst, checks::padding_error(seed));
  return {worst <= 1e-6, "20 seeds, max change of an unmasked output " + fmt(worst) + " (tol 1e-6)"};
}

Outcome decoding_correctness() {
  using fixtures::Prefix;
  using fixtures::Table;
  bool ok = true;
  std::string detail;

  std::size_t beam1_tables = 0;
  for (std::uint64_t seed = 1; seed <= 50; ++seed) {
    const Table table = [seed](const Prefix& p) { return fixtures::random_distribution(p, seed, 7); };
    DecodeConfig cfg;
    cfg.beam = 1;
    cfg.min_len = 2;
    cfg.max_len = 6;
    cfg.sos = 7;
    cfg.eos = 3;
    cfg.banned = {0};
    const auto b = beam_search(Prefix{}, fixtures::table_step(table), cfg);
    const auto g = greedy_decode(Prefix{}, fixtures::table_step(table), cfg);
    if (b.tokens == g.tokens && b.log_prob == g.log_prob) ++beam1_tables;
  }
  ok = ok && beam1_tables == 50;

  const Table hand = fixtures::hand_table;
  const auto cfg = fixtures::hand_config(4);
  const auto best = fixtures::exhaustive(hand, cfg);
  const auto hyp = beam_search(Prefix{}, fixtures::table_step(hand), cfg);
  const bool hand_ok = hyp.tokens == best.tokens && std::abs(hyp.log_prob - best.log_prob) <= 1e-12;
  ok = ok && hand_ok;

  const auto config = checks::small_config();
  std::size_t decodes = 0, in_bounds = 0, beam1_models = 0, beam1_model_checks = 0;
  for (std::uint64_t seed = 1; seed <= 10; ++seed) {
    MrgModel<double> model(config);
    checks::randomize(model.params(), seed, 0.3);
    std::mt19937_64 rng(seed);
    for (int e = 0; e < 10; ++e, ++decodes) {
      const auto ex = checks::random_example(rng, config);
      DecodeConfig dc;
      const auto content = model.generate(ex, dc).content(dc.eos);
      if (content.size() >= 10 && content.size() <= 20) ++in_bounds;
      dc.beam = 1;
      const auto b = model.generate(ex, dc);
      const auto g = model.generate_greedy(ex, dc);
      ++beam1_model_checks;
      if (b.tokens == g.tokens && b.log_prob == g.log_prob) ++beam1_models;
    }
  }
  ok = ok && in_bounds == decodes && beam1_models == beam1_model_checks;

  detail = "beam 1 = greedy on " + std::to_string(beam1_tables) + "/50 tables and " + std::to_string(beam1_models) +
           "/" + std::to_string(beam1_model_checks) + " model decodes; hand table beam 4 = exhaustive: " +
           (hand_ok ? "yes" : "no") + "; lengths in [10,20]: " + std::to_string(in_bounds) + "/" +
           std::to_string(decodes);
  return {ok, detail};
}

Outcome overfit() {
  const auto start = std::chrono::steady_clock::now();
  const auto raw = synth_corpus(7, 32, SynthConfig::defaults());
  const auto vocab = build_vocab(raw, false, 64);
  ModelConfig model;
  model.vocab_size = vocab.size();
  model.emb_dim = 32;
  model.hidden = 64;
  model.answer_hidden = 64;
  std::vector<DialogExample> examples;
  for (const auto& r : raw) examples.push_back(preprocess(r, vocab, model.layout, false));

  TrainConfig train;
  train.lr = 0.05;
  train.steps = 2000;
  train.batch_size = 16;
  train.eval_interval = 100;
  train.seed = 1;
  std::size_t first_below = 0;
  const auto result = train_loop(train, model, vocab, examples, examples, [&](const EvalPoint& p) {
    if (first_below == 0 && p.validation.nll_per_token < 0.1) first_below = p.step;
  });

  const auto trained = model_from_checkpoint(result.best);
  const auto loss = evaluate_loss(*trained, examples, TaskMode::Joint, train.answer_weight);
  EvalOptions options;
  options.generation = false;
  const auto report = evaluate_model(*trained, vocab, examples, options);
  const double secs = seconds_since(start);
  return {vocab.size() <= 64 && loss.nll_per_token < 0.1 && report.answer_exact_match == 1.0 && secs < 600.0,
          "vocab " + std::to_string(vocab.size()) + ", best step " + std::to_string(result.best.step) +
              ", NLL/token " + fmt(loss.nll_per_token) + " (first < 0.1 at step " + std::to_string(first_below) +
              "), answer EM " + fmt(report.answer_exact_match) + ", " + fmt(secs) + " s (limit 600)"};
}

constexpr const char* kAblationConfig = R"(emb_dim = 32
hidden = 64
answer_hidden = 64
layers = 2
heads = 4
lr = 0.05
steps = 300
batch_size = 16
eval_interval = 100
quiet = true
)";

Outcome ablation(const Shell& mrg, const fs::path& dir) {
  const auto cfg = dir / "ablation.cfg";
  std::ofstream(cfg) << kAblationConfig;
  const auto out = dir / "ablation.json";
  const auto start = std::chrono::steady_clock::now();
  const int code = mrg({"ablate", "--config", cfg.string(), "--seed", "1", "--n", "2000", "--runs", "3", "--out",
                        out.string()});
  const double secs = seconds_since(start);
  if (code != 0) return {false, "ablate exited with " + std::to_string(code) + ", see " + mrg.log.string()};

  const auto report = nlohmann::json::parse(slurp(out));
  const std::set<std::string> expected{"joint", "response_only", "answer_only", "no_mcam", "no_mam", "no_memupd"};
  std::set<std::string> arms;
  bool three_runs = true;
  for (const auto& arm : report["arms"]) {
    arms.insert(arm["name"].get<std::string>());
    three_runs = three_runs && arm["runs"].size() == 3;
  }
  const auto markdown = slurp(fs::path(out).replace_extension(".md"));
  const bool tables = markdown.find("BLEU1") != std::string::npos && markdown.find("| joint") != std::string::npos;

  // Rerun the first joint run alone; its metrics must reproduce exactly.
  const auto again = dir / "ablation_joint.json";
  const int code2 = mrg({"ablate", "--config", cfg.string(), "--seed", "1", "--n", "2000", "--runs", "1", "--arms",
                         "joint", "--out", again.string()});
  bool reproduced = false;
  if (code2 == 0) {
    const auto rerun = nlohmann::json::parse(slurp(again));
    for (const auto& arm : report["arms"])
      if (arm["name"] == "joint") reproduced = rerun["arms"][0]["runs"][0] == arm["runs"][0];
  }

  std::ostringstream detail;
  detail << "split " << report["split"]["train"] << "/" << report["split"]["valid"] << "/" << report["split"]["test"]
         << ", " << arms.size() << " arms x 3 runs: " << (arms == expected && three_runs ? "yes" : "no")
         << ", tables: " << (tables ? "yes" : "no") << ", joint rerun identical: " << (reproduced ? "yes" : "no")
         << ", " << fmt(secs) << " s; report " << out.string();
  return {arms == expected && three_runs && tables && reproduced, detail.str()};
}

Outcome metric_correctness() {
  const Tokens s{"the", "cat", "sat", "on", "the", "mat"};
  const double identical = bleu(s, s, 4).value;
  const double golden = bleu(fixtures::kDisjointHyp, fixtures::kDisjointRef, 4).value;
  const double golden_error =
      std::max(std::abs(golden - fixtures::kDisjointBleu4), std::abs(golden - fixtures::disjoint_bleu4_by_hand()));
  const auto bow = bow_metrics(fixtures::kBowHyp, fixtures::kBowRef, fixtures::bow_table());
  const auto hand = fixtures::bow_by_hand();
  double bow_error = 1.0;
  if (bow)
    bow_error = std::max({std::abs(bow->average - hand.average), std::abs(bow->extrema - hand.extrema),
                          std::abs(bow->greedy - hand.greedy)});
  const double f1 = answer_metrics({0, 1}, {1, 2}).f1;
  return {identical == 1.0 && golden_error <= 1e-9 && bow_error <= 1e-9 && f1 == 0.5,
          "identical BLEU-4 " + fmt(identical) + ", disjoint BLEU-4 error " + fmt(golden_error) + ", BOW error " +
              fmt(bow_error) + ", answer F1 " + fmt(f1)};
}

constexpr const char* kDeterminismConfig = R"(emb_dim = 16
hidden = 32
answer_hidden = 32
layers = 1
heads = 2
lr = 0.05
steps = 300
batch_size = 8
eval_interval = 100
seed = 7
quiet = true
)";

Outcome determinism(const Shell& mrg, const fs::path& dir) {
  const auto cfg = dir / "determinism.cfg";
  std::ofstream(cfg) << kDeterminismConfig;
  std::vector<std::string> bytes[4];
  for (int round = 0; round < 2; ++round) {
    const auto r = dir / ("round" + std::to_string(round));
    fs::create_directories(r);
    const auto corpus = r / "corpus.jsonl", ck = r / "model.ckpt", report = r / "eval.json", gen = r / "gen.jsonl";
    if (mrg({"synth", "--seed", "7", "--n", "16", "--out", corpus.string()}) != 0 ||
        mrg({"train", "--config", cfg.string(), "--train", corpus.string(), "--valid", corpus.string(), "--out",
             ck.string()}) != 0 ||
        mrg({"eval", "--checkpoint", ck.string(), "--test", corpus.string(), "--out", report.string()}) != 0 ||
        mrg({"generate", "--checkpoint", ck.string(), "--input", corpus.string(), "--out", gen.string()}) != 0)
      return {false, "a CLI step failed in round " + std::to_string(round) + ", see " + mrg.log.string()};
    for (int i = 0; const auto& p : {corpus, ck, report, gen}) bytes[i++].push_back(slurp(p));
  }
  const char* names[4] = {"corpus", "checkpoint", "eval report", "decodes"};
  bool ok = true;
  std::string detail;
  for (int i = 0; i < 4; ++i) {
    const bool same = !bytes[i][0].empty() && bytes[i][0] == bytes[i][1];
    ok = ok && same;
    detail += std::string(i ? ", " : "") + names[i] + (same ? " identical" : " DIFFER") + " (" +
              std::to_string(bytes[i][0].size()) + " B)";
  }
  return {ok, detail};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Acceptance gate"};
  std::string binary, work;
  std::vector<int> only;
  app.add_option("mrg", binary, "Path to the mrg CLI binary")->required()->check(CLI::ExistingFile);
  app.add_option("workdir", work, "Scratch directory (recreated)")->required();
  app.add_option("--only", only, "Run only these criteria")->delimiter(',');
  CLI11_PARSE(app, argc, argv);

  const fs::path dir = fs::absolute(work);
  fs::remove_all(dir);
  fs::create_directories(dir);
  const Shell mrg{fs::absolute(binary), dir / "cli.log"};

  const std::vector<Criterion> criteria{
      {1, "gradient integrity", gradient_integrity},
      {2, "oracle equivalence", oracle_equivalence},
      {3, "normalization invariants", normalization_invariants},
      {4, "padding invariance", padding_invariance},
      {5, "decoding correctness", decoding_correctness},
      {6, "overfit convergence", overfit},
      {7, "multi-task ablation report", [&] { return ablation(mrg, dir); }},
      {8, "metric correctness", metric_correctness},
      {9, "determinism", [&] { return determinism(mrg, dir); }},
  };

  int failed = 0;
  for (const auto& c : criteria) {
    if (!only.empty() && std::find(only.begin(), only.end(), c.id) == only.end()) continue;
    Outcome o;
    try {
      o = c.run();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    failed += !o.passed;
    std::cout << (o.passed ? "PASS" : "FAIL") << " [" << c.id << "] " << c.name << ": " << o.detail << std::endl;
  }
  std::cout << (failed ? "acceptance: " + std::to_string(failed) + " criteria failed" : "acceptance: all passed")
            << std::endl;
  return failed ? 1 : 0;
}
