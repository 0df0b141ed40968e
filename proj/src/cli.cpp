#include "mrg/cli.hpp"

#include <openssl/evp.h>

#include <algorithm>
#include <chrono>
#include <fstream>
#include <iomanip>
#include <sstream>

#include "CLI11.hpp"
#include "mrg/ablation.hpp"
#include "mrg/data.hpp"
#include "mrg/evaluate.hpp"
#include "mrg/gradcheck.hpp"
#include "mrg/metrics.hpp"
#include "mrg/synth.hpp"
#include "mrg/tensor.hpp"
#include "mrg/train.hpp"

namespace mrg::cli {

namespace fs = std::filesystem;
using ojson = nlohmann::ordered_json;

namespace {

class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

}  // namespace

std::vector<std::pair<std::string, std::string>> parse_flat_config(const std::string& text) {
  std::vector<std::pair<std::string, std::string>> entries;
  std::istringstream in(text);
  std::string line;
  std::size_t line_number = 0;
  while (std::getline(in, line)) {
    ++line_number;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    const auto body = trim(line);
    if (body.empty()) continue;
    const auto eq = body.find('=');
    if (eq == std::string::npos) {
      throw ConfigError("config line " + std::to_string(line_number) + ": expected 'key = value'");
    }
    auto key = trim(std::string_view(body).substr(0, eq));
    auto value = trim(std::string_view(body).substr(eq + 1));
    if (key.empty()) throw ConfigError("config line " + std::to_string(line_number) + ": empty key");
    std::replace(key.begin(), key.end(), '_', '-');
    if (std::any_of(entries.begin(), entries.end(), [&](const auto& e) { return e.first == key; })) {
      throw ConfigError("config line " + std::to_string(line_number) + ": duplicate key '" + key + "'");
    }
    entries.emplace_back(std::move(key), std::move(value));
  }
  return entries;
}

std::vector<std::pair<std::string, std::string>> read_flat_config(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot open config file " + path.string());
  std::ostringstream buf;
  buf << in.rdbuf();
  try {
    return parse_flat_config(buf.str());
  } catch (const ConfigError& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
}

std::string git_blob_sha1(std::span<const std::uint8_t> bytes) {
  const std::string prefix = "blob " + std::to_string(bytes.size()) + '\0';
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  EVP_MD_CTX* ctx = EVP_MD_CTX_new();
  if (!ctx) throw std::runtime_error("cannot allocate a digest context");
  const bool ok = EVP_DigestInit_ex(ctx, EVP_sha1(), nullptr) == 1 &&
                  EVP_DigestUpdate(ctx, prefix.data(), prefix.size()) == 1 &&
                  EVP_DigestUpdate(ctx, bytes.data(), bytes.size()) == 1 && EVP_DigestFinal_ex(ctx, digest, &len) == 1;
  EVP_MD_CTX_free(ctx);
  if (!ok) throw std::runtime_error("SHA-1 digest failed");
  std::ostringstream hex;
  for (unsigned int i = 0; i < len; ++i) hex << std::hex << std::setw(2) << std::setfill('0') << int(digest[i]);
  return hex.str();
}

std::string git_blob_sha1(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  const std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return git_blob_sha1(bytes);
}

ojson RunManifest::to_json() const {
  ojson j;
  j["command"] = command;
  j["argv"] = argv;
  j["config"] = config;
  j["seed"] = seed;
  j["inputs"] = inputs;
  j["outputs"] = outputs;
  j["checkpoint_hash"] = checkpoint_hash ? ojson(*checkpoint_hash) : ojson(nullptr);
  j["duration_seconds"] = duration_seconds;
  return j;
}

fs::path RunManifest::path_for(const fs::path& primary_output) {
  return fs::path(primary_output.string() + ".manifest.json");
}

void RunManifest::write(const fs::path& primary_output) const {
  const auto path = path_for(primary_output);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write manifest " + path.string());
  out << to_json().dump(2) << '\n';
}

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point start) { return std::chrono::duration<double>(Clock::now() - start).count(); }

void require_file(const std::string& what, const std::string& path) {
  if (path.empty()) throw UsageError(what + " path is required");
  if (!fs::is_regular_file(path)) throw UsageError(what + " not found: " + path);
}

/// Input problems are usage errors (exit 2), whatever the loader throws.
template <typename F>
auto load_input(const std::string& what, F&& load) {
  try {
    return load();
  } catch (const UsageError&) {
    throw;
  } catch (const std::exception& e) {
    throw UsageError("cannot read " + what + ": " + e.what());
  }
}

void ensure_parent(const fs::path& path) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
}

/// Refuses to overwrite any input.
void check_outputs(const std::vector<std::string>& inputs, const std::vector<std::string>& outputs) {
  for (const auto& o : outputs) {
    if (o.empty()) continue;
    for (const auto& i : inputs) {
      if (i.empty()) continue;
      std::error_code ec;
      if (fs::exists(o) && fs::equivalent(o, i, ec)) throw UsageError("output " + o + " would overwrite input " + i);
      if (fs::weakly_canonical(o) == fs::weakly_canonical(i)) {
        throw UsageError("output " + o + " would overwrite input " + i);
      }
    }
  }
}

void write_text(const fs::path& path, const std::string& text) {
  ensure_parent(path);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << text;
  if (!out) throw std::runtime_error("failed writing " + path.string());
}

struct ModelFlags {
  ModelConfig model;
  std::size_t vocab_cap = Vocabulary::kDefaultMaxSize;
  bool char_level = false;
  bool no_mcam = false, no_mam = false, no_memupd = false;

  ModelConfig resolved(std::size_t vocab_size) const {
    auto m = model;
    m.vocab_size = vocab_size;
    m.use_mcam = !no_mcam;
    m.use_mam = !no_mam;
    m.use_memupd = !no_memupd;
    return m;
  }
};

struct TrainFlags {
  TrainConfig train;
  std::string mode = "joint";

  TrainConfig resolved() const {
    auto t = train;
    t.mode = parse_task_mode(mode);
    return t;
  }
};

struct DecodeFlags {
  DecodeConfig decode;
  bool greedy = false;
};

void add_model_options(CLI::App* app, ModelFlags& f) {
  auto& m = f.model;
  app->add_option("--emb-dim", m.emb_dim, "Word embedding size")->capture_default_str();
  app->add_option("--hidden", m.hidden, "Hidden size d")->capture_default_str();
  app->add_option("--layers", m.layers, "MCAM stack depth L")->capture_default_str();
  app->add_option("--heads", m.heads, "Attention heads")->capture_default_str();
  app->add_option("--word-mam-layers", m.word_mam_layers, "Word-level self-attention layers")->capture_default_str();
  app->add_option("--answer-hidden", m.answer_hidden, "Answer selector MLP width")->capture_default_str();
  app->add_option("--max-utterances", m.layout.max_utterances, "Utterances kept per dialog")->capture_default_str();
  app->add_option("--max-utterance-len", m.layout.max_utterance_len, "Tokens kept per utterance")
      ->capture_default_str();
  app->add_option("--max-question-len", m.layout.max_question_len, "Question tokens kept")->capture_default_str();
  app->add_option("--max-response-len", m.layout.max_response_len, "Decoder steps including eos")
      ->capture_default_str();
  app->add_option("--ln-eps", m.ln_eps, "Layer norm epsilon")->capture_default_str();
  app->add_flag("--learned-initial-memory", m.learned_initial_memory, "Learn the memory fed to the first utterance");
  app->add_flag("--no-mcam", f.no_mcam, "Pass encoder states through instead of the MCAM stack");
  app->add_flag("--no-mam", f.no_mam, "Pool encoder states instead of hierarchical attention");
  app->add_flag("--no-memupd", f.no_memupd, "Feed memory to cross attention without the gated update");
  app->add_option("--vocab-cap", f.vocab_cap, "Vocabulary size including reserved tokens")->capture_default_str();
  app->add_flag("--char-level", f.char_level, "Character tokenization instead of whitespace");
}

void add_train_options(CLI::App* app, TrainFlags& f) {
  auto& t = f.train;
  app->add_option("--batch-size", t.batch_size, "Examples per step")->capture_default_str();
  app->add_option("--steps", t.steps, "Optimizer steps")->capture_default_str();
  app->add_option("--eval-interval", t.eval_interval, "Steps between validation passes")->capture_default_str();
  app->add_option("--lr", t.lr, "Adagrad learning rate")->capture_default_str();
  app->add_option("--adagrad-init-acc", t.adagrad_init_acc, "Initial accumulator value")->capture_default_str();
  app->add_option("--clip", t.clip, "Elementwise gradient clip")->capture_default_str();
  app->add_option("--answer-weight", t.answer_weight, "Weight of the answer loss in joint mode")
      ->capture_default_str();
  app->add_option("--init-std", t.init_std, "Std of the Gaussian initialization")->capture_default_str();
  app->add_option("--mode", f.mode, "joint | response_only | answer_only")
      ->check(CLI::IsMember({"joint", "response_only", "answer_only"}))
      ->capture_default_str();
}

void add_decode_options(CLI::App* app, DecodeFlags& f) {
  app->add_option("--beam", f.decode.beam, "Beam width")->capture_default_str();
  app->add_option("--min-len", f.decode.min_len, "Minimum generated tokens before eos")->capture_default_str();
  app->add_option("--max-len", f.decode.max_len, "Maximum decoder steps")->capture_default_str();
  app->add_flag("--greedy", f.greedy, "Argmax decoding instead of beam search");
}

ojson decode_json(const DecodeFlags& f) {
  return {{"beam", f.decode.beam}, {"min_len", f.decode.min_len}, {"max_len", f.decode.max_len}, {"greedy", f.greedy}};
}

std::vector<RawDialog> read_corpus(const std::string& what, const std::string& path) {
  require_file(what, path);
  return load_input(what + " " + path, [&] { return read_raw_corpus(path); });
}

std::vector<DialogExample> prepare(const std::string& what, const std::vector<RawDialog>& raw, const Vocabulary& vocab,
                                   const Layout& layout, bool char_level) {
  std::vector<DialogExample> out;
  out.reserve(raw.size());
  for (std::size_t i = 0; i < raw.size(); ++i) {
    try {
      out.push_back(preprocess(raw[i], vocab, layout, char_level));
    } catch (const std::exception& e) {
      throw UsageError(what + " record " + std::to_string(i + 1) + ": " + e.what());
    }
  }
  return out;
}

struct LoadedModel {
  Checkpoint checkpoint;
  std::unique_ptr<MrgModel<float>> model;
  Vocabulary vocab;
};

LoadedModel load_model(const std::string& path) {
  require_file("checkpoint", path);
  LoadedModel m;
  m.checkpoint = load_input("checkpoint " + path, [&] { return Checkpoint::load(path); });
  m.vocab = load_input("checkpoint vocabulary", [&] { return Vocabulary::from_tokens(m.checkpoint.vocab); });
  m.model = load_input("checkpoint " + path, [&] { return model_from_checkpoint(m.checkpoint); });
  return m;
}

EvalOptions eval_options(const Checkpoint& ckpt, const DecodeFlags& flags) {
  EvalOptions o;
  o.decode = flags.decode;
  o.greedy = flags.greedy;
  o.generation = ckpt.train.mode != TaskMode::AnswerOnly;
  o.answer = ckpt.train.mode != TaskMode::ResponseOnly;
  return o;
}

/// Context tokens after truncation, aligned with answer indices.
std::vector<std::string> context_tokens(const DialogExample& ex, bool char_level) {
  std::vector<std::string> out;
  const auto& utts = ex.raw.utterances;
  const auto skip = utts.size() - ex.utterances.size();
  for (std::size_t j = 0; j < ex.utterances.size(); ++j) {
    auto tokens = tokenize(utts[skip + j], char_level);
    tokens.resize(ex.utterances[j].size());
    out.insert(out.end(), tokens.begin(), tokens.end());
  }
  return out;
}

std::string join(const std::vector<std::string>& tokens, bool char_level) {
  std::string s;
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (i > 0 && !char_level) s += ' ';
    s += tokens[i];
  }
  return s;
}

struct Context {
  std::ostream& out;
  std::ostream& err;
  std::vector<std::string> argv;
};

int cmd_synth(const Context& ctx, std::uint64_t seed, std::size_t n, const std::string& out_path,
              const SynthConfig& config, Clock::time_point start) {
  if (out_path.empty()) throw UsageError("--out is required");
  const auto corpus = synth_corpus(seed, n, config);
  ensure_parent(out_path);
  write_raw_corpus(out_path, corpus);

  RunManifest manifest;
  manifest.command = "synth";
  manifest.argv = ctx.argv;
  manifest.config = {{"n", n},
                     {"diversity", config.diversity},
                     {"mixture", config.mixture},
                     {"greeting_probability", config.greeting_probability}};
  manifest.seed = seed;
  manifest.outputs = {out_path};
  manifest.duration_seconds = seconds_since(start);
  manifest.write(out_path);
  ctx.out << "wrote " << corpus.size() << " dialogs to " << out_path << '\n';
  return kSuccess;
}

struct TrainArgs {
  std::string train_path, valid_path, out_path, vocab_path, vocab_out, last_out, history_out;
  ModelFlags model;
  TrainFlags train;
  bool quiet = false;
};

int cmd_train(const Context& ctx, const TrainArgs& a, Clock::time_point start) {
  if (a.out_path.empty()) throw UsageError("--out is required");
  const auto train_raw = read_corpus("train corpus", a.train_path);
  const auto valid_raw = read_corpus("validation corpus", a.valid_path);
  if (train_raw.empty()) throw UsageError("train corpus " + a.train_path + " is empty");
  if (valid_raw.empty()) throw UsageError("validation corpus " + a.valid_path + " is empty");

  Vocabulary vocab;
  if (!a.vocab_path.empty()) {
    require_file("vocabulary", a.vocab_path);
    vocab = load_input("vocabulary " + a.vocab_path, [&] { return Vocabulary::load(a.vocab_path); });
  } else {
    vocab = build_vocab(train_raw, a.model.char_level, a.model.vocab_cap);
  }
  const auto model_config = a.model.resolved(vocab.size());
  const auto train_config = a.train.resolved();
  model_config.validate();
  train_config.validate();

  const std::vector<std::string> inputs = {a.train_path, a.valid_path, a.vocab_path};
  check_outputs(inputs, {a.out_path, a.vocab_out, a.last_out, a.history_out});

  const auto layout = model_config.layout;
  const auto train_set = prepare("train corpus", train_raw, vocab, layout, a.model.char_level);
  const auto valid_set = prepare("validation corpus", valid_raw, vocab, layout, a.model.char_level);

  auto observer = [&](const EvalPoint& p) {
    if (a.quiet) return;
    ctx.err << "step " << p.step << "  train " << std::fixed << std::setprecision(4) << p.train_loss << "  valid "
            << p.validation.loss << "  nll/token " << p.validation.nll_per_token << "  answer_bce "
            << p.validation.answer_bce << std::defaultfloat << '\n';
  };
  auto result = train_loop(train_config, model_config, vocab, train_set, valid_set, observer);
  result.best.char_level = a.model.char_level;
  result.last.char_level = a.model.char_level;

  ensure_parent(a.out_path);
  result.best.save(a.out_path);
  std::vector<std::string> outputs = {a.out_path};
  if (!a.last_out.empty()) {
    ensure_parent(a.last_out);
    result.last.save(a.last_out);
    outputs.push_back(a.last_out);
  }
  if (!a.vocab_out.empty()) {
    ensure_parent(a.vocab_out);
    vocab.save(a.vocab_out);
    outputs.push_back(a.vocab_out);
  }
  if (!a.history_out.empty()) {
    ojson h = ojson::array();
    for (const auto& p : result.history) {
      h.push_back({{"step", p.step},
                   {"train_loss", p.train_loss},
                   {"valid_loss", p.validation.loss},
                   {"valid_nll_per_token", p.validation.nll_per_token},
                   {"valid_answer_bce", p.validation.answer_bce}});
    }
    write_text(a.history_out, h.dump(2) + "\n");
    outputs.push_back(a.history_out);
  }

  RunManifest manifest;
  manifest.command = "train";
  manifest.argv = ctx.argv;
  manifest.config = {{"model_config", to_json(model_config)},
                     {"train_config", to_json(train_config)},
                     {"vocab_cap", a.model.vocab_cap},
                     {"char_level", a.model.char_level}};
  manifest.seed = train_config.seed;
  for (const auto& i : inputs)
    if (!i.empty()) manifest.inputs.push_back(i);
  manifest.outputs = outputs;
  manifest.checkpoint_hash = git_blob_sha1(fs::path(a.out_path));
  manifest.duration_seconds = seconds_since(start);
  manifest.write(a.out_path);
  ctx.out << "best checkpoint: step " << result.best.step << ", validation loss " << result.best.val_loss << " -> "
          << a.out_path << '\n';
  return kSuccess;
}

struct EvalArgs {
  std::string checkpoint, test_path, out_path, embeddings;
  DecodeFlags decode;
  bool corpus_bleu = false;
  std::uint64_t seed = 1;
};

int cmd_eval(const Context& ctx, const EvalArgs& a, Clock::time_point start) {
  if (a.out_path.empty()) throw UsageError("--out is required");
  a.decode.decode.validate();
  auto loaded = load_model(a.checkpoint);
  const auto raw = read_corpus("test corpus", a.test_path);
  std::vector<std::string> inputs = {a.checkpoint, a.test_path};
  if (!a.embeddings.empty()) inputs.push_back(a.embeddings);
  check_outputs(inputs, {a.out_path});
  const auto& ckpt = loaded.checkpoint;
  const auto test_set = prepare("test corpus", raw, loaded.vocab, ckpt.model.layout, ckpt.char_level);

  auto options = eval_options(ckpt, a.decode);
  options.corpus_bleu = a.corpus_bleu;
  EmbeddingTable table;
  if (!a.embeddings.empty()) {
    require_file("embedding file", a.embeddings);
    table = load_input("embedding file " + a.embeddings, [&] { return EmbeddingTable::load(a.embeddings); });
    options.embeddings = &table;
  }
  const auto report = evaluate_model(*loaded.model, loaded.vocab, test_set, options);
  write_text(a.out_path, report.to_json().dump(2) + "\n");

  RunManifest manifest;
  manifest.command = "eval";
  manifest.argv = ctx.argv;
  manifest.config = {{"decode", decode_json(a.decode)},
                     {"corpus_bleu", a.corpus_bleu},
                     {"bow_embeddings", a.embeddings.empty() ? "model" : "external"},
                     {"mode", to_string(ckpt.train.mode)}};
  manifest.seed = a.seed;
  manifest.inputs = inputs;
  manifest.outputs = {a.out_path};
  manifest.checkpoint_hash = git_blob_sha1(fs::path(a.checkpoint));
  manifest.duration_seconds = seconds_since(start);
  manifest.write(a.out_path);

  auto j = report.to_json();
  j.erase("per_example");
  ctx.out << j.dump(2) << '\n';
  return kSuccess;
}

struct GenerateArgs {
  std::string checkpoint, input_path, out_path;
  DecodeFlags decode;
  std::uint64_t seed = 1;
};

int cmd_generate(const Context& ctx, const GenerateArgs& a, Clock::time_point start) {
  if (a.out_path.empty()) throw UsageError("--out is required");
  a.decode.decode.validate();
  auto loaded = load_model(a.checkpoint);
  const auto raw = read_corpus("input corpus", a.input_path);
  check_outputs({a.checkpoint, a.input_path}, {a.out_path});
  const auto& ckpt = loaded.checkpoint;
  const auto examples = prepare("input corpus", raw, loaded.vocab, ckpt.model.layout, ckpt.char_level);
  const auto options = eval_options(ckpt, a.decode);

  std::ostringstream lines;
  for (std::size_t i = 0; i < examples.size(); ++i) {
    const auto pred = predict(*loaded.model, loaded.vocab, examples[i], options);
    ojson row;
    row["index"] = i;
    if (options.generation) {
      row["response"] = join(pred.response, ckpt.char_level);
      row["response_tokens"] = pred.response;
      row["log_prob"] = pred.log_prob;
    }
    if (options.answer) {
      const auto context = context_tokens(examples[i], ckpt.char_level);
      std::vector<std::string> answer;
      for (auto idx : pred.answer) answer.push_back(context.at(idx));
      row["answer_token_indices"] = pred.answer;
      row["answer"] = join(answer, ckpt.char_level);
    }
    lines << row.dump() << '\n';
  }
  write_text(a.out_path, lines.str());

  RunManifest manifest;
  manifest.command = "generate";
  manifest.argv = ctx.argv;
  manifest.config = {{"decode", decode_json(a.decode)}, {"mode", to_string(ckpt.train.mode)}};
  manifest.seed = a.seed;
  manifest.inputs = {a.checkpoint, a.input_path};
  manifest.outputs = {a.out_path};
  manifest.checkpoint_hash = git_blob_sha1(fs::path(a.checkpoint));
  manifest.duration_seconds = seconds_since(start);
  manifest.write(a.out_path);
  ctx.out << "wrote " << examples.size() << " predictions to " << a.out_path << '\n';
  return kSuccess;
}

struct GradcheckArgs {
  std::uint64_t seed = 1;
  std::string inject_fault, out_path;
  GradcheckOptions options;
  bool skip_model = false, skip_ops = false;
};

/// Clears the injected fault however the check exits.
struct FaultScope {
  explicit FaultScope(const std::string& op) : active(!op.empty()) {
    if (active) testing::inject_adjoint_fault(op);
  }
  ~FaultScope() {
    if (active) testing::clear_adjoint_fault();
  }
  bool active;
};

int cmd_gradcheck(const Context& ctx, GradcheckArgs a, Clock::time_point start) {
  const auto& ops = known_operations();
  if (!a.inject_fault.empty() && std::find(ops.begin(), ops.end(), a.inject_fault) == ops.end()) {
    std::string list;
    for (const auto& op : ops) list += (list.empty() ? "" : ", ") + op;
    throw UsageError("unknown operation '" + a.inject_fault + "' for --inject-fault (known: " + list + ")");
  }
  if (!(a.options.tolerance > 0.0)) throw UsageError("--tolerance must be positive");
  a.options.model = !a.skip_model;
  a.options.operations = !a.skip_ops;
  if (!a.options.model && !a.options.operations) throw UsageError("nothing to check");

  GradcheckReport report;
  {
    FaultScope fault(a.inject_fault);
    report = run_gradcheck(a.seed, a.options);
  }
  for (const auto& e : report.entries) {
    ctx.out << (e.passed ? "PASS " : "FAIL ") << e.name << "  max_rel_error " << std::scientific
            << std::setprecision(3) << e.max_rel_error << std::defaultfloat << "  (" << e.checked << " values)\n";
  }
  const auto failures = report.failures();
  ctx.out << report.entries.size() - failures.size() << "/" << report.entries.size() << " checks passed at tolerance "
          << report.tolerance << " in " << std::fixed << std::setprecision(1) << report.seconds << " s"
          << std::defaultfloat << '\n';

  if (!a.out_path.empty()) {
    ojson j;
    j["seed"] = a.seed;
    j["tolerance"] = report.tolerance;
    j["seconds"] = report.seconds;
    j["passed"] = report.passed();
    j["injected_fault"] = a.inject_fault.empty() ? ojson(nullptr) : ojson(a.inject_fault);
    auto& list = j["entries"] = ojson::array();
    for (const auto& e : report.entries) {
      list.push_back({{"name", e.name}, {"checked", e.checked}, {"max_rel_error", e.max_rel_error}, {"passed", e.passed}});
    }
    write_text(a.out_path, j.dump(2) + "\n");
    RunManifest manifest;
    manifest.command = "gradcheck";
    manifest.argv = ctx.argv;
    manifest.config = {{"step", a.options.step},
                       {"model_step", a.options.model_step},
                       {"tolerance", a.options.tolerance},
                       {"operations", a.options.operations},
                       {"model", a.options.model},
                       {"inject_fault", a.inject_fault}};
    manifest.seed = a.seed;
    manifest.outputs = {a.out_path};
    manifest.duration_seconds = seconds_since(start);
    manifest.write(a.out_path);
  }
  if (!failures.empty()) {
    std::string names;
    for (const auto& f : failures) names += (names.empty() ? "" : ", ") + f;
    ctx.err << "gradcheck failed: " << names << '\n';
    return kFailure;
  }
  return kSuccess;
}

struct AblateArgs {
  std::string data_path, out_path, markdown_out, embeddings, arms;
  std::size_t n = 2000;
  std::uint64_t seed = 1;
  std::size_t runs = 3;
  double test_fraction = 0.1, valid_fraction = 0.1;
  ModelFlags model;
  TrainFlags train;
  DecodeFlags decode;
  bool quiet = false;
};

std::vector<AblationArm> select_arms(const std::string& spec) {
  const auto all = default_arms();
  if (spec.empty()) return all;
  std::vector<AblationArm> out;
  std::istringstream in(spec);
  std::string name;
  while (std::getline(in, name, ',')) {
    name = trim(name);
    const auto it = std::find_if(all.begin(), all.end(), [&](const auto& a) { return a.name == name; });
    if (it == all.end()) throw UsageError("unknown ablation arm '" + name + "'");
    out.push_back(*it);
  }
  if (out.empty()) throw UsageError("--arms selects nothing");
  return out;
}

int cmd_ablate(const Context& ctx, const AblateArgs& a, Clock::time_point start) {
  if (a.out_path.empty()) throw UsageError("--out is required");
  if (a.decode.greedy) throw UsageError("ablate always decodes with beam search; drop --greedy");
  a.decode.decode.validate();
  const auto arms = select_arms(a.arms);
  std::vector<RawDialog> corpus;
  std::vector<std::string> inputs;
  if (!a.data_path.empty()) {
    corpus = read_corpus("ablation corpus", a.data_path);
    inputs.push_back(a.data_path);
  } else {
    corpus = synth_corpus(a.seed, a.n, SynthConfig::defaults());
  }
  if (!a.embeddings.empty()) inputs.push_back(a.embeddings);
  auto md_path = a.markdown_out.empty() ? fs::path(a.out_path).replace_extension(".md").string() : a.markdown_out;
  check_outputs(inputs, {a.out_path, md_path});

  AblationConfig config;
  config.model = a.model.resolved(0);
  config.train = a.train.resolved();
  config.decode = a.decode.decode;
  config.runs = a.runs;
  config.test_fraction = a.test_fraction;
  config.valid_fraction = a.valid_fraction;
  config.vocab_cap = a.model.vocab_cap;
  config.char_level = a.model.char_level;
  config.train.validate();
  EmbeddingTable table;
  if (!a.embeddings.empty()) {
    require_file("embedding file", a.embeddings);
    table = load_input("embedding file " + a.embeddings, [&] { return EmbeddingTable::load(a.embeddings); });
    config.embeddings = &table;
  }

  auto progress = [&](const std::string& msg) {
    if (!a.quiet) ctx.err << msg << " (" << std::fixed << std::setprecision(0) << seconds_since(start) << " s)"
                          << std::defaultfloat << '\n';
  };
  const auto result = run_ablation(corpus, config, a.seed, arms, progress);
  auto j = result.to_json(config);
  j["corpus"] = a.data_path.empty() ? ojson({{"synthetic", true}, {"n", a.n}, {"seed", a.seed}})
                                    : ojson({{"path", a.data_path}, {"n", corpus.size()}});
  write_text(a.out_path, j.dump(2) + "\n");
  write_text(md_path, result.to_markdown());

  RunManifest manifest;
  manifest.command = "ablate";
  manifest.argv = ctx.argv;
  manifest.config = {{"model_config", to_json(config.model)},
                     {"train_config", to_json(config.train)},
                     {"decode", decode_json(a.decode)},
                     {"runs", a.runs},
                     {"test_fraction", a.test_fraction},
                     {"valid_fraction", a.valid_fraction},
                     {"vocab_cap", a.model.vocab_cap},
                     {"char_level", a.model.char_level},
                     {"arms", a.arms.empty() ? "all" : a.arms}};
  manifest.seed = a.seed;
  manifest.inputs = inputs;
  manifest.outputs = {a.out_path, md_path};
  manifest.duration_seconds = seconds_since(start);
  manifest.write(a.out_path);
  ctx.out << result.to_markdown();
  return kSuccess;
}

/// Expands `--config <file>` into `--key=value` tokens placed right after the
/// subcommand, so flags given on the command line (later) take precedence.
std::vector<std::string> expand_config(const std::vector<std::string>& args, CLI::App& app) {
  std::size_t sub_at = 0;
  CLI::App* sub = nullptr;
  for (std::size_t i = 1; i < args.size(); ++i) {
    if (!args[i].empty() && args[i][0] == '-') continue;
    sub = app.get_subcommand_no_throw(args[i]);
    sub_at = i;
    break;
  }
  if (!sub) return args;
  std::string config_path;
  for (std::size_t i = sub_at + 1; i < args.size(); ++i) {
    if (args[i] == "--config") {
      if (i + 1 >= args.size()) throw UsageError("--config needs a file");
      config_path = args[i + 1];
    } else if (args[i].rfind("--config=", 0) == 0) {
      config_path = args[i].substr(9);
    }
  }
  if (config_path.empty()) return args;
  if (!fs::is_regular_file(config_path)) throw UsageError("config file not found: " + config_path);
  std::vector<std::string> injected;
  for (const auto& [key, value] : read_flat_config(config_path)) {
    if (key == "config" || key == "help" || !sub->get_option_no_throw("--" + key)) {
      throw ConfigError(config_path + ": unknown key '" + key + "' for " + sub->get_name());
    }
    injected.push_back("--" + key + "=" + value);
  }
  std::vector<std::string> out(args.begin(), args.begin() + static_cast<std::ptrdiff_t>(sub_at + 1));
  out.insert(out.end(), injected.begin(), injected.end());
  out.insert(out.end(), args.begin() + static_cast<std::ptrdiff_t>(sub_at + 1), args.end());
  return out;
}

}  // namespace

int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  const auto start = Clock::now();
  const std::vector<std::string> args(argv, argv + argc);
  Context ctx{out, err, args};

  CLI::App app{"Memory-augmented dialog response generation with answer extraction"};
  app.name(args.empty() ? "mrg" : fs::path(args[0]).filename().string());
  app.require_subcommand(1);
  app.option_defaults()->multi_option_policy(CLI::MultiOptionPolicy::TakeLast);
  std::string config_file;
  auto add_config = [&](CLI::App* sub) {
    sub->add_option("--config", config_file, "Flat key = value file; flags given here override it");
  };

  std::uint64_t synth_seed = 1;
  std::size_t synth_n = 0;
  std::string synth_out;
  auto synth_config = SynthConfig::defaults();
  auto* synth = app.add_subcommand("synth", "Generate a synthetic dialog corpus (JSONL)");
  synth->add_option("--seed", synth_seed, "Random seed")->capture_default_str();
  synth->add_option("--n", synth_n, "Number of dialogs")->required();
  synth->add_option("--out", synth_out, "Output JSONL path")->required();
  synth->add_option("--diversity", synth_config.diversity, "Distinct entities drawn from the pool")
      ->capture_default_str();
  synth->add_option("--greeting-prob", synth_config.greeting_probability, "Probability of a greeting utterance")
      ->capture_default_str();
  synth->add_option("--mixture", synth_config.mixture, "Weights of paraphrasing,lexical-match,pragmatics")
      ->delimiter(',')
      ->expected(3);
  add_config(synth);

  TrainArgs train_args;
  auto* train = app.add_subcommand("train", "Train a model and keep the best validation checkpoint");
  train->add_option("--train", train_args.train_path, "Training corpus (JSONL)")->required();
  train->add_option("--valid", train_args.valid_path, "Validation corpus (JSONL)")->required();
  train->add_option("--out", train_args.out_path, "Best checkpoint path")->required();
  train->add_option("--vocab", train_args.vocab_path, "Existing vocabulary file instead of building one");
  train->add_option("--vocab-out", train_args.vocab_out, "Also write the vocabulary file here");
  train->add_option("--last-out", train_args.last_out, "Also write the final-step checkpoint here");
  train->add_option("--history", train_args.history_out, "Write validation history JSON here");
  train->add_option("--seed", train_args.train.train.seed, "Initialization and data-order seed")->capture_default_str();
  train->add_flag("--quiet", train_args.quiet, "No progress lines");
  add_model_options(train, train_args.model);
  add_train_options(train, train_args.train);
  add_config(train);

  EvalArgs eval_args;
  auto* eval = app.add_subcommand("eval", "Score a checkpoint on a test corpus");
  eval->add_option("--checkpoint", eval_args.checkpoint, "Checkpoint path")->required();
  eval->add_option("--test", eval_args.test_path, "Test corpus (JSONL)")->required();
  eval->add_option("--out", eval_args.out_path, "Report JSON path")->required();
  eval->add_option("--embeddings", eval_args.embeddings, "External embedding file for the BOW metrics");
  eval->add_flag("--corpus-bleu", eval_args.corpus_bleu, "Also report corpus-level BLEU");
  eval->add_option("--seed", eval_args.seed, "Recorded in the manifest; evaluation is deterministic")
      ->capture_default_str();
  add_decode_options(eval, eval_args.decode);
  add_config(eval);

  GenerateArgs gen_args;
  auto* generate = app.add_subcommand("generate", "Decode responses and answers for a corpus to JSONL");
  generate->add_option("--checkpoint", gen_args.checkpoint, "Checkpoint path")->required();
  generate->add_option("--input", gen_args.input_path, "Input corpus (JSONL)")->required();
  generate->add_option("--out", gen_args.out_path, "Output JSONL path")->required();
  generate->add_option("--seed", gen_args.seed, "Recorded in the manifest; decoding is deterministic")
      ->capture_default_str();
  add_decode_options(generate, gen_args.decode);
  add_config(generate);

  GradcheckArgs gc_args;
  auto* gradcheck = app.add_subcommand("gradcheck", "Finite-difference check of every op and model parameter");
  gradcheck->add_option("--seed", gc_args.seed, "Seed for inputs and parameters")->capture_default_str();
  gradcheck->add_option("--inject-fault", gc_args.inject_fault, "Corrupt the adjoint of this op (self-test)");
  gradcheck->add_option("--out", gc_args.out_path, "Report JSON path");
  gradcheck->add_option("--tolerance", gc_args.options.tolerance, "Max relative error")->capture_default_str();
  gradcheck->add_option("--step", gc_args.options.step, "Difference step for ops")->capture_default_str();
  gradcheck->add_option("--model-step", gc_args.options.model_step, "Difference step for model parameters")
      ->capture_default_str();
  gradcheck->add_flag("--skip-model", gc_args.skip_model, "Only check individual ops");
  gradcheck->add_flag("--skip-ops", gc_args.skip_ops, "Only check model parameters");
  add_config(gradcheck);

  AblateArgs ab_args;
  auto* ablate = app.add_subcommand("ablate", "Train and score every ablation arm over several seeds");
  ablate->add_option("--data", ab_args.data_path, "Corpus to split; synthesized from --seed and --n when absent");
  ablate->add_option("--n", ab_args.n, "Synthetic corpus size")->capture_default_str();
  ablate->add_option("--seed", ab_args.seed, "Seed for synthesis, the split, and the first run")
      ->capture_default_str();
  ablate->add_option("--runs", ab_args.runs, "Runs per arm (seeds seed, seed+1, ...)")->capture_default_str();
  ablate->add_option("--test-fraction", ab_args.test_fraction, "Held-out test share")->capture_default_str();
  ablate->add_option("--valid-fraction", ab_args.valid_fraction, "Validation share")->capture_default_str();
  ablate->add_option("--arms", ab_args.arms, "Comma-separated subset of arms");
  ablate->add_option("--embeddings", ab_args.embeddings, "External embedding file for the BOW metrics");
  ablate->add_option("--out", ab_args.out_path, "Report JSON path")->required();
  ablate->add_option("--markdown", ab_args.markdown_out, "Markdown tables path (default: --out with .md)");
  ablate->add_flag("--quiet", ab_args.quiet, "No progress lines");
  add_model_options(ablate, ab_args.model);
  add_train_options(ablate, ab_args.train);
  add_decode_options(ablate, ab_args.decode);
  add_config(ablate);

  try {
    const auto expanded = expand_config(args, app);
    std::vector<const char*> cargv;
    for (const auto& s : expanded) cargv.push_back(s.c_str());
    try {
      app.parse(static_cast<int>(cargv.size()), cargv.data());
    } catch (const CLI::CallForHelp&) {
      out << app.help(app.get_subcommands().empty() ? "" : app.get_subcommands()[0]->get_name());
      return kSuccess;
    } catch (const CLI::CallForAllHelp&) {
      out << app.help("", CLI::AppFormatMode::All);
      return kSuccess;
    } catch (const CLI::ParseError& e) {
      err << "error: " << e.what() << "\nrun with --help for usage\n";
      return kUsage;
    }

    if (synth->parsed()) return cmd_synth(ctx, synth_seed, synth_n, synth_out, synth_config, start);
    if (train->parsed()) return cmd_train(ctx, train_args, start);
    if (eval->parsed()) return cmd_eval(ctx, eval_args, start);
    if (generate->parsed()) return cmd_generate(ctx, gen_args, start);
    if (gradcheck->parsed()) return cmd_gradcheck(ctx, gc_args, start);
    if (ablate->parsed()) return cmd_ablate(ctx, ab_args, start);
    return kUsage;
  } catch (const UsageError& e) {
    err << "error: " << e.what() << '\n';
    return kUsage;
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << '\n';
    return kUsage;
  } catch (const DataError& e) {
    err << "data error: " << e.what() << '\n';
    return kUsage;
  } catch (const std::invalid_argument& e) {
    err << "invalid configuration: " << e.what() << '\n';
    return kUsage;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kFailure;
  }
}

}  // namespace mrg::cli
