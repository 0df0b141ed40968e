#include "mrg/train.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>

namespace mrg {

void TrainConfig::validate() const {
  if (batch_size == 0) throw std::invalid_argument("batch_size must be positive");
  if (eval_interval == 0) throw std::invalid_argument("eval_interval must be positive");
  if (!(lr > 0.0)) throw std::invalid_argument("lr must be positive");
  if (!(adagrad_init_acc >= 0.0)) throw std::invalid_argument("adagrad_init_acc must be non-negative");
  if (!(clip > 0.0)) throw std::invalid_argument("clip must be positive");
  if (!(answer_weight >= 0.0)) throw std::invalid_argument("answer_weight must be non-negative");
  if (!(init_std > 0.0)) throw std::invalid_argument("init_std must be positive");
}

nlohmann::ordered_json to_json(const ModelConfig& c) {
  nlohmann::ordered_json j;
  j["vocab_size"] = c.vocab_size;
  j["emb_dim"] = c.emb_dim;
  j["hidden"] = c.hidden;
  j["layers"] = c.layers;
  j["heads"] = c.heads;
  j["word_mam_layers"] = c.word_mam_layers;
  j["answer_hidden"] = c.answer_hidden;
  j["max_utterances"] = c.layout.max_utterances;
  j["max_utterance_len"] = c.layout.max_utterance_len;
  j["max_question_len"] = c.layout.max_question_len;
  j["max_response_len"] = c.layout.max_response_len;
  j["use_mcam"] = c.use_mcam;
  j["use_mam"] = c.use_mam;
  j["use_memupd"] = c.use_memupd;
  j["learned_initial_memory"] = c.learned_initial_memory;
  j["ln_eps"] = c.ln_eps;
  return j;
}

nlohmann::ordered_json to_json(const TrainConfig& c) {
  nlohmann::ordered_json j;
  j["batch_size"] = c.batch_size;
  j["steps"] = c.steps;
  j["eval_interval"] = c.eval_interval;
  j["lr"] = c.lr;
  j["adagrad_init_acc"] = c.adagrad_init_acc;
  j["clip"] = c.clip;
  j["answer_weight"] = c.answer_weight;
  j["mode"] = to_string(c.mode);
  j["seed"] = c.seed;
  j["init_std"] = c.init_std;
  return j;
}

ModelConfig model_config_from_json(const nlohmann::json& j) {
  ModelConfig c;
  c.vocab_size = j.at("vocab_size").get<std::size_t>();
  c.emb_dim = j.at("emb_dim").get<std::size_t>();
  c.hidden = j.at("hidden").get<std::size_t>();
  c.layers = j.at("layers").get<std::size_t>();
  c.heads = j.at("heads").get<std::size_t>();
  c.word_mam_layers = j.at("word_mam_layers").get<std::size_t>();
  c.answer_hidden = j.at("answer_hidden").get<std::size_t>();
  c.layout.max_utterances = j.at("max_utterances").get<std::size_t>();
  c.layout.max_utterance_len = j.at("max_utterance_len").get<std::size_t>();
  c.layout.max_question_len = j.at("max_question_len").get<std::size_t>();
  c.layout.max_response_len = j.at("max_response_len").get<std::size_t>();
  c.use_mcam = j.at("use_mcam").get<bool>();
  c.use_mam = j.at("use_mam").get<bool>();
  c.use_memupd = j.at("use_memupd").get<bool>();
  c.learned_initial_memory = j.at("learned_initial_memory").get<bool>();
  c.ln_eps = j.at("ln_eps").get<double>();
  return c;
}

TrainConfig train_config_from_json(const nlohmann::json& j) {
  TrainConfig c;
  c.batch_size = j.at("batch_size").get<std::size_t>();
  c.steps = j.at("steps").get<std::size_t>();
  c.eval_interval = j.at("eval_interval").get<std::size_t>();
  c.lr = j.at("lr").get<double>();
  c.adagrad_init_acc = j.at("adagrad_init_acc").get<double>();
  c.clip = j.at("clip").get<double>();
  c.answer_weight = j.at("answer_weight").get<double>();
  c.mode = parse_task_mode(j.at("mode").get<std::string>());
  c.seed = j.at("seed").get<std::uint64_t>();
  c.init_std = j.at("init_std").get<double>();
  return c;
}

// ---- optimizer -------------------------------------------------------------

template <typename T>
Adagrad<T>::Adagrad(ParamStore<T>& params, double lr, double init_acc, double clip)
    : params_(params), lr_(lr), clip_(clip) {
  for (const auto& e : params_.entries()) acc_.emplace_back(e.tensor.size(), static_cast<T>(init_acc));
}

template <typename T>
void Adagrad<T>::step() {
  auto& entries = params_.entries();
  for (const auto& e : entries) {
    if (!e.tensor.has_grad()) continue;
    for (T g : e.tensor.grad()) {
      if (!std::isfinite(static_cast<double>(g))) throw TrainingError("non-finite gradient in parameter " + e.name);
    }
  }
  const T lo = static_cast<T>(-clip_), hi = static_cast<T>(clip_);
  const T lr = static_cast<T>(lr_), eps = static_cast<T>(kEpsilon);
  for (std::size_t p = 0; p < entries.size(); ++p) {
    auto& t = entries[p].tensor;
    if (!t.has_grad()) continue;
    auto values = t.mutable_values();
    const auto grad = t.grad();
    auto& acc = acc_[p];
    for (std::size_t i = 0; i < values.size(); ++i) {
      const T g = std::clamp(grad[i], lo, hi);
      if (g == T(0)) continue;
      acc[i] += g * g;
      values[i] -= lr * g / (std::sqrt(acc[i]) + eps);
    }
  }
}

template class Adagrad<float>;
template class Adagrad<double>;

// ---- checkpoint ------------------------------------------------------------

namespace {

template <typename U>
void put_le(std::vector<std::uint8_t>& out, U v) {
  for (std::size_t i = 0; i < sizeof(U); ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

template <typename U>
U get_le(std::span<const std::uint8_t> bytes, std::size_t at) {
  if (at + sizeof(U) > bytes.size()) throw CheckpointError("checkpoint truncated");
  U v = 0;
  for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<U>(bytes[at + i]) << (8 * i);
  return v;
}

std::string accumulator_name(const std::string& param) { return "adagrad/" + param; }

}  // namespace

std::vector<std::uint8_t> Checkpoint::serialize() const {
  nlohmann::ordered_json header;
  header["format_version"] = kVersion;
  header["step"] = step;
  header["val_loss"] = std::isfinite(val_loss) ? nlohmann::ordered_json(val_loss) : nlohmann::ordered_json(nullptr);
  header["model_config"] = to_json(model);
  header["train_config"] = to_json(train);
  header["vocab"] = vocab;
  header["char_level"] = char_level;
  auto& list = header["tensors"] = nlohmann::ordered_json::array();
  std::size_t offset = 0;
  for (const auto& t : tensors) {
    if (shape_size(t.shape) != t.values.size()) throw CheckpointError("tensor " + t.name + " shape/value mismatch");
    list.push_back({{"name", t.name}, {"dtype", "float32"}, {"shape", t.shape}, {"offset", offset}});
    offset += t.values.size() * sizeof(float);
  }
  const std::string text = header.dump();

  std::vector<std::uint8_t> out(std::begin(kMagic), std::end(kMagic));
  put_le<std::uint32_t>(out, kVersion);
  put_le<std::uint64_t>(out, text.size());
  out.insert(out.end(), text.begin(), text.end());
  out.reserve(out.size() + offset);
  for (const auto& t : tensors)
    for (float v : t.values) put_le<std::uint32_t>(out, std::bit_cast<std::uint32_t>(v));
  return out;
}

Checkpoint Checkpoint::deserialize(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < sizeof(kMagic) || std::memcmp(bytes.data(), kMagic, sizeof(kMagic)) != 0) {
    throw CheckpointError("not a checkpoint (bad magic)");
  }
  const auto version = get_le<std::uint32_t>(bytes, 8);
  if (version != kVersion) throw CheckpointError("unsupported checkpoint version " + std::to_string(version));
  const auto header_len = get_le<std::uint64_t>(bytes, 12);
  const std::size_t header_at = 20;
  if (header_at + header_len > bytes.size()) throw CheckpointError("checkpoint header truncated");
  const auto payload = bytes.subspan(header_at + header_len);

  Checkpoint c;
  try {
    const auto header = nlohmann::json::parse(bytes.begin() + header_at, bytes.begin() + header_at + header_len);
    c.step = header.at("step").get<std::size_t>();
    c.val_loss = header.at("val_loss").is_null() ? std::numeric_limits<double>::quiet_NaN()
                                                 : header.at("val_loss").get<double>();
    c.model = model_config_from_json(header.at("model_config"));
    c.train = train_config_from_json(header.at("train_config"));
    c.vocab = header.at("vocab").get<std::vector<std::string>>();
    c.char_level = header.value("char_level", false);
    for (const auto& entry : header.at("tensors")) {
      if (entry.at("dtype").get<std::string>() != "float32") throw CheckpointError("unsupported dtype");
      NamedTensor t;
      t.name = entry.at("name").get<std::string>();
      t.shape = entry.at("shape").get<Shape>();
      const auto offset = entry.at("offset").get<std::size_t>();
      const auto count = shape_size(t.shape);
      if (offset + count * sizeof(float) > payload.size()) throw CheckpointError("tensor " + t.name + " out of range");
      t.values.resize(count);
      for (std::size_t i = 0; i < count; ++i) {
        t.values[i] = std::bit_cast<float>(get_le<std::uint32_t>(payload, offset + i * sizeof(float)));
      }
      c.tensors.push_back(std::move(t));
    }
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(std::string("malformed checkpoint header: ") + e.what());
  } catch (const std::invalid_argument& e) {
    throw CheckpointError(std::string("malformed checkpoint header: ") + e.what());
  }
  return c;
}

void Checkpoint::save(const std::filesystem::path& path) const {
  const auto bytes = serialize();
  std::ofstream out(path, std::ios::binary);
  if (!out) throw CheckpointError("cannot write checkpoint " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw CheckpointError("failed writing checkpoint " + path.string());
}

Checkpoint Checkpoint::load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot open checkpoint " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return deserialize(bytes);
}

const NamedTensor* Checkpoint::find(std::string_view name) const {
  for (const auto& t : tensors)
    if (t.name == name) return &t;
  return nullptr;
}

Checkpoint snapshot(const MrgModel<float>& model, const Adagrad<float>* optimizer, const TrainConfig& train,
                    const Vocabulary& vocab, std::size_t step, double val_loss) {
  Checkpoint c;
  c.model = model.config();
  c.train = train;
  c.vocab = vocab.tokens();
  c.step = step;
  c.val_loss = val_loss;
  const auto& entries = model.params().entries();
  for (const auto& e : entries) {
    const auto v = e.tensor.values();
    c.tensors.push_back({e.name, e.tensor.shape(), std::vector<float>(v.begin(), v.end())});
  }
  if (optimizer) {
    for (std::size_t p = 0; p < entries.size(); ++p) {
      c.tensors.push_back({accumulator_name(entries[p].name), entries[p].tensor.shape(), optimizer->accumulators()[p]});
    }
  }
  return c;
}

void restore(const Checkpoint& checkpoint, MrgModel<float>& model, Adagrad<float>* optimizer) {
  auto& entries = model.params().entries();
  for (std::size_t p = 0; p < entries.size(); ++p) {
    auto& e = entries[p];
    const auto* t = checkpoint.find(e.name);
    if (!t) throw CheckpointError("checkpoint lacks parameter " + e.name);
    if (t->shape != e.tensor.shape()) {
      throw CheckpointError("parameter " + e.name + " has shape " + shape_string(t->shape) + ", model expects " +
                            shape_string(e.tensor.shape()));
    }
    std::copy(t->values.begin(), t->values.end(), e.tensor.mutable_values().begin());
    if (optimizer) {
      const auto* a = checkpoint.find(accumulator_name(e.name));
      if (!a) throw CheckpointError("checkpoint lacks optimizer state for " + e.name);
      optimizer->accumulators()[p] = a->values;
    }
  }
}

std::unique_ptr<MrgModel<float>> model_from_checkpoint(const Checkpoint& checkpoint) {
  auto model = std::make_unique<MrgModel<float>>(checkpoint.model);
  restore(checkpoint, *model);
  return model;
}

// ---- training loop ---------------------------------------------------------

template <typename T>
LossSummary evaluate_loss(const MrgModel<T>& model, const std::vector<DialogExample>& examples, TaskMode mode,
                          double answer_weight) {
  NoGradGuard no_grad;
  LossSummary s;
  double nll = 0.0, bce = 0.0, total = 0.0;
  std::size_t tokens = 0;
  for (const auto& ex : examples) {
    const auto parts = model.loss(ex, mode, answer_weight);
    total += static_cast<double>(parts.total.item());
    nll += parts.response_nll;
    tokens += parts.response_tokens;
    bce += parts.answer_bce;
  }
  s.examples = examples.size();
  if (!examples.empty()) {
    s.loss = total / static_cast<double>(examples.size());
    s.answer_bce = bce / static_cast<double>(examples.size());
  }
  s.nll_per_token = tokens ? nll / static_cast<double>(tokens) : 0.0;
  return s;
}

template LossSummary evaluate_loss(const MrgModel<float>&, const std::vector<DialogExample>&, TaskMode, double);
template LossSummary evaluate_loss(const MrgModel<double>&, const std::vector<DialogExample>&, TaskMode, double);

std::vector<std::size_t> shuffled_order(std::size_t n, std::mt19937_64& rng) {
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  for (std::size_t i = n; i > 1; --i) std::swap(order[i - 1], order[rng() % i]);
  return order;
}

TrainResult train_loop(const TrainConfig& train, const ModelConfig& model_config, const Vocabulary& vocab,
                       const std::vector<DialogExample>& train_set, const std::vector<DialogExample>& valid_set,
                       const EvalObserver& observer) {
  train.validate();
  if (train_set.empty()) throw std::invalid_argument("training corpus is empty");
  if (valid_set.empty()) throw std::invalid_argument("validation corpus is empty");
  if (model_config.vocab_size != vocab.size()) throw std::invalid_argument("model vocab_size differs from vocabulary");

  MrgModel<float> model(model_config);
  model.initialize(train.seed, train.init_std);
  Adagrad<float> optimizer(model.params(), train.lr, train.adagrad_init_acc, train.clip);
  std::mt19937_64 order_rng(train.seed ^ 0x9e3779b97f4a7c15ULL);
  std::vector<std::size_t> order;
  std::size_t cursor = 0;

  TrainResult result;
  double batch_loss_sum = 0.0;
  std::size_t batches_since_eval = 0;
  auto evaluate = [&](std::size_t step) {
    EvalPoint point;
    point.step = step;
    point.train_loss = batches_since_eval ? batch_loss_sum / static_cast<double>(batches_since_eval) : 0.0;
    point.validation = evaluate_loss(model, valid_set, train.mode, train.answer_weight);
    batch_loss_sum = 0.0;
    batches_since_eval = 0;
    result.history.push_back(point);
    if (result.history.size() == 1 || point.validation.loss < result.best.val_loss) {
      result.best = snapshot(model, &optimizer, train, vocab, step, point.validation.loss);
    }
    if (observer) observer(point);
  };

  evaluate(0);
  const float inv_batch = 1.0f / static_cast<float>(train.batch_size);
  for (std::size_t step = 1; step <= train.steps; ++step) {
    model.params().zero_grad();
    double batch_loss = 0.0;
    for (std::size_t b = 0; b < train.batch_size; ++b) {
      if (cursor == order.size()) {
        order = shuffled_order(train_set.size(), order_rng);
        cursor = 0;
      }
      const auto parts = model.loss(train_set[order[cursor++]], train.mode, train.answer_weight);
      batch_loss += static_cast<double>(parts.total.item());
      scale(parts.total, inv_batch).backward();
    }
    optimizer.step();
    batch_loss_sum += batch_loss / static_cast<double>(train.batch_size);
    ++batches_since_eval;
    if (step % train.eval_interval == 0 || step == train.steps) evaluate(step);
  }
  result.last = snapshot(model, &optimizer, train, vocab, train.steps, result.history.back().validation.loss);
  return result;
}

}  // namespace mrg
