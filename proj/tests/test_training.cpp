#include <cmath>
#include <limits>
#include <numeric>

#include "doctest.h"
#include "mrg/gradcheck.hpp"
#include "mrg/synth.hpp"
#include "mrg/train.hpp"
#include "support/checks.hpp"
#include "support/temp_dir.hpp"

using namespace mrg;
using checks::TensorD;

namespace {

struct Corpus {
  Vocabulary vocab;
  std::vector<DialogExample> train, valid;
  ModelConfig config;
};

Corpus tiny_corpus() {
  Corpus c;
  const auto raw = synth_corpus(3, 24, SynthConfig::defaults());
  c.vocab = build_vocab(raw, false);
  c.config.vocab_size = c.vocab.size();
  c.config.emb_dim = 8;
  c.config.hidden = 12;
  c.config.layers = 1;
  c.config.heads = 2;
  c.config.answer_hidden = 8;
  for (std::size_t i = 0; i < raw.size(); ++i)
    (i < 16 ? c.train : c.valid).push_back(preprocess(raw[i], c.vocab, c.config.layout, false));
  return c;
}

TrainConfig short_run(std::size_t steps) {
  TrainConfig t;
  t.batch_size = 4;
  t.steps = steps;
  t.eval_interval = 2;
  t.seed = 11;
  return t;
}

/// One scalar parameter whose gradient is exactly `g` after backward.
void backward_with(ParamStore<double>& params, const TensorD& theta, double g) {
  params.zero_grad();
  sum(scale(theta, g)).backward();
}

}  // namespace

TEST_SUITE("training") {
  TEST_CASE("adagrad: large gradients are clamped before the accumulator update") {
    ParamStore<double> params;
    const auto theta = params.add("theta", {1, 1}, Init::constant(0.0));
    params.initialize(1, 0.1);
    Adagrad<double> opt(params, 0.1, 0.0, 2.0);
    backward_with(params, theta, 5.0);
    opt.step();
    CHECK(opt.accumulators()[0][0] == 4.0);
    CHECK(theta.at(0) == -0.1 * 2.0 / (2.0 + 1e-8));
  }

  TEST_CASE("adagrad: zero gradient changes nothing") {
    ParamStore<double> params;
    const auto theta = params.add("theta", {1, 2}, Init::constant(0.7));
    params.initialize(1, 0.1);
    Adagrad<double> opt(params, 0.1, 0.1, 2.0);
    backward_with(params, theta, 0.0);
    opt.step();
    CHECK(checks::values(theta) == std::vector<double>{0.7, 0.7});
    CHECK(opt.accumulators()[0] == std::vector<double>{0.1, 0.1});
  }

  TEST_CASE("adagrad: two unit-gradient steps follow the closed form") {
    ParamStore<double> params;
    const auto theta = params.add("theta", {1, 1}, Init::constant(1.0));
    params.initialize(1, 0.1);
    Adagrad<double> opt(params, 0.1, 0.0, 2.0);
    backward_with(params, theta, 1.0);
    opt.step();
    const double after_one = 1.0 - 0.1 / (1.0 + 1e-8);
    CHECK(theta.at(0) == after_one);
    backward_with(params, theta, 1.0);
    opt.step();
    CHECK(theta.at(0) == doctest::Approx(after_one - 0.1 / (std::sqrt(2.0) + 1e-8)).epsilon(1e-15));
    CHECK(opt.accumulators()[0][0] == 2.0);
  }

  TEST_CASE("adagrad: a non-finite gradient aborts with the parameter name and updates nothing") {
    ParamStore<double> params;
    const auto a = params.add("layer.ok", {1, 1}, Init::constant(1.0));
    const auto b = params.add("layer.bad", {1, 1}, Init::constant(1.0));
    params.initialize(1, 0.1);
    Adagrad<double> opt(params, 0.1, 0.1, 2.0);
    params.zero_grad();
    sum(add(a, scale(b, std::numeric_limits<double>::quiet_NaN()))).backward();
    try {
      opt.step();
      FAIL("expected TrainingError");
    } catch (const TrainingError& e) {
      CHECK(std::string(e.what()).find("layer.bad") != std::string::npos);
    }
    CHECK(a.at(0) == 1.0);
    CHECK(opt.accumulators()[0][0] == 0.1);
  }

  TEST_CASE("adagrad: accumulators never decrease and steps stay within the clipped bound") {
    ParamStore<double> params;
    const auto theta = params.add("theta", {1, 8});
    params.initialize(4, 1.0);
    Adagrad<double> opt(params, 0.5, 0.1, 2.0);
    std::mt19937_64 rng(4);
    for (int step = 0; step < 50; ++step) {
      const auto before = opt.accumulators()[0];
      const auto values_before = checks::values(theta);
      const auto g = checks::random_matrix(rng, 1, 8, 5.0);
      params.zero_grad();
      sum(mul(theta, g)).backward();
      opt.step();
      for (std::size_t i = 0; i < 8; ++i) {
        const double clipped = std::clamp(g.at(i), -2.0, 2.0);
        CHECK(opt.accumulators()[0][i] >= before[i]);
        CHECK(opt.accumulators()[0][i] - before[i] == doctest::Approx(clipped * clipped));
        CHECK(std::abs(theta.at(i) - values_before[i]) <= 0.5 * 2.0 / std::sqrt(before[i] + 4.0) + 1e-12);
      }
    }
  }

  TEST_CASE("uniform output distribution costs ln V per token") {
    const auto config = checks::small_config(24);
    MrgModel<double> model(config);
    checks::randomize(model.params(), 2, 0.3);
    checks::fill(model.decoder().w_v(), 0.0);
    checks::fill(model.decoder().b_v(), 0.0);
    std::mt19937_64 rng(2);
    const auto ex = checks::random_example(rng, config);
    const auto parts = model.loss(ex, TaskMode::ResponseOnly, 1.0);
    CHECK(parts.response_tokens == ex.response.size() + 1);
    CHECK(parts.response_nll / parts.response_tokens == doctest::Approx(std::log(24.0)).epsilon(1e-12));
    CHECK(parts.answer_bce == 0.0);
  }

  TEST_CASE("joint loss is the response NLL plus the weighted answer BCE") {
    const auto config = checks::small_config(24);
    MrgModel<double> model(config);
    checks::randomize(model.params(), 3, 0.3);
    std::mt19937_64 rng(3);
    const auto ex = checks::random_example(rng, config);
    const auto joint = model.loss(ex, TaskMode::Joint, 0.7);
    CHECK(joint.total.item() == doctest::Approx(joint.response_nll + 0.7 * joint.answer_bce).epsilon(1e-12));
    const auto ans = model.loss(ex, TaskMode::AnswerOnly, 0.7);
    CHECK(ans.response_nll == 0.0);
    CHECK(ans.answer_bce == doctest::Approx(joint.answer_bce).epsilon(1e-14));
  }

  TEST_CASE("joint loss gradients match central differences for every parameter") {
    GradcheckOptions options;
    options.operations = false;
    const auto report = run_gradcheck(2, options);
    CHECK(report.entries.size() > 20);
    for (const auto& e : report.entries) {
      INFO(e.name << " " << e.max_rel_error);
      CHECK(e.passed);
    }
  }

  TEST_CASE("shuffled order is a permutation and depends on the seed") {
    std::mt19937_64 a(1), b(1), c(2);
    auto x = shuffled_order(50, a), y = shuffled_order(50, b), z = shuffled_order(50, c);
    CHECK(x == y);
    CHECK(x != z);
    std::sort(x.begin(), x.end());
    std::vector<std::size_t> iota(50);
    std::iota(iota.begin(), iota.end(), 0);
    CHECK(x == iota);
  }

  TEST_CASE("zero steps keep the Gaussian initialization") {
    const auto c = tiny_corpus();
    const auto t = short_run(0);
    const auto result = train_loop(t, c.config, c.vocab, c.train, c.valid);
    MrgModel<float> fresh(c.config);
    fresh.initialize(t.seed, t.init_std);
    for (const auto& e : fresh.params().entries()) {
      const auto* stored = result.best.find(e.name);
      REQUIRE(stored != nullptr);
      CHECK(stored->values == std::vector<float>(e.tensor.values().begin(), e.tensor.values().end()));
    }
    CHECK(result.best.step == 0);
  }

  TEST_CASE("same seed twice gives byte-identical checkpoints; best is the validation minimum") {
    const auto c = tiny_corpus();
    const auto t = short_run(8);
    const auto a = train_loop(t, c.config, c.vocab, c.train, c.valid);
    const auto b = train_loop(t, c.config, c.vocab, c.train, c.valid);
    CHECK(a.best.serialize() == b.best.serialize());
    CHECK(a.last.serialize() == b.last.serialize());
    REQUIRE(a.history.size() >= 4);
    for (const auto& p : a.history) CHECK(a.best.val_loss <= p.validation.loss);
    CHECK(a.last.step == 8);
    auto other = t;
    other.seed = 12;
    CHECK(train_loop(other, c.config, c.vocab, c.train, c.valid).last.serialize() != a.last.serialize());
  }

  TEST_CASE("with zero answer weight, joint training follows the response-only trajectory") {
    const auto c = tiny_corpus();
    auto joint = short_run(6);
    joint.answer_weight = 0.0;
    auto single = joint;
    single.mode = TaskMode::ResponseOnly;
    const auto a = train_loop(joint, c.config, c.vocab, c.train, c.valid);
    const auto b = train_loop(single, c.config, c.vocab, c.train, c.valid);
    REQUIRE(a.last.tensors.size() == b.last.tensors.size());
    for (std::size_t i = 0; i < a.last.tensors.size(); ++i) {
      INFO(a.last.tensors[i].name);
      CHECK(a.last.tensors[i] == b.last.tensors[i]);
    }
  }

  TEST_CASE("checkpoint round trip reproduces forward outputs bit for bit") {
    const auto c = tiny_corpus();
    const auto result = train_loop(short_run(4), c.config, c.vocab, c.train, c.valid);
    TempDir dir;
    result.last.save(dir.path / "model.ckpt");
    const auto loaded = Checkpoint::load(dir.path / "model.ckpt");
    CHECK(loaded.serialize() == result.last.serialize());
    CHECK(loaded.tensors == result.last.tensors);
    CHECK(loaded.vocab == c.vocab.tokens());
    CHECK(loaded.step == 4);
    CHECK(loaded.find("adagrad/embedding") != nullptr);

    const auto original = model_from_checkpoint(result.last);
    const auto restored = model_from_checkpoint(loaded);
    for (const auto& ex : c.valid) {
      const auto a = original->loss(ex, TaskMode::Joint, 1.0);
      const auto b = restored->loss(ex, TaskMode::Joint, 1.0);
      CHECK(a.total.item() == b.total.item());
      const auto la = original->answer_logits(original->encode(ex));
      const auto lb = restored->answer_logits(restored->encode(ex));
      CHECK(std::equal(la.values().begin(), la.values().end(), lb.values().begin()));
    }
  }

  TEST_CASE("checkpoint file layout") {
    const auto c = tiny_corpus();
    const auto result = train_loop(short_run(0), c.config, c.vocab, c.train, c.valid);
    const auto bytes = result.best.serialize();
    REQUIRE(bytes.size() > 20);
    CHECK(std::string(reinterpret_cast<const char*>(bytes.data()), 8) == std::string("MRGCKPT\0", 8));
    CHECK(bytes[8] == 1);
    std::uint64_t header_len = 0;
    for (int i = 0; i < 8; ++i) header_len |= std::uint64_t(bytes[12 + i]) << (8 * i);
    const auto header = nlohmann::json::parse(bytes.begin() + 20, bytes.begin() + 20 + static_cast<long>(header_len));
    CHECK(header["format_version"] == 1);
    CHECK(header["tensors"][0]["dtype"] == "float32");
    CHECK(header.contains("model_config"));
    CHECK(header.contains("train_config"));
    std::size_t payload = 0;
    for (const auto& t : header["tensors"]) payload += 4 * shape_size(t["shape"].get<Shape>());
    CHECK(bytes.size() == 20 + header_len + payload);

    auto corrupt = bytes;
    corrupt[0] = 'X';
    CHECK_THROWS_AS(Checkpoint::deserialize(corrupt), CheckpointError);
    CHECK_THROWS_AS(Checkpoint::deserialize(std::span(bytes).first(bytes.size() - 1)), CheckpointError);
  }

  TEST_CASE("invalid training configs are rejected") {
    TrainConfig t;
    t.batch_size = 0;
    CHECK_THROWS(t.validate());
    t = TrainConfig{};
    t.lr = -1;
    CHECK_THROWS(t.validate());
    t = TrainConfig{};
    CHECK(t.batch_size == 16);
    CHECK(t.clip == 2.0);
    CHECK(t.answer_weight == 1.0);
    CHECK(t.init_std == 0.1);
  }
}
