#include "checks.hpp"

#include <algorithm>
#include <cmath>

#include "mrg/encoder.hpp"
#include "mrg/gradcheck.hpp"
#include "mrg/hier_attn.hpp"
#include "mrg/trace.hpp"

namespace checks {

using namespace mrg;
using oracle::Mat;
using oracle::max_abs_diff;

Mat to_mat(const TensorD& t) {
  const auto v = t.values();
  const std::size_t rows = t.rank() == 2 ? t.rows() : 1;
  return Mat(rows, t.size() / rows, std::vector<double>(v.begin(), v.end()));
}

oracle::CamParams cam_params(const MultiHeadAttention<double>& a) {
  return {to_mat(a.w_query()), to_mat(a.w_key()),     to_mat(a.w_value()), to_mat(a.w_out()),
          to_mat(a.ln_gain()), to_mat(a.ln_bias()), a.heads(),           static_cast<double>(a.ln_eps())};
}

oracle::UpdaterParams updater_params(const MemoryUpdater<double>& u) {
  return {cam_params(u.attention()), to_mat(u.w_a()), to_mat(u.w_b()), to_mat(u.w_c()), to_mat(u.w_d())};
}

oracle::DecoderParams decoder_params(const ResponseDecoder<double>& d, const Embedding<double>& e) {
  oracle::DecoderParams p;
  p.embedding = to_mat(e.table());
  p.w_g = to_mat(d.w_g());
  p.b_g = to_mat(d.b_g());
  p.lstm = {to_mat(d.cell().input_weights()), to_mat(d.cell().recurrent_weights()), to_mat(d.cell().bias())};
  p.w_s = to_mat(d.w_s());
  p.w_h = to_mat(d.w_h());
  p.w_n = to_mat(d.w_n());
  p.w_v = to_mat(d.w_v());
  p.b_v = to_mat(d.b_v());
  return p;
}

void randomize(ParamStore<double>& params, std::uint64_t seed, double stddev) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, stddev);
  for (auto& e : params.entries()) {
    const bool gain = e.name.size() >= 5 && e.name.compare(e.name.size() - 5, 5, ".gain") == 0;
    for (auto& v : e.tensor.mutable_values()) v = (gain ? 1.0 : 0.0) + normal(rng);
  }
}

TensorD random_matrix(std::mt19937_64& rng, std::size_t rows, std::size_t cols, double stddev) {
  std::normal_distribution<double> normal(0.0, stddev);
  std::vector<double> v(rows * cols);
  for (auto& x : v) x = normal(rng);
  return TensorD::from({rows, cols}, std::move(v));
}

Mask prefix_mask(std::size_t size, std::size_t real) {
  Mask m(size, 0);
  std::fill_n(m.begin(), std::min(size, real), 1);
  return m;
}

namespace {

std::size_t draw(std::mt19937_64& rng, std::size_t lo, std::size_t hi) { return lo + rng() % (hi - lo + 1); }

/// `t` with `extra` rows of large garbage appended.
TensorD pad_rows(std::mt19937_64& rng, const TensorD& t, std::size_t extra) {
  return concat({t, random_matrix(rng, extra, t.cols(), 10.0)}, 0);
}

double rows_diff(const TensorD& a, const TensorD& b, std::size_t rows) {
  double m = 0.0;
  const auto n = a.cols();
  for (std::size_t i = 0; i < rows * n; ++i) m = std::max(m, std::abs(a.values()[i] - b.values()[i]));
  return m;
}

double rows_abs(const TensorD& a, std::size_t from) {
  double m = 0.0;
  for (std::size_t i = from * a.cols(); i < a.size(); ++i) m = std::max(m, std::abs(a.values()[i]));
  return m;
}

double masked_rows_abs(const TensorD& a, const Mask& mask) {
  double m = 0.0;
  for (std::size_t r = 0; r < mask.size(); ++r)
    if (!mask[r])
      for (std::size_t c = 0; c < a.cols(); ++c) m = std::max(m, std::abs(a.at(r, c)));
  return m;
}

Mask random_prefix(std::mt19937_64& rng, std::size_t size) { return prefix_mask(size, draw(rng, 1, size)); }

}  // namespace

double cam_oracle_error(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  const std::size_t heads = seed % 2 == 0 ? 2 : 4, dim = 8;
  ParamStore<double> params;
  MultiHeadAttention<double> cam(params, "cam", dim, heads);
  randomize(params, seed, 0.5);
  const auto q = random_matrix(rng, draw(rng, 1, 5), dim);
  const auto kv = random_matrix(rng, draw(rng, 1, 6), dim);
  const auto mask = random_prefix(rng, kv.rows());

  const auto r = cam.forward(q, kv, mask);
  const auto o = oracle::cam(to_mat(q), to_mat(kv), mask, cam_params(cam));
  double err = std::max(max_abs_diff(to_mat(r.output), o.output), max_abs_diff(to_mat(r.attended), o.attended));
  for (std::size_t h = 0; h < heads; ++h) err = std::max(err, max_abs_diff(to_mat(r.weights[h]), o.alpha[h]));
  return err;
}

double updater_oracle_error(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  const std::size_t dim = 8, rows = draw(rng, 1, 6);
  ParamStore<double> params;
  MemoryUpdater<double> upd(params, "upd", dim, 2);
  randomize(params, seed, 0.5);
  const auto m = random_matrix(rng, rows, dim);
  const auto mhat = random_matrix(rng, rows, dim);
  const auto m_mask = random_prefix(rng, rows);
  const auto mhat_mask = random_prefix(rng, rows);

  const auto r = upd.forward(m, m_mask, mhat, mhat_mask);
  const auto o = oracle::memory_update(to_mat(m), m_mask, to_mat(mhat), mhat_mask, updater_params(upd));
  return std::max({max_abs_diff(to_mat(r.s), o.s), max_abs_diff(to_mat(r.c), o.c), max_abs_diff(to_mat(r.z), o.z),
                   max_abs_diff(to_mat(r.n), o.n)});
}

double mcam_stack_oracle_error(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  const std::size_t dim = 8, slots = 6, width = draw(rng, 2, slots), utterances = draw(rng, 1, 4);
  double err = 0.0;
  for (bool memory_updater : {true, false}) {
    ParamStore<double> params;
    McamStack<double> stack(params, "mcam", dim, slots, McamOptions{2, 2, memory_updater, false});
    randomize(params, seed, 0.5);
    std::vector<TensorD> utts;
    std::vector<Mask> masks;
    std::vector<Mat> utt_mats;
    for (std::size_t j = 0; j < utterances; ++j) {
      masks.push_back(random_prefix(rng, width));
      utts.push_back(mul(random_matrix(rng, width, dim), row_mask<double>(masks.back(), dim)));
      utt_mats.push_back(to_mat(utts.back()));
    }
    const auto question = random_matrix(rng, draw(rng, 1, 5), dim);
    const auto q_mask = random_prefix(rng, question.rows());

    const auto out = stack.forward(utts, masks, question, q_mask);
    std::vector<oracle::McamLayerParams> layers;
    for (const auto& l : stack.layers()) layers.push_back({updater_params(l.updater), cam_params(l.cam)});
    const auto expected = oracle::mcam_stack(utt_mats, masks, to_mat(question), q_mask, layers, memory_updater);
    for (std::size_t j = 0; j < utterances; ++j) err = std::max(err, max_abs_diff(to_mat(out[j]), expected[j]));
  }
  return err;
}

double decoder_oracle_error(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  const std::size_t vocab = 11, emb_dim = 6, dim = 8, slots = 5;
  ParamStore<double> params;
  Embedding<double> embedding(params, "emb", vocab, emb_dim);
  ResponseDecoder<double> decoder(params, "dec", embedding, dim, vocab);
  randomize(params, seed, 0.5);
  const auto mask = random_prefix(rng, slots);
  const auto hu = mul(random_matrix(rng, slots, dim), row_mask<double>(mask, dim));
  const auto hd = random_matrix(rng, 1, dim);
  std::vector<TokenId> targets(draw(rng, 1, 6));
  for (auto& t : targets) t = draw(rng, Vocabulary::kReserved, vocab - 1);

  ForwardTrace<double> trace;
  const auto memory = decoder.prepare(hu, mask);
  const double nll = decoder.nll(memory, hd, targets, &trace).item();
  const auto hd_values = hd.values();
  const auto run = oracle::decode(to_mat(hu), mask, std::vector<double>(hd_values.begin(), hd_values.end()), targets,
                                  Vocabulary::kSos, decoder_params(decoder, embedding));
  double err = std::abs(nll - run.nll);
  for (std::size_t t = 0; t < targets.size(); ++t) {
    const auto p = trace.output_distributions[t].values();
    const auto g = trace.decoder_attention[t].values();
    err = std::max(err, max_abs_diff(std::vector<double>(p.begin(), p.end()), run.probabilities[t]));
    err = std::max(err, max_abs_diff(std::vector<double>(g.begin(), g.end()), run.gamma[t]));
  }
  return err;
}

ModelConfig small_config(std::size_t vocab) {
  ModelConfig c;
  c.vocab_size = vocab;
  c.emb_dim = 8;
  c.hidden = 16;
  c.layers = 2;
  c.heads = 2;
  c.word_mam_layers = 1;
  c.answer_hidden = 12;
  c.layout = Layout{5, 7, 6, 9};
  return c;
}

DialogExample random_example(std::mt19937_64& rng, const ModelConfig& config, std::size_t utterances) {
  const auto& layout = config.layout;
  auto token = [&] { return static_cast<TokenId>(draw(rng, Vocabulary::kReserved, config.vocab_size - 1)); };
  DialogExample ex;
  const auto n = utterances ? utterances : draw(rng, 1, layout.max_utterances);
  for (std::size_t j = 0; j < n; ++j) {
    std::vector<TokenId> u(draw(rng, 1, layout.max_utterance_len));
    for (auto& t : u) t = token();
    ex.utterances.push_back(std::move(u));
  }
  ex.question.resize(draw(rng, 1, layout.max_question_len));
  for (auto& t : ex.question) t = token();
  ex.response.resize(draw(rng, 1, layout.max_response_len - 1));
  for (auto& t : ex.response) t = token();
  ex.answer_mask.assign(ex.context_tokens(), 0);
  for (auto& a : ex.answer_mask) a = rng() % 4 == 0;
  return ex;
}

Normalization normalization(std::uint64_t seed) {
  Normalization out;
  auto sums = [&](const TensorD& w, const Mask* key_mask) {
    for (std::size_t r = 0; r < w.rows(); ++r) {
      double s = 0.0;
      for (std::size_t c = 0; c < w.cols(); ++c) {
        s += w.at(r, c);
        if (key_mask && !(*key_mask)[c]) out.masked_mass = std::max(out.masked_mass, std::abs(w.at(r, c)));
      }
      out.worst_sum_error = std::max(out.worst_sum_error, std::abs(s - 1.0));
      ++out.distributions;
    }
  };
  auto gates = [&](const ForwardTrace<double>& trace) {
    for (const auto& g : trace.gates) {
      for (std::size_t i = 0; i < g.z.size(); ++i) {
        const double z = g.z.values()[i], c = g.c.values()[i], m = g.m.values()[i], n = g.n.values()[i];
        if (!(z > 0.0 && z < 1.0)) out.gates_strict = false;
        if (n < std::min(c, m) - 1e-12 || n > std::max(c, m) + 1e-12) out.n_between = false;
      }
    }
  };

  std::mt19937_64 rng(seed);
  const auto config = small_config();
  MrgModel<double> model(config);
  randomize(model.params(), seed, 0.3);
  const auto ex = random_example(rng, config);
  ForwardTrace<double> trace;
  model.loss(ex, TaskMode::Joint, 1.0, &trace);
  for (std::size_t i = 0; i < trace.cam_attention.size(); ++i) sums(trace.cam_attention[i], &trace.cam_key_masks[i]);
  for (const auto& w : trace.memory_attention) sums(w, nullptr);
  for (const auto& w : trace.word_attention) sums(w, nullptr);
  for (const auto& w : trace.utterance_attention) sums(w, nullptr);
  const auto enc = model.encode(ex);
  for (const auto& w : trace.decoder_attention) sums(w, &enc.hier.utterance_mask);
  for (const auto& p : trace.output_distributions) sums(p, nullptr);
  gates(trace);

  // The model never pads the question, so exercise question padding on the stack directly.
  ParamStore<double> params;
  McamStack<double> stack(params, "mcam", 8, 6, McamOptions{2, 2, true, false});
  randomize(params, seed + 1, 0.5);
  std::vector<TensorD> utts;
  std::vector<Mask> masks;
  for (std::size_t j = 0; j < 3; ++j) {
    masks.push_back(random_prefix(rng, 6));
    utts.push_back(mul(random_matrix(rng, 6, 8), row_mask<double>(masks.back(), 8)));
  }
  const auto question = random_matrix(rng, 5, 8);
  const auto q_mask = prefix_mask(5, draw(rng, 1, 4));
  ForwardTrace<double> st;
  stack.forward(utts, masks, question, q_mask, &st);
  for (std::size_t i = 0; i < st.cam_attention.size(); ++i) sums(st.cam_attention[i], &st.cam_key_masks[i]);
  for (const auto& w : st.memory_attention) sums(w, nullptr);
  gates(st);
  return out;
}

double padding_error(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  double err = 0.0;
  const std::size_t dim = 8, emb = 6, extra = 3;

  {  // Bi-RNN: garbage embeddings at padded steps never reach real positions.
    ParamStore<double> params;
    BiRnn<double> rnn(params, "rnn", emb, dim);
    randomize(params, seed, 0.5);
    const std::size_t len = draw(rng, 1, 5);
    const auto x = random_matrix(rng, len, emb);
    const auto plain = rnn.encode(x, Mask(len, 1));
    const auto padded = rnn.encode(pad_rows(rng, x, extra), prefix_mask(len + extra, len));
    err = std::max({err, rows_diff(plain, padded, len), rows_abs(padded, len)});
  }
  {  // Cross attention: extra masked keys.
    ParamStore<double> params;
    MultiHeadAttention<double> cam(params, "cam", dim, 2);
    randomize(params, seed, 0.5);
    const auto q = random_matrix(rng, 3, dim);
    const auto kv = random_matrix(rng, 4, dim);
    const auto plain = cam(q, kv, Mask(4, 1));
    const auto padded = cam(q, pad_rows(rng, kv, extra), prefix_mask(4 + extra, 4));
    err = std::max(err, rows_diff(plain, padded, 3));
  }
  {  // MCAM stack: wider utterances and a longer question, padding filled with garbage.
    ParamStore<double> params;
    McamStack<double> stack(params, "mcam", dim, 10, McamOptions{2, 2, true, false});
    randomize(params, seed, 0.5);
    const std::size_t width = draw(rng, 2, 5), n = draw(rng, 1, 3);
    std::vector<TensorD> narrow, wide;
    std::vector<Mask> narrow_masks, wide_masks;
    for (std::size_t j = 0; j < n; ++j) {
      const auto real = draw(rng, 1, width);
      narrow_masks.push_back(prefix_mask(width, real));
      wide_masks.push_back(prefix_mask(width + extra, real));
      narrow.push_back(mul(random_matrix(rng, width, dim), row_mask<double>(narrow_masks.back(), dim)));
      wide.push_back(pad_rows(rng, narrow.back(), extra));
    }
    const auto q = random_matrix(rng, 3, dim);
    const auto a = stack.forward(narrow, narrow_masks, q, Mask(3, 1));
    const auto b = stack.forward(wide, wide_masks, pad_rows(rng, q, extra), prefix_mask(3 + extra, 3));
    for (std::size_t j = 0; j < n; ++j) {
      err = std::max({err, rows_diff(a[j], b[j], width), rows_abs(b[j], width), masked_rows_abs(b[j], wide_masks[j])});
    }
  }
  {  // Hierarchical attention: padded words and padded utterance slots.
    ParamStore<double> params;
    HierarchicalAttention<double> hier(params, "hier", dim, 2, 1);
    randomize(params, seed, 0.5);
    const std::size_t width = draw(rng, 1, 4), n = draw(rng, 1, 4);
    std::vector<TensorD> narrow, wide;
    std::vector<Mask> narrow_masks, wide_masks;
    for (std::size_t j = 0; j < n; ++j) {
      const auto real = draw(rng, 1, width);
      narrow_masks.push_back(prefix_mask(width, real));
      wide_masks.push_back(prefix_mask(width + extra, real));
      narrow.push_back(random_matrix(rng, width, dim));
      wide.push_back(pad_rows(rng, narrow.back(), extra));
    }
    const auto a = hier.forward(narrow, narrow_masks, 4);
    const auto b = hier.forward(wide, wide_masks, 4 + extra);
    err = std::max({err, rows_diff(a.utterances, b.utterances, n), rows_abs(b.utterances, n),
                    rows_diff(a.dialog, b.dialog, 1)});
  }
  {  // Decoder: extra masked utterance slots.
    ParamStore<double> params;
    Embedding<double> embedding(params, "emb", 9, emb);
    ResponseDecoder<double> decoder(params, "dec", embedding, dim, 9);
    randomize(params, seed, 0.5);
    const auto hu = random_matrix(rng, 3, dim);
    const auto hd = random_matrix(rng, 1, dim);
    const std::vector<TokenId> targets = {4, 7, 5, 3};
    const double a = decoder.nll(decoder.prepare(hu, Mask(3, 1)), hd, targets).item();
    const double b = decoder.nll(decoder.prepare(pad_rows(rng, hu, extra), prefix_mask(3 + extra, 3)), hd, targets).item();
    err = std::max(err, std::abs(a - b));
  }
  {  // Whole model: the pipeline run by hand at the full padded width equals the model's own encode.
    const auto config = small_config();
    MrgModel<double> model(config);
    randomize(model.params(), seed, 0.3);
    const auto ex = random_example(rng, config);
    const auto enc = model.encode(ex);
    const auto L = config.layout.max_utterance_len, n = ex.utterances.size();
    std::vector<TokenId> ids(n * L, Vocabulary::kPad);
    std::vector<Mask> masks;
    for (std::size_t j = 0; j < n; ++j) {
      std::copy(ex.utterances[j].begin(), ex.utterances[j].end(), ids.begin() + static_cast<std::ptrdiff_t>(j * L));
      masks.push_back(prefix_mask(L, ex.utterances[j].size()));
    }
    const auto states = model.context_rnn().encode(model.embedding().lookup(ids), masks);
    std::vector<TensorD> utts;
    for (std::size_t j = 0; j < n; ++j) utts.push_back(slice(states, 0, j * L, L));
    const auto m = model.mcam().forward(utts, masks, enc.question, enc.question_mask);
    const auto h = model.hierarchy().forward(m, masks, config.layout.max_utterances);
    for (std::size_t j = 0; j < n; ++j) {
      const auto w = enc.mcam[j].rows();
      err = std::max({err, rows_diff(enc.mcam[j], m[j], w), rows_abs(m[j], w)});
    }
    err = std::max({err, rows_diff(enc.hier.utterances, h.utterances, config.layout.max_utterances),
                    rows_diff(enc.hier.dialog, h.dialog, 1)});
    const auto logits_a = model.answer_logits(enc);
    const auto logits_b = model.selector().logits(h.utterances, enc.question, enc.question_mask);
    err = std::max(err, rows_diff(logits_a, logits_b, 1));
    const auto targets = MrgModel<double>::response_targets(ex);
    const double nll_a = model.response_nll(enc, ex).item();
    const double nll_b =
        model.decoder().nll(model.decoder().prepare(h.utterances, h.utterance_mask), h.dialog, targets).item();
    err = std::max(err, std::abs(nll_a - nll_b));
  }
  return err;
}

double fd_error(const std::function<TensorD()>& f, const std::vector<TensorD>& leaves, std::uint64_t seed,
                double step) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal;
  std::vector<double> w;
  {
    NoGradGuard guard;
    w.resize(f().size());
  }
  for (auto& x : w) x = normal(rng);
  const auto errs = check_gradients(f, leaves, w, step);
  return errs.empty() ? 0.0 : *std::max_element(errs.begin(), errs.end());
}

void assign(const TensorD& target, const std::vector<double>& v) {
  if (v.size() != target.size()) throw ShapeError("assign: size mismatch");
  auto t = target;
  std::copy(v.begin(), v.end(), t.mutable_values().begin());
}

void assign(const TensorD& target, const TensorD& source) { assign(target, values(source)); }

void fill(const TensorD& target, double value) {
  auto t = target;
  std::fill(t.mutable_values().begin(), t.mutable_values().end(), value);
}

std::vector<double> values(const TensorD& t) { return {t.values().begin(), t.values().end()}; }

}  // namespace checks
