#pragma once

// Element-by-element transcriptions of the model equations over plain
// double arrays. Nothing here calls into the library's ops, so agreement
// with the layered modules is an independent check.

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <vector>

namespace oracle {

struct Mat {
  std::size_t r = 0, c = 0;
  std::vector<double> v;

  Mat() = default;
  Mat(std::size_t rows, std::size_t cols) : r(rows), c(cols), v(rows * cols, 0.0) {}
  Mat(std::size_t rows, std::size_t cols, std::vector<double> values) : r(rows), c(cols), v(std::move(values)) {
    if (v.size() != r * c) throw std::invalid_argument("oracle::Mat size mismatch");
  }
  double& operator()(std::size_t i, std::size_t j) { return v[i * c + j]; }
  double operator()(std::size_t i, std::size_t j) const { return v[i * c + j]; }
};

using Mask = std::vector<std::uint8_t>;

inline double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

/// Row i of `x` times column block [c0, c0+w) of `w`: Σ_k x_ik W_k(c0+j).
inline double row_dot_col(const Mat& x, std::size_t i, const Mat& w, std::size_t col) {
  double s = 0.0;
  for (std::size_t k = 0; k < x.c; ++k) s += x(i, k) * w(k, col);
  return s;
}

struct CamOut {
  Mat output;                // LayerNorm(q + attended W^O)
  Mat attended;              // heads concatenated, Σ_k α_ik (h_k W^V)
  std::vector<Mat> alpha;    // per head [n_q × n_k]
};

/// β_ik = (q_i W^Q)(h_k W^K)^T / sqrt(d_head); α = softmax over unmasked k;
/// head_i = Σ_k α_ik (h_k W^V); out = LN(q + [heads] W^O).
inline CamOut cam(const Mat& q, const Mat& kv, const Mask& kv_mask, const Mat& wq, const Mat& wk, const Mat& wv,
                  const Mat& wo, const Mat& gain, const Mat& bias, std::size_t heads, double eps) {
  const std::size_t d = q.c, dh = d / heads;
  CamOut out;
  out.attended = Mat(q.r, d);
  for (std::size_t h = 0; h < heads; ++h) {
    Mat alpha(q.r, kv.r);
    for (std::size_t i = 0; i < q.r; ++i) {
      std::vector<double> beta(kv.r, 0.0);
      double max_beta = -INFINITY;
      for (std::size_t k = 0; k < kv.r; ++k) {
        if (!kv_mask[k]) continue;
        double b = 0.0;
        for (std::size_t e = 0; e < dh; ++e) b += row_dot_col(q, i, wq, h * dh + e) * row_dot_col(kv, k, wk, h * dh + e);
        beta[k] = b / std::sqrt(static_cast<double>(dh));
        max_beta = std::max(max_beta, beta[k]);
      }
      double z = 0.0;
      for (std::size_t k = 0; k < kv.r; ++k)
        if (kv_mask[k]) z += std::exp(beta[k] - max_beta);
      for (std::size_t k = 0; k < kv.r; ++k) alpha(i, k) = kv_mask[k] ? std::exp(beta[k] - max_beta) / z : 0.0;
      for (std::size_t e = 0; e < dh; ++e) {
        double s = 0.0;
        for (std::size_t k = 0; k < kv.r; ++k) s += alpha(i, k) * row_dot_col(kv, k, wv, h * dh + e);
        out.attended(i, h * dh + e) = s;
      }
    }
    out.alpha.push_back(std::move(alpha));
  }
  out.output = Mat(q.r, d);
  for (std::size_t i = 0; i < q.r; ++i) {
    std::vector<double> x(d);
    for (std::size_t e = 0; e < d; ++e) x[e] = q(i, e) + row_dot_col(out.attended, i, wo, e);
    double mu = 0.0;
    for (double t : x) mu += t;
    mu /= static_cast<double>(d);
    double var = 0.0;
    for (double t : x) var += (t - mu) * (t - mu);
    var /= static_cast<double>(d);
    for (std::size_t e = 0; e < d; ++e) out.output(i, e) = gain.v[e] * (x[e] - mu) / std::sqrt(var + eps) + bias.v[e];
  }
  return out;
}

struct CamParams {
  Mat wq, wk, wv, wo, gain, bias;
  std::size_t heads = 1;
  double eps = 1e-5;
};

inline CamOut cam(const Mat& q, const Mat& kv, const Mask& kv_mask, const CamParams& p) {
  return cam(q, kv, kv_mask, p.wq, p.wk, p.wv, p.wo, p.gain, p.bias, p.heads, p.eps);
}

struct UpdaterParams {
  CamParams attention;
  Mat wa, wb, wc, wd;
};

struct UpdaterOut {
  Mat s, c, z, n;
};

/// s = CAM(m, [m̂; m]); c = tanh(m W_a + s W_b); z = sigmoid(m W_c + s W_d);
/// n = (1 - z) ⊙ c + z ⊙ m.
inline UpdaterOut memory_update(const Mat& m, const Mask& m_mask, const Mat& mhat, const Mask& mhat_mask,
                                const UpdaterParams& p) {
  Mat kv(mhat.r + m.r, m.c);
  Mask kv_mask;
  for (std::size_t i = 0; i < mhat.r; ++i) {
    for (std::size_t e = 0; e < m.c; ++e) kv(i, e) = mhat(i, e);
    kv_mask.push_back(mhat_mask[i]);
  }
  for (std::size_t i = 0; i < m.r; ++i) {
    for (std::size_t e = 0; e < m.c; ++e) kv(mhat.r + i, e) = m(i, e);
    kv_mask.push_back(m_mask[i]);
  }
  UpdaterOut o;
  o.s = cam(m, kv, kv_mask, p.attention).output;
  o.c = Mat(m.r, m.c);
  o.z = Mat(m.r, m.c);
  o.n = Mat(m.r, m.c);
  for (std::size_t i = 0; i < m.r; ++i) {
    for (std::size_t e = 0; e < m.c; ++e) {
      const double c = std::tanh(row_dot_col(m, i, p.wa, e) + row_dot_col(o.s, i, p.wb, e));
      const double z = sigmoid(row_dot_col(m, i, p.wc, e) + row_dot_col(o.s, i, p.wd, e));
      o.c(i, e) = c;
      o.z(i, e) = z;
      o.n(i, e) = (1.0 - z) * c + z * m(i, e);
    }
  }
  return o;
}

struct McamLayerParams {
  UpdaterParams updater;
  CamParams cam;
};

/// Utterances in dialog order; per layer the memory holds the previous
/// utterance's output (zeros sharing the current mask before the first).
inline std::vector<Mat> mcam_stack(const std::vector<Mat>& utterances, const std::vector<Mask>& masks, const Mat& question,
                                   const Mask& question_mask, const std::vector<McamLayerParams>& layers,
                                   bool memory_updater) {
  const std::size_t width = utterances[0].r, d = utterances[0].c;
  std::vector<Mat> memory(layers.size(), Mat(width, d));
  std::vector<Mask> memory_mask(layers.size());
  std::vector<bool> written(layers.size(), false);
  std::vector<Mat> out;
  for (std::size_t j = 0; j < utterances.size(); ++j) {
    Mat m = utterances[j];
    for (std::size_t l = 0; l < layers.size(); ++l) {
      Mat n = m;
      if (memory_updater) {
        const Mask& mm = written[l] ? memory_mask[l] : masks[j];
        n = memory_update(m, masks[j], memory[l], mm, layers[l].updater).n;
      }
      m = cam(n, question, question_mask, layers[l].cam).output;
      for (std::size_t i = 0; i < width; ++i)
        if (!masks[j][i])
          for (std::size_t e = 0; e < d; ++e) m(i, e) = 0.0;
      memory[l] = m;
      memory_mask[l] = masks[j];
      written[l] = true;
    }
    out.push_back(m);
  }
  return out;
}

struct LstmParams {
  Mat w_ih, w_hh, b;  // gate blocks [i f g o]
};

/// i, f, o = σ(.), g = tanh(.), c' = f c + i g, h' = o tanh(c').
inline void lstm_step(const std::vector<double>& x, std::vector<double>& h, std::vector<double>& c,
                      const LstmParams& p) {
  const std::size_t n = h.size();
  std::vector<double> pre(4 * n);
  for (std::size_t g = 0; g < 4 * n; ++g) {
    double s = p.b.v[g];
    for (std::size_t k = 0; k < x.size(); ++k) s += x[k] * p.w_ih(k, g);
    for (std::size_t k = 0; k < n; ++k) s += h[k] * p.w_hh(k, g);
    pre[g] = s;
  }
  for (std::size_t e = 0; e < n; ++e) {
    const double i = sigmoid(pre[e]);
    const double f = sigmoid(pre[n + e]);
    const double g = std::tanh(pre[2 * n + e]);
    const double o = sigmoid(pre[3 * n + e]);
    c[e] = f * c[e] + i * g;
    h[e] = o * std::tanh(c[e]);
  }
}

struct DecoderParams {
  Mat embedding;  // [V × emb]
  Mat w_g, b_g;
  LstmParams lstm;
  Mat w_s, w_h, w_n, w_v, b_v;
};

struct Attend {
  std::vector<double> gamma, f;
};

/// γ'_i = w_n^T tanh(W_s s + W_h h^{u,i}); γ = softmax over unmasked i;
/// f = Σ γ_i h^{u,i}. Row-vector convention: s W_s, h W_h.
inline Attend attend(const std::vector<double>& s, const Mat& hu, const Mask& mask, const DecoderParams& p) {
  const std::size_t d = hu.c;
  Attend a;
  std::vector<double> score(hu.r, 0.0);
  double max_score = -INFINITY;
  for (std::size_t i = 0; i < hu.r; ++i) {
    if (!mask[i]) continue;
    double g = 0.0;
    for (std::size_t e = 0; e < d; ++e) {
      double pre = 0.0;
      for (std::size_t k = 0; k < d; ++k) pre += s[k] * p.w_s(k, e) + hu(i, k) * p.w_h(k, e);
      g += p.w_n.v[e] * std::tanh(pre);
    }
    score[i] = g;
    max_score = std::max(max_score, g);
  }
  double z = 0.0;
  for (std::size_t i = 0; i < hu.r; ++i)
    if (mask[i]) z += std::exp(score[i] - max_score);
  a.gamma.assign(hu.r, 0.0);
  a.f.assign(d, 0.0);
  for (std::size_t i = 0; i < hu.r; ++i) {
    if (!mask[i]) continue;
    a.gamma[i] = std::exp(score[i] - max_score) / z;
    for (std::size_t e = 0; e < d; ++e) a.f[e] += a.gamma[i] * hu(i, e);
  }
  return a;
}

struct DecoderRun {
  std::vector<std::vector<double>> probabilities;  // P^v_t per step
  std::vector<std::vector<double>> gamma;          // γ used for f_t per step
  double nll = 0.0;
};

/// s_0 = h^d W_g + b_g (cell 0), f_0 from s_0; per step
/// s_t = LSTM(s_{t-1}, [f_{t-1}; e(y_{t-1})]), f_t from s_t,
/// P^v_t = softmax([s_t; f_t] W_v + b_v). Inputs are sos then targets[..n-1].
inline DecoderRun decode(const Mat& hu, const Mask& mask, const std::vector<double>& hd,
                         const std::vector<std::size_t>& targets, std::size_t sos, const DecoderParams& p) {
  const std::size_t d = hu.c, V = p.w_v.c;
  std::vector<double> s(d), c(d, 0.0);
  for (std::size_t e = 0; e < d; ++e) {
    double v = p.b_g.v[e];
    for (std::size_t k = 0; k < d; ++k) v += hd[k] * p.w_g(k, e);
    s[e] = v;
  }
  auto f = attend(s, hu, mask, p).f;
  DecoderRun run;
  std::size_t prev = sos;
  for (auto y : targets) {
    std::vector<double> x(f);
    for (std::size_t e = 0; e < p.embedding.c; ++e) x.push_back(p.embedding(prev, e));
    lstm_step(x, s, c, p.lstm);
    const auto a = attend(s, hu, mask, p);
    f = a.f;
    std::vector<double> feat(s);
    feat.insert(feat.end(), f.begin(), f.end());
    std::vector<double> logit(V);
    double max_logit = -INFINITY;
    for (std::size_t v = 0; v < V; ++v) {
      double t = p.b_v.v[v];
      for (std::size_t k = 0; k < 2 * d; ++k) t += feat[k] * p.w_v(k, v);
      logit[v] = t;
      max_logit = std::max(max_logit, t);
    }
    double z = 0.0;
    for (double t : logit) z += std::exp(t - max_logit);
    std::vector<double> prob(V);
    for (std::size_t v = 0; v < V; ++v) prob[v] = std::exp(logit[v] - max_logit) / z;
    run.nll -= std::log(prob[y]);
    run.probabilities.push_back(std::move(prob));
    run.gamma.push_back(a.gamma);
    prev = y;
  }
  return run;
}

inline double max_abs_diff(const Mat& a, const Mat& b) {
  if (a.r != b.r || a.c != b.c) return INFINITY;
  double m = 0.0;
  for (std::size_t i = 0; i < a.v.size(); ++i) m = std::max(m, std::abs(a.v[i] - b.v[i]));
  return m;
}

inline double max_abs_diff(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() != b.size()) return INFINITY;
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

}  // namespace oracle
