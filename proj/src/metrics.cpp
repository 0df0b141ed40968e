#include "mrg/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <map>
#include <set>
#include <sstream>
#include <stdexcept>

namespace mrg {

namespace {

constexpr double kMethod4K = 5.0;

using NgramCounts = std::map<std::vector<std::string>, std::size_t>;

NgramCounts ngrams(const Tokens& tokens, std::size_t n) {
  NgramCounts counts;
  if (tokens.size() < n) return counts;
  for (std::size_t i = 0; i + n <= tokens.size(); ++i) ++counts[Tokens(tokens.begin() + i, tokens.begin() + i + n)];
  return counts;
}

struct MatchStats {
  std::vector<double> matches;  // clipped matches per order 1..max_n+1
  std::vector<double> totals;   // hypothesis n-grams per order
  double hyp_len = 0.0;
  double ref_len = 0.0;
};

void accumulate(MatchStats& stats, const Tokens& hyp, const Tokens& ref, std::size_t orders) {
  stats.matches.resize(orders, 0.0);
  stats.totals.resize(orders, 0.0);
  for (std::size_t n = 1; n <= orders; ++n) {
    const auto h = ngrams(hyp, n);
    const auto r = ngrams(ref, n);
    for (const auto& [gram, count] : h) {
      auto it = r.find(gram);
      if (it != r.end()) stats.matches[n - 1] += static_cast<double>(std::min(count, it->second));
      stats.totals[n - 1] += static_cast<double>(count);
    }
  }
  stats.hyp_len += static_cast<double>(hyp.size());
  stats.ref_len += static_cast<double>(ref.size());
}

BleuScore score(const MatchStats& s, std::size_t max_n) {
  if (s.hyp_len == 0.0) return {0.0, true};
  std::vector<double> p(max_n);
  bool any_zero = false;
  for (std::size_t i = 0; i < max_n; ++i) {
    p[i] = s.matches[i] / std::max(1.0, s.totals[i]);
    any_zero = any_zero || s.matches[i] == 0.0;
  }
  if (any_zero) {
    // Method 4: length-scaled geometric add-k on the zero orders.
    double invcnt = 1.0;
    for (std::size_t i = 0; i < max_n; ++i) {
      if (s.matches[i] != 0.0) continue;
      invcnt *= 2.0;
      p[i] = std::log(s.hyp_len) / (invcnt * kMethod4K * std::max(1.0, s.totals[i]));
    }
    // Method 5: average each order with its neighbours.
    const double next = s.matches[max_n] / std::max(1.0, s.totals[max_n]);
    double prev = p[0] + 1.0;
    for (std::size_t i = 0; i < max_n; ++i) {
      p[i] = (prev + p[i] + (i + 1 < max_n ? p[i + 1] : next)) / 3.0;
      prev = p[i];
    }
  }
  double log_sum = 0.0;
  for (double v : p) {
    if (!(v > 0.0)) return {0.0, false};
    log_sum += std::log(v) / static_cast<double>(max_n);
  }
  const double bp = s.hyp_len > s.ref_len ? 1.0 : std::exp(1.0 - s.ref_len / s.hyp_len);
  return {bp * std::exp(log_sum), false};
}

double cosine(const std::vector<double>& a, const std::vector<double>& b) {
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    dot += a[i] * b[i];
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  if (na == 0.0 || nb == 0.0) return 0.0;
  return dot / (std::sqrt(na) * std::sqrt(nb));
}

std::vector<const std::vector<double>*> lookup(const Tokens& tokens, const EmbeddingTable& table) {
  std::vector<const std::vector<double>*> out;
  for (const auto& t : tokens)
    if (const auto* v = table.find(t)) out.push_back(v);
  return out;
}

std::vector<double> mean_vector(const std::vector<const std::vector<double>*>& vs, std::size_t dim) {
  std::vector<double> m(dim, 0.0);
  for (const auto* v : vs)
    for (std::size_t i = 0; i < dim; ++i) m[i] += (*v)[i];
  for (auto& x : m) x /= static_cast<double>(vs.size());
  return m;
}

std::vector<double> extrema_vector(const std::vector<const std::vector<double>*>& vs, std::size_t dim) {
  std::vector<double> e(dim, 0.0);
  for (std::size_t i = 0; i < dim; ++i) {
    double best = (*vs[0])[i];
    for (const auto* v : vs) {
      const double x = (*v)[i];
      if (std::abs(x) > std::abs(best) || (std::abs(x) == std::abs(best) && x > best)) best = x;
    }
    e[i] = best;
  }
  return e;
}

double greedy_one_way(const std::vector<const std::vector<double>*>& from,
                      const std::vector<const std::vector<double>*>& to) {
  double total = 0.0;
  for (const auto* a : from) {
    double best = -std::numeric_limits<double>::infinity();
    for (const auto* b : to) best = std::max(best, cosine(*a, *b));
    total += best;
  }
  return total / static_cast<double>(from.size());
}

}  // namespace

BleuScore bleu(const Tokens& hypothesis, const Tokens& reference, std::size_t max_n) {
  if (max_n == 0) throw std::invalid_argument("bleu: max_n must be positive");
  if (reference.empty()) throw std::invalid_argument("bleu: empty reference");
  MatchStats stats;
  accumulate(stats, hypothesis, reference, max_n + 1);
  return score(stats, max_n);
}

BleuScore corpus_bleu(const std::vector<Tokens>& hypotheses, const std::vector<Tokens>& references,
                      std::size_t max_n) {
  if (max_n == 0) throw std::invalid_argument("corpus_bleu: max_n must be positive");
  if (hypotheses.size() != references.size()) throw std::invalid_argument("corpus_bleu: size mismatch");
  MatchStats stats;
  stats.matches.assign(max_n + 1, 0.0);
  stats.totals.assign(max_n + 1, 0.0);
  for (std::size_t i = 0; i < hypotheses.size(); ++i) {
    if (references[i].empty()) throw std::invalid_argument("corpus_bleu: empty reference");
    accumulate(stats, hypotheses[i], references[i], max_n + 1);
  }
  return score(stats, max_n);
}

EmbeddingTable EmbeddingTable::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open embedding file " + path.string());
  EmbeddingTable table;
  std::string line;
  std::size_t line_number = 0;
  while (std::getline(in, line)) {
    ++line_number;
    std::istringstream fields(line);
    std::string token;
    if (!(fields >> token)) continue;
    std::vector<double> v;
    std::string number;
    while (fields >> number) {
      try {
        std::size_t used = 0;
        v.push_back(std::stod(number, &used));
        if (used != number.size()) throw std::invalid_argument(number);
      } catch (const std::exception&) {
        throw std::runtime_error(path.string() + ":" + std::to_string(line_number) + ": bad number '" + number + "'");
      }
    }
    if (v.empty()) throw std::runtime_error(path.string() + ":" + std::to_string(line_number) + ": no vector");
    if (table.dim_ == 0) table.dim_ = v.size();
    if (v.size() != table.dim_) {
      throw std::runtime_error(path.string() + ":" + std::to_string(line_number) + ": expected " +
                               std::to_string(table.dim_) + " values, got " + std::to_string(v.size()));
    }
    table.table_[token] = std::move(v);
  }
  if (table.table_.empty()) throw std::runtime_error("embedding file " + path.string() + " is empty");
  return table;
}

void EmbeddingTable::add(const std::string& token, std::vector<double> vector) {
  if (dim_ == 0) dim_ = vector.size();
  if (vector.size() != dim_) throw std::invalid_argument("embedding for '" + token + "' has the wrong dimension");
  table_[token] = std::move(vector);
}

const std::vector<double>* EmbeddingTable::find(const std::string& token) const {
  auto it = table_.find(token);
  return it == table_.end() ? nullptr : &it->second;
}

std::optional<BowScores> bow_metrics(const Tokens& hypothesis, const Tokens& reference, const EmbeddingTable& table) {
  const auto h = lookup(hypothesis, table);
  const auto r = lookup(reference, table);
  if (h.empty() || r.empty()) return std::nullopt;
  const auto dim = table.dim();
  BowScores s;
  s.average = cosine(mean_vector(h, dim), mean_vector(r, dim));
  s.extrema = cosine(extrema_vector(h, dim), extrema_vector(r, dim));
  s.greedy = (greedy_one_way(h, r) + greedy_one_way(r, h)) / 2.0;
  return s;
}

AnswerScores answer_metrics(const std::vector<std::size_t>& predicted, const std::vector<std::size_t>& gold) {
  const std::set<std::size_t> p(predicted.begin(), predicted.end());
  const std::set<std::size_t> g(gold.begin(), gold.end());
  AnswerScores s;
  s.exact_match = p == g ? 1.0 : 0.0;
  if (p.empty() && g.empty()) {
    s.f1 = 1.0;
    return s;
  }
  std::size_t common = 0;
  for (auto i : p) common += g.count(i);
  s.f1 = 2.0 * static_cast<double>(common) / static_cast<double>(p.size() + g.size());
  return s;
}

void aggregate(EvalReport& report) {
  report.examples = report.per_example.size();
  std::array<double, 4> bleu_sum{};
  double avg = 0, ext = 0, greedy = 0, em = 0, f1 = 0;
  std::size_t generated = 0, bow = 0, answered = 0;
  report.empty_hypotheses = 0;
  report.bow_skipped = 0;
  for (const auto& e : report.per_example) {
    if (e.bleu) {
      ++generated;
      for (std::size_t n = 0; n < 4; ++n) bleu_sum[n] += (*e.bleu)[n];
      if (e.empty_hypothesis) ++report.empty_hypotheses;
      if (e.bow) {
        ++bow;
        avg += e.bow->average;
        ext += e.bow->extrema;
        greedy += e.bow->greedy;
      } else {
        ++report.bow_skipped;
      }
    }
    if (e.answer) {
      ++answered;
      em += e.answer->exact_match;
      f1 += e.answer->f1;
    }
  }
  report.has_generation = generated > 0;
  report.has_answer = answered > 0;
  auto mean = [](double total, std::size_t n) { return n ? total / static_cast<double>(n) : 0.0; };
  report.bleu1 = mean(bleu_sum[0], generated);
  report.bleu2 = mean(bleu_sum[1], generated);
  report.bleu3 = mean(bleu_sum[2], generated);
  report.bleu4 = mean(bleu_sum[3], generated);
  report.bow_average = mean(avg, bow);
  report.bow_extrema = mean(ext, bow);
  report.bow_greedy = mean(greedy, bow);
  report.answer_exact_match = mean(em, answered);
  report.answer_f1 = mean(f1, answered);
}

nlohmann::ordered_json EvalReport::to_json() const {
  using json = nlohmann::ordered_json;
  auto gen = [&](double v) { return has_generation ? json(v) : json(nullptr); };
  auto ans = [&](double v) { return has_answer ? json(v) : json(nullptr); };
  json j;
  j["examples"] = examples;
  j["bleu1"] = gen(bleu1);
  j["bleu2"] = gen(bleu2);
  j["bleu3"] = gen(bleu3);
  j["bleu4"] = gen(bleu4);
  j["bow_average"] = gen(bow_average);
  j["bow_extrema"] = gen(bow_extrema);
  j["bow_greedy"] = gen(bow_greedy);
  j["answer_exact_match"] = ans(answer_exact_match);
  j["answer_f1"] = ans(answer_f1);
  j["empty_hypotheses"] = empty_hypotheses;
  j["bow_skipped"] = bow_skipped;
  if (corpus_bleu) j["corpus_bleu"] = *corpus_bleu;
  auto& rows = j["per_example"] = json::array();
  for (const auto& e : per_example) {
    json row;
    row["hypothesis"] = e.hypothesis;
    row["reference"] = e.reference;
    row["bleu"] = e.bleu ? json(*e.bleu) : json(nullptr);
    row["empty_hypothesis"] = e.empty_hypothesis;
    if (e.bow) {
      row["bow"] = {{"average", e.bow->average}, {"extrema", e.bow->extrema}, {"greedy", e.bow->greedy}};
    } else {
      row["bow"] = nullptr;
    }
    row["predicted_answer"] = e.predicted_answer;
    row["gold_answer"] = e.gold_answer;
    if (e.answer) {
      row["exact_match"] = e.answer->exact_match;
      row["f1"] = e.answer->f1;
    } else {
      row["exact_match"] = nullptr;
      row["f1"] = nullptr;
    }
    rows.push_back(std::move(row));
  }
  return j;
}

}  // namespace mrg
