#include <algorithm>
#include <fstream>
#include <map>
#include <numeric>
#include <random>

#include "doctest.h"
#include "mrg/metrics.hpp"
#include "support/metric_fixtures.hpp"
#include "support/temp_dir.hpp"

using namespace mrg;

namespace {

Tokens random_sentence(std::mt19937_64& rng, std::size_t len, std::size_t vocab) {
  Tokens t;
  for (std::size_t i = 0; i < len; ++i) t.push_back("w" + std::to_string(rng() % vocab));
  return t;
}

}  // namespace

TEST_SUITE("metrics") {
  TEST_CASE("identical pair scores 1 at every order") {
    const Tokens s{"the", "cat", "sat", "on", "the", "mat"};
    for (std::size_t n = 1; n <= 4; ++n) CHECK(bleu(s, s, n).value == 1.0);
  }

  TEST_CASE("pairs shorter than the order have no top n-grams and are smoothed") {
    const Tokens s{"a", "b", "c"};
    CHECK(bleu(s, s, 3).value == 1.0);
    const double four = bleu(s, s, 4).value;
    CHECK(four < 1.0);
    CHECK(four > 0.5);
  }

  TEST_CASE("disjoint pair: smoothing-7 golden value") {
    const double by_hand = fixtures::disjoint_bleu4_by_hand();
    CHECK(std::abs(by_hand - fixtures::kDisjointBleu4) <= 1e-15);
    CHECK(std::abs(bleu(fixtures::kDisjointHyp, fixtures::kDisjointRef, 4).value - by_hand) <= 1e-9);
  }

  TEST_CASE("unigram example and brevity penalty") {
    CHECK(bleu({"a", "b"}, {"a", "c"}, 1).value == 0.5);
    // Hypothesis shorter than the reference: exp(1 - 4/2).
    CHECK(bleu({"a", "b"}, {"a", "b", "c", "d"}, 1).value == doctest::Approx(std::exp(-1.0)).epsilon(1e-15));
    CHECK(bleu({"a", "b", "c"}, {"a", "b"}, 1).value == doctest::Approx(2.0 / 3.0).epsilon(1e-15));
  }

  TEST_CASE("empty hypothesis scores 0 with a flag") {
    const auto s = bleu({}, {"a"}, 4);
    CHECK(s.value == 0.0);
    CHECK(s.empty_hypothesis);
    CHECK_THROWS(bleu({"a"}, {}, 4));
  }

  TEST_CASE("BLEU is invariant under token relabeling") {
    std::mt19937_64 rng(1);
    for (int trial = 0; trial < 50; ++trial) {
      const auto h = random_sentence(rng, 3 + rng() % 8, 6);
      const auto r = random_sentence(rng, 3 + rng() % 8, 6);
      std::vector<int> perm(6);
      std::iota(perm.begin(), perm.end(), 0);
      std::shuffle(perm.begin(), perm.end(), rng);
      auto relabel = [&](const Tokens& t) {
        Tokens out;
        for (const auto& w : t) out.push_back("z" + std::to_string(perm[std::stoi(w.substr(1))]));
        return out;
      };
      for (std::size_t n = 1; n <= 4; ++n) CHECK(bleu(h, r, n).value == bleu(relabel(h), relabel(r), n).value);
    }
  }

  TEST_CASE("BLEU-n is nonincreasing in n on fixed pairs") {
    const std::vector<std::pair<Tokens, Tokens>> pairs{
        {fixtures::kDisjointHyp, fixtures::kDisjointRef},
        {{"a", "b", "c", "d", "e"}, {"a", "b", "c", "d", "f"}},
        {{"a", "b", "c", "x", "y", "z"}, {"a", "b", "c", "d", "e", "f"}},
        {{"i", "like", "green", "tea", "a", "lot"}, {"i", "like", "tea", "a", "lot"}},
    };
    for (const auto& [h, r] : pairs)
      for (std::size_t n = 1; n < 4; ++n) CHECK(bleu(h, r, n + 1).value <= bleu(h, r, n).value);
  }

  TEST_CASE("corpus BLEU sums counts across sentences") {
    const std::vector<Tokens> hyps{{"a", "b"}, {"c", "d"}};
    const std::vector<Tokens> refs{{"a", "x"}, {"c", "d"}};
    CHECK(corpus_bleu(hyps, refs, 1).value == 0.75);
    CHECK(corpus_bleu({{"a", "b", "c", "d"}}, {{"a", "b", "c", "d"}}, 4).value == 1.0);
  }

  TEST_CASE("BOW metrics on the hand-set three-dimensional fixture") {
    const auto table = fixtures::bow_table();
    const auto s = bow_metrics(fixtures::kBowHyp, fixtures::kBowRef, table);
    REQUIRE(s.has_value());
    const auto e = fixtures::bow_by_hand();
    CHECK(std::abs(s->average - e.average) <= 1e-9);
    CHECK(std::abs(s->extrema - e.extrema) <= 1e-9);
    CHECK(std::abs(s->greedy - e.greedy) <= 1e-9);
  }

  TEST_CASE("BOW metrics: identical gives 1, orthogonal gives 0") {
    EmbeddingTable t(3);
    t.add("p", {1, 0, 0});
    t.add("q", {0, 2, 0});
    t.add("r", {0.5, -1, 2});
    const auto same = bow_metrics({"p", "r"}, {"p", "r"}, t);
    CHECK(same->average == doctest::Approx(1.0).epsilon(1e-15));
    CHECK(same->extrema == doctest::Approx(1.0).epsilon(1e-15));
    CHECK(same->greedy == doctest::Approx(1.0).epsilon(1e-15));
    const auto ortho = bow_metrics({"p"}, {"q"}, t);
    CHECK(ortho->average == 0.0);
    CHECK(ortho->extrema == 0.0);
    CHECK(ortho->greedy == 0.0);
  }

  TEST_CASE("BOW average and extrema ignore token order") {
    const auto table = fixtures::bow_table();
    const auto a = bow_metrics({"x", "y", "u"}, {"v", "w"}, table);
    const auto b = bow_metrics({"u", "x", "y"}, {"w", "v"}, table);
    CHECK(a->average == doctest::Approx(b->average).epsilon(1e-15));
    CHECK(a->extrema == b->extrema);
    CHECK(a->greedy == doctest::Approx(b->greedy).epsilon(1e-15));
  }

  TEST_CASE("BOW: no embedded tokens means the example is skipped and counted") {
    const auto table = fixtures::bow_table();
    CHECK_FALSE(bow_metrics({"nope"}, {"x"}, table).has_value());
    CHECK_FALSE(bow_metrics({"x"}, {}, table).has_value());
    // Unknown tokens are ignored on a side that has others.
    CHECK(bow_metrics({"x", "nope"}, {"x"}, table)->average == doctest::Approx(1.0));

    EvalReport report;
    ExampleScores scored;
    scored.bleu = std::array<double, 4>{1, 1, 1, 1};
    scored.bow = BowScores{0.5, 0.25, 0.75};
    ExampleScores skipped;
    skipped.bleu = std::array<double, 4>{0, 0, 0, 0};
    report.per_example = {scored, skipped};
    aggregate(report);
    CHECK(report.bow_skipped == 1);
    CHECK(report.bow_average == 0.5);
    CHECK(report.bleu1 == 0.5);
  }

  TEST_CASE("answer metrics") {
    auto s = answer_metrics({3, 1}, {1, 3});
    CHECK(s.exact_match == 1.0);
    CHECK(s.f1 == 1.0);
    s = answer_metrics({}, {4});
    CHECK(s.exact_match == 0.0);
    CHECK(s.f1 == 0.0);
    s = answer_metrics({0, 1}, {1, 2});
    CHECK(s.exact_match == 0.0);
    CHECK(s.f1 == 0.5);
  }

  TEST_CASE("embedding file parsing") {
    TempDir dir;
    const auto good = dir.path / "emb.txt";
    std::ofstream(good) << "x 1 2 0\n\ny -1 0 3.5e0\n";
    const auto t = EmbeddingTable::load(good);
    CHECK(t.dim() == 3);
    CHECK(t.size() == 2);
    CHECK(*t.find("y") == std::vector<double>{-1, 0, 3.5});
    CHECK(t.find("z") == nullptr);

    const auto ragged = dir.path / "ragged.txt";
    std::ofstream(ragged) << "x 1 2 0\ny 1 2\n";
    CHECK_THROWS(EmbeddingTable::load(ragged));
    const auto bad = dir.path / "bad.txt";
    std::ofstream(bad) << "x 1 two 0\n";
    CHECK_THROWS(EmbeddingTable::load(bad));
  }

  TEST_CASE("report JSON carries every corpus mean and the per-example rows") {
    EvalReport report;
    ExampleScores e;
    e.hypothesis = {"a"};
    e.reference = {"a"};
    e.bleu = std::array<double, 4>{1, 1, 1, 1};
    e.bow = BowScores{1, 1, 1};
    e.predicted_answer = {2};
    e.gold_answer = {2};
    e.answer = AnswerScores{1, 1};
    report.per_example = {e};
    aggregate(report);
    const auto j = report.to_json();
    for (const char* key : {"examples", "bleu1", "bleu2", "bleu3", "bleu4", "bow_average", "bow_extrema", "bow_greedy",
                            "answer_exact_match", "answer_f1", "empty_hypotheses", "bow_skipped", "per_example"})
      CHECK(j.contains(key));
    CHECK(j["examples"] == 1);
    CHECK(j["per_example"].size() == 1);
    CHECK(j["per_example"][0]["bleu"].size() == 4);
    CHECK(j["per_example"][0]["predicted_answer"] == nlohmann::json::array({2}));
    for (const char* key : {"bleu1", "bleu4", "bow_average", "bow_extrema", "bow_greedy", "answer_exact_match", "answer_f1"}) {
      CHECK(j[key].get<double>() >= 0.0);
      CHECK(j[key].get<double>() <= 1.0);
    }

    EvalReport answers_only;
    ExampleScores a;
    a.answer = AnswerScores{0, 0.5};
    answers_only.per_example = {a};
    aggregate(answers_only);
    CHECK(answers_only.to_json()["bleu1"].is_null());
    CHECK(answers_only.to_json()["answer_f1"] == 0.5);
  }
}
