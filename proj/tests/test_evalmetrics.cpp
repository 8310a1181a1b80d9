#include <cmath>
#include <fstream>
#include <random>
#include <sstream>

#include "doctest.h"
#include "medthink/errors.hpp"
#include "medthink/evalmetrics.hpp"
#include "metric_oracle.hpp"

using namespace medthink;
using namespace test_support;

TEST_CASE("closed-end accuracy with answer normalization") {
  CHECK(closed_accuracy({"yes", "no", "yes"}, {"yes", "no", "no"}) == doctest::Approx(2.0 / 3.0).epsilon(1e-15));
  CHECK(closed_accuracy({"Yes."}, {"yes"}) == 1.0);
  CHECK(closed_accuracy({"  Upper   Left!? "}, {"upper left"}) == 1.0);
  CHECK_THROWS_AS(closed_accuracy({}, {}), ContractError);
  CHECK_THROWS_AS(closed_accuracy({"yes"}, {"yes", "no"}), ContractError);
  CHECK(normalize_answer(" A  b. ") == "a b");
  CHECK(normalize_answer("...") == "");

  // Invariant under case permutation of the inputs.
  std::mt19937_64 rng(4);
  std::vector<std::string> p, g;
  for (int i = 0; i < 200; ++i) {
    p.push_back(rng() % 2 ? "yes" : "no");
    g.push_back(rng() % 2 ? "yes" : "no");
  }
  const double base = closed_accuracy(p, g);
  for (auto& s : p)
    if (rng() % 2) s[0] = static_cast<char>(std::toupper(s[0]));
  CHECK(closed_accuracy(p, g) == base);
}

TEST_CASE("metric hand cases") {
  const BleuResult clipped = bleu(metric_tokens("the the the the"), metric_tokens("the cat"), 1);
  CHECK(std::abs(clipped.precisions[0] - 0.25) <= 1e-12);

  const Tokens c2 = metric_tokens("a b"), r4 = metric_tokens("a b c d");
  CHECK(std::abs(bleu(c2, r4, 1).brevity_penalty - std::exp(-1.0)) <= 1e-12);
  CHECK(std::abs(bleu(c2, r4, 1).score - std::exp(-1.0)) <= 1e-12);

  CHECK(std::abs(rouge_l("a b c d", "a c d f") - 0.75) <= 1e-12);
  CHECK(std::abs(rouge_n("a b c", "a b d", 1) - 2.0 / 3.0) <= 1e-12);
  CHECK(rouge_n("a b", "c d", 1) == 0.0);
  CHECK(rouge_l("", "a b") == 0.0);
  CHECK(rouge_n("", "", 1) == 0.0);

  for (std::size_t n = 1; n <= 4; ++n) {
    CHECK(bleu_n("the lesion is in the upper left region", "the lesion is in the upper left region", n) == 1.0);
    CHECK(bleu_n("a b", "a b", n) == 1.0);
  }
  CHECK(rouge_n("same text here", "same text here", 2) == 1.0);
  CHECK(rouge_l("Same, text.", "same text") == 1.0);

  const BleuResult empty = bleu({}, metric_tokens("x"), 4);
  CHECK(empty.empty_candidate);
  CHECK(empty.score == 0.0);
  CHECK_THROWS_AS(bleu(c2, r4, 5), ContractError);
  CHECK(metric_tokens("Answer: Yes, it's") == Tokens{"answer", "yes", "it", "s"});
}

TEST_CASE("metric engine agrees with the brute-force oracle") {
  std::mt19937_64 rng(2024);
  for (int i = 0; i < 1000; ++i) {
    const int alphabet = 2 + static_cast<int>(rng() % 5);
    const Tokens c = random_tokens(rng, 12, alphabet), r = random_tokens(rng, 12, alphabet);
    for (std::size_t n = 1; n <= 4; ++n) {
      const NgramCounts e = ngram_counts(c, r, n), o = oracle_counts(c, r, n);
      REQUIRE(e.matches == o.matches);
      REQUIRE(e.candidate_total == o.candidate_total);
      REQUIRE(e.reference_total == o.reference_total);
      CHECK(bleu(c, r, n).score == oracle_bleu(c, r, n));
    }
    const std::size_t lcs = lcs_length(c, r);
    REQUIRE(lcs == oracle_lcs(c, r));
    CHECK(rouge_l(c, r) == oracle_f1(lcs, c.size(), r.size()));
    for (std::size_t n = 1; n <= 2; ++n) {
      const NgramCounts o = oracle_counts(c, r, n);
      CHECK(rouge_n(c, r, n) == oracle_f1(o.matches, o.candidate_total, o.reference_total));
    }
  }
}

TEST_CASE("a fully matched higher order can raise BLEU") {
  const Tokens c{"a", "b", "a"}, r{"b", "a", "b"};
  CHECK(bleu(c, r, 1).score == doctest::Approx(2.0 / 3.0).epsilon(1e-12));
  CHECK(bleu(c, r, 2).precisions[1] == 1.0);
  CHECK(bleu(c, r, 2).score == doctest::Approx(std::sqrt(2.0 / 3.0)).epsilon(1e-12));
  CHECK(bleu(c, r, 2).score > bleu(c, r, 1).score);
}

TEST_CASE("metric properties on random corpora") {
  std::mt19937_64 rng(77);
  for (int i = 0; i < 500; ++i) {
    const Tokens c = random_tokens(rng, 10, 3), r = random_tokens(rng, 10, 3);
    BleuResult prev = bleu(c, r, 1);
    for (std::size_t n = 1; n <= 4; ++n) {
      const BleuResult b = bleu(c, r, n);
      CHECK(b.score >= 0.0);
      CHECK(b.score <= 1.0);
      if (n == 1 || b.empty_candidate) continue;
      // A harder order lowers the score exactly when its precision is below
      // the geometric mean of the orders before it.
      const double mean_before = prev.score / prev.brevity_penalty;
      const double p = b.precisions[n - 1];
      if (p <= mean_before)
        CHECK(b.score <= prev.score * (1.0 + 1e-12));
      else
        CHECK(b.score >= prev.score * (1.0 - 1e-12));
      prev = b;
    }
    for (std::size_t n = 1; n <= 2; ++n) {
      CHECK(rouge_n(c, r, n) == rouge_n(r, c, n));
      CHECK(rouge_n(c, r, n) >= 0.0);
      CHECK(rouge_n(c, r, n) <= 1.0);
    }
    CHECK(rouge_l(c, r) == rouge_l(r, c));
  }
}

namespace {

VqaSample closed_item(const std::string& id, const std::string& answer, const std::string& category) {
  VqaSample s;
  s.id = id;
  s.question = "Is it abnormal?";
  s.answer = answer;
  s.qtype = QType::kClosed;
  s.split = Split::kTest;
  s.category = category;
  return s;
}

GenerationOutput said(const std::string& answer) {
  GenerationOutput o;
  o.answer = answer;
  o.raw = "Answer: " + answer;
  o.parse_ok = true;
  return o;
}

}  // namespace

TEST_CASE("per-category error rate from counts") {
  std::vector<VqaSample> data;
  std::vector<GenerationOutput> outs;
  for (int i = 0; i < 16; ++i) {
    data.push_back(closed_item("neck-" + std::to_string(i), "yes", "Neck"));
    outs.push_back(said(i == 7 ? "no" : "yes"));
  }
  const EvalReport r = evaluate(outs, data, Strategy::kExplanation);
  CHECK(r.per_category.at("Neck").total == 16);
  CHECK(r.per_category.at("Neck").wrong == 1);
  CHECK(r.per_category.at("Neck").rate() == 0.0625);
  CHECK(format_eval_table(r).find("Neck      (N=16)  6.25%") != std::string::npos);
}

TEST_CASE("evaluate: perfect predictions and category totals") {
  std::vector<VqaSample> data;
  std::vector<GenerationOutput> outs;
  const char* cats[] = {"Head", "Chest", "Abdomen"};
  for (int i = 0; i < 30; ++i) {
    data.push_back(closed_item("c" + std::to_string(i), i % 2 ? "yes" : "no", cats[i % 3]));
    if (i % 5 == 0) data.back().category.reset();
    outs.push_back(said(data.back().answer));
  }
  const EvalReport r = evaluate(outs, data, Strategy::kNoRationale);
  CHECK(r.closed_accuracy == 1.0);
  std::size_t total = 0;
  for (const auto& [name, c] : r.per_category) {
    CHECK(c.rate() == 0.0);
    total += c.total;
  }
  CHECK(total == r.closed_count);
  CHECK(r.per_category.count(kUntaggedCategory) == 1);
  CHECK(r.item_count.at("test") == 30);
  CHECK_THROWS_AS(evaluate({}, data, Strategy::kNoRationale), ContractError);
}

TEST_CASE("evaluate: open-end items score against the serialized gold target") {
  VqaSample s;
  s.id = "o1";
  s.question = "Where is the lesion located?";
  s.answer = "upper left";
  s.rationale = "the lesion marker appears in the upper left region";
  s.qtype = QType::kOpen;
  GenerationOutput exact;
  exact.raw = make_target(Strategy::kReasoning, s.answer, *s.rationale);
  exact.parse_ok = true;
  exact.answer = s.answer;
  GenerationOutput none;
  const EvalReport r = evaluate({exact, none}, {s, s}, Strategy::kReasoning);
  CHECK(r.open_count == 2);
  CHECK(r.closed_count == 0);
  CHECK(r.empty_candidates == 1);
  CHECK(r.parse_failures == 1);
  for (std::size_t n = 1; n <= 4; ++n) CHECK(r.bleu.at(n) == 0.5);
  CHECK(r.rouge.at("L") == 0.5);
}

TEST_CASE("report rendering matches the golden files") {
  std::vector<VqaSample> data;
  std::vector<GenerationOutput> outs;
  const char* regions[] = {"upper left", "lower right"};
  for (int i = 0; i < 10; ++i) {
    data.push_back(closed_item("g" + std::to_string(i), i % 3 ? "yes" : "no", regions[i % 2]));
    data.back().split = i < 8 ? Split::kTest : Split::kTrain;
    outs.push_back(said(i == 4 || i == 5 ? "maybe" : data.back().answer));
  }
  VqaSample open;
  open.id = "open";
  open.question = "Where is the lesion located?";
  open.answer = "lower right";
  open.rationale = "the lesion marker appears in the lower right region";
  open.qtype = QType::kOpen;
  data.push_back(open);
  GenerationOutput o;
  o.raw = "Answer: lower left Rationale: the lesion marker appears in the lower left region";
  o.answer = "lower left";
  o.rationale = "the lesion marker appears in the lower left region";
  o.parse_ok = true;
  outs.push_back(o);

  const EvalReport r = evaluate(outs, data, Strategy::kExplanation);
  const auto read = [](const char* name) {
    std::ifstream in(std::string(MEDTHINK_GOLDEN_DIR) + "/" + name);
    REQUIRE(in);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
  };
  CHECK(format_eval_table(r) == read("eval_report.txt"));
  CHECK(format_eval_kv(r) == read("eval_report.kv"));
}
