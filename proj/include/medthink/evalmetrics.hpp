#pragma once

#include <array>
#include <map>
#include <string>
#include <vector>

#include "medthink/data.hpp"
#include "medthink/strategies.hpp"

namespace medthink {

// Lowercase, trim, strip terminal punctuation, collapse internal whitespace.
std::string normalize_answer(const std::string& text);

// Fraction of normalized exact matches. Throws ContractError on empty input
// or a length mismatch.
double closed_accuracy(const std::vector<std::string>& predictions, const std::vector<std::string>& golds);

// Metric tokenization: lowercase, punctuation stripped to spaces, whitespace split.
std::vector<std::string> metric_tokens(const std::string& text);

struct NgramCounts {
  std::size_t matches = 0;  // clipped: each n-gram counted min(candidate, reference) times
  std::size_t candidate_total = 0;
  std::size_t reference_total = 0;
};

using Tokens = std::vector<std::string>;

NgramCounts ngram_counts(const Tokens& candidate, const Tokens& reference, std::size_t n);
std::size_t lcs_length(const Tokens& a, const Tokens& b);

inline constexpr double kBleuEpsilon = 1e-9;

struct BleuResult {
  double score = 0.0;
  std::array<double, 4> precisions{};  // modified precision per order, smoothed
  double brevity_penalty = 0.0;
  bool empty_candidate = false;
};

// Geometric mean of clipped precisions for orders 1..max_n times
// min(1, exp(1 - r/c)). An order with no clipped match has precision ε; an
// order with no n-grams in either text is left out of the mean.
BleuResult bleu(const Tokens& candidate, const Tokens& reference, std::size_t max_n);
double bleu_n(const std::string& candidate, const std::string& reference, std::size_t max_n);

// F1 of clipped n-gram overlap; 0 when either side has no n-grams.
double rouge_n(const Tokens& candidate, const Tokens& reference, std::size_t n);
double rouge_n(const std::string& candidate, const std::string& reference, std::size_t n);
// F1 of the longest common subsequence; 0 when either side is empty.
double rouge_l(const Tokens& candidate, const Tokens& reference);
double rouge_l(const std::string& candidate, const std::string& reference);

inline constexpr const char* kUntaggedCategory = "(untagged)";

struct CategoryError {
  std::size_t total = 0;
  std::size_t wrong = 0;
  double rate() const { return total ? static_cast<double>(wrong) / static_cast<double>(total) : 0.0; }
};

struct EvalReport {
  std::string strategy;  // report label, e.g. "w/ Explanation"
  std::size_t closed_count = 0;
  std::size_t closed_correct = 0;
  double closed_accuracy = 0.0;
  std::size_t open_count = 0;
  std::map<std::size_t, double> bleu;    // orders 1..4
  std::map<std::string, double> rouge;   // "1", "2", "L"
  std::size_t empty_candidates = 0;
  std::size_t parse_failures = 0;
  std::map<std::string, CategoryError> per_category;  // closed-end items only
  std::map<std::string, std::size_t> item_count;      // per split
};

// Closed-end items compare parsed answers; open-end items score the raw
// output against the serialized gold target for `strategy` (sentence-level,
// averaged). outputs[i] belongs to dataset[i].
EvalReport evaluate(const std::vector<GenerationOutput>& outputs, const std::vector<VqaSample>& dataset,
                    Strategy strategy);

std::vector<GenerationOutput> predict(const MedThinkModel& model, const Vocab& vocab, Strategy strategy,
                                      const std::vector<VqaSample>& dataset, std::size_t max_len);
std::vector<GenerationOutput> predict_two_stage(const MedThinkModel& stage1, const MedThinkModel& stage2,
                                                const Vocab& vocab, const std::vector<VqaSample>& dataset,
                                                std::size_t max_len);

std::string format_eval_table(const EvalReport& report);
// One key=value per line with round-trip precision.
std::string format_eval_kv(const EvalReport& report);

}  // namespace medthink
