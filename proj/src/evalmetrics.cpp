#include "medthink/evalmetrics.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <sstream>

#include "medthink/errors.hpp"

namespace medthink {

namespace {

bool is_space(char c) { return std::isspace(static_cast<unsigned char>(c)) != 0; }

std::string key_part(std::string s) {
  std::replace(s.begin(), s.end(), ' ', '_');
  return s;
}

double f1(double matches, double cand_total, double ref_total) {
  if (matches == 0.0 || cand_total == 0.0 || ref_total == 0.0) return 0.0;
  const double p = matches / cand_total;
  const double r = matches / ref_total;
  return 2.0 * p * r / (p + r);
}

std::string g17(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::string percent(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f%%", 100.0 * v);
  return buf;
}

}  // namespace

std::string normalize_answer(const std::string& text) {
  std::string s;
  for (char c : text) s.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(c))));
  auto strip = [&] {
    while (!s.empty() && is_space(s.back())) s.pop_back();
    std::size_t b = 0;
    while (b < s.size() && is_space(s[b])) ++b;
    s.erase(0, b);
  };
  strip();
  while (!s.empty() && std::ispunct(static_cast<unsigned char>(s.back()))) {
    s.pop_back();
    strip();
  }
  std::string out;
  bool gap = false;
  for (char c : s) {
    if (is_space(c)) {
      gap = true;
      continue;
    }
    if (gap && !out.empty()) out.push_back(' ');
    gap = false;
    out.push_back(c);
  }
  return out;
}

double closed_accuracy(const std::vector<std::string>& predictions, const std::vector<std::string>& golds) {
  if (predictions.size() != golds.size())
    throw ContractError("closed_accuracy: " + std::to_string(predictions.size()) + " predictions for " +
                        std::to_string(golds.size()) + " gold answers");
  if (predictions.empty()) throw ContractError("closed_accuracy: no items");
  std::size_t hits = 0;
  for (std::size_t i = 0; i < golds.size(); ++i) hits += normalize_answer(predictions[i]) == normalize_answer(golds[i]);
  return static_cast<double>(hits) / static_cast<double>(golds.size());
}

Tokens metric_tokens(const std::string& text) {
  Tokens out;
  std::string cur;
  for (char c : text) {
    const auto u = static_cast<unsigned char>(c);
    if (std::isspace(u) || std::ispunct(u)) {
      if (!cur.empty()) out.push_back(std::move(cur));
      cur.clear();
    } else {
      cur.push_back(static_cast<char>(std::tolower(u)));
    }
  }
  if (!cur.empty()) out.push_back(std::move(cur));
  return out;
}

NgramCounts ngram_counts(const Tokens& candidate, const Tokens& reference, std::size_t n) {
  if (n == 0) throw ContractError("ngram_counts: order must be >= 1");
  auto grams = [n](const Tokens& t) {
    std::map<Tokens, std::size_t> m;
    for (std::size_t i = 0; i + n <= t.size(); ++i) ++m[Tokens(t.begin() + static_cast<long>(i), t.begin() + static_cast<long>(i + n))];
    return m;
  };
  const auto c = grams(candidate), r = grams(reference);
  NgramCounts out;
  out.candidate_total = candidate.size() >= n ? candidate.size() - n + 1 : 0;
  out.reference_total = reference.size() >= n ? reference.size() - n + 1 : 0;
  for (const auto& [g, k] : c) {
    const auto it = r.find(g);
    if (it != r.end()) out.matches += std::min(k, it->second);
  }
  return out;
}

std::size_t lcs_length(const Tokens& a, const Tokens& b) {
  std::vector<std::size_t> prev(b.size() + 1, 0), cur(b.size() + 1, 0);
  for (std::size_t i = 1; i <= a.size(); ++i) {
    for (std::size_t j = 1; j <= b.size(); ++j)
      cur[j] = a[i - 1] == b[j - 1] ? prev[j - 1] + 1 : std::max(prev[j], cur[j - 1]);
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

BleuResult bleu(const Tokens& candidate, const Tokens& reference, std::size_t max_n) {
  if (max_n < 1 || max_n > 4) throw ContractError("bleu: max_n must be in 1..4, got " + std::to_string(max_n));
  BleuResult out;
  if (candidate.empty()) {
    out.empty_candidate = true;
    return out;
  }
  const double c = static_cast<double>(candidate.size());
  const double r = static_cast<double>(reference.size());
  out.brevity_penalty = c >= r ? 1.0 : std::exp(1.0 - r / c);
  double log_sum = 0.0;
  std::size_t orders = 0;
  for (std::size_t n = 1; n <= max_n; ++n) {
    const NgramCounts k = ngram_counts(candidate, reference, n);
    if (k.candidate_total == 0 && k.reference_total == 0) {
      out.precisions[n - 1] = 1.0;
      continue;
    }
    const double p =
        k.matches == 0 ? kBleuEpsilon : static_cast<double>(k.matches) / static_cast<double>(k.candidate_total);
    out.precisions[n - 1] = p;
    log_sum += std::log(p);
    ++orders;
  }
  out.score = out.brevity_penalty * std::exp(log_sum / static_cast<double>(orders));
  return out;
}

double bleu_n(const std::string& candidate, const std::string& reference, std::size_t max_n) {
  return bleu(metric_tokens(candidate), metric_tokens(reference), max_n).score;
}

double rouge_n(const Tokens& candidate, const Tokens& reference, std::size_t n) {
  if (n < 1) throw ContractError("rouge_n: order must be >= 1");
  const NgramCounts k = ngram_counts(candidate, reference, n);
  return f1(static_cast<double>(k.matches), static_cast<double>(k.candidate_total),
            static_cast<double>(k.reference_total));
}

double rouge_n(const std::string& candidate, const std::string& reference, std::size_t n) {
  return rouge_n(metric_tokens(candidate), metric_tokens(reference), n);
}

double rouge_l(const Tokens& candidate, const Tokens& reference) {
  return f1(static_cast<double>(lcs_length(candidate, reference)), static_cast<double>(candidate.size()),
            static_cast<double>(reference.size()));
}

double rouge_l(const std::string& candidate, const std::string& reference) {
  return rouge_l(metric_tokens(candidate), metric_tokens(reference));
}

EvalReport evaluate(const std::vector<GenerationOutput>& outputs, const std::vector<VqaSample>& dataset,
                    Strategy strategy) {
  if (outputs.size() != dataset.size())
    throw ContractError("evaluate: " + std::to_string(outputs.size()) + " outputs for " +
                        std::to_string(dataset.size()) + " items");
  EvalReport report;
  report.strategy = strategy_label(strategy);
  std::vector<std::string> preds, golds;
  std::array<double, 4> bleu_sum{};
  double r1 = 0.0, r2 = 0.0, rl = 0.0;
  for (std::size_t i = 0; i < dataset.size(); ++i) {
    const VqaSample& s = dataset[i];
    const GenerationOutput& o = outputs[i];
    ++report.item_count[to_string(s.split)];
    if (!o.parse_ok) ++report.parse_failures;
    if (s.qtype == QType::kClosed) {
      preds.push_back(o.answer);
      golds.push_back(s.answer);
      const bool wrong = normalize_answer(o.answer) != normalize_answer(s.answer);
      auto& cat = report.per_category[s.category.value_or(kUntaggedCategory)];
      ++cat.total;
      cat.wrong += wrong;
      report.closed_correct += !wrong;
    } else {
      ++report.open_count;
      const bool with_r = uses_rationale(strategy) && s.rationale && !s.rationale->empty();
      const std::string ref = make_target(with_r ? strategy : Strategy::kNoRationale, s.answer,
                                          with_r ? *s.rationale : std::string());
      const Tokens c = metric_tokens(o.raw), r = metric_tokens(ref);
      if (c.empty()) ++report.empty_candidates;
      for (std::size_t n = 1; n <= 4; ++n) bleu_sum[n - 1] += bleu(c, r, n).score;
      r1 += rouge_n(c, r, 1);
      r2 += rouge_n(c, r, 2);
      rl += rouge_l(c, r);
    }
  }
  report.closed_count = golds.size();
  if (!golds.empty()) report.closed_accuracy = closed_accuracy(preds, golds);
  if (report.open_count) {
    const double n = static_cast<double>(report.open_count);
    for (std::size_t k = 1; k <= 4; ++k) report.bleu[k] = bleu_sum[k - 1] / n;
    report.rouge["1"] = r1 / n;
    report.rouge["2"] = r2 / n;
    report.rouge["L"] = rl / n;
  }
  return report;
}

std::vector<GenerationOutput> predict(const MedThinkModel& model, const Vocab& vocab, Strategy strategy,
                                      const std::vector<VqaSample>& dataset, std::size_t max_len) {
  if (strategy == Strategy::kTwoStageReasoning)
    throw ContractError("predict: two-stage reasoning needs both stage models (predict_two_stage)");
  std::vector<GenerationOutput> out;
  out.reserve(dataset.size());
  for (const auto& s : dataset) out.push_back(generate(model, vocab, strategy, s.question, s.image, max_len));
  return out;
}

std::vector<GenerationOutput> predict_two_stage(const MedThinkModel& stage1, const MedThinkModel& stage2,
                                                const Vocab& vocab, const std::vector<VqaSample>& dataset,
                                                std::size_t max_len) {
  std::vector<GenerationOutput> out;
  out.reserve(dataset.size());
  for (const auto& s : dataset)
    out.push_back(two_stage_generate(stage1, stage2, vocab, s.question, s.image, max_len).result);
  return out;
}

std::string format_eval_table(const EvalReport& r) {
  std::ostringstream out;
  out << "strategy: " << r.strategy << '\n';
  out << "items:";
  for (const auto& [split, n] : r.item_count) out << ' ' << split << ' ' << n;
  out << '\n';
  if (r.closed_count)
    out << "closed-end accuracy: " << percent(r.closed_accuracy) << " (" << r.closed_correct << '/' << r.closed_count
        << ")\n";
  else
    out << "closed-end accuracy: n/a (no closed-end items)\n";
  if (r.open_count) {
    out << "open-end (" << r.open_count << " items):";
    for (const auto& [n, v] : r.bleu) out << " BLEU-" << n << ' ' << percent(v);
    for (const auto& [k, v] : r.rouge) out << " ROUGE-" << k << ' ' << percent(v);
    out << '\n';
  }
  if (r.parse_failures) out << "unparsed outputs: " << r.parse_failures << '\n';
  if (!r.per_category.empty()) {
    std::size_t width = 8;
    for (const auto& [name, c] : r.per_category) width = std::max(width, name.size());
    out << "error rate by category:\n";
    for (const auto& [name, c] : r.per_category) {
      out << "  " << name << std::string(width - name.size(), ' ') << "  (N=" << c.total << ")  " << percent(c.rate())
          << '\n';
    }
  }
  return out.str();
}

std::string format_eval_kv(const EvalReport& r) {
  std::ostringstream out;
  out << "strategy=" << r.strategy << '\n';
  for (const auto& [split, n] : r.item_count) out << "items." << split << '=' << n << '\n';
  out << "closed.count=" << r.closed_count << '\n';
  out << "closed.correct=" << r.closed_correct << '\n';
  out << "closed.accuracy=" << g17(r.closed_accuracy) << '\n';
  out << "open.count=" << r.open_count << '\n';
  for (const auto& [n, v] : r.bleu) out << "bleu." << n << '=' << g17(v) << '\n';
  for (const auto& [k, v] : r.rouge) out << "rouge." << k << '=' << g17(v) << '\n';
  out << "open.empty_candidates=" << r.empty_candidates << '\n';
  out << "parse_failures=" << r.parse_failures << '\n';
  for (const auto& [label, c] : r.per_category) {
    const std::string name = key_part(label);
    out << "category." << name << ".total=" << c.total << '\n'
        << "category." << name << ".wrong=" << c.wrong << '\n'
        << "category." << name << ".error=" << g17(c.rate()) << '\n';
  }
  return out.str();
}

}  // namespace medthink
