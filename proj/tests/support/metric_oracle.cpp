#include "metric_oracle.hpp"

#include <algorithm>
#include <cmath>

namespace test_support {

using namespace medthink;

namespace {

std::size_t occurrences(const Tokens& text, const Tokens& text_src, std::size_t at, std::size_t n) {
  std::size_t k = 0;
  for (std::size_t i = 0; i + n <= text.size(); ++i) {
    bool same = true;
    for (std::size_t j = 0; j < n && same; ++j) same = text[i + j] == text_src[at + j];
    k += same;
  }
  return k;
}

bool is_subsequence(const Tokens& sub, const Tokens& of) {
  std::size_t j = 0;
  for (std::size_t i = 0; i < of.size() && j < sub.size(); ++i) j += of[i] == sub[j];
  return j == sub.size();
}

}  // namespace

NgramCounts oracle_counts(const Tokens& c, const Tokens& r, std::size_t n) {
  NgramCounts out;
  for (std::size_t i = 0; i + n <= c.size(); ++i) {
    ++out.candidate_total;
    // Count each distinct n-gram once, at its first position.
    bool first = true;
    for (std::size_t p = 0; p < i && first; ++p) {
      bool same = true;
      for (std::size_t j = 0; j < n && same; ++j) same = c[p + j] == c[i + j];
      first = !same;
    }
    if (first) out.matches += std::min(occurrences(c, c, i, n), occurrences(r, c, i, n));
  }
  for (std::size_t i = 0; i + n <= r.size(); ++i) ++out.reference_total;
  return out;
}

std::size_t oracle_lcs(const Tokens& a, const Tokens& b) {
  std::size_t best = 0;
  for (std::uint32_t mask = 0; mask < (1u << a.size()); ++mask) {
    Tokens sub;
    for (std::size_t i = 0; i < a.size(); ++i)
      if (mask >> i & 1u) sub.push_back(a[i]);
    if (sub.size() > best && is_subsequence(sub, b)) best = sub.size();
  }
  return best;
}

double oracle_f1(std::size_t m, std::size_t c, std::size_t r) {
  if (m == 0 || c == 0 || r == 0) return 0.0;
  const double p = static_cast<double>(m) / static_cast<double>(c);
  const double q = static_cast<double>(m) / static_cast<double>(r);
  return 2.0 * p * q / (p + q);
}

double oracle_bleu(const Tokens& c, const Tokens& r, std::size_t max_n) {
  if (c.empty()) return 0.0;
  const double cl = static_cast<double>(c.size()), rl = static_cast<double>(r.size());
  const double bp = cl >= rl ? 1.0 : std::exp(1.0 - rl / cl);
  double log_sum = 0.0;
  std::size_t orders = 0;
  for (std::size_t n = 1; n <= max_n; ++n) {
    const NgramCounts k = oracle_counts(c, r, n);
    if (k.candidate_total + k.reference_total == 0) continue;
    log_sum += std::log(k.matches ? static_cast<double>(k.matches) / static_cast<double>(k.candidate_total) : 1e-9);
    ++orders;
  }
  return bp * std::exp(log_sum / static_cast<double>(orders));
}

Tokens random_tokens(std::mt19937_64& rng, std::size_t max_len, int alphabet) {
  Tokens t(std::uniform_int_distribution<std::size_t>(0, max_len)(rng));
  std::uniform_int_distribution<int> pick(0, alphabet - 1);
  for (auto& w : t) w = std::string(1, static_cast<char>('a' + pick(rng)));
  return t;
}


}  // namespace test_support
