#include "medthink/strategies.hpp"

#include <algorithm>
#include <cctype>

#include "medthink/errors.hpp"

namespace medthink {

namespace {

std::string trim(const std::string& s) {
  std::size_t b = 0, e = s.size();
  while (b < e && std::isspace(static_cast<unsigned char>(s[b]))) ++b;
  while (e > b && std::isspace(static_cast<unsigned char>(s[e - 1]))) --e;
  return s.substr(b, e - b);
}

bool blank(const std::string& s) { return trim(s).empty(); }

// First whitespace-delimited occurrence of `keyword` at or after `from`.
std::size_t find_keyword(const std::string& text, const std::string& keyword, std::size_t from = 0) {
  for (std::size_t p = text.find(keyword, from); p != std::string::npos; p = text.find(keyword, p + 1)) {
    const bool left = p == 0 || std::isspace(static_cast<unsigned char>(text[p - 1]));
    const std::size_t end = p + keyword.size();
    const bool right = end == text.size() || std::isspace(static_cast<unsigned char>(text[end]));
    if (left && right) return p;
  }
  return std::string::npos;
}

GenerationOutput degraded(const std::string& text) {
  GenerationOutput out;
  out.answer = text;
  return out;
}

std::string join(const std::string& a, const std::string& b) {
  if (a.empty()) return b;
  if (b.empty()) return a;
  return a + " " + b;
}

void check_vocab(const MedThinkModel& model, const Vocab& vocab) {
  if (model.config().vocab_size != vocab.size())
    throw CheckpointError("model vocabulary size " + std::to_string(model.config().vocab_size) +
                          " does not match tokenizer size " + std::to_string(vocab.size()));
}

// Tokens strictly after the first `keyword` id up to the end token.
std::vector<int> ids_after(const std::vector<int>& ids, int keyword) {
  auto it = std::find(ids.begin(), ids.end(), keyword);
  if (it == ids.end()) return {};
  std::vector<int> out;
  for (++it; it != ids.end() && *it != Vocab::kEnd; ++it) out.push_back(*it);
  return out;
}

Stage2Input stage2_from_ids(const Vocab& vocab, const std::vector<int>& question, const std::vector<int>& rationale,
                            std::size_t n_max) {
  if (n_max < 4) throw ContractError("stage-2 input needs n_max >= 4, got " + std::to_string(n_max));
  Stage2Input in;
  in.ids.push_back(Vocab::kBegin);
  in.ids.push_back(Vocab::kQuestion);
  // begin, Question:, Rationale:, end
  const std::size_t room = n_max - 4;
  const std::size_t q = std::min(question.size(), room);
  in.ids.insert(in.ids.end(), question.begin(), question.begin() + static_cast<long>(q));
  in.ids.push_back(Vocab::kRationale);
  in.rationale_tokens_kept = std::min(rationale.size(), room - q);
  in.ids.insert(in.ids.end(), rationale.begin(), rationale.begin() + static_cast<long>(in.rationale_tokens_kept));
  in.ids.push_back(Vocab::kEnd);
  in.text = vocab.decode(in.ids);
  return in;
}

std::vector<int> word_ids(const Vocab& vocab, const std::string& text) {
  std::vector<int> ids;
  for (const auto& w : tokenize(text)) ids.push_back(vocab.id(w));
  return ids;
}

}  // namespace

std::string strategy_name(Strategy s) {
  switch (s) {
    case Strategy::kNoRationale: return "none";
    case Strategy::kExplanation: return "explanation";
    case Strategy::kReasoning: return "reasoning";
    case Strategy::kTwoStageReasoning: return "two-stage";
  }
  return "none";
}

Strategy parse_strategy(const std::string& name) {
  for (Strategy s : {Strategy::kNoRationale, Strategy::kExplanation, Strategy::kReasoning,
                     Strategy::kTwoStageReasoning})
    if (strategy_name(s) == name) return s;
  throw ConfigError("unknown strategy '" + name + "' (expected none, explanation, reasoning or two-stage)");
}

std::string strategy_label(Strategy s) {
  switch (s) {
    case Strategy::kNoRationale: return "w/o R";
    case Strategy::kExplanation: return "w/ Explanation";
    case Strategy::kReasoning: return "w/ Reasoning";
    case Strategy::kTwoStageReasoning: return "w/ Two-Stage Reasoning";
  }
  return "w/o R";
}

bool uses_rationale(Strategy s) { return s != Strategy::kNoRationale; }

std::string make_target(Strategy s, const std::string& answer, const std::string& rationale) {
  if (blank(answer)) throw ContractError("make_target: empty answer");
  if (uses_rationale(s) && blank(rationale))
    throw ContractError("make_target: empty rationale for strategy " + strategy_name(s));
  const std::string a = std::string(kAnswerKeyword) + " " + answer;
  const std::string r = std::string(kRationaleKeyword) + " " + rationale;
  switch (s) {
    case Strategy::kNoRationale: return a;
    case Strategy::kExplanation: return a + " " + r;
    case Strategy::kReasoning:
    case Strategy::kTwoStageReasoning: return r + " " + a;
  }
  return a;
}

std::string make_stage1_target(const std::string& rationale) {
  if (blank(rationale)) throw ContractError("make_stage1_target: empty rationale");
  return std::string(kRationaleKeyword) + " " + rationale;
}

std::string make_stage2_target(const std::string& answer) {
  if (blank(answer)) throw ContractError("make_stage2_target: empty answer");
  return std::string(kAnswerKeyword) + " " + answer;
}

GenerationOutput parse_output(Strategy s, const std::string& decoded) {
  const std::string ak = kAnswerKeyword, rk = kRationaleKeyword;
  GenerationOutput out;
  out.raw = decoded;
  switch (s) {
    case Strategy::kNoRationale: {
      const auto pa = find_keyword(decoded, ak);
      if (pa == std::string::npos) break;
      out.answer = trim(decoded.substr(pa + ak.size()));
      out.parse_ok = !out.answer.empty();
      break;
    }
    case Strategy::kExplanation: {
      const auto pa = find_keyword(decoded, ak);
      if (pa == std::string::npos) break;
      const auto pr = find_keyword(decoded, rk, pa + ak.size());
      if (pr == std::string::npos) break;
      out.answer = trim(decoded.substr(pa + ak.size(), pr - pa - ak.size()));
      out.rationale = trim(decoded.substr(pr + rk.size()));
      out.parse_ok = !out.answer.empty();
      break;
    }
    case Strategy::kReasoning:
    case Strategy::kTwoStageReasoning: {
      const auto pr = find_keyword(decoded, rk);
      if (pr == std::string::npos) break;
      const auto pa = find_keyword(decoded, ak, pr + rk.size());
      if (pa == std::string::npos) break;
      out.rationale = trim(decoded.substr(pr + rk.size(), pa - pr - rk.size()));
      out.answer = trim(decoded.substr(pa + ak.size()));
      out.parse_ok = !out.answer.empty();
      break;
    }
  }
  if (!out.parse_ok) {
    GenerationOutput d = degraded(decoded);
    d.raw = decoded;
    return d;
  }
  return out;
}

Stage2Input make_stage2_input(const Vocab& vocab, const std::string& question, const std::string& rationale,
                              std::size_t n_max) {
  return stage2_from_ids(vocab, word_ids(vocab, question), word_ids(vocab, rationale), n_max);
}

std::vector<int> greedy_decode(const MedThinkModel& model, std::span<const int> input_ids, const Image& image,
                               std::size_t max_len) {
  if (max_len == 0) throw ContractError("greedy_decode: max_len must be >= 1");
  const std::size_t limit = std::min(max_len, model.config().n_max);
  Tape tape(false);
  const auto b = model.bind(tape);
  const Var fused = model.fuse(b, input_ids, image);
  std::vector<int> prefix{Vocab::kBegin};
  std::vector<int> generated;
  while (generated.size() < limit) {
    const Tensor& logits = model.decode_logits(b, fused, prefix).value();
    const std::size_t row = logits.rows() - 1, v = logits.cols();
    int best = 0;
    for (std::size_t j = 1; j < v; ++j)
      if (logits.at(row, j) > logits.at(row, static_cast<std::size_t>(best))) best = static_cast<int>(j);
    generated.push_back(best);
    if (best == Vocab::kEnd) break;
    prefix.push_back(best);
  }
  return generated;
}

GenerationOutput generate(const MedThinkModel& model, const Vocab& vocab, Strategy strategy,
                          const std::string& question, const Image& image, std::size_t max_len) {
  check_vocab(model, vocab);
  const auto input = vocab.encode(question, model.config().n_max).active();
  auto ids = greedy_decode(model, input, image, max_len);
  const std::string text = vocab.decode(ids);
  GenerationOutput out = parse_output(strategy, text);
  out.raw_ids = std::move(ids);
  if (strategy == Strategy::kNoRationale) out.rationale.reset();
  return out;
}

TwoStageOutput two_stage_generate(const MedThinkModel& stage1, const MedThinkModel& stage2, const Vocab& vocab,
                                  const std::string& question, const Image& image, std::size_t max_len) {
  check_vocab(stage1, vocab);
  check_vocab(stage2, vocab);
  TwoStageOutput out;

  const auto input1 = vocab.encode(question, stage1.config().n_max).active();
  auto ids1 = greedy_decode(stage1, input1, image, max_len);
  out.stage1.raw = vocab.decode(ids1);
  std::vector<int> rationale_ids;
  if (std::find(ids1.begin(), ids1.end(), Vocab::kRationale) != ids1.end()) {
    rationale_ids = ids_after(ids1, Vocab::kRationale);
    out.stage1.parse_ok = !rationale_ids.empty();
  } else {
    for (int id : ids1) {
      if (id == Vocab::kEnd) break;
      rationale_ids.push_back(id);
    }
  }
  out.stage1.raw_ids = std::move(ids1);
  const std::string rationale = vocab.decode(rationale_ids);
  out.stage1.rationale = rationale;
  out.stage1.answer = rationale;
  out.stage1_empty = rationale.empty();

  out.stage2_input = stage2_from_ids(vocab, word_ids(vocab, question), rationale_ids, stage2.config().n_max);
  auto ids2 = greedy_decode(stage2, out.stage2_input.ids, image, max_len);
  out.stage2 = parse_output(Strategy::kNoRationale, vocab.decode(ids2));
  out.stage2.raw_ids = std::move(ids2);

  out.result.answer = out.stage2.answer;
  out.result.rationale = rationale;
  out.result.raw = join(join(kRationaleKeyword, rationale), out.stage2.raw);
  out.result.raw_ids = out.stage1.raw_ids;
  if (!out.result.raw_ids.empty() && out.result.raw_ids.back() == Vocab::kEnd) out.result.raw_ids.pop_back();
  out.result.raw_ids.insert(out.result.raw_ids.end(), out.stage2.raw_ids.begin(), out.stage2.raw_ids.end());
  out.result.parse_ok = out.stage2.parse_ok;
  return out;
}

std::vector<Example> build_examples(const std::vector<VqaSample>& samples, Strategy strategy, Stage stage,
                                    const Vocab& vocab, std::size_t n_max) {
  if (stage == Stage::kSingle && strategy == Strategy::kTwoStageReasoning)
    throw ContractError("two-stage reasoning trains two models; use the rationale and answer stages");
  const bool need_rationale = stage != Stage::kSingle || uses_rationale(strategy);
  std::vector<Example> out;
  out.reserve(samples.size());
  for (const auto& s : samples) {
    if (need_rationale && (!s.rationale || blank(*s.rationale)))
      throw DatasetError("item '" + s.id + "' has no rationale");
    Example ex;
    ex.id = s.id;
    ex.image = &s.image;
    std::string target;
    switch (stage) {
      case Stage::kSingle:
        ex.input = vocab.encode(s.question, n_max).active();
        target = make_target(strategy, s.answer, s.rationale.value_or(""));
        break;
      case Stage::kRationale:
        ex.input = vocab.encode(s.question, n_max).active();
        target = make_stage1_target(*s.rationale);
        break;
      case Stage::kAnswer:
        ex.input = make_stage2_input(vocab, s.question, *s.rationale, n_max).ids;
        target = make_stage2_target(s.answer);
        break;
    }
    // The decoder reads target[0..L-2], so the full target may hold n_max + 1 ids.
    ex.target = vocab.encode(target, n_max + 1).active();
    out.push_back(std::move(ex));
  }
  return out;
}

}  // namespace medthink
