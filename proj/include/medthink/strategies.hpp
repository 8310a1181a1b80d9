#pragma once

#include <optional>
#include <string>
#include <vector>

#include "medthink/data.hpp"
#include "medthink/model.hpp"

namespace medthink {

enum class Strategy { kNoRationale, kExplanation, kReasoning, kTwoStageReasoning };

// CLI spelling: none | explanation | reasoning | two-stage
std::string strategy_name(Strategy s);
Strategy parse_strategy(const std::string& name);
// Report label: "w/o R", "w/ Explanation", "w/ Reasoning", "w/ Two-Stage Reasoning"
std::string strategy_label(Strategy s);
bool uses_rationale(Strategy s);

struct GenerationOutput {
  std::string answer;
  std::optional<std::string> rationale;
  std::string raw;            // decoded text of the generated tokens
  std::vector<int> raw_ids;   // generated ids, including a final end token if emitted
  bool parse_ok = false;
};

// Explanation:  "Answer: {A} Rationale: {R}"
// Reasoning:    "Rationale: {R} Answer: {A}"
// NoRationale:  "Answer: {A}"
// TwoStageReasoning: the composed pipeline output, "Rationale: {R} Answer: {A}";
// the per-stage targets come from make_stage1_target / make_stage2_target.
std::string make_target(Strategy s, const std::string& answer, const std::string& rationale = {});
std::string make_stage1_target(const std::string& rationale);
std::string make_stage2_target(const std::string& answer);

// Splits on the first occurrence of each keyword in strategy order. Missing
// keywords give parse_ok == false with the whole text as the answer.
GenerationOutput parse_output(Strategy s, const std::string& decoded);

// "Question: {T} Rationale: {R}" encoded for a model with the given n_max.
// Overflow is cut from the end of the rationale, never from the question.
struct Stage2Input {
  std::vector<int> ids;       // begin ... end, unpadded
  std::string text;           // keyword-joined normalized text actually kept
  std::size_t rationale_tokens_kept = 0;
};
Stage2Input make_stage2_input(const Vocab& vocab, const std::string& question, const std::string& rationale,
                              std::size_t n_max);

// Greedy argmax decoding from the begin token until the end token or
// max_len generated tokens (capped so the prefix fits n_max).
std::vector<int> greedy_decode(const MedThinkModel& model, std::span<const int> input_ids, const Image& image,
                               std::size_t max_len);

GenerationOutput generate(const MedThinkModel& model, const Vocab& vocab, Strategy strategy,
                          const std::string& question, const Image& image, std::size_t max_len);

struct TwoStageOutput {
  GenerationOutput result;        // rationale from stage 1, answer from stage 2
  GenerationOutput stage1;
  GenerationOutput stage2;
  Stage2Input stage2_input;
  bool stage1_empty = false;
};

TwoStageOutput two_stage_generate(const MedThinkModel& stage1, const MedThinkModel& stage2, const Vocab& vocab,
                                  const std::string& question, const Image& image, std::size_t max_len);

// Teacher-forcing pairs for one model.
struct Example {
  std::string id;
  std::vector<int> input;
  const Image* image = nullptr;
  std::vector<int> target;
};

enum class Stage { kSingle, kRationale, kAnswer };

// Builds (input, target) pairs per strategy. Stage::kRationale / kAnswer
// select the two-stage sub-tasks (stage 2 reads gold rationales). Throws
// DatasetError naming the item when a needed rationale is missing.
std::vector<Example> build_examples(const std::vector<VqaSample>& samples, Strategy strategy, Stage stage,
                                    const Vocab& vocab, std::size_t n_max);

}  // namespace medthink
