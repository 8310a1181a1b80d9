#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <mutex>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "medthink/data.hpp"

namespace medthink {

// ---------------------------------------------------------------------------
// Records and verdicts
// ---------------------------------------------------------------------------

enum class RecordState { kPendingGeneration, kPendingReview, kApproved, kRegenerate, kExpertEscalated, kExpertWritten };

std::string to_string(RecordState s);
RecordState parse_record_state(const std::string& s);  // ParseError
// Approved and expert_written records are final and export-eligible.
bool is_terminal(RecordState s);

inline constexpr int kMaxAttempts = 3;

struct ReviewVerdict {
  bool coherence = false;
  bool relevance = false;
  bool accuracy = false;
  std::string note;
  std::string reviewer;
  std::string timestamp;  // ISO-8601 UTC

  bool passed() const { return coherence && relevance && accuracy; }
  bool operator==(const ReviewVerdict&) const = default;
};

struct Generation {
  std::string rationale;
  std::string generator_id;
  double latency_ms = 0.0;
  bool operator==(const Generation&) const = default;
};

struct AnnotationRecord {
  std::string sample_id;
  std::string image_ref;
  std::string question;
  std::string answer;
  std::optional<std::string> candidate_rationale;
  int attempts = 0;
  RecordState state = RecordState::kPendingGeneration;
  std::vector<ReviewVerdict> verdicts;
  std::vector<Generation> generations;  // every produced candidate, in order
  std::optional<std::string> expert_reviewer;
  std::optional<std::string> last_error;  // most recent transport failure
  std::uint64_t version = 0;

  bool operator==(const AnnotationRecord&) const = default;
};

AnnotationRecord make_record(const VqaSample& sample);

// ---------------------------------------------------------------------------
// Generator clients
// ---------------------------------------------------------------------------

struct PromptTemplate {
  std::string id;
  std::string text;  // {T} is replaced by the question, {A} by the answer

  std::string render(const std::string& question, const std::string& answer) const;
};

const PromptTemplate& default_prompt_template();
const PromptTemplate& consistency_prompt_template();

struct GeneratorRequest {
  std::string image_base64;
  std::string image_mime;
  std::string question;
  std::string answer;
  std::string prompt_template_id;
  std::string prompt;
  int attempt = 0;  // index of the candidate being requested, from 0

  bool operator==(const GeneratorRequest&) const = default;
};

struct GeneratorResponse {
  std::string rationale;
  std::string generator_id;
  double latency_ms = 0.0;
};

struct ConsistencyItem {
  std::string sample_id;
  std::string question;
  std::string answer;
};

struct ConsistencyRequest {
  std::string image_base64;
  std::string image_mime;
  std::string prompt;
  std::vector<ConsistencyItem> items;
};

// Implementations throw TransportError when no usable answer came back.
class GeneratorClient {
 public:
  virtual ~GeneratorClient() = default;
  virtual GeneratorResponse generate(const GeneratorRequest& request) = 0;
  // Pairs of sample ids the generator considers contradictory.
  virtual std::vector<std::pair<std::string, std::string>> review_consistency(const ConsistencyRequest& request) = 0;
};

// Offline generator: the rationale is a seeded template choice over the
// request content, so equal requests give equal bytes.
class MockGenerator : public GeneratorClient {
 public:
  explicit MockGenerator(std::uint64_t seed = 0) : seed_(seed) {}

  GeneratorResponse generate(const GeneratorRequest& request) override;
  std::vector<std::pair<std::string, std::string>> review_consistency(const ConsistencyRequest& request) override;

  // The next `n` calls fail with TransportError.
  void fail_next(int n) { failures_ = n; }
  // Every call fails.
  void set_unreachable(bool unreachable) { unreachable_ = unreachable; }
  // Pairs reported by review_consistency when both ids are in the request.
  void flag_pair(const std::string& a, const std::string& b) { flagged_.emplace_back(a, b); }
  std::size_t calls() const { return calls_; }

 private:
  void maybe_fail();

  std::uint64_t seed_;
  int failures_ = 0;
  bool unreachable_ = false;
  std::size_t calls_ = 0;
  std::vector<std::pair<std::string, std::string>> flagged_;
};

// Image payload for requests: file references are sent as the file bytes,
// inline grids as binary PGM.
std::string image_bytes(const Image& image);
std::string image_mime(const Image& image);
std::string base64_encode(const std::string& bytes);
std::string base64_decode(const std::string& text);  // ParseError

GeneratorRequest make_generator_request(const VqaSample& sample, const AnnotationRecord& record,
                                        const PromptTemplate& prompt = default_prompt_template());

// ---------------------------------------------------------------------------
// State machine
// ---------------------------------------------------------------------------

// Throws ConflictError when `expected` differs from record.version.
void check_version(const AnnotationRecord& record, std::uint64_t expected);

// Applies a produced candidate: attempts + 1, pending_review.
AnnotationRecord apply_generation(const AnnotationRecord& record, const Generation& generation);
// Records a transport failure; attempts and state unchanged.
AnnotationRecord apply_generation_failure(const AnnotationRecord& record, const std::string& error);

// ContractError unless the state is pending_generation or regenerate with
// attempts < 3. A TransportError from the client becomes an error annotation.
AnnotationRecord request_rationale(GeneratorClient& client, const AnnotationRecord& record, const VqaSample& sample,
                                   const PromptTemplate& prompt = default_prompt_template());

// ContractError unless pending_review.
AnnotationRecord review_transition(const AnnotationRecord& record, const ReviewVerdict& verdict);

// ContractError unless expert_escalated, or on blank text.
AnnotationRecord submit_expert_rationale(const AnnotationRecord& record, const std::string& text,
                                         const std::string& reviewer);

// ---------------------------------------------------------------------------
// Event log
// ---------------------------------------------------------------------------

enum class EventType { kCreated, kGenerated, kGenerationFailed, kVerdict, kExpert };

std::string to_string(EventType t);

struct AnnotationEvent {
  EventType type = EventType::kCreated;
  std::string sample_id;
  std::uint64_t version = 0;  // record version after the event
  std::optional<AnnotationRecord> created;  // kCreated
  std::optional<Generation> generation;    // kGenerated
  std::string error;                        // kGenerationFailed
  std::optional<ReviewVerdict> verdict;    // kVerdict
  std::string text, reviewer;               // kExpert

  bool operator==(const AnnotationEvent&) const = default;
};

std::string event_line(const AnnotationEvent& event);
AnnotationEvent parse_event_line(const std::string& line);  // ParseError
std::vector<AnnotationEvent> read_event_log(const std::filesystem::path& path);

// Replays events in order. IntegrityError on an event for an unknown record,
// a repeated creation, or a version that does not follow its predecessor.
std::map<std::string, AnnotationRecord> fold_events(const std::vector<AnnotationEvent>& events);

// ---------------------------------------------------------------------------
// Cleaning
// ---------------------------------------------------------------------------

// A general question answered `general_answer` contradicts a more specific
// question answered `specific_answer`. Patterns are ECMAScript regexes over
// normalize_text(question).
struct AntonymRule {
  std::string name;
  std::string general_pattern;
  std::string general_answer;
  std::string specific_pattern;
  std::string specific_answer;
};

const std::vector<AntonymRule>& default_antonym_rules();

struct ConflictReport {
  std::string image_ref;
  std::string first_id, second_id;
  std::string first_question, second_question;
  std::string first_answer, second_answer;
  std::vector<std::string> reasons;  // "duplicate_question", "rule:<name>", "generator"
};

struct CleaningReport {
  std::vector<ConflictReport> conflicts;
  bool degraded = false;  // the generator was asked and could not answer
  std::string degraded_reason;
};

std::vector<std::vector<VqaSample>> group_by_image(const std::vector<VqaSample>& samples);

// Never edits answers. With a client, each group with two or more items is
// also sent for review; transport failures fall back to the heuristics.
CleaningReport detect_inconsistencies(const std::vector<std::vector<VqaSample>>& groups,
                                      const std::vector<AntonymRule>& rules = default_antonym_rules(),
                                      GeneratorClient* client = nullptr);

// ---------------------------------------------------------------------------
// Export
// ---------------------------------------------------------------------------

enum class ExportMode { kStrict, kPermissive };

ExportMode parse_export_mode(const std::string& s);  // ParseError

struct ExportResult {
  std::vector<VqaSample> samples;
  std::vector<std::string> skipped;  // permissive mode: ids left out
};

// Copies terminal rationales into the manifest. Samples without a record pass
// through unchanged. Strict mode throws ExportError listing every
// non-terminal id; permissive mode drops those samples and lists them.
ExportResult export_annotated(const std::vector<AnnotationRecord>& records, const std::vector<VqaSample>& manifest,
                              ExportMode mode);

// ---------------------------------------------------------------------------
// Store
// ---------------------------------------------------------------------------

// Thread-safe record set with optimistic versioning and an append-only log.
// Opening an existing log replays it; samples without a record get one.
class AnnotationStore {
 public:
  explicit AnnotationStore(std::vector<VqaSample> samples, std::filesystem::path log_path = {},
                           PromptTemplate prompt = default_prompt_template());

  AnnotationRecord get(const std::string& id) const;  // NotFoundError
  std::vector<AnnotationRecord> records() const;
  std::vector<AnnotationRecord> queue(std::optional<RecordState> state, std::size_t limit) const;
  const std::vector<VqaSample>& samples() const { return samples_; }

  // Each checks the version, applies the transition and logs it. generate()
  // releases the lock while the client runs; a second generate for the same
  // record meanwhile gets ConflictError.
  AnnotationRecord generate(const std::string& id, std::uint64_t version, GeneratorClient& client);
  AnnotationRecord verdict(const std::string& id, std::uint64_t version, const ReviewVerdict& verdict);
  AnnotationRecord expert(const std::string& id, std::uint64_t version, const std::string& text,
                          const std::string& reviewer);

  ExportResult export_manifest(ExportMode mode) const;

 private:
  AnnotationRecord& find(const std::string& id);
  const AnnotationRecord& find(const std::string& id) const;
  void commit(const AnnotationEvent& event, AnnotationRecord next);

  std::vector<VqaSample> samples_;
  std::map<std::string, std::size_t> sample_index_;
  std::map<std::string, AnnotationRecord> records_;
  std::set<std::string> generating_;
  PromptTemplate prompt_;
  std::ofstream log_;
  mutable std::mutex mutex_;
};

std::string utc_timestamp();

}  // namespace medthink
