#include "medthink/annotate.hpp"

#include <algorithm>
#include <array>
#include <chrono>
#include <cstring>
#include <ctime>
#include <iterator>
#include <regex>
#include <sstream>
#include <tuple>

#include "medthink/annotate_json.hpp"
#include "medthink/errors.hpp"
#include "medthink/evalmetrics.hpp"

namespace medthink {

using nlohmann::json;

namespace {

constexpr std::array<const char*, 6> kStateNames = {"pending_generation", "pending_review", "approved",
                                                    "regenerate", "expert_escalated", "expert_written"};
constexpr std::array<const char*, 5> kEventNames = {"created", "generated", "generation_failed", "verdict",
                                                    "expert"};

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return {};
  return s.substr(b, s.find_last_not_of(" \t\r\n") - b + 1);
}

void replace_all(std::string& text, const std::string& from, const std::string& to) {
  for (std::size_t p = text.find(from); p != std::string::npos; p = text.find(from, p + to.size()))
    text.replace(p, from.size(), to);
}

void require_generatable(const AnnotationRecord& r) {
  if (r.state != RecordState::kPendingGeneration && r.state != RecordState::kRegenerate)
    throw ContractError("record '" + r.sample_id + "' cannot be generated in state " + to_string(r.state));
  if (r.attempts >= kMaxAttempts)
    throw ContractError("record '" + r.sample_id + "' has used all " + std::to_string(kMaxAttempts) + " attempts");
}

template <class T>
T field(const json& j, const char* key) {
  const auto it = j.find(key);
  if (it == j.end()) throw ParseError(std::string("missing field '") + key + "'");
  try {
    return it->get<T>();
  } catch (const json::exception&) {
    throw ParseError(std::string("field '") + key + "' has the wrong type");
  }
}

template <class T>
std::optional<T> optional_field(const json& j, const char* key) {
  const auto it = j.find(key);
  if (it == j.end() || it->is_null()) return std::nullopt;
  return field<T>(j, key);
}

}  // namespace

std::string to_string(RecordState s) { return kStateNames[static_cast<std::size_t>(s)]; }

RecordState parse_record_state(const std::string& s) {
  for (std::size_t i = 0; i < kStateNames.size(); ++i)
    if (s == kStateNames[i]) return static_cast<RecordState>(i);
  throw ParseError("unknown record state '" + s + "'");
}

bool is_terminal(RecordState s) { return s == RecordState::kApproved || s == RecordState::kExpertWritten; }

std::string to_string(EventType t) { return kEventNames[static_cast<std::size_t>(t)]; }

AnnotationRecord make_record(const VqaSample& sample) {
  AnnotationRecord r;
  r.sample_id = sample.id;
  r.image_ref = sample.image.is_file() ? sample.image.file : sample.image.key();
  r.question = sample.question;
  r.answer = sample.answer;
  return r;
}

std::string utc_timestamp() {
  const std::time_t now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

// ---------------------------------------------------------------------------
// Prompts and payloads
// ---------------------------------------------------------------------------

std::string PromptTemplate::render(const std::string& question, const std::string& answer) const {
  std::string out = text;
  replace_all(out, "{T}", question);
  replace_all(out, "{A}", answer);
  return out;
}

const PromptTemplate& default_prompt_template() {
  static const PromptTemplate t{
      "mdmr-v1",
      "You are given a medical image, a question about it, and the correct answer. Explain step by step, citing "
      "visible image findings and relevant background knowledge, why the answer is correct. Question: {T} Answer: {A}"};
  return t;
}

const PromptTemplate& consistency_prompt_template() {
  static const PromptTemplate t{
      "consistency-v1",
      "You are given a medical image and several question-answer pairs about it. List every pair of items whose "
      "answers contradict each other, one per line, as CONFLICT <id> <id>. Reply NONE if all answers agree.\n"
      "{ITEMS}"};
  return t;
}

std::string image_bytes(const Image& image) {
  if (image.is_file()) {
    std::ifstream in(image.file, std::ios::binary);
    if (!in) throw NotFoundError("cannot read image file '" + image.file + "'");
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
  }
  std::string out = "P5\n" + std::to_string(image.width) + " " + std::to_string(image.height) + "\n" +
                    std::to_string(kMaxPixel) + "\n";
  for (int p : image.pixels) out.push_back(static_cast<char>(std::clamp(p, 0, kMaxPixel)));
  return out;
}

std::string image_mime(const Image& image) {
  if (!image.is_file()) return "image/x-portable-graymap";
  std::string ext = std::filesystem::path(image.file).extension().string();
  std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
  if (ext == ".png") return "image/png";
  if (ext == ".jpg" || ext == ".jpeg") return "image/jpeg";
  if (ext == ".pgm") return "image/x-portable-graymap";
  return "application/octet-stream";
}

namespace {
constexpr char kB64[] = "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789+/";
}

std::string base64_encode(const std::string& bytes) {
  std::string out;
  out.reserve((bytes.size() + 2) / 3 * 4);
  std::size_t i = 0;
  for (; i + 2 < bytes.size(); i += 3) {
    const unsigned v = static_cast<unsigned char>(bytes[i]) << 16 | static_cast<unsigned char>(bytes[i + 1]) << 8 |
                       static_cast<unsigned char>(bytes[i + 2]);
    for (int s = 18; s >= 0; s -= 6) out.push_back(kB64[(v >> s) & 63]);
  }
  if (const std::size_t rest = bytes.size() - i; rest > 0) {
    unsigned v = static_cast<unsigned char>(bytes[i]) << 16;
    if (rest == 2) v |= static_cast<unsigned char>(bytes[i + 1]) << 8;
    out.push_back(kB64[(v >> 18) & 63]);
    out.push_back(kB64[(v >> 12) & 63]);
    out.push_back(rest == 2 ? kB64[(v >> 6) & 63] : '=');
    out.push_back('=');
  }
  return out;
}

std::string base64_decode(const std::string& text) {
  if (text.size() % 4 != 0) throw ParseError("base64 length is not a multiple of 4");
  std::string out;
  for (std::size_t i = 0; i < text.size(); i += 4) {
    unsigned v = 0;
    int pad = 0;
    for (std::size_t k = 0; k < 4; ++k) {
      const char c = text[i + k];
      unsigned d = 0;
      if (c == '=' && i + 4 == text.size() && k >= 2) {
        ++pad;
      } else if (pad > 0) {
        throw ParseError("base64 padding in the middle of the input");
      } else if (const char* p = std::strchr(kB64, c); c != '\0' && p) {
        d = static_cast<unsigned>(p - kB64);
      } else {
        throw ParseError("invalid base64 character");
      }
      v = v << 6 | d;
    }
    out.push_back(static_cast<char>(v >> 16));
    if (pad < 2) out.push_back(static_cast<char>(v >> 8 & 255));
    if (pad < 1) out.push_back(static_cast<char>(v & 255));
  }
  return out;
}

GeneratorRequest make_generator_request(const VqaSample& sample, const AnnotationRecord& record,
                                        const PromptTemplate& prompt) {
  GeneratorRequest req;
  req.image_base64 = base64_encode(image_bytes(sample.image));
  req.image_mime = image_mime(sample.image);
  req.question = record.question;
  req.answer = record.answer;
  req.prompt_template_id = prompt.id;
  req.prompt = prompt.render(record.question, record.answer);
  req.attempt = record.attempts;
  return req;
}

// ---------------------------------------------------------------------------
// Mock generator
// ---------------------------------------------------------------------------

void MockGenerator::maybe_fail() {
  ++calls_;
  if (unreachable_) throw TransportError("mock generator is unreachable");
  if (failures_ > 0) {
    --failures_;
    throw TransportError("mock generator transport failure");
  }
}

GeneratorResponse MockGenerator::generate(const GeneratorRequest& request) {
  maybe_fail();
  static const char* kTemplates[] = {
      "the visible findings in the image answer the question {T} with {A}",
      "inspecting the relevant region for the question {T} shows findings consistent with {A}",
      "the image was examined for the question {T} and the findings support the answer {A}",
      "based on the appearance of the imaged region the answer to {T} is {A}",
  };
  const std::string key = std::to_string(seed_) + '\x1f' + request.question + '\x1f' + request.answer + '\x1f' +
                          request.image_base64 + '\x1f' + std::to_string(request.attempt);
  PromptTemplate chosen{"mock", kTemplates[fnv1a(key) % std::size(kTemplates)]};
  GeneratorResponse out;
  out.rationale = chosen.render(normalize_text(request.question), normalize_answer(request.answer));
  out.generator_id = "mock-" + std::to_string(seed_);
  return out;
}

std::vector<std::pair<std::string, std::string>> MockGenerator::review_consistency(const ConsistencyRequest& request) {
  maybe_fail();
  std::set<std::string> ids;
  for (const auto& item : request.items) ids.insert(item.sample_id);
  std::vector<std::pair<std::string, std::string>> out;
  for (const auto& [a, b] : flagged_)
    if (ids.count(a) && ids.count(b)) out.emplace_back(a, b);
  return out;
}

// ---------------------------------------------------------------------------
// State machine
// ---------------------------------------------------------------------------

void check_version(const AnnotationRecord& record, std::uint64_t expected) {
  if (record.version != expected)
    throw ConflictError("record '" + record.sample_id + "' is at version " + std::to_string(record.version) +
                        ", request was for version " + std::to_string(expected));
}

AnnotationRecord apply_generation(const AnnotationRecord& record, const Generation& generation) {
  require_generatable(record);
  if (trim(generation.rationale).empty())
    throw ContractError("generator returned an empty rationale for '" + record.sample_id + "'");
  AnnotationRecord next = record;
  next.candidate_rationale = generation.rationale;
  next.generations.push_back(generation);
  next.attempts += 1;
  next.state = RecordState::kPendingReview;
  next.last_error.reset();
  next.version += 1;
  return next;
}

AnnotationRecord apply_generation_failure(const AnnotationRecord& record, const std::string& error) {
  require_generatable(record);
  AnnotationRecord next = record;
  next.last_error = error;
  next.version += 1;
  return next;
}

AnnotationRecord request_rationale(GeneratorClient& client, const AnnotationRecord& record, const VqaSample& sample,
                                   const PromptTemplate& prompt) {
  require_generatable(record);
  const GeneratorRequest req = make_generator_request(sample, record, prompt);
  GeneratorResponse resp;
  try {
    resp = client.generate(req);
  } catch (const TransportError& e) {
    return apply_generation_failure(record, e.what());
  }
  if (trim(resp.rationale).empty()) return apply_generation_failure(record, "generator returned an empty rationale");
  return apply_generation(record, {resp.rationale, resp.generator_id, resp.latency_ms});
}

AnnotationRecord review_transition(const AnnotationRecord& record, const ReviewVerdict& verdict) {
  if (record.state != RecordState::kPendingReview)
    throw ContractError("record '" + record.sample_id + "' is not pending review (state " + to_string(record.state) +
                        ")");
  AnnotationRecord next = record;
  next.verdicts.push_back(verdict);
  if (verdict.passed())
    next.state = RecordState::kApproved;
  else if (record.attempts < kMaxAttempts)
    next.state = RecordState::kRegenerate;
  else
    next.state = RecordState::kExpertEscalated;
  next.version += 1;
  return next;
}

AnnotationRecord submit_expert_rationale(const AnnotationRecord& record, const std::string& text,
                                         const std::string& reviewer) {
  if (record.state != RecordState::kExpertEscalated)
    throw ContractError("record '" + record.sample_id + "' is not escalated to an expert (state " +
                        to_string(record.state) + ")");
  if (trim(text).empty()) throw ContractError("expert rationale for '" + record.sample_id + "' is empty");
  AnnotationRecord next = record;
  next.candidate_rationale = text;
  next.expert_reviewer = reviewer;
  next.state = RecordState::kExpertWritten;
  next.version += 1;
  return next;
}

// ---------------------------------------------------------------------------
// JSON
// ---------------------------------------------------------------------------

json to_json(const ReviewVerdict& v) {
  return {{"coherence", v.coherence}, {"relevance", v.relevance}, {"accuracy", v.accuracy},
          {"note", v.note},           {"reviewer", v.reviewer},   {"timestamp", v.timestamp}};
}

json to_json(const Generation& g) {
  return {{"rationale", g.rationale}, {"generator", g.generator_id}, {"latency_ms", g.latency_ms}};
}

json to_json(const AnnotationRecord& r) {
  json verdicts = json::array(), generations = json::array();
  for (const auto& v : r.verdicts) verdicts.push_back(to_json(v));
  for (const auto& g : r.generations) generations.push_back(to_json(g));
  json j{{"id", r.sample_id},
         {"image_ref", r.image_ref},
         {"question", r.question},
         {"answer", r.answer},
         {"candidate_rationale", r.candidate_rationale ? json(*r.candidate_rationale) : json(nullptr)},
         {"attempts", r.attempts},
         {"state", to_string(r.state)},
         {"verdicts", verdicts},
         {"generations", generations},
         {"expert_reviewer", r.expert_reviewer ? json(*r.expert_reviewer) : json(nullptr)},
         {"last_error", r.last_error ? json(*r.last_error) : json(nullptr)},
         {"version", r.version}};
  return j;
}

json to_json(const ConflictReport& c) {
  return {{"image_ref", c.image_ref},
          {"items", json::array({{{"id", c.first_id}, {"question", c.first_question}, {"answer", c.first_answer}},
                                 {{"id", c.second_id}, {"question", c.second_question}, {"answer", c.second_answer}}})},
          {"reasons", c.reasons}};
}

json to_json(const CleaningReport& report) {
  json conflicts = json::array();
  for (const auto& c : report.conflicts) conflicts.push_back(to_json(c));
  return {{"conflicts", conflicts}, {"degraded", report.degraded}, {"degraded_reason", report.degraded_reason}};
}

ReviewVerdict verdict_from_json(const json& j) {
  if (!j.is_object()) throw ParseError("verdict must be a JSON object");
  ReviewVerdict v;
  v.coherence = field<bool>(j, "coherence");
  v.relevance = field<bool>(j, "relevance");
  v.accuracy = field<bool>(j, "accuracy");
  v.note = optional_field<std::string>(j, "note").value_or("");
  v.reviewer = optional_field<std::string>(j, "reviewer").value_or("");
  v.timestamp = optional_field<std::string>(j, "timestamp").value_or("");
  return v;
}

Generation generation_from_json(const json& j) {
  return {field<std::string>(j, "rationale"), field<std::string>(j, "generator"), field<double>(j, "latency_ms")};
}

AnnotationRecord record_from_json(const json& j) {
  if (!j.is_object()) throw ParseError("record must be a JSON object");
  AnnotationRecord r;
  r.sample_id = field<std::string>(j, "id");
  r.image_ref = field<std::string>(j, "image_ref");
  r.question = field<std::string>(j, "question");
  r.answer = field<std::string>(j, "answer");
  r.candidate_rationale = optional_field<std::string>(j, "candidate_rationale");
  r.attempts = field<int>(j, "attempts");
  r.state = parse_record_state(field<std::string>(j, "state"));
  for (const auto& v : field<json>(j, "verdicts")) r.verdicts.push_back(verdict_from_json(v));
  for (const auto& g : field<json>(j, "generations")) r.generations.push_back(generation_from_json(g));
  r.expert_reviewer = optional_field<std::string>(j, "expert_reviewer");
  r.last_error = optional_field<std::string>(j, "last_error");
  r.version = field<std::uint64_t>(j, "version");
  return r;
}

// ---------------------------------------------------------------------------
// Event log
// ---------------------------------------------------------------------------

std::string event_line(const AnnotationEvent& e) {
  json j{{"type", to_string(e.type)}, {"id", e.sample_id}, {"version", e.version}};
  switch (e.type) {
    case EventType::kCreated:
      j["record"] = to_json(e.created.value());
      break;
    case EventType::kGenerated:
      j["generation"] = to_json(e.generation.value());
      break;
    case EventType::kGenerationFailed:
      j["error"] = e.error;
      break;
    case EventType::kVerdict:
      j["verdict"] = to_json(e.verdict.value());
      break;
    case EventType::kExpert:
      j["text"] = e.text;
      j["reviewer"] = e.reviewer;
      break;
  }
  return j.dump();
}

AnnotationEvent parse_event_line(const std::string& line) {
  json j;
  try {
    j = json::parse(line);
  } catch (const json::exception& ex) {
    throw ParseError(std::string("event is not valid JSON: ") + ex.what());
  }
  if (!j.is_object()) throw ParseError("event must be a JSON object");
  AnnotationEvent e;
  const auto type = field<std::string>(j, "type");
  const auto it = std::find(kEventNames.begin(), kEventNames.end(), type);
  if (it == kEventNames.end()) throw ParseError("unknown event type '" + type + "'");
  e.type = static_cast<EventType>(it - kEventNames.begin());
  e.sample_id = field<std::string>(j, "id");
  e.version = field<std::uint64_t>(j, "version");
  switch (e.type) {
    case EventType::kCreated:
      e.created = record_from_json(field<json>(j, "record"));
      break;
    case EventType::kGenerated:
      e.generation = generation_from_json(field<json>(j, "generation"));
      break;
    case EventType::kGenerationFailed:
      e.error = field<std::string>(j, "error");
      break;
    case EventType::kVerdict:
      e.verdict = verdict_from_json(field<json>(j, "verdict"));
      break;
    case EventType::kExpert:
      e.text = field<std::string>(j, "text");
      e.reviewer = field<std::string>(j, "reviewer");
      break;
  }
  return e;
}

std::vector<AnnotationEvent> read_event_log(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw NotFoundError("cannot open event log '" + path.string() + "'");
  std::vector<AnnotationEvent> out;
  std::string line;
  for (std::size_t n = 1; std::getline(in, line); ++n) {
    if (trim(line).empty()) continue;
    try {
      out.push_back(parse_event_line(line));
    } catch (const ParseError& e) {
      throw ParseError(path.string() + ":" + std::to_string(n) + ": " + e.what());
    }
  }
  return out;
}

std::map<std::string, AnnotationRecord> fold_events(const std::vector<AnnotationEvent>& events) {
  std::map<std::string, AnnotationRecord> records;
  for (const auto& e : events) {
    if (e.type == EventType::kCreated) {
      if (records.count(e.sample_id)) throw IntegrityError("record '" + e.sample_id + "' is created twice");
      records.emplace(e.sample_id, e.created.value());
      continue;
    }
    const auto it = records.find(e.sample_id);
    if (it == records.end()) throw IntegrityError("event for unknown record '" + e.sample_id + "'");
    AnnotationRecord& r = it->second;
    if (e.version != r.version + 1)
      throw IntegrityError("event for '" + e.sample_id + "' has version " + std::to_string(e.version) +
                           " after version " + std::to_string(r.version));
    try {
      switch (e.type) {
        case EventType::kGenerated:
          r = apply_generation(r, e.generation.value());
          break;
        case EventType::kGenerationFailed:
          r = apply_generation_failure(r, e.error);
          break;
        case EventType::kVerdict:
          r = review_transition(r, e.verdict.value());
          break;
        case EventType::kExpert:
          r = submit_expert_rationale(r, e.text, e.reviewer);
          break;
        case EventType::kCreated:
          break;
      }
    } catch (const ContractError& ex) {
      throw IntegrityError(std::string("event log replay: ") + ex.what());
    }
  }
  return records;
}

// ---------------------------------------------------------------------------
// Cleaning
// ---------------------------------------------------------------------------

const std::vector<AntonymRule>& default_antonym_rules() {
  static const std::vector<AntonymRule> rules{
      {"normal", R"(^(is|are|does) (this|the) (image|scan|study|film|radiograph|x ray|ct|mri)( look)? normal$)", "yes",
       R"(\bnormal\b)", "no"},
      {"abnormal",
       R"(^(is|are|does) (this|the) (image|scan|study|film|radiograph|x ray|ct|mri)( look)? abnormal$)", "no",
       R"(\babnormal\b)", "yes"},
  };
  return rules;
}

std::vector<std::vector<VqaSample>> group_by_image(const std::vector<VqaSample>& samples) {
  std::vector<std::vector<VqaSample>> groups;
  std::map<std::string, std::size_t> index;
  for (const auto& s : samples) {
    const auto [it, fresh] = index.emplace(s.image.key(), groups.size());
    if (fresh) groups.emplace_back();
    groups[it->second].push_back(s);
  }
  return groups;
}

CleaningReport detect_inconsistencies(const std::vector<std::vector<VqaSample>>& groups,
                                      const std::vector<AntonymRule>& rules, GeneratorClient* client) {
  struct CompiledRule {
    std::string name;
    std::regex general, specific;
    std::string general_answer, specific_answer;
  };
  std::vector<CompiledRule> compiled;
  for (const auto& r : rules) {
    try {
      compiled.push_back({r.name, std::regex(r.general_pattern), std::regex(r.specific_pattern),
                          normalize_answer(r.general_answer), normalize_answer(r.specific_answer)});
    } catch (const std::regex_error& e) {
      throw ConfigError("antonym rule '" + r.name + "' has an invalid pattern: " + e.what());
    }
  }

  CleaningReport report;
  std::vector<std::map<std::pair<std::size_t, std::size_t>, std::size_t>> pair_index(groups.size());

  const auto add = [&](std::size_t g, std::size_t i, std::size_t j, const std::string& reason) {
    if (i > j) std::swap(i, j);
    auto& index = pair_index[g];
    auto it = index.find({i, j});
    if (it == index.end()) {
      const VqaSample& a = groups[g][i];
      const VqaSample& b = groups[g][j];
      ConflictReport c{a.image.is_file() ? a.image.file : a.image.key(), a.id, b.id, a.question, b.question,
                       a.answer, b.answer, {}};
      it = index.emplace(std::make_pair(i, j), report.conflicts.size()).first;
      report.conflicts.push_back(std::move(c));
    }
    auto& reasons = report.conflicts[it->second].reasons;
    if (std::find(reasons.begin(), reasons.end(), reason) == reasons.end()) reasons.push_back(reason);
  };

  for (std::size_t g = 0; g < groups.size(); ++g) {
    const auto& group = groups[g];
    if (group.empty()) continue;
    const std::string key = group.front().image.key();
    std::vector<std::string> questions, answers;
    for (const auto& s : group) {
      if (s.image.key() != key) throw ContractError("sample '" + s.id + "' does not share its group's image");
      questions.push_back(normalize_text(s.question));
      answers.push_back(normalize_answer(s.answer));
    }
    for (std::size_t i = 0; i < group.size(); ++i) {
      for (std::size_t j = i + 1; j < group.size(); ++j) {
        if (questions[i] == questions[j] && answers[i] != answers[j]) add(g, i, j, "duplicate_question");
        for (const auto& rule : compiled) {
          for (const auto& [a, b] : {std::pair{i, j}, std::pair{j, i}}) {
            if (answers[a] == rule.general_answer && std::regex_search(questions[a], rule.general) &&
                answers[b] == rule.specific_answer && std::regex_search(questions[b], rule.specific) &&
                !std::regex_search(questions[b], rule.general))
              add(g, i, j, "rule:" + rule.name);
          }
        }
      }
    }
  }

  if (!client) return report;

  // Generator flags are only kept if every group was reviewed.
  std::vector<std::tuple<std::size_t, std::size_t, std::size_t>> client_pairs;
  try {
    for (std::size_t g = 0; g < groups.size(); ++g) {
      const auto& group = groups[g];
      if (group.size() < 2) continue;
      ConsistencyRequest req;
      req.image_base64 = base64_encode(image_bytes(group.front().image));
      req.image_mime = image_mime(group.front().image);
      std::string items;
      for (const auto& s : group) {
        req.items.push_back({s.id, s.question, s.answer});
        items += s.id + ": " + s.question + " -> " + s.answer + "\n";
      }
      req.prompt = consistency_prompt_template().text;
      replace_all(req.prompt, "{ITEMS}", items);
      for (const auto& [a, b] : client->review_consistency(req)) {
        const auto pos = [&](const std::string& id) {
          for (std::size_t k = 0; k < group.size(); ++k)
            if (group[k].id == id) return k;
          return group.size();
        };
        const std::size_t i = pos(a), j = pos(b);
        if (i < group.size() && j < group.size() && i != j) client_pairs.emplace_back(g, i, j);
      }
    }
  } catch (const TransportError& e) {
    report.degraded = true;
    report.degraded_reason = e.what();
    return report;
  }
  for (const auto& [g, i, j] : client_pairs) add(g, i, j, "generator");
  return report;
}

// ---------------------------------------------------------------------------
// Export
// ---------------------------------------------------------------------------

ExportMode parse_export_mode(const std::string& s) {
  if (s == "strict") return ExportMode::kStrict;
  if (s == "permissive") return ExportMode::kPermissive;
  throw ParseError("unknown export mode '" + s + "' (expected strict or permissive)");
}

ExportResult export_annotated(const std::vector<AnnotationRecord>& records, const std::vector<VqaSample>& manifest,
                              ExportMode mode) {
  std::map<std::string, const AnnotationRecord*> by_id;
  for (const auto& r : records) by_id[r.sample_id] = &r;
  std::set<std::string> known;
  for (const auto& s : manifest) known.insert(s.id);
  for (const auto& [id, r] : by_id)
    if (!known.count(id)) throw ExportError("record '" + id + "' has no sample in the manifest");

  std::vector<std::string> unresolved;
  for (const auto& s : manifest) {
    const auto it = by_id.find(s.id);
    if (it != by_id.end() && !is_terminal(it->second->state)) unresolved.push_back(s.id);
  }
  if (mode == ExportMode::kStrict && !unresolved.empty()) {
    std::string list;
    for (const auto& id : unresolved) list += (list.empty() ? "" : ", ") + id;
    throw ExportError("unresolved records: " + list);
  }

  ExportResult out;
  out.skipped = std::move(unresolved);
  for (const auto& s : manifest) {
    const auto it = by_id.find(s.id);
    if (it == by_id.end()) {
      out.samples.push_back(s);
    } else if (is_terminal(it->second->state)) {
      VqaSample copy = s;
      copy.rationale = it->second->candidate_rationale;
      out.samples.push_back(std::move(copy));
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Store
// ---------------------------------------------------------------------------

AnnotationStore::AnnotationStore(std::vector<VqaSample> samples, std::filesystem::path log_path,
                                 PromptTemplate prompt)
    : samples_(std::move(samples)), prompt_(std::move(prompt)) {
  for (std::size_t i = 0; i < samples_.size(); ++i)
    if (!sample_index_.emplace(samples_[i].id, i).second)
      throw IntegrityError("duplicate sample id '" + samples_[i].id + "'");
  if (!log_path.empty()) {
    if (std::filesystem::exists(log_path)) {
      records_ = fold_events(read_event_log(log_path));
      for (const auto& [id, r] : records_)
        if (!sample_index_.count(id)) throw IntegrityError("event log record '" + id + "' has no sample");
    }
    log_.open(log_path, std::ios::app);
    if (!log_) throw NotFoundError("cannot open event log '" + log_path.string() + "' for writing");
  }
  for (const auto& s : samples_) {
    if (records_.count(s.id)) continue;
    AnnotationEvent e;
    e.type = EventType::kCreated;
    e.sample_id = s.id;
    e.created = make_record(s);
    commit(e, *e.created);
  }
}

AnnotationRecord& AnnotationStore::find(const std::string& id) {
  const auto it = records_.find(id);
  if (it == records_.end()) throw NotFoundError("no record '" + id + "'");
  return it->second;
}

const AnnotationRecord& AnnotationStore::find(const std::string& id) const {
  const auto it = records_.find(id);
  if (it == records_.end()) throw NotFoundError("no record '" + id + "'");
  return it->second;
}

void AnnotationStore::commit(const AnnotationEvent& event, AnnotationRecord next) {
  if (log_.is_open()) {
    log_ << event_line(event) << '\n';
    log_.flush();
    if (!log_) throw IntegrityError("failed to append to the event log");
  }
  records_[event.sample_id] = std::move(next);
}

AnnotationRecord AnnotationStore::get(const std::string& id) const {
  std::lock_guard lock(mutex_);
  return find(id);
}

std::vector<AnnotationRecord> AnnotationStore::records() const {
  std::lock_guard lock(mutex_);
  std::vector<AnnotationRecord> out;
  for (const auto& s : samples_) out.push_back(records_.at(s.id));
  return out;
}

std::vector<AnnotationRecord> AnnotationStore::queue(std::optional<RecordState> state, std::size_t limit) const {
  std::lock_guard lock(mutex_);
  std::vector<AnnotationRecord> out;
  for (const auto& s : samples_) {
    if (out.size() >= limit) break;
    const auto& r = records_.at(s.id);
    if (!state || r.state == *state) out.push_back(r);
  }
  return out;
}

AnnotationRecord AnnotationStore::generate(const std::string& id, std::uint64_t version, GeneratorClient& client) {
  AnnotationRecord current;
  {
    std::lock_guard lock(mutex_);
    current = find(id);
    check_version(current, version);
    require_generatable(current);
    if (!generating_.insert(id).second) throw ConflictError("generation for '" + id + "' is already in progress");
  }
  struct Release {
    AnnotationStore* store;
    std::string id;
    ~Release() {
      std::lock_guard lock(store->mutex_);
      store->generating_.erase(id);
    }
  } release{this, id};

  AnnotationEvent e;
  e.sample_id = id;
  e.version = version + 1;
  const GeneratorRequest req = make_generator_request(samples_[sample_index_.at(id)], current, prompt_);
  try {
    const GeneratorResponse resp = client.generate(req);
    if (trim(resp.rationale).empty()) throw TransportError("generator returned an empty rationale");
    e.type = EventType::kGenerated;
    e.generation = Generation{resp.rationale, resp.generator_id, resp.latency_ms};
  } catch (const TransportError& ex) {
    e.type = EventType::kGenerationFailed;
    e.error = ex.what();
  }

  std::lock_guard lock(mutex_);
  AnnotationRecord next = e.type == EventType::kGenerated ? apply_generation(find(id), *e.generation)
                                                          : apply_generation_failure(find(id), e.error);
  commit(e, next);
  return next;
}

AnnotationRecord AnnotationStore::verdict(const std::string& id, std::uint64_t version, const ReviewVerdict& verdict) {
  std::lock_guard lock(mutex_);
  const AnnotationRecord& current = find(id);
  check_version(current, version);
  AnnotationRecord next = review_transition(current, verdict);
  AnnotationEvent e;
  e.type = EventType::kVerdict;
  e.sample_id = id;
  e.version = next.version;
  e.verdict = verdict;
  commit(e, next);
  return next;
}

AnnotationRecord AnnotationStore::expert(const std::string& id, std::uint64_t version, const std::string& text,
                                         const std::string& reviewer) {
  std::lock_guard lock(mutex_);
  const AnnotationRecord& current = find(id);
  check_version(current, version);
  AnnotationRecord next = submit_expert_rationale(current, text, reviewer);
  AnnotationEvent e;
  e.type = EventType::kExpert;
  e.sample_id = id;
  e.version = next.version;
  e.text = text;
  e.reviewer = reviewer;
  commit(e, next);
  return next;
}

ExportResult AnnotationStore::export_manifest(ExportMode mode) const {
  return export_annotated(records(), samples_, mode);
}

}  // namespace medthink
