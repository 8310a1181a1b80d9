#include <atomic>
#include <filesystem>
#include <random>
#include <sstream>
#include <thread>

#include "doctest.h"
#include "medthink/annotate.hpp"
#include "medthink/errors.hpp"

using namespace medthink;

namespace {

class FixedGenerator : public GeneratorClient {
 public:
  explicit FixedGenerator(std::string text) : text_(std::move(text)) {}
  GeneratorResponse generate(const GeneratorRequest& request) override {
    last = request;
    return {text_, "fixed", 1.5};
  }
  std::vector<std::pair<std::string, std::string>> review_consistency(const ConsistencyRequest&) override {
    return {};
  }
  GeneratorRequest last;

 private:
  std::string text_;
};

ReviewVerdict verdict(bool c, bool r, bool a) {
  ReviewVerdict v;
  v.coherence = c;
  v.relevance = r;
  v.accuracy = a;
  v.reviewer = "dr-a";
  v.timestamp = "2026-01-01T00:00:00Z";
  return v;
}

ReviewVerdict verdict_from_bits(int bits) { return verdict(bits & 1, bits & 2, bits & 4); }

VqaSample sample(const std::string& id, const std::string& question, const std::string& answer,
                 const std::string& image = "img-1.png") {
  VqaSample s;
  s.id = id;
  s.image.file = image;
  s.question = question;
  s.answer = answer;
  return s;
}

std::filesystem::path temp_path(const std::string& name) {
  const auto p = std::filesystem::temp_directory_path() / ("medthink_annotate_" + name);
  std::filesystem::remove(p);
  return p;
}

void check_invariants(const AnnotationRecord& r) {
  CHECK(r.attempts >= 0);
  CHECK(r.attempts <= kMaxAttempts);
  if (r.state == RecordState::kExpertEscalated) CHECK(r.attempts == kMaxAttempts);
  if (r.state == RecordState::kApproved) {
    REQUIRE_FALSE(r.verdicts.empty());
    CHECK(r.verdicts.back().passed());
  }
  CHECK(static_cast<std::size_t>(r.attempts) == r.generations.size());
}

}  // namespace

TEST_CASE("record state names round-trip") {
  for (auto s : {RecordState::kPendingGeneration, RecordState::kPendingReview, RecordState::kApproved,
                 RecordState::kRegenerate, RecordState::kExpertEscalated, RecordState::kExpertWritten})
    CHECK(parse_record_state(to_string(s)) == s);
  CHECK(to_string(RecordState::kExpertEscalated) == "expert_escalated");
  CHECK_THROWS_AS(parse_record_state("done"), ParseError);
  CHECK(is_terminal(RecordState::kApproved));
  CHECK(is_terminal(RecordState::kExpertWritten));
  CHECK_FALSE(is_terminal(RecordState::kExpertEscalated));
}

TEST_CASE("base64 and image payloads") {
  CHECK(base64_encode("Man") == "TWFu");
  CHECK(base64_encode("Ma") == "TWE=");
  CHECK(base64_encode("M") == "TQ==");
  CHECK(base64_encode("") == "");
  std::mt19937_64 rng(4);
  for (int n = 0; n < 64; ++n) {
    std::string bytes(static_cast<std::size_t>(n), '\0');
    for (auto& c : bytes) c = static_cast<char>(rng() & 255);
    CHECK(base64_decode(base64_encode(bytes)) == bytes);
  }
  CHECK_THROWS_AS(base64_decode("abc"), ParseError);
  CHECK_THROWS_AS(base64_decode("a=bc"), ParseError);
  CHECK_THROWS_AS(base64_decode("ab!c"), ParseError);

  Image img;
  img.height = 2;
  img.width = 3;
  img.pixels = {0, 1, 2, 3, 9, 5};
  const std::string pgm = image_bytes(img);
  CHECK(pgm.substr(0, 9) == "P5\n3 2\n9\n");
  CHECK(pgm.size() == 15);
  CHECK(pgm[13] == 9);
  CHECK(image_mime(img) == "image/x-portable-graymap");
  Image missing;
  missing.file = "/nonexistent/x.png";
  CHECK(image_mime(missing) == "image/png");
  CHECK_THROWS_AS(image_bytes(missing), NotFoundError);
}

TEST_CASE("the fixed prompt carries the question and answer") {
  const PromptTemplate& t = default_prompt_template();
  const std::string p = t.render("Is the heart enlarged?", "Yes");
  CHECK(p.rfind("You are given a medical image, a question about it, and the correct answer.", 0) == 0);
  CHECK(p.find("Question: Is the heart enlarged? Answer: Yes") != std::string::npos);
  CHECK(p.find("{T}") == std::string::npos);

  const auto data = synth_generate(3, 2);
  const AnnotationRecord r = make_record(data[0]);
  const GeneratorRequest req = make_generator_request(data[0], r);
  CHECK(req.prompt_template_id == t.id);
  CHECK(req.prompt == t.render(data[0].question, data[0].answer));
  CHECK(base64_decode(req.image_base64) == image_bytes(data[0].image));
  CHECK(req.attempt == 0);
}

TEST_CASE("request_rationale stores the candidate and counts the attempt") {
  const auto data = synth_generate(5, 3);
  FixedGenerator fixed("because the cardiac silhouette is enlarged");
  const AnnotationRecord r0 = make_record(data[0]);
  const AnnotationRecord r1 = request_rationale(fixed, r0, data[0]);
  CHECK(r0.attempts == 0);
  CHECK(r1.attempts == 1);
  CHECK(r1.state == RecordState::kPendingReview);
  CHECK(r1.candidate_rationale == "because the cardiac silhouette is enlarged");
  CHECK(r1.generations.at(0).generator_id == "fixed");
  CHECK(r1.version == r0.version + 1);

  // Not generatable from pending_review.
  CHECK_THROWS_AS(request_rationale(fixed, r1, data[0]), ContractError);

  AnnotationRecord spent = r0;
  spent.attempts = 3;
  spent.state = RecordState::kRegenerate;
  CHECK_THROWS_AS(request_rationale(fixed, spent, data[0]), ContractError);

  // The mock replays byte for byte.
  MockGenerator a(11), b(11), c(12);
  const auto ra = request_rationale(a, r0, data[0]);
  const auto rb = request_rationale(b, r0, data[0]);
  CHECK(ra.candidate_rationale == rb.candidate_rationale);
  CHECK(ra.generations == rb.generations);
  CHECK_FALSE(ra.candidate_rationale->empty());
  CHECK(ra.candidate_rationale->find(data[0].answer) != std::string::npos);
  std::set<std::string> variety;
  for (const auto& s : synth_generate(6, 40)) {
    const AnnotationRecord rec = make_record(s);
    variety.insert(*request_rationale(c, rec, s).candidate_rationale);
  }
  CHECK(variety.size() > 10);
}

TEST_CASE("transport failures annotate the record without consuming attempts") {
  const auto data = synth_generate(5, 1);
  MockGenerator mock(1);
  mock.fail_next(2);
  AnnotationRecord r = make_record(data[0]);
  r = request_rationale(mock, r, data[0]);
  CHECK(r.attempts == 0);
  CHECK(r.state == RecordState::kPendingGeneration);
  REQUIRE(r.last_error.has_value());
  CHECK(r.last_error->find("transport") != std::string::npos);
  CHECK(r.version == 1);
  r = request_rationale(mock, r, data[0]);
  CHECK(r.attempts == 0);
  r = request_rationale(mock, r, data[0]);
  CHECK(r.attempts == 1);
  CHECK_FALSE(r.last_error.has_value());
  CHECK(r.state == RecordState::kPendingReview);
  CHECK(r.version == 3);
  CHECK(mock.calls() == 3);
}

TEST_CASE("review transitions") {
  AnnotationRecord r;
  r.sample_id = "x";
  r.state = RecordState::kPendingReview;
  r.attempts = 1;
  r.candidate_rationale = "r";
  CHECK(review_transition(r, verdict(true, true, true)).state == RecordState::kApproved);
  CHECK(review_transition(r, verdict(true, false, true)).state == RecordState::kRegenerate);
  r.attempts = 3;
  CHECK(review_transition(r, verdict(false, true, true)).state == RecordState::kExpertEscalated);
  CHECK(review_transition(r, verdict(true, true, true)).state == RecordState::kApproved);
  const AnnotationRecord next = review_transition(r, verdict(false, true, true));
  CHECK(next.version == r.version + 1);
  CHECK(next.verdicts.size() == 1);

  AnnotationRecord approved = r;
  approved.state = RecordState::kApproved;
  CHECK_THROWS_AS(review_transition(approved, verdict(true, true, true)), ContractError);

  AnnotationRecord stale = r;
  stale.version = 4;
  CHECK_THROWS_AS(check_version(stale, 3), ConflictError);
  CHECK_NOTHROW(check_version(stale, 4));
}

TEST_CASE("expert rationale only on escalated records") {
  AnnotationRecord r;
  r.sample_id = "x";
  r.state = RecordState::kExpertEscalated;
  r.attempts = 3;
  const AnnotationRecord w = submit_expert_rationale(r, "the expert text", "dr-b");
  CHECK(w.state == RecordState::kExpertWritten);
  CHECK(w.candidate_rationale == "the expert text");
  CHECK(w.expert_reviewer == "dr-b");
  CHECK(w.attempts == 3);
  CHECK_THROWS_AS(submit_expert_rationale(r, "  ", "dr-b"), ContractError);
  AnnotationRecord approved = r;
  approved.state = RecordState::kApproved;
  CHECK_THROWS_AS(submit_expert_rationale(approved, "text", "dr-b"), ContractError);
}

TEST_CASE("every verdict sequence of up to three reviews ends where the rules say") {
  const auto data = synth_generate(8, 1);
  MockGenerator mock(2);
  // All 8^1 + 8^2 + 8^3 sequences; sequences stop at the first pass.
  std::size_t trajectories = 0;
  for (int length = 1; length <= 3; ++length) {
    int total = 1;
    for (int k = 0; k < length; ++k) total *= 8;
    for (int code = 0; code < total; ++code) {
      AnnotationRecord r = make_record(data[0]);
      int c = code;
      std::optional<int> first_pass;
      for (int step = 0; step < length; ++step, c /= 8) {
        if (is_terminal(r.state) || r.state == RecordState::kExpertEscalated) break;
        const std::uint64_t v = r.version;
        r = request_rationale(mock, r, data[0]);
        CHECK(r.version == v + 1);
        check_invariants(r);
        const ReviewVerdict vd = verdict_from_bits(c % 8);
        r = review_transition(r, vd);
        CHECK(r.version == v + 2);
        check_invariants(r);
        if (vd.passed() && !first_pass) first_pass = step;
      }
      if (first_pass) {
        CHECK(r.state == RecordState::kApproved);
        CHECK(r.attempts == *first_pass + 1);
      } else if (length == 3) {
        CHECK(r.state == RecordState::kExpertEscalated);
        CHECK(r.attempts == 3);
        CHECK_THROWS_AS(request_rationale(mock, r, data[0]), ContractError);
        r = submit_expert_rationale(r, "expert", "dr-c");
        CHECK(r.state == RecordState::kExpertWritten);
      } else {
        CHECK(r.state == RecordState::kRegenerate);
        CHECK(r.attempts == length);
      }
      ++trajectories;
    }
  }
  CHECK(trajectories == 8 + 64 + 512);
}

TEST_CASE("random operation sequences never break the invariants") {
  const auto data = synth_generate(9, 1);
  std::mt19937_64 rng(2024);
  MockGenerator mock(3);
  for (int trial = 0; trial < 3000; ++trial) {
    AnnotationRecord r = make_record(data[0]);
    for (int step = 0; step < 12; ++step) {
      const AnnotationRecord before = r;
      const int op = static_cast<int>(rng() % 4);
      try {
        if (op == 0) {
          if (rng() % 4 == 0) mock.fail_next(1);
          r = request_rationale(mock, r, data[0]);
        } else if (op == 1) {
          r = review_transition(r, verdict_from_bits(static_cast<int>(rng() % 8)));
        } else if (op == 2) {
          r = submit_expert_rationale(r, rng() % 5 ? "expert text" : "", "dr-d");
        } else {
          r = request_rationale(mock, r, data[0]);
        }
        CHECK(r.version == before.version + 1);
      } catch (const ContractError&) {
        CHECK(r == before);
      }
      check_invariants(r);
      if (is_terminal(before.state)) CHECK(r == before);
    }
  }
}

TEST_CASE("event log lines round-trip and replay to the live state") {
  const auto data = synth_generate(10, 6);
  const auto log = temp_path("events.jsonl");
  MockGenerator mock(4);
  {
    AnnotationStore store(data, log);
    CHECK(store.records().size() == 6);
    auto r = store.generate(data[0].id, 0, mock);
    r = store.verdict(data[0].id, r.version, verdict(true, true, true));
    r = store.generate(data[1].id, 0, mock);
    mock.fail_next(1);
    r = store.generate(data[2].id, 0, mock);
    CHECK(r.last_error.has_value());
    for (int k = 0; k < 3; ++k) {
      r = store.generate(data[2].id, r.version, mock);
      r = store.verdict(data[2].id, r.version, verdict(true, false, true));
    }
    CHECK(r.state == RecordState::kExpertEscalated);
    r = store.expert(data[2].id, r.version, "the expert wrote this", "dr-e");
    CHECK(r.state == RecordState::kExpertWritten);

    const auto events = read_event_log(log);
    for (const auto& e : events) CHECK(parse_event_line(event_line(e)) == e);
    const auto folded = fold_events(events);
    for (const auto& live : store.records()) CHECK(folded.at(live.sample_id) == live);

    AnnotationStore reopened(data, log);
    CHECK(reopened.records() == store.records());
  }

  std::vector<AnnotationEvent> events = read_event_log(log);
  AnnotationEvent skipped = events.back();
  skipped.version += 1;
  events.back() = skipped;
  CHECK_THROWS_AS(fold_events(events), IntegrityError);
  AnnotationEvent orphan = events.back();
  orphan.sample_id = "nobody";
  CHECK_THROWS_AS(fold_events({orphan}), IntegrityError);
  CHECK_THROWS_AS(parse_event_line("{\"type\":\"teleport\",\"id\":\"a\",\"version\":1}"), ParseError);
  CHECK_THROWS_AS(parse_event_line("not json"), ParseError);
  std::filesystem::remove(log);
}

TEST_CASE("store enforces versions and serializes conflicting mutations") {
  const auto data = synth_generate(11, 2);
  AnnotationStore store(data);
  MockGenerator mock(5);
  CHECK_THROWS_AS(store.get("missing"), NotFoundError);
  CHECK_THROWS_AS(store.generate(data[0].id, 3, mock), ConflictError);
  CHECK(store.get(data[0].id).version == 0);
  const auto r = store.generate(data[0].id, 0, mock);
  CHECK_THROWS_AS(store.verdict(data[0].id, 0, verdict(true, true, true)), ConflictError);
  CHECK(store.get(data[0].id) == r);

  for (int round = 0; round < 50; ++round) {
    AnnotationStore s(data);
    const auto g = s.generate(data[1].id, 0, mock);
    std::atomic<int> wins = 0, conflicts = 0;
    auto worker = [&](bool pass) {
      try {
        s.verdict(data[1].id, g.version, verdict(pass, true, true));
        ++wins;
      } catch (const ConflictError&) {
        ++conflicts;
      }
    };
    std::thread t1(worker, true), t2(worker, false);
    t1.join();
    t2.join();
    CHECK(wins == 1);
    CHECK(conflicts == 1);
    CHECK(s.get(data[1].id).verdicts.size() == 1);
    CHECK(s.get(data[1].id).version == g.version + 1);
  }

  auto queue = store.queue(RecordState::kPendingReview, 10);
  REQUIRE(queue.size() == 1);
  CHECK(queue[0].sample_id == data[0].id);
  CHECK(store.queue(std::nullopt, 1).size() == 1);
  CHECK(store.queue(RecordState::kApproved, 10).empty());
}

TEST_CASE("consistency cleaning flags contradictions and never edits answers") {
  const std::vector<VqaSample> example = {sample("a", "Is this image normal?", "Yes"),
                                        sample("b", "Is/Are the right hemidiaphragm normal?", "No")};
  const CleaningReport r = detect_inconsistencies({example});
  REQUIRE(r.conflicts.size() == 1);
  CHECK(r.conflicts[0].first_id == "a");
  CHECK(r.conflicts[0].second_id == "b");
  CHECK(r.conflicts[0].reasons == std::vector<std::string>{"rule:normal"});
  CHECK(r.conflicts[0].first_answer == "Yes");
  CHECK_FALSE(r.degraded);

  CHECK(detect_inconsistencies({{sample("a", "Is this image normal?", "Yes")}}).conflicts.empty());
  CHECK(detect_inconsistencies({{sample("a", "Is the lung clear?", "yes"), sample("b", "is the lung clear", "Yes.")}})
            .conflicts.empty());
  const auto dup =
      detect_inconsistencies({{sample("a", "Is the lung clear?", "yes"), sample("b", "is the lung clear", "no")}});
  REQUIRE(dup.conflicts.size() == 1);
  CHECK(dup.conflicts[0].reasons == std::vector<std::string>{"duplicate_question"});
  // Consistent normal answers and other images are left alone.
  CHECK(detect_inconsistencies({{sample("a", "Is this image normal?", "yes"),
                                 sample("b", "Is the right hemidiaphragm normal?", "yes")}})
            .conflicts.empty());
  CHECK(detect_inconsistencies({{sample("a", "Is this image abnormal?", "no"),
                                 sample("b", "Is the left lung abnormal?", "yes")}})
            .conflicts.size() == 1);
  CHECK_THROWS_AS(detect_inconsistencies({{sample("a", "q", "yes", "1.png"), sample("b", "q", "no", "2.png")}}),
                  ContractError);

  const auto groups = group_by_image({sample("a", "q1", "yes", "1.png"), sample("b", "q2", "no", "2.png"),
                                      sample("c", "q3", "no", "1.png")});
  REQUIRE(groups.size() == 2);
  CHECK(groups[0].size() == 2);
  CHECK(groups[0][1].id == "c");
}

TEST_CASE("cleaning merges generator flags and degrades when it is unreachable") {
  auto data = synth_generate(12, 1);
  std::vector<VqaSample> group;
  for (int i = 0; i < 3; ++i) {
    VqaSample s = data[0];
    s.id = "s" + std::to_string(i);
    s.question = i == 2 ? "Is this image normal?" : "Is the upper left region normal?";
    s.answer = i == 2 ? "yes" : "no";
    group.push_back(s);
  }
  MockGenerator mock(6);
  mock.flag_pair("s0", "s1");
  mock.flag_pair("s0", "s2");
  mock.flag_pair("s0", "elsewhere");
  const CleaningReport r = detect_inconsistencies({group}, default_antonym_rules(), &mock);
  CHECK_FALSE(r.degraded);
  REQUIRE(r.conflicts.size() == 3);
  std::map<std::pair<std::string, std::string>, std::vector<std::string>> by_pair;
  for (const auto& c : r.conflicts) by_pair[{c.first_id, c.second_id}] = c.reasons;
  CHECK(by_pair.at({"s0", "s2"}) == std::vector<std::string>{"rule:normal", "generator"});
  CHECK(by_pair.at({"s1", "s2"}) == std::vector<std::string>{"rule:normal"});
  CHECK(by_pair.at({"s0", "s1"}) == std::vector<std::string>{"generator"});

  mock.set_unreachable(true);
  const CleaningReport d = detect_inconsistencies({group}, default_antonym_rules(), &mock);
  CHECK(d.degraded);
  CHECK_FALSE(d.degraded_reason.empty());
  CHECK(d.conflicts.size() == 2);
  for (const auto& c : d.conflicts) CHECK(c.reasons == std::vector<std::string>{"rule:normal"});

  CHECK_THROWS_AS(detect_inconsistencies({group}, {{"bad", "(", "yes", "x", "no"}}), ConfigError);
}

TEST_CASE("export writes terminal rationales and guards unresolved records") {
  const auto data = synth_generate(13, 5);
  auto manifest = data;
  for (auto& s : manifest) s.rationale.reset();
  AnnotationStore store(manifest);
  MockGenerator mock(7);
  for (const auto& s : manifest) {
    auto r = store.generate(s.id, 0, mock);
    store.verdict(s.id, r.version, verdict(true, true, true));
  }
  const ExportResult all = store.export_manifest(ExportMode::kStrict);
  REQUIRE(all.samples.size() == manifest.size());
  for (std::size_t i = 0; i < manifest.size(); ++i) {
    CHECK(all.samples[i].rationale == store.get(manifest[i].id).candidate_rationale);
    CHECK(all.samples[i].answer == manifest[i].answer);
  }
  std::stringstream ss;
  write_manifest(ss, all.samples);
  CHECK(read_manifest(ss) == all.samples);

  // One pending record, one expert-written.
  auto records = store.records();
  records[1].state = RecordState::kPendingReview;
  records[3].state = RecordState::kExpertWritten;
  records[3].candidate_rationale = "Expert: the marker sits in the upper left.";
  try {
    export_annotated(records, manifest, ExportMode::kStrict);
    FAIL("expected an export error");
  } catch (const ExportError& e) {
    CHECK(std::string(e.what()).find(manifest[1].id) != std::string::npos);
  }
  const ExportResult loose = export_annotated(records, manifest, ExportMode::kPermissive);
  CHECK(loose.skipped == std::vector<std::string>{manifest[1].id});
  CHECK(loose.samples.size() == manifest.size() - 1);
  CHECK(loose.samples[2].rationale == "Expert: the marker sits in the upper left.");

  // Samples without a record pass through; records without a sample do not.
  std::vector<AnnotationRecord> partial(records.begin(), records.begin() + 1);
  CHECK(export_annotated(partial, manifest, ExportMode::kStrict).samples.size() == manifest.size());
  AnnotationRecord stray = records[0];
  stray.sample_id = "stray";
  CHECK_THROWS_AS(export_annotated({stray}, manifest, ExportMode::kStrict), ExportError);
  CHECK(parse_export_mode("permissive") == ExportMode::kPermissive);
  CHECK_THROWS_AS(parse_export_mode("lenient"), ParseError);
}
