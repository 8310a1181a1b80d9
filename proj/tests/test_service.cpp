#include <atomic>
#include <mutex>
#include <thread>

#include "doctest.h"
#include "httplib.h"
#include "json.hpp"
#include "medthink/errors.hpp"
#include "medthink/service.hpp"

using namespace medthink;
using nlohmann::json;

namespace {

// A chat-completions lookalike that records what it was sent.
struct FakeCompletions {
  httplib::Server server;
  std::thread thread;
  int port = 0;
  std::mutex mutex;
  std::vector<json> bodies;
  std::vector<std::string> auth;
  std::string reply = "the marker is visible in the stated region";
  int status = 200;

  FakeCompletions() {
    server.Post("/v1/chat/completions", [this](const httplib::Request& req, httplib::Response& res) {
      std::lock_guard lock(mutex);
      bodies.push_back(json::parse(req.body));
      auth.push_back(req.get_header_value("Authorization"));
      res.status = status;
      res.set_content(json{{"model", "fake-vlm"}, {"choices", {{{"message", {{"role", "assistant"}, {"content", reply}}}}}}}
                          .dump(),
                      "application/json");
    });
    port = server.bind_to_any_port("127.0.0.1");
    thread = std::thread([this] { server.listen_after_bind(); });
    server.wait_until_ready();
  }
  ~FakeCompletions() {
    server.stop();
    thread.join();
  }
  std::string url() const { return "http://127.0.0.1:" + std::to_string(port) + "/v1/chat/completions"; }
};

struct Running {
  AnnotationStore store;
  MockGenerator mock{9};
  AnnotationService service;
  int port;
  httplib::Client client;

  explicit Running(std::vector<VqaSample> samples, GeneratorClient* generator = nullptr, ServiceOptions options = {})
      : store(std::move(samples)),
        service(store, generator ? *generator : mock, std::move(options)),
        port(service.bind("127.0.0.1", 0)),
        client("127.0.0.1", port) {
    service.start();
  }

  httplib::Result post(const std::string& path, const json& body) {
    return client.Post(path, body.dump(), "application/json");
  }
};

json parsed(const httplib::Result& r) {
  REQUIRE(r);
  return json::parse(r->body);
}

json verdict_body(std::uint64_t version, bool c, bool r, bool a) {
  return {{"version", version}, {"coherence", c}, {"relevance", r}, {"accuracy", a}, {"note", "n"}, {"reviewer", "dr"}};
}

}  // namespace

TEST_CASE("http generator speaks the chat-completions protocol") {
  FakeCompletions fake;
  const auto data = synth_generate(1, 1);
  HttpGenerator gen({fake.url(), "secret-token", "vlm-large", 5.0});
  const GeneratorRequest req = make_generator_request(data[0], make_record(data[0]));
  const GeneratorResponse resp = gen.generate(req);
  CHECK(resp.rationale == fake.reply);
  CHECK(resp.generator_id == "fake-vlm");
  CHECK(resp.latency_ms >= 0.0);
  REQUIRE(fake.bodies.size() == 1);
  const json& body = fake.bodies[0];
  CHECK(fake.auth[0] == "Bearer secret-token");
  CHECK(body["model"] == "vlm-large");
  const json& content = body["messages"][0]["content"];
  CHECK(content[0]["text"] == req.prompt);
  CHECK(content[1]["image_url"]["url"] == "data:image/x-portable-graymap;base64," + req.image_base64);

  fake.reply = "CONFLICT a b\nsomething else\nCONFLICT c\nCONFLICT b c";
  ConsistencyRequest creq;
  creq.prompt = "check";
  const auto pairs = gen.review_consistency(creq);
  REQUIRE(pairs.size() == 2);
  CHECK(pairs[1] == std::pair<std::string, std::string>{"b", "c"});

  fake.reply = "   ";
  CHECK_THROWS_AS(gen.generate(req), TransportError);
  fake.status = 503;
  fake.reply = "x";
  CHECK_THROWS_AS(gen.generate(req), TransportError);

  HttpGenerator dead({"http://127.0.0.1:1/v1/chat/completions", "", "m", 1.0});
  CHECK_THROWS_AS(dead.generate(req), TransportError);
  CHECK_THROWS_AS(HttpGenerator({"ftp://x", "", "m", 1.0}), ConfigError);
  HttpGenerator no_token({fake.url(), "", "m", 1.0});
  fake.status = 200;
  no_token.generate(req);
  CHECK(fake.auth.back().empty());
}

TEST_CASE("service drives records to terminal states over HTTP") {
  auto data = synth_generate(2, 5);
  for (auto& s : data) s.rationale.reset();
  Running svc(data);

  auto queue = parsed(svc.client.Get("/api/queue?state=pending_generation&limit=10"));
  REQUIRE(queue["records"].size() == 5);
  CHECK(parsed(svc.client.Get("/api/queue?limit=2"))["records"].size() == 2);
  CHECK(svc.client.Get("/api/queue?limit=abc")->status == 400);
  CHECK(svc.client.Get("/api/queue?state=done")->status == 400);

  const std::string base = "/api/records/" + data[0].id;
  auto r = svc.post(base + "/generate", {{"version", 0}});
  REQUIRE(r);
  CHECK(r->status == 200);
  json rec = json::parse(r->body);
  CHECK(rec["state"] == "pending_review");
  CHECK(rec["attempts"] == 1);
  CHECK(rec["version"] == 1);

  // Stale version: conflict, nothing lost.
  r = svc.post(base + "/verdict", verdict_body(0, true, true, true));
  CHECK(r->status == 409);
  CHECK(json::parse(r->body)["error"]["kind"] == "conflict");
  CHECK(parsed(svc.client.Get(base))["version"] == 1);

  r = svc.post(base + "/verdict", verdict_body(1, true, true, true));
  CHECK(r->status == 200);
  rec = json::parse(r->body);
  CHECK(rec["state"] == "approved");
  CHECK(rec["verdicts"][0]["reviewer"] == "dr");
  CHECK_FALSE(rec["verdicts"][0]["timestamp"].get<std::string>().empty());

  // Escalation and expert rationale.
  const std::string b1 = "/api/records/" + data[1].id;
  std::uint64_t v = 0;
  for (int k = 0; k < 3; ++k) {
    v = parsed(svc.post(b1 + "/generate", {{"version", v}}))["version"];
    rec = parsed(svc.post(b1 + "/verdict", verdict_body(v, false, true, true)));
    v = rec["version"];
  }
  CHECK(rec["state"] == "expert_escalated");
  CHECK(svc.post(b1 + "/generate", {{"version", v}})->status == 422);
  CHECK(svc.post(b1 + "/expert", {{"version", v}})->status == 400);
  rec = parsed(svc.post(b1 + "/expert", {{"version", v}, {"rationale", "expert text"}, {"reviewer", "dr-x"}}));
  CHECK(rec["state"] == "expert_written");
  CHECK(rec["generations"].size() == 3);

  // Export: strict refuses, permissive skips.
  r = svc.post("/api/export", {{"mode", "strict"}});
  CHECK(r->status == 422);
  CHECK(std::string(r->body).find(data[2].id) != std::string::npos);
  const json loose = parsed(svc.post("/api/export", {{"mode", "permissive"}}));
  CHECK(loose["count"] == 2);
  CHECK(loose["skipped"].size() == 3);
  CHECK(loose["samples"][1]["rationale"] == "expert text");
  CHECK(svc.post("/api/export", {{"mode", "lenient"}})->status == 400);

  for (std::size_t i = 2; i < 5; ++i) {
    const std::string b = "/api/records/" + data[i].id;
    const std::uint64_t gv = parsed(svc.post(b + "/generate", {{"version", 0}}))["version"];
    CHECK(svc.post(b + "/verdict", verdict_body(gv, true, true, true))->status == 200);
  }
  const json strict = parsed(svc.post("/api/export", {{"mode", "strict"}}));
  CHECK(strict["count"] == 5);
  CHECK(strict["skipped"].empty());

  CHECK(svc.client.Get("/api/records/nobody")->status == 404);
  CHECK(svc.client.Post(base + "/verdict", "{not json", "application/json")->status == 400);
  CHECK(svc.post(base + "/verdict", {{"coherence", true}})->status == 400);
}

TEST_CASE("service reports generator failures and conflicting reviewers") {
  auto data = synth_generate(3, 2);
  Running svc(data);
  svc.mock.fail_next(1);
  const std::string base = "/api/records/" + data[0].id;
  auto r = svc.post(base + "/generate", {{"version", 0}});
  REQUIRE(r);
  CHECK(r->status == 502);
  const json body = json::parse(r->body);
  CHECK(body["error"]["kind"] == "transport");
  CHECK(body["record"]["attempts"] == 0);
  CHECK(body["record"]["version"] == 1);
  const std::uint64_t v = parsed(svc.post(base + "/generate", {{"version", 1}}))["version"];

  std::atomic<int> ok = 0, conflict = 0;
  auto reviewer = [&](bool pass) {
    httplib::Client c("127.0.0.1", svc.port);
    const auto res = c.Post(base + "/verdict", verdict_body(v, pass, true, true).dump(), "application/json");
    if (res && res->status == 200) ++ok;
    if (res && res->status == 409) ++conflict;
  };
  std::thread a(reviewer, true), b(reviewer, false);
  a.join();
  b.join();
  CHECK(ok == 1);
  CHECK(conflict == 1);
  CHECK(parsed(svc.client.Get(base))["verdicts"].size() == 1);
}

TEST_CASE("conflict worklist endpoint, with and without the generator") {
  auto data = synth_generate(4, 1);
  std::vector<VqaSample> group(2, data[0]);
  group[0].id = "g0";
  group[0].question = "Is this image normal?";
  group[0].answer = "yes";
  group[1].id = "g1";
  group[1].question = "Is the lower right region normal?";
  group[1].answer = "no";
  Running svc(group);
  json report = parsed(svc.client.Get("/api/conflicts"));
  CHECK(report["degraded"] == false);
  REQUIRE(report["conflicts"].size() == 1);
  CHECK(report["conflicts"][0]["items"][0]["id"] == "g0");
  CHECK(report["conflicts"][0]["reasons"][0] == "rule:normal");

  svc.mock.set_unreachable(true);
  report = parsed(svc.client.Get("/api/conflicts"));
  CHECK(report["degraded"] == true);
  CHECK(report["conflicts"].size() == 1);
}

TEST_CASE("service generates through the HTTP generator") {
  FakeCompletions fake;
  HttpGenerator gen({fake.url(), "t", "m", 5.0});
  auto data = synth_generate(5, 1);
  Running svc(data, &gen);
  const json rec = parsed(svc.post("/api/records/" + data[0].id + "/generate", {{"version", 0}}));
  CHECK(rec["candidate_rationale"] == fake.reply);
  CHECK(rec["generations"][0]["generator"] == "fake-vlm");
}
