#include "medthink/service.hpp"

#include <chrono>
#include <regex>
#include <sstream>

#include "httplib.h"
#include "json.hpp"
#include "medthink/annotate_json.hpp"
#include "medthink/errors.hpp"

namespace medthink {

using nlohmann::json;

// ---------------------------------------------------------------------------
// HTTP generator client
// ---------------------------------------------------------------------------

HttpGenerator::HttpGenerator(HttpGeneratorOptions options) : options_(std::move(options)) {
  static const std::regex url(R"(^(http://[^/]+)(/.*)?$)");
  std::smatch m;
  if (!std::regex_match(options_.url, m, url))
    throw ConfigError("generator URL must look like http://host[:port]/path, got '" + options_.url + "'");
  origin_ = m[1];
  path_ = m[2].matched ? m[2].str() : "/v1/chat/completions";
}

std::pair<std::string, std::string> HttpGenerator::complete(const std::string& prompt, const std::string& image_base64,
                                                            const std::string& image_mime) {
  json content = json::array();
  content.push_back({{"type", "text"}, {"text", prompt}});
  content.push_back(
      {{"type", "image_url"}, {"image_url", {{"url", "data:" + image_mime + ";base64," + image_base64}}}});
  const json body{{"model", options_.model},
                  {"temperature", 0},
                  {"messages", json::array({{{"role", "user"}, {"content", content}}})}};

  httplib::Client client(origin_);
  const auto timeout = std::chrono::duration<double>(options_.timeout_seconds);
  client.set_connection_timeout(std::chrono::duration_cast<std::chrono::microseconds>(timeout));
  client.set_read_timeout(std::chrono::duration_cast<std::chrono::microseconds>(timeout));
  httplib::Headers headers;
  if (!options_.token.empty()) headers.emplace("Authorization", "Bearer " + options_.token);
  const auto res = client.Post(path_, headers, body.dump(), "application/json");
  if (!res) throw TransportError("generator request to " + origin_ + path_ + " failed: " + httplib::to_string(res.error()));
  if (res->status / 100 != 2) throw TransportError("generator replied with HTTP " + std::to_string(res->status));
  try {
    const json reply = json::parse(res->body);
    std::string text = reply.at("choices").at(0).at("message").at("content").get<std::string>();
    std::string model = reply.value("model", options_.model);
    return {std::move(text), std::move(model)};
  } catch (const json::exception& e) {
    throw TransportError(std::string("generator reply is not a chat completion: ") + e.what());
  }
}

GeneratorResponse HttpGenerator::generate(const GeneratorRequest& request) {
  const auto start = std::chrono::steady_clock::now();
  auto [text, model] = complete(request.prompt, request.image_base64, request.image_mime);
  if (text.find_first_not_of(" \t\r\n") == std::string::npos) throw TransportError("generator returned no rationale");
  GeneratorResponse out;
  out.rationale = std::move(text);
  out.generator_id = std::move(model);
  out.latency_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count();
  return out;
}

std::vector<std::pair<std::string, std::string>> HttpGenerator::review_consistency(const ConsistencyRequest& request) {
  const std::string text = complete(request.prompt, request.image_base64, request.image_mime).first;
  std::vector<std::pair<std::string, std::string>> out;
  std::istringstream lines(text);
  std::string line;
  while (std::getline(lines, line)) {
    std::istringstream words(line);
    std::string tag, a, b;
    if (words >> tag >> a >> b && tag == "CONFLICT") out.emplace_back(a, b);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Service
// ---------------------------------------------------------------------------

struct AnnotationService::Impl {
  AnnotationStore& store;
  GeneratorClient& client;
  ServiceOptions options;
  httplib::Server server;

  Impl(AnnotationStore& s, GeneratorClient& c, ServiceOptions o) : store(s), client(c), options(std::move(o)) {}

  static void reply(httplib::Response& res, int status, const json& body) {
    res.status = status;
    res.set_content(body.dump(), "application/json");
  }

  static void fail(httplib::Response& res, int status, const Error& e) {
    reply(res, status, {{"error", {{"kind", e.kind()}, {"message", e.what()}}}});
  }

  template <class F>
  static httplib::Server::Handler guarded(F f) {
    return [f](const httplib::Request& req, httplib::Response& res) {
      try {
        f(req, res);
      } catch (const ConflictError& e) {
        fail(res, 409, e);
      } catch (const NotFoundError& e) {
        fail(res, 404, e);
      } catch (const ParseError& e) {
        fail(res, 400, e);
      } catch (const ContractError& e) {
        fail(res, 422, e);
      } catch (const ExportError& e) {
        fail(res, 422, e);
      } catch (const Error& e) {
        fail(res, 500, e);
      }
    };
  }

  static json body_of(const httplib::Request& req) {
    try {
      json j = json::parse(req.body);
      if (!j.is_object()) throw ParseError("request body must be a JSON object");
      return j;
    } catch (const json::exception& e) {
      throw ParseError(std::string("request body is not valid JSON: ") + e.what());
    }
  }

  static std::uint64_t version_of(const json& body) {
    const auto it = body.find("version");
    if (it == body.end() || !it->is_number_unsigned()) throw ParseError("request needs a non-negative 'version'");
    return it->get<std::uint64_t>();
  }

  static std::string text_of(const json& body, const char* key, bool required) {
    const auto it = body.find(key);
    if (it == body.end() || it->is_null()) {
      if (required) throw ParseError(std::string("request needs '") + key + "'");
      return {};
    }
    if (!it->is_string()) throw ParseError(std::string("'") + key + "' must be a string");
    return it->get<std::string>();
  }

  void routes() {
    server.Get("/api/queue", guarded([this](const httplib::Request& req, httplib::Response& res) {
      std::optional<RecordState> state;
      if (req.has_param("state")) state = parse_record_state(req.get_param_value("state"));
      std::size_t limit = 50;
      if (req.has_param("limit")) {
        const std::string s = req.get_param_value("limit");
        if (s.empty() || s.find_first_not_of("0123456789") != std::string::npos)
          throw ParseError("limit must be a non-negative integer");
        limit = std::stoul(s);
      }
      json records = json::array();
      for (const auto& r : store.queue(state, limit)) records.push_back(to_json(r));
      reply(res, 200, {{"records", records}});
    }));

    server.Get(R"(/api/records/([^/]+))", guarded([this](const httplib::Request& req, httplib::Response& res) {
      reply(res, 200, to_json(store.get(req.matches[1])));
    }));

    server.Post(R"(/api/records/([^/]+)/generate)",
                guarded([this](const httplib::Request& req, httplib::Response& res) {
                  const json body = body_of(req);
                  const AnnotationRecord r = store.generate(req.matches[1], version_of(body), client);
                  if (r.last_error)
                    reply(res, 502,
                          {{"error", {{"kind", "transport"}, {"message", *r.last_error}}}, {"record", to_json(r)}});
                  else
                    reply(res, 200, to_json(r));
                }));

    server.Post(R"(/api/records/([^/]+)/verdict)", guarded([this](const httplib::Request& req, httplib::Response& res) {
      const json body = body_of(req);
      ReviewVerdict v = verdict_from_json(body);
      v.timestamp = utc_timestamp();
      reply(res, 200, to_json(store.verdict(req.matches[1], version_of(body), v)));
    }));

    server.Post(R"(/api/records/([^/]+)/expert)", guarded([this](const httplib::Request& req, httplib::Response& res) {
      const json body = body_of(req);
      const AnnotationRecord r = store.expert(req.matches[1], version_of(body), text_of(body, "rationale", true),
                                              text_of(body, "reviewer", false));
      reply(res, 200, to_json(r));
    }));

    server.Get("/api/conflicts", guarded([this](const httplib::Request&, httplib::Response& res) {
      const CleaningReport report =
          detect_inconsistencies(group_by_image(store.samples()), options.rules,
                                 options.review_conflicts_with_generator ? &client : nullptr);
      reply(res, 200, to_json(report));
    }));

    server.Post("/api/export", guarded([this](const httplib::Request& req, httplib::Response& res) {
      const json body = body_of(req);
      const ExportResult out = store.export_manifest(parse_export_mode(text_of(body, "mode", true)));
      if (!options.export_path.empty()) save_manifest(options.export_path, out.samples);
      json samples = json::array();
      for (const auto& s : out.samples) samples.push_back(json::parse(manifest_line(s)));
      reply(res, 200, {{"count", out.samples.size()}, {"skipped", out.skipped}, {"samples", samples}});
    }));
  }
};

AnnotationService::AnnotationService(AnnotationStore& store, GeneratorClient& client, ServiceOptions options)
    : impl_(std::make_unique<Impl>(store, client, std::move(options))) {
  impl_->routes();
}

AnnotationService::~AnnotationService() { stop(); }

int AnnotationService::bind(const std::string& host, int port) {
  if (port == 0) {
    const int bound = impl_->server.bind_to_any_port(host);
    if (bound <= 0) throw TransportError("cannot bind to " + host);
    return bound;
  }
  if (!impl_->server.bind_to_port(host, port))
    throw TransportError("cannot bind to " + host + ":" + std::to_string(port));
  return port;
}

void AnnotationService::listen() { impl_->server.listen_after_bind(); }

void AnnotationService::start() {
  thread_ = std::thread([this] { listen(); });
  impl_->server.wait_until_ready();
}

void AnnotationService::stop() {
  impl_->server.stop();
  if (thread_.joinable()) thread_.join();
}

}  // namespace medthink
