#pragma once

#include <filesystem>
#include <memory>
#include <string>
#include <thread>
#include <vector>

#include "medthink/annotate.hpp"

namespace medthink {

inline constexpr const char* kGeneratorTokenEnv = "MEDTHINK_GENERATOR_TOKEN";

struct HttpGeneratorOptions {
  std::string url;    // chat-completions endpoint, e.g. http://host:8080/v1/chat/completions
  std::string token;  // bearer token; empty sends no Authorization header
  std::string model = "default";
  double timeout_seconds = 60.0;
};

// Adapter over a chat-completions style JSON endpoint. Connection failures,
// non-2xx statuses and replies without message content raise TransportError.
class HttpGenerator : public GeneratorClient {
 public:
  explicit HttpGenerator(HttpGeneratorOptions options);  // ConfigError on a bad URL

  GeneratorResponse generate(const GeneratorRequest& request) override;
  // Reads "CONFLICT <id> <id>" lines from the reply.
  std::vector<std::pair<std::string, std::string>> review_consistency(const ConsistencyRequest& request) override;

 private:
  std::pair<std::string, std::string> complete(const std::string& prompt, const std::string& image_base64,
                                               const std::string& image_mime);

  HttpGeneratorOptions options_;
  std::string origin_, path_;
};

struct ServiceOptions {
  std::vector<AntonymRule> rules = default_antonym_rules();
  bool review_conflicts_with_generator = true;
  std::filesystem::path export_path;  // when set, POST /api/export also writes the manifest here
};

// HTTP JSON API over an AnnotationStore:
//   GET  /api/queue?state=S&limit=N
//   GET  /api/records/{id}
//   POST /api/records/{id}/generate  {version}
//   POST /api/records/{id}/verdict   {version, coherence, relevance, accuracy, note, reviewer}
//   POST /api/records/{id}/expert    {version, rationale, reviewer}
//   GET  /api/conflicts
//   POST /api/export                 {mode}
// Errors are {"error": {"kind", "message"}} with 400 bad request, 404 unknown
// record, 409 version conflict, 422 invalid transition or export, 502
// generator failure.
class AnnotationService {
 public:
  AnnotationService(AnnotationStore& store, GeneratorClient& client, ServiceOptions options = {});
  ~AnnotationService();

  // Returns the bound port; 0 asks for any free port. TransportError on failure.
  int bind(const std::string& host, int port);
  void listen();  // blocks until stop()
  void start();   // listen() on a background thread
  void stop();

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
  std::thread thread_;
};

}  // namespace medthink
