#pragma once

#include <atomic>
#include <chrono>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <future>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "tlvm/model.h"
#include "tlvm/telemetry.h"
#include "tlvm/tokenizer.h"

namespace tlvm {

// Standard alphabet with '=' padding; whitespace is skipped. Returns nullopt
// on any other character or bad padding.
std::optional<std::vector<std::uint8_t>> base64_decode(std::string_view text);
std::string base64_encode(std::span<const std::uint8_t> bytes);

// Turns a byte stream into valid UTF-8 text. Incomplete trailing sequences are
// held until completed; invalid bytes become U+FFFD.
class Utf8Stream {
 public:
  std::string push(std::string_view bytes);
  // Flushes a dangling partial sequence as U+FFFD.
  std::string finish();

 private:
  std::string pending_;
};

struct ChatRequest {
  std::optional<std::string> session_id;
  Conversation conversation;
  std::optional<std::vector<std::uint8_t>> image_ppm;
  DecodePolicy policy;
  std::size_t max_new = 64;
};

struct ChatResponse {
  std::optional<std::string> session_id;
  std::string answer;
  std::size_t token_count = 0;
  double latency_ms = 0.0;
  TelemetrySnapshot telemetry;
};

// A request-level failure with its HTTP status and stable code string.
struct ServingError {
  int status = 400;
  std::string code;  // MALFORMED_REQUEST, IMAGE_DECODE, IMAGE_FORMAT, PROMPT_TOO_LONG, MODEL_NOT_LOADED
  std::string message;
};

class ServingException : public std::runtime_error {
 public:
  explicit ServingException(ServingError e) : std::runtime_error(e.message), error_(std::move(e)) {}
  const ServingError& error() const { return error_; }

 private:
  ServingError error_;
};

// Throws ServingException (400 MALFORMED_REQUEST or IMAGE_DECODE).
ChatRequest parse_chat_request(std::string_view body, std::size_t max_new_limit = 512);
std::string chat_response_to_json(const ChatResponse& response);
std::string serving_error_to_json(const ServingError& error);

struct ServerOptions {
  std::optional<std::filesystem::path> model;
  std::string host = "127.0.0.1";
  int port = 8080;  // 0 picks a free port
  PowerProvider power = PowerProvider::none();
  BudgetEnvelope envelope;
  std::chrono::milliseconds sample_period{100};
  std::size_t max_new_limit = 512;
};

class InferenceServer {
 public:
  explicit InferenceServer(ServerOptions options);
  ~InferenceServer();
  InferenceServer(const InferenceServer&) = delete;
  InferenceServer& operator=(const InferenceServer&) = delete;

  // Uses an in-memory bundle instead of options.model.
  void set_model(ModelBundle bundle);
  // Starts loading options.model once; later calls share the same load.
  void begin_load();
  bool model_loaded() const;

  // Renders, generates and scores telemetry; on_token receives the UTF-8 text
  // of each token (possibly empty while a character is incomplete). Throws
  // ServingException.
  ChatResponse chat(const ChatRequest& request,
                    const std::function<void(std::string_view)>& on_token = {});

  // {"snapshot": ..., "report": ...}; report is null before any snapshot.
  std::string metrics_json();
  RunReport final_report();

  // Binds the socket; throws kIo when the port is unavailable. Returns the port.
  int bind();
  // Serves until stop(); starts the sampler and the model load.
  void serve();
  void stop();

 private:
  struct Prepared;
  const ModelBundle* bundle_or_throw();
  // Every request-level check; throws ServingException before any token.
  Prepared prepare(const ChatRequest& request);
  ChatResponse run(const ChatRequest& request, const Prepared& prepared,
                   const std::function<void(std::string_view)>& on_token);

  ServerOptions options_;
  TelemetryCounters counters_;
  Sampler sampler_;
  mutable std::mutex load_mutex_;
  std::shared_future<std::shared_ptr<const ModelBundle>> load_;
  struct Http;
  std::unique_ptr<Http> http_;
};

}  // namespace tlvm
