#include "tlvm/serving.h"

#include <array>

#include "httplib.h"
#include "json.hpp"
#include "tlvm/checkpoint.h"
#include "tlvm/error.h"
#include "tlvm/image.h"

namespace tlvm {

namespace {

using nlohmann::ordered_json;

constexpr char kAlphabet[] = "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789+/";
constexpr std::string_view kReplacement = "\xEF\xBF\xBD";

[[noreturn]] void fail(int status, std::string code, std::string message) {
  throw ServingException({status, std::move(code), std::move(message)});
}

[[noreturn]] void malformed(const std::string& message) { fail(400, "MALFORMED_REQUEST", message); }

double elapsed_ms(std::chrono::steady_clock::time_point since) {
  return std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - since).count();
}

// Length of the UTF-8 sequence starting at s[0], 0 if s[0..] is a valid
// prefix that needs more bytes, -1 if invalid.
int utf8_sequence(std::string_view s) {
  const auto b0 = static_cast<unsigned char>(s[0]);
  int len;
  unsigned char lo = 0x80, hi = 0xBF;
  if (b0 < 0x80) return 1;
  if (b0 >= 0xC2 && b0 <= 0xDF) len = 2;
  else if (b0 >= 0xE0 && b0 <= 0xEF) {
    len = 3;
    if (b0 == 0xE0) lo = 0xA0;
    if (b0 == 0xED) hi = 0x9F;
  } else if (b0 >= 0xF0 && b0 <= 0xF4) {
    len = 4;
    if (b0 == 0xF0) lo = 0x90;
    if (b0 == 0xF4) hi = 0x8F;
  } else {
    return -1;
  }
  for (int i = 1; i < len; ++i) {
    if (static_cast<std::size_t>(i) >= s.size()) return 0;
    const auto b = static_cast<unsigned char>(s[i]);
    if (i == 1 ? (b < lo || b > hi) : (b < 0x80 || b > 0xBF)) return -1;
  }
  return len;
}

}  // namespace

std::optional<std::vector<std::uint8_t>> base64_decode(std::string_view text) {
  std::array<int, 256> value;
  value.fill(-1);
  for (int i = 0; i < 64; ++i) value[static_cast<unsigned char>(kAlphabet[i])] = i;
  std::string clean;
  for (char c : text) {
    if (c != ' ' && c != '\n' && c != '\r' && c != '\t') clean.push_back(c);
  }
  if (clean.size() % 4 != 0) return std::nullopt;
  std::vector<std::uint8_t> out;
  out.reserve(clean.size() / 4 * 3);
  for (std::size_t i = 0; i < clean.size(); i += 4) {
    const bool last = i + 4 == clean.size();
    int pad = 0;
    std::uint32_t group = 0;
    for (std::size_t k = 0; k < 4; ++k) {
      const char c = clean[i + k];
      if (c == '=') {
        // Padding only at the very end, in the last one or two slots.
        if (!last || k < 2) return std::nullopt;
        ++pad;
        group <<= 6;
        continue;
      }
      if (pad > 0 || value[static_cast<unsigned char>(c)] < 0) return std::nullopt;
      group = (group << 6) | static_cast<std::uint32_t>(value[static_cast<unsigned char>(c)]);
    }
    out.push_back(static_cast<std::uint8_t>(group >> 16));
    if (pad < 2) out.push_back(static_cast<std::uint8_t>(group >> 8));
    if (pad < 1) out.push_back(static_cast<std::uint8_t>(group));
  }
  return out;
}

std::string base64_encode(std::span<const std::uint8_t> bytes) {
  std::string out;
  out.reserve((bytes.size() + 2) / 3 * 4);
  for (std::size_t i = 0; i < bytes.size(); i += 3) {
    const std::size_t n = std::min<std::size_t>(3, bytes.size() - i);
    std::uint32_t group = static_cast<std::uint32_t>(bytes[i]) << 16;
    if (n > 1) group |= static_cast<std::uint32_t>(bytes[i + 1]) << 8;
    if (n > 2) group |= bytes[i + 2];
    for (std::size_t k = 0; k < 4; ++k) {
      out.push_back(k <= n ? kAlphabet[(group >> (18 - 6 * k)) & 63] : '=');
    }
  }
  return out;
}

std::string Utf8Stream::push(std::string_view bytes) {
  pending_.append(bytes);
  std::string out;
  std::size_t i = 0;
  while (i < pending_.size()) {
    const int len = utf8_sequence(std::string_view(pending_).substr(i));
    if (len == 0) break;
    if (len < 0) {
      out += kReplacement;
      ++i;
    } else {
      out.append(pending_, i, static_cast<std::size_t>(len));
      i += static_cast<std::size_t>(len);
    }
  }
  pending_.erase(0, i);
  return out;
}

std::string Utf8Stream::finish() {
  std::string out = pending_.empty() ? "" : std::string(kReplacement);
  pending_.clear();
  return out;
}

ChatRequest parse_chat_request(std::string_view body, std::size_t max_new_limit) {
  ordered_json j;
  try {
    j = ordered_json::parse(body);
  } catch (const ordered_json::parse_error& e) {
    malformed(std::string("request body is not JSON: ") + e.what());
  }
  if (!j.is_object()) malformed("request body must be a JSON object");

  ChatRequest req;
  try {
    if (j.contains("session_id") && !j["session_id"].is_null()) req.session_id = j["session_id"].get<std::string>();

    const auto& messages = j.at("messages");
    if (!messages.is_array() || messages.empty()) malformed("messages must be a non-empty array");
    for (const auto& m : messages) {
      const std::string role = m.at("role").get<std::string>();
      if (role != "user" && role != "assistant") malformed("message role must be user or assistant, got \"" + role + "\"");
      req.conversation.messages.push_back({role == "user" ? Role::kUser : Role::kAssistant, m.at("text").get<std::string>()});
    }
    if (req.conversation.messages.back().role != Role::kUser) malformed("the last message must come from the user");

    if (j.contains("image") && !j["image"].is_null()) {
      auto bytes = base64_decode(j["image"].get<std::string>());
      if (!bytes) fail(400, "IMAGE_DECODE", "image is not valid base64");
      req.image_ppm = std::move(*bytes);
    }

    if (j.contains("decode") && !j["decode"].is_null()) {
      const auto& d = j["decode"];
      if (!d.is_object()) malformed("decode must be an object");
      const std::string mode = d.value("mode", std::string("greedy"));
      const double temperature = d.value("temperature", 1.0);
      const std::uint64_t seed = d.value("seed", std::uint64_t{0});
      if (mode == "greedy") {
        req.policy = DecodePolicy::greedy();
      } else if (mode == "sample") {
        if (!(temperature > 0.0) || !std::isfinite(temperature)) malformed("temperature must be positive");
        req.policy = DecodePolicy::sample(temperature, seed);
      } else {
        malformed("decode.mode must be greedy or sample");
      }
      if (d.contains("max_new")) {
        const auto& mn = d["max_new"];
        if (!mn.is_number_integer() || mn.get<std::int64_t>() < 1 ||
            mn.get<std::uint64_t>() > max_new_limit) {
          malformed("decode.max_new must be an integer in [1, " + std::to_string(max_new_limit) + "]");
        }
        req.max_new = mn.get<std::size_t>();
      }
    }
  } catch (const ordered_json::exception& e) {
    malformed(std::string("bad request field: ") + e.what());
  }
  return req;
}

std::string chat_response_to_json(const ChatResponse& r) {
  ordered_json j;
  j["session_id"] = r.session_id ? ordered_json(*r.session_id) : ordered_json(nullptr);
  j["answer"] = r.answer;
  j["token_count"] = r.token_count;
  j["latency_ms"] = r.latency_ms;
  j["telemetry"] = ordered_json::parse(snapshot_to_json(r.telemetry));
  return j.dump();
}

std::string serving_error_to_json(const ServingError& e) {
  ordered_json j;
  j["error"] = {{"code", e.code}, {"message", e.message}};
  return j.dump(-1, ' ', false, ordered_json::error_handler_t::replace);
}

struct InferenceServer::Http {
  httplib::Server server;
  int port = -1;
};

struct InferenceServer::Prepared {
  const ModelBundle* bundle = nullptr;
  RenderedSequence prompt;
  std::optional<ImageTensor> image;
};

InferenceServer::InferenceServer(ServerOptions options)
    : options_(std::move(options)),
      sampler_(options_.power, counters_, options_.sample_period),
      http_(std::make_unique<Http>()) {
  options_.envelope.validate();
  auto& srv = http_->server;
  // httplib's default also sets SO_REUSEPORT, which would let a second
  // server share the port silently.
  srv.set_socket_options([](socket_t sock) {
    int yes = 1;
    setsockopt(sock, SOL_SOCKET, SO_REUSEADDR, reinterpret_cast<const void*>(&yes), sizeof(yes));
  });

  srv.Get("/healthz", [this](const httplib::Request&, httplib::Response& res) {
    if (model_loaded()) {
      res.set_content("ok", "text/plain");
    } else {
      res.status = 503;
      res.set_content("model not loaded", "text/plain");
    }
  });

  srv.Get("/v1/metrics", [this](const httplib::Request&, httplib::Response& res) {
    res.set_content(metrics_json(), "application/json");
  });

  srv.Post("/v1/chat", [this](const httplib::Request& req, httplib::Response& res) {
    const bool stream = req.get_header_value("Accept").find("text/event-stream") != std::string::npos;
    std::shared_ptr<ChatRequest> chat_req;
    std::shared_ptr<Prepared> prepared;
    try {
      chat_req = std::make_shared<ChatRequest>(parse_chat_request(req.body, options_.max_new_limit));
      prepared = std::make_shared<Prepared>(prepare(*chat_req));
      if (!stream) {
        res.set_content(chat_response_to_json(run(*chat_req, *prepared, {})), "application/json");
        return;
      }
    } catch (const ServingException& e) {
      res.status = e.error().status;
      res.set_content(serving_error_to_json(e.error()), "application/json");
      return;
    }
    res.set_header("Cache-Control", "no-cache");
    res.set_chunked_content_provider("text/event-stream", [this, chat_req, prepared](std::size_t, httplib::DataSink& sink) {
      auto send = [&sink](const std::string& event, const std::string& data) {
        const std::string frame = "event: " + event + "\ndata: " + data + "\n\n";
        sink.write(frame.data(), frame.size());
      };
      try {
        const ChatResponse r = run(*chat_req, *prepared, [&](std::string_view text) {
          ordered_json j;
          j["text"] = text;
          send("token", j.dump());
        });
        send("done", chat_response_to_json(r));
      } catch (const ServingException& e) {
        send("error", serving_error_to_json(e.error()));
      }
      sink.done();
      return true;
    });
  });
}

InferenceServer::~InferenceServer() {
  stop();
  sampler_.stop();
}

void InferenceServer::set_model(ModelBundle bundle) {
  std::promise<std::shared_ptr<const ModelBundle>> p;
  p.set_value(std::make_shared<const ModelBundle>(std::move(bundle)));
  std::lock_guard lock(load_mutex_);
  load_ = p.get_future().share();
}

void InferenceServer::begin_load() {
  std::lock_guard lock(load_mutex_);
  if (load_.valid() || !options_.model) return;
  const std::filesystem::path path = *options_.model;
  load_ = std::async(std::launch::async, [path] {
            return std::make_shared<const ModelBundle>(load_checkpoint(path));
          }).share();
}

bool InferenceServer::model_loaded() const {
  std::shared_future<std::shared_ptr<const ModelBundle>> f;
  {
    std::lock_guard lock(load_mutex_);
    f = load_;
  }
  if (!f.valid() || f.wait_for(std::chrono::seconds(0)) != std::future_status::ready) return false;
  try {
    return f.get() != nullptr;
  } catch (...) {
    return false;
  }
}

const ModelBundle* InferenceServer::bundle_or_throw() {
  std::shared_future<std::shared_ptr<const ModelBundle>> f;
  {
    std::lock_guard lock(load_mutex_);
    f = load_;
  }
  if (!f.valid()) fail(503, "MODEL_NOT_LOADED", "no model configured");
  if (f.wait_for(std::chrono::seconds(0)) != std::future_status::ready) {
    fail(503, "MODEL_NOT_LOADED", "model is still loading");
  }
  try {
    return f.get().get();
  } catch (const std::exception& e) {
    fail(503, "MODEL_NOT_LOADED", std::string("model failed to load: ") + e.what());
  }
}

InferenceServer::Prepared InferenceServer::prepare(const ChatRequest& request) {
  Prepared p;
  p.bundle = bundle_or_throw();
  try {
    p.prompt = render_prompt(request.conversation, request.image_ppm.has_value());
  } catch (const Error& e) {
    malformed(e.what());
  }
  if (request.image_ppm) {
    try {
      p.image = normalize(decode_ppm(*request.image_ppm));
    } catch (const Error& e) {
      fail(400, "IMAGE_FORMAT", std::string("image is not a readable binary PPM: ") + e.what());
    }
  }
  const ModelConfig& c = p.bundle->config;
  const std::size_t positions = p.prompt.size() + (p.image ? c.num_patches() - 1 : 0);
  if (positions > c.max_seq_len) {
    fail(413, "PROMPT_TOO_LONG", "prompt needs " + std::to_string(positions) + " positions, max_seq_len is " +
                                     std::to_string(c.max_seq_len));
  }
  return p;
}

ChatResponse InferenceServer::chat(const ChatRequest& request, const std::function<void(std::string_view)>& on_token) {
  return run(request, prepare(request), on_token);
}

ChatResponse InferenceServer::run(const ChatRequest& request, const Prepared& p,
                                  const std::function<void(std::string_view)>& on_token) {
  const auto start = std::chrono::steady_clock::now();
  Utf8Stream utf8;
  std::string answer;
  auto last = std::chrono::steady_clock::now();
  GenerationResult result;
  try {
    result = generate(*p.bundle, p.prompt, p.image, request.policy, request.max_new, [&](TokenId id) {
      counters_.record_token(elapsed_ms(last));
      last = std::chrono::steady_clock::now();
      const TokenId ids[] = {id};
      const std::string text = utf8.push(decode(ids));
      answer += text;
      if (on_token) on_token(text);
    });
  } catch (const Error& e) {
    if (e.code() == ErrorCode::kSequenceTooLong) fail(413, "PROMPT_TOO_LONG", e.what());
    throw;
  }
  const std::string tail = utf8.finish();
  if (!tail.empty()) {
    answer += tail;
    if (on_token) on_token(tail);
  }

  ChatResponse r;
  r.session_id = request.session_id;
  r.answer = std::move(answer);
  r.token_count = result.tokens.size();
  r.latency_ms = elapsed_ms(start);
  r.telemetry = sampler_.sample_now();
  return r;
}

std::string InferenceServer::metrics_json() {
  const TelemetrySnapshot s = sampler_.sample_now();
  ordered_json j;
  j["snapshot"] = ordered_json::parse(snapshot_to_json(s));
  j["budget"] = ordered_json::array();
  for (Verdict v : check_budget(s, options_.envelope)) j["budget"].push_back(verdict_name(v));
  j["report"] = ordered_json::parse(run_report_to_json(aggregate_run(sampler_.snapshots(), options_.envelope)));
  return j.dump();
}

RunReport InferenceServer::final_report() {
  sampler_.sample_now();
  return aggregate_run(sampler_.snapshots(), options_.envelope);
}

int InferenceServer::bind() {
  auto& srv = http_->server;
  if (options_.port == 0) {
    http_->port = srv.bind_to_any_port(options_.host);
  } else {
    http_->port = srv.bind_to_port(options_.host, options_.port) ? options_.port : -1;
  }
  if (http_->port < 0) {
    throw Error(ErrorCode::kIo, "cannot bind " + options_.host + ":" + std::to_string(options_.port));
  }
  return http_->port;
}

void InferenceServer::serve() {
  if (http_->port < 0) bind();
  begin_load();
  sampler_.start();
  http_->server.listen_after_bind();
  sampler_.stop();
}

void InferenceServer::stop() {
  if (http_) http_->server.stop();
}

}  // namespace tlvm
