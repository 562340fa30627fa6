#include "tlvm/dataset.h"

#include <fstream>

#include "json.hpp"
#include "tlvm/error.h"

namespace tlvm {

namespace {

using nlohmann::ordered_json;

[[noreturn]] void schema_error(const std::filesystem::path& path, std::size_t line,
                               const std::string& why) {
  throw Error(ErrorCode::kSchemaMismatch,
              path.string() + ":" + std::to_string(line) + ": " + why);
}

template <typename Fn>
void for_each_line(const std::filesystem::path& path, Fn&& fn) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::kIo, "cannot open dataset " + path.string());
  std::string line;
  std::size_t number = 0;
  while (std::getline(in, line)) {
    ++number;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    ordered_json j;
    try {
      j = ordered_json::parse(line);
    } catch (const ordered_json::parse_error& e) {
      schema_error(path, number, std::string("invalid JSON: ") + e.what());
    }
    try {
      fn(j);
    } catch (const ordered_json::exception& e) {
      schema_error(path, number, e.what());
    }
  }
}

}  // namespace

std::string_view answer_type_name(AnswerType type) {
  return type == AnswerType::kOpen ? "OPEN" : "CLOSED";
}

std::string to_json_line(const ConversationRecord& record) {
  ordered_json j;
  j["id"] = record.id;
  j["image"] = record.image;
  j["conversations"] = ordered_json::array();
  for (const auto& turn : record.conversations) {
    j["conversations"].push_back({{"from", turn.from}, {"value", turn.value}});
  }
  return j.dump();
}

std::string to_json_line(const QASample& sample) {
  ordered_json j;
  j["qid"] = sample.qid;
  j["image"] = sample.image;
  j["question"] = sample.question;
  j["answer"] = sample.answer;
  j["answer_type"] = answer_type_name(sample.answer_type);
  return j.dump();
}

std::vector<ConversationRecord> read_conversations(const std::filesystem::path& path) {
  std::vector<ConversationRecord> out;
  for_each_line(path, [&](const ordered_json& j) {
    ConversationRecord r;
    r.id = j.at("id").get<std::string>();
    if (j.contains("image")) r.image = j.at("image").get<std::string>();
    for (const auto& turn : j.at("conversations")) {
      r.conversations.push_back({turn.at("from").get<std::string>(), turn.at("value").get<std::string>()});
    }
    out.push_back(std::move(r));
  });
  return out;
}

std::vector<QASample> read_qa_samples(const std::filesystem::path& path) {
  std::vector<QASample> out;
  for_each_line(path, [&](const ordered_json& j) {
    QASample s;
    s.qid = j.at("qid").get<std::string>();
    s.image = j.at("image").get<std::string>();
    s.question = j.at("question").get<std::string>();
    s.answer = j.at("answer").get<std::string>();
    const auto type = j.at("answer_type").get<std::string>();
    if (type == "OPEN") {
      s.answer_type = AnswerType::kOpen;
    } else if (type == "CLOSED") {
      s.answer_type = AnswerType::kClosed;
    } else {
      throw Error(ErrorCode::kSchemaMismatch,
                  path.string() + ": unknown answer_type \"" + type + "\" for " + s.qid);
    }
    out.push_back(std::move(s));
  });
  return out;
}

void write_jsonl(const std::filesystem::path& path, const std::vector<std::string>& lines) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  for (const auto& line : lines) out << line << '\n';
  if (!out) throw Error(ErrorCode::kIo, "cannot write " + path.string());
}

Conversation to_conversation(const ConversationRecord& record, bool* include_image) {
  Conversation conv;
  bool marker = false;
  for (std::size_t i = 0; i < record.conversations.size(); ++i) {
    const auto& turn = record.conversations[i];
    Role role;
    if (turn.from == "human") {
      role = Role::kUser;
    } else if (turn.from == "gpt") {
      role = Role::kAssistant;
    } else {
      throw Error(ErrorCode::kSchemaMismatch,
                  "record " + record.id + ": unknown speaker \"" + turn.from + "\"");
    }
    std::string text = turn.value;
    if (i == 0 && text.starts_with(kImageMarker)) {
      marker = true;
      text.erase(0, kImageMarker.size());
    }
    if (text.find("<image>") != std::string::npos) {
      throw Error(ErrorCode::kSchemaMismatch,
                  "record " + record.id + ": image marker outside the first human turn");
    }
    conv.messages.push_back({role, std::move(text)});
  }
  if (include_image != nullptr) *include_image = marker;
  return conv;
}

}  // namespace tlvm
