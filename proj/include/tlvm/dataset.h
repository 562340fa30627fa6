#pragma once

#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "tlvm/tokenizer.h"

namespace tlvm {

// LLaVA-style conversation record. The first human turn of an image-bearing
// record starts with kImageMarker.
struct ConversationRecord {
  struct Turn {
    std::string from;  // "human" or "gpt"
    std::string value;
    bool operator==(const Turn&) const = default;
  };
  std::string id;
  std::string image;  // relative to the dataset file's directory; may be empty
  std::vector<Turn> conversations;
  bool operator==(const ConversationRecord&) const = default;
};

inline constexpr std::string_view kImageMarker = "<image>\n";

enum class AnswerType { kOpen, kClosed };
std::string_view answer_type_name(AnswerType type);

struct QASample {
  std::string qid;
  std::string image;
  std::string question;
  std::string answer;
  AnswerType answer_type = AnswerType::kOpen;
  bool operator==(const QASample&) const = default;
};

// One JSON object per line, keys in a fixed order.
std::string to_json_line(const ConversationRecord& record);
std::string to_json_line(const QASample& sample);

// Throw kSchemaMismatch naming the offending line.
std::vector<ConversationRecord> read_conversations(const std::filesystem::path& path);
std::vector<QASample> read_qa_samples(const std::filesystem::path& path);

void write_jsonl(const std::filesystem::path& path, const std::vector<std::string>& lines);

// Human/gpt turns to tokenizer roles, with the image marker stripped.
// include_image reports whether the marker was present.
Conversation to_conversation(const ConversationRecord& record, bool* include_image);

}  // namespace tlvm
