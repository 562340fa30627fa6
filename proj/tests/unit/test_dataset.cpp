#include <filesystem>
#include <fstream>

#include "../support/expect_error.h"
#include "doctest.h"
#include "tlvm/dataset.h"

using namespace tlvm;
using tlvm::testing::code_of;

namespace {

std::filesystem::path write_file(const std::string& name, const std::string& body) {
  const auto path = std::filesystem::temp_directory_path() / name;
  std::ofstream(path, std::ios::binary) << body;
  return path;
}

}  // namespace

TEST_CASE("conversation lines round-trip") {
  ConversationRecord r{"x1", "images/a.ppm", {{"human", "<image>\nhi \"there\""}, {"gpt", "ok"}}};
  CHECK(to_json_line(r) ==
        R"({"id":"x1","image":"images/a.ppm","conversations":[{"from":"human","value":"<image>\nhi \"there\""},{"from":"gpt","value":"ok"}]})");
  const auto path = write_file("tlvm_conv.jsonl", to_json_line(r) + "\n\n" + to_json_line(r) + "\n");
  const auto back = read_conversations(path);
  REQUIRE(back.size() == 2);
  CHECK(back[0] == r);
  std::filesystem::remove(path);
}

TEST_CASE("qa lines round-trip") {
  QASample s{"q1", "images/b.ppm", "Is there a mass?", "yes", AnswerType::kClosed};
  CHECK(to_json_line(s) ==
        R"({"qid":"q1","image":"images/b.ppm","question":"Is there a mass?","answer":"yes","answer_type":"CLOSED"})");
  const auto path = write_file("tlvm_qa.jsonl", to_json_line(s) + "\n");
  CHECK(read_qa_samples(path) == std::vector<QASample>{s});
  std::filesystem::remove(path);
}

TEST_CASE("schema errors name the line") {
  const auto bad_json = write_file("tlvm_bad1.jsonl", "{\"qid\":\"a\"\n");
  CHECK(code_of([&] { read_qa_samples(bad_json); }) == ErrorCode::kSchemaMismatch);
  const auto missing = write_file("tlvm_bad2.jsonl", "{\"id\":\"a\"}\n");
  try {
    read_conversations(missing);
    FAIL("expected error");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::kSchemaMismatch);
    CHECK(std::string(e.what()).find(":1:") != std::string::npos);
  }
  const auto bad_type = write_file("tlvm_bad3.jsonl",
                                   R"({"qid":"a","image":"i","question":"q","answer":"a","answer_type":"MAYBE"})" "\n");
  CHECK(code_of([&] { read_qa_samples(bad_type); }) == ErrorCode::kSchemaMismatch);
  CHECK(code_of([] { read_qa_samples("/nonexistent/x.jsonl"); }) == ErrorCode::kIo);
  for (const auto& p : {bad_json, missing, bad_type}) std::filesystem::remove(p);
}

TEST_CASE("to_conversation strips the image marker") {
  bool image = false;
  const auto conv = to_conversation({"a", "i", {{"human", "<image>\nq"}, {"gpt", "a"}}}, &image);
  CHECK(image);
  REQUIRE(conv.messages.size() == 2);
  CHECK(conv.messages[0].role == Role::kUser);
  CHECK(conv.messages[0].text == "q");
  CHECK(conv.messages[1].role == Role::kAssistant);

  to_conversation({"a", "", {{"human", "q"}, {"gpt", "a"}}}, &image);
  CHECK_FALSE(image);
  CHECK(code_of([] { to_conversation({"a", "", {{"robot", "q"}}}, nullptr); }) == ErrorCode::kSchemaMismatch);
  CHECK(code_of([] { to_conversation({"a", "", {{"human", "q"}, {"gpt", "<image>\na"}}}, nullptr); }) ==
        ErrorCode::kSchemaMismatch);
}
