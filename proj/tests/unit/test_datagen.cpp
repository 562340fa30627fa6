#include <algorithm>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include "../support/expect_error.h"
#include "../support/glyph_reader.h"
#include "doctest.h"
#include "tlvm/datagen.h"

using namespace tlvm;
using tlvm::testing::code_of;
using tlvm::testing::read_glyphs;

namespace {

std::set<std::string> words_of(const std::string& text) {
  std::set<std::string> out;
  std::string w;
  for (char c : text + " ") {
    if (std::isalpha(static_cast<unsigned char>(c))) {
      w.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(c))));
    } else if (!w.empty()) {
      out.insert(w);
      w.clear();
    }
  }
  return out;
}

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace

TEST_CASE("every triple renders and reads back exactly") {
  std::set<std::vector<std::uint8_t>> seen;
  for (Modality m : kModalities)
    for (Finding f : kFindings)
      for (Location l : kLocations) {
        for (std::uint64_t seed : {0ull, 1ull, 99ull}) {
          const ToyWorld w{m, f, l};
          const RawImage img = render_world(w, seed);
          REQUIRE(img.pixels.size() == 64 * 64 * 3);
          const auto back = read_glyphs(img);
          REQUIRE(back.has_value());
          CHECK(*back == w);
          seen.insert(img.pixels);
        }
      }
  CHECK(seen.size() == 5 * 4 * 4 * 3);
}

TEST_CASE("rendering is a pure function of world and seed") {
  const ToyWorld w{Modality::kCt, Finding::kMass, Location::kUpper};
  CHECK(render_world(w, 5).pixels == render_world(w, 5).pixels);
  CHECK(render_world(w, 5).pixels != render_world(w, 6).pixels);
}

TEST_CASE("caption pairs") {
  const auto a = generate_caption_pairs(1, 0);
  const auto b = generate_caption_pairs(1, 0);
  REQUIRE(a.records.size() == 1);
  CHECK(a.records == b.records);
  CHECK(a.images.images[0].pixels == b.images.images[0].pixels);

  const auto set = generate_caption_pairs(100, 3);
  REQUIRE(set.records.size() == 100);
  std::set<std::string> vocabulary{"a", "image", "showing", "in", "the", "region", "no", "finding"};
  for (Modality m : kModalities) vocabulary.insert(std::string(modality_word(m)));
  for (Finding f : kFindings) vocabulary.insert(std::string(finding_word(f)));
  for (Location l : kLocations) vocabulary.insert(std::string(location_word(l)));
  for (std::size_t i = 0; i < set.records.size(); ++i) {
    const auto& r = set.records[i];
    REQUIRE(r.conversations.size() == 2);
    CHECK(r.conversations[0].value.starts_with(kImageMarker));
    for (const auto& w : words_of(r.conversations[1].value)) CHECK_MESSAGE(vocabulary.count(w) == 1, w);
    CHECK(decode_ppm(encode_ppm(set.images.images[i])).pixels == set.images.images[i].pixels);
    CHECK(read_glyphs(set.images.images[i]) == set.images.worlds[i]);
    CHECK(r.image == set.images.paths[i]);
  }
}

TEST_CASE("conversations: turn counts and consistency with the world") {
  const auto set = generate_conversations(60, 3, 4);
  REQUIRE(set.records.size() == 60);
  for (std::size_t i = 0; i < set.records.size(); ++i) {
    const auto& r = set.records[i];
    const ToyWorld& w = set.images.worlds[i];
    REQUIRE(r.conversations.size() == 6);
    CHECK(r.conversations[0].value.starts_with(kImageMarker));
    for (std::size_t t = 0; t < 6; t += 2) {
      CHECK(r.conversations[t].from == "human");
      CHECK(r.conversations[t + 1].from == "gpt");
      const std::string& q = r.conversations[t].value;
      const std::string& a = r.conversations[t + 1].value;
      const auto aw = words_of(a);
      if (q.find("modality") != std::string::npos) {
        CHECK(aw.count(std::string(modality_word(w.modality))) == 1);
      } else if (q.find("Is there") != std::string::npos) {
        const bool present = w.finding != Finding::kNone && q.find(std::string(finding_word(w.finding))) != std::string::npos;
        CHECK(aw.count(present ? "yes" : "no") == 1);
      } else if (q.find("Where") != std::string::npos) {
        CHECK(aw.count(std::string(location_word(w.location))) == 1);
      } else {
        CHECK(aw.count(std::string(modality_word(w.modality))) == 1);
        CHECK(aw.count(std::string(location_word(w.location))) == 1);
      }
      for (Location l : kLocations) {
        if (l != w.location) CHECK(aw.count(std::string(location_word(l))) == 0);
      }
      for (Modality m : kModalities) {
        if (m != w.modality) CHECK(aw.count(std::string(modality_word(m))) == 0);
      }
    }
  }
  CHECK(generate_conversations(5, 2, 9).records == generate_conversations(5, 2, 9).records);
  CHECK(code_of([] { generate_conversations(1, 0, 0); }) == ErrorCode::kInvalidArgument);
}

TEST_CASE("vqa split sizes, balance and leakage") {
  const auto only_closed = generate_vqa_split(0, 10, 1);
  CHECK(only_closed.train.size() + only_closed.test.size() == 10);
  for (const auto* part : {&only_closed.train, &only_closed.test})
    for (const auto& s : *part) CHECK(s.answer_type == AnswerType::kClosed);

  for (std::size_t n : {1u, 7u, 10u, 101u, 400u}) {
    const auto split = generate_vqa_split(n, n, 2);
    for (const auto* part : {&split.train, &split.test}) {
      long yes = 0, no = 0;
      for (const auto& s : *part) {
        if (s.answer_type != AnswerType::kClosed) continue;
        CHECK((s.answer == "yes" || s.answer == "no"));
        (s.answer == "yes" ? yes : no) += 1;
      }
      CHECK(std::abs(yes - no) <= 1);
    }
    std::set<std::string> train_images, test_images;
    for (const auto& s : split.train) train_images.insert(s.image);
    for (const auto& s : split.test) test_images.insert(s.image);
    for (const auto& img : test_images) CHECK(train_images.count(img) == 0);
    CHECK(split.train.size() + split.test.size() == 2 * n);
  }
}

TEST_CASE("vqa answers agree with the rendered image") {
  const auto split = generate_vqa_split(40, 40, 3);
  std::map<std::string, ToyWorld> by_path;
  for (std::size_t i = 0; i < split.images.paths.size(); ++i) {
    CHECK(read_glyphs(split.images.images[i]) == split.images.worlds[i]);
    by_path[split.images.paths[i]] = split.images.worlds[i];
  }
  for (const auto* part : {&split.train, &split.test}) {
    for (const auto& s : *part) {
      const ToyWorld& w = by_path.at(s.image);
      if (s.answer_type == AnswerType::kClosed) {
        const bool present = w.finding != Finding::kNone && s.question == "Is there a " + std::string(finding_word(w.finding)) + "?";
        CHECK(s.answer == (present ? "yes" : "no"));
      } else if (s.question.starts_with("Where")) {
        CHECK(s.answer == location_word(w.location));
      } else {
        CHECK(s.answer == modality_word(w.modality));
      }
      CHECK_FALSE(s.answer.empty());
    }
  }
}

TEST_CASE("write_corpus layout and byte determinism") {
  const auto root = std::filesystem::temp_directory_path() / "tlvm_corpus_test";
  std::filesystem::remove_all(root);
  const CorpusOptions opts{12, 10, 2, 20, 20, 7};
  const auto files = write_corpus(root / "a", opts);
  write_corpus(root / "b", opts);
  for (const char* name : {"align.jsonl", "instruct.jsonl", "vqa_train.jsonl", "vqa_test.jsonl"}) {
    CHECK(std::filesystem::exists(root / "a" / name));
    CHECK(slurp(root / "a" / name) == slurp(root / "b" / name));
  }
  CHECK(files.image_count == 12 + 10 + 40);
  std::size_t n = 0;
  for (const auto& entry : std::filesystem::directory_iterator(root / "a" / "images")) {
    ++n;
    CHECK(slurp(entry.path()) == slurp(root / "b" / "images" / entry.path().filename()));
  }
  CHECK(n == files.image_count);

  const auto records = read_conversations(files.align);
  REQUIRE(records.size() == 12);
  bool with_image = false;
  const Conversation conv = to_conversation(records[0], &with_image);
  CHECK(with_image);
  CHECK(conv.messages[0].text == "Describe the image briefly.");
  CHECK(read_ppm(root / "a" / records[0].image).width == 64);
  CHECK(read_qa_samples(files.vqa_train).size() + read_qa_samples(files.vqa_test).size() == 40);
  std::filesystem::remove_all(root);
}
