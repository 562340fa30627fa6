#pragma once

#include <cstdint>
#include <filesystem>
#include <random>
#include <string>
#include <string_view>
#include <vector>

#include "tlvm/dataset.h"
#include "tlvm/image.h"

namespace tlvm {

enum class Modality { kXray, kMri, kCt, kHistology, kPathology };
enum class Finding { kMass, kFracture, kEffusion, kNone };
enum class Location { kLeft, kRight, kUpper, kLower };

inline constexpr Modality kModalities[] = {Modality::kXray, Modality::kMri, Modality::kCt,
                                           Modality::kHistology, Modality::kPathology};
inline constexpr Finding kFindings[] = {Finding::kMass, Finding::kFracture, Finding::kEffusion,
                                        Finding::kNone};
inline constexpr Location kLocations[] = {Location::kLeft, Location::kRight, Location::kUpper,
                                          Location::kLower};

std::string_view modality_word(Modality m);
std::string_view finding_word(Finding f);
std::string_view location_word(Location l);

struct ToyWorld {
  Modality modality = Modality::kXray;
  Finding finding = Finding::kNone;
  Location location = Location::kLeft;
  bool operator==(const ToyWorld&) const = default;
};

// Glyph grammar on a 64x64 canvas:
//   modality -> background tint + zero-mean periodic texture (8-pixel period)
//   finding  -> solid glyph at the region centre: mass = red disc,
//               fracture = green slash, effusion = blue band
//   location -> region centre left (16,32), right (48,32), upper (32,16),
//               lower (32,48) as (x, y), plus a white 4x4 marker at that
//               side's outer edge, drawn even when there is no finding
// Background pixels get uniform noise in [-6, 6] from `seed`; glyphs and
// marker are drawn noise-free.
RawImage render_world(const ToyWorld& world, std::uint64_t seed);

// "A {modality} image showing a {finding} in the {location} region"; the
// none finding reads "no finding".
std::string caption_for(const ToyWorld& world);

// Generated records plus the images they reference (paths relative to the
// corpus root, under images/). worlds[i] generated images[i].
struct GeneratedImages {
  std::vector<std::string> paths;
  std::vector<RawImage> images;
  std::vector<ToyWorld> worlds;
};

struct ConversationSet {
  std::vector<ConversationRecord> records;
  GeneratedImages images;
};

struct VqaSplit {
  std::vector<QASample> train;
  std::vector<QASample> test;
  GeneratedImages images;  // one image per sample, train and test disjoint
};

ConversationSet generate_caption_pairs(std::size_t n, std::uint64_t seed);
// Throws kInvalidArgument when turns == 0.
ConversationSet generate_conversations(std::size_t n, std::size_t turns, std::uint64_t seed);
// n_open/n_closed count both splits; every fifth pair goes to test.
VqaSplit generate_vqa_split(std::size_t n_open, std::size_t n_closed, std::uint64_t seed);

struct CorpusOptions {
  std::size_t captions = 512;
  std::size_t conversations = 512;
  std::size_t turns = 2;
  std::size_t vqa_open = 400;
  std::size_t vqa_closed = 800;
  std::uint64_t seed = 0;
};

struct CorpusFiles {
  std::filesystem::path align;
  std::filesystem::path instruct;
  std::filesystem::path vqa_train;
  std::filesystem::path vqa_test;
  std::size_t image_count = 0;
};

// Writes images/, align.jsonl, instruct.jsonl, vqa_train.jsonl, vqa_test.jsonl.
CorpusFiles write_corpus(const std::filesystem::path& dir, const CorpusOptions& options);

}  // namespace tlvm
