#include "tlvm/datagen.h"

#include <algorithm>
#include <array>
#include <cstdio>

#include "tlvm/error.h"

namespace tlvm {

namespace {

constexpr std::size_t kSide = 64;

struct Rgb {
  int r, g, b;
};

constexpr Rgb kTint[] = {{96, 96, 96}, {40, 64, 120}, {120, 104, 56}, {160, 96, 128}, {104, 56, 152}};
constexpr Rgb kMassColor{230, 30, 30};
constexpr Rgb kFractureColor{30, 230, 30};
constexpr Rgb kEffusionColor{30, 30, 230};

struct Point {
  int x, y;
};

constexpr Point kCentre[] = {{16, 32}, {48, 32}, {32, 16}, {32, 48}};
// Top-left corner of the 4x4 marker square.
constexpr Point kMarker[] = {{1, 30}, {59, 30}, {30, 1}, {30, 59}};

// Zero mean over any aligned 8x8 block.
int texture(Modality m, int x, int y) {
  switch (m) {
    case Modality::kXray: return (y / 4) % 2 ? 12 : -12;
    case Modality::kMri: return (x / 4) % 2 ? 12 : -12;
    case Modality::kCt: return (x / 2 + y / 2) % 2 ? 14 : -14;
    case Modality::kHistology: return (x + y) % 4 < 2 ? 16 : -16;
    case Modality::kPathology: return ((x - y) % 4 + 4) % 4 < 2 ? 16 : -16;
  }
  return 0;
}

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ull;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
  return x ^ (x >> 31);
}

enum Stream : std::uint64_t { kAlignStream = 1, kInstructStream, kOpenStream, kClosedStream };

std::mt19937_64 record_rng(std::uint64_t seed, Stream stream, std::size_t index) {
  return std::mt19937_64(splitmix64(seed ^ splitmix64((static_cast<std::uint64_t>(stream) << 40) + index)));
}

std::size_t pick(std::mt19937_64& rng, std::size_t n) { return static_cast<std::size_t>(rng() % n); }

ToyWorld random_world(std::mt19937_64& rng) {
  return {kModalities[pick(rng, 5)], kFindings[pick(rng, 4)], kLocations[pick(rng, 4)]};
}

Finding random_real_finding(std::mt19937_64& rng) { return kFindings[pick(rng, 3)]; }

Finding other_real_finding(std::mt19937_64& rng, Finding present) {
  Finding f;
  do {
    f = random_real_finding(rng);
  } while (f == present);
  return f;
}

std::string image_name(std::string_view tag, std::size_t i) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "images/%.*s_%05zu.ppm", static_cast<int>(tag.size()), tag.data(), i);
  return buf;
}

std::string record_id(std::string_view tag, std::size_t i) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.*s_%05zu", static_cast<int>(tag.size()), tag.data(), i);
  return buf;
}

void add_image(GeneratedImages& out, std::string path, const ToyWorld& world, std::uint64_t seed) {
  out.paths.push_back(std::move(path));
  out.images.push_back(render_world(world, seed));
  out.worlds.push_back(world);
}

std::string with_marker(std::string_view text) { return std::string(kImageMarker) + std::string(text); }

std::string modality_question() { return "What is the imaging modality?"; }
std::string presence_question(Finding f) { return "Is there a " + std::string(finding_word(f)) + "?"; }
std::string location_question(Finding f) { return "Where is the " + std::string(finding_word(f)) + "?"; }

}  // namespace

std::string_view modality_word(Modality m) {
  static constexpr std::string_view words[] = {"xray", "mri", "ct", "histology", "pathology"};
  return words[static_cast<int>(m)];
}

std::string_view finding_word(Finding f) {
  static constexpr std::string_view words[] = {"mass", "fracture", "effusion", "none"};
  return words[static_cast<int>(f)];
}

std::string_view location_word(Location l) {
  static constexpr std::string_view words[] = {"left", "right", "upper", "lower"};
  return words[static_cast<int>(l)];
}

RawImage render_world(const ToyWorld& world, std::uint64_t seed) {
  RawImage img{kSide, kSide, std::vector<std::uint8_t>(kSide * kSide * 3)};
  std::mt19937_64 rng(seed);
  const Rgb tint = kTint[static_cast<int>(world.modality)];
  auto put = [&](int x, int y, Rgb c) {
    if (x < 0 || y < 0 || x >= static_cast<int>(kSide) || y >= static_cast<int>(kSide)) return;
    std::uint8_t* p = &img.pixels[(static_cast<std::size_t>(y) * kSide + static_cast<std::size_t>(x)) * 3];
    p[0] = static_cast<std::uint8_t>(std::clamp(c.r, 0, 255));
    p[1] = static_cast<std::uint8_t>(std::clamp(c.g, 0, 255));
    p[2] = static_cast<std::uint8_t>(std::clamp(c.b, 0, 255));
  };
  for (int y = 0; y < static_cast<int>(kSide); ++y) {
    for (int x = 0; x < static_cast<int>(kSide); ++x) {
      const int t = texture(world.modality, x, y);
      const int n0 = static_cast<int>(rng() % 13) - 6;
      const int n1 = static_cast<int>(rng() % 13) - 6;
      const int n2 = static_cast<int>(rng() % 13) - 6;
      put(x, y, {tint.r + t + n0, tint.g + t + n1, tint.b + t + n2});
    }
  }

  const Point c = kCentre[static_cast<int>(world.location)];
  switch (world.finding) {
    case Finding::kMass:
      for (int dy = -8; dy <= 8; ++dy)
        for (int dx = -8; dx <= 8; ++dx)
          if (dx * dx + dy * dy <= 64) put(c.x + dx, c.y + dy, kMassColor);
      break;
    case Finding::kFracture:
      // Rising diagonal, five pixels thick.
      for (int dx = -8; dx <= 8; ++dx)
        for (int t = -2; t <= 2; ++t) put(c.x + dx, c.y - dx + t, kFractureColor);
      break;
    case Finding::kEffusion:
      for (int dy = -4; dy < 4; ++dy)
        for (int dx = -9; dx < 9; ++dx) put(c.x + dx, c.y + dy, kEffusionColor);
      break;
    case Finding::kNone: break;
  }
  const Point m = kMarker[static_cast<int>(world.location)];
  for (int dy = 0; dy < 4; ++dy)
    for (int dx = 0; dx < 4; ++dx) put(m.x + dx, m.y + dy, {255, 255, 255});
  return img;
}

std::string caption_for(const ToyWorld& world) {
  const std::string what = world.finding == Finding::kNone
                               ? std::string("no finding")
                               : "a " + std::string(finding_word(world.finding));
  return "A " + std::string(modality_word(world.modality)) + " image showing " + what + " in the " +
         std::string(location_word(world.location)) + " region";
}

ConversationSet generate_caption_pairs(std::size_t n, std::uint64_t seed) {
  ConversationSet set;
  for (std::size_t i = 0; i < n; ++i) {
    auto rng = record_rng(seed, kAlignStream, i);
    const ToyWorld world = random_world(rng);
    add_image(set.images, image_name("align", i), world, rng());
    set.records.push_back({record_id("align", i),
                           set.images.paths.back(),
                           {{"human", with_marker("Describe the image briefly.")},
                            {"gpt", caption_for(world)}}});
  }
  return set;
}

ConversationSet generate_conversations(std::size_t n, std::size_t turns, std::uint64_t seed) {
  if (turns == 0) throw Error(ErrorCode::kInvalidArgument, "conversations need at least one turn");
  enum Kind { kModalityQ, kPresenceQ, kLocationQ, kDescribeQ };
  ConversationSet set;
  for (std::size_t i = 0; i < n; ++i) {
    auto rng = record_rng(seed, kInstructStream, i);
    const ToyWorld world = random_world(rng);
    add_image(set.images, image_name("instruct", i), world, rng());

    std::array<Kind, 4> kinds{kModalityQ, kPresenceQ, kLocationQ, kDescribeQ};
    for (std::size_t k = kinds.size() - 1; k > 0; --k) std::swap(kinds[k], kinds[pick(rng, k + 1)]);
    // Every conversation asks about presence at least once.
    const std::size_t shown = std::min(turns, kinds.size());
    const auto presence = std::find(kinds.begin(), kinds.end(), kPresenceQ);
    if (static_cast<std::size_t>(presence - kinds.begin()) >= shown) std::swap(*presence, kinds[pick(rng, shown)]);

    ConversationRecord record{record_id("instruct", i), set.images.paths.back(), {}};
    const std::string m(modality_word(world.modality));
    const std::string loc(location_word(world.location));
    for (std::size_t t = 0; t < turns; ++t) {
      std::string q, a;
      switch (kinds[t % kinds.size()]) {
        case kModalityQ:
          q = modality_question();
          a = "The imaging modality is " + m + ".";
          break;
        case kPresenceQ: {
          // Two thirds of worlds with a finding get a "yes": half of all answers.
          const bool ask_present = world.finding != Finding::kNone && rng() % 3 != 0;
          const Finding f = ask_present ? world.finding : other_real_finding(rng, world.finding);
          const std::string fw(finding_word(f));
          q = presence_question(f);
          a = ask_present ? "Yes, there is a " + fw + "." : "No, there is no " + fw + ".";
          break;
        }
        case kLocationQ:
          if (world.finding == Finding::kNone) {
            q = "Where is the marker?";
            a = "The marker is in the " + loc + " region.";
          } else {
            const std::string fw(finding_word(world.finding));
            q = location_question(world.finding);
            a = "The " + fw + " is in the " + loc + " region.";
          }
          break;
        case kDescribeQ:
          q = "Describe the image.";
          a = caption_for(world) + ".";
          break;
      }
      record.conversations.push_back({"human", t == 0 ? with_marker(q) : q});
      record.conversations.push_back({"gpt", a});
    }
    set.records.push_back(std::move(record));
  }
  return set;
}

VqaSplit generate_vqa_split(std::size_t n_open, std::size_t n_closed, std::uint64_t seed) {
  VqaSplit split;
  auto place = [&](std::size_t i, QASample sample) {
    ((i / 2) % 5 == 4 ? split.test : split.train).push_back(std::move(sample));
  };
  for (std::size_t i = 0; i < n_open; ++i) {
    auto rng = record_rng(seed, kOpenStream, i);
    ToyWorld world = random_world(rng);
    const bool ask_location = i % 2 == 1;
    if (ask_location && world.finding == Finding::kNone) world.finding = random_real_finding(rng);
    add_image(split.images, image_name("vqa_open", i), world, rng());
    QASample s{record_id("open", i), split.images.paths.back(), "", "", AnswerType::kOpen};
    if (ask_location) {
      s.question = location_question(world.finding);
      s.answer = std::string(location_word(world.location));
    } else {
      s.question = modality_question();
      s.answer = std::string(modality_word(world.modality));
    }
    place(i, std::move(s));
  }
  for (std::size_t i = 0; i < n_closed; ++i) {
    auto rng = record_rng(seed, kClosedStream, i);
    ToyWorld world = random_world(rng);
    const bool yes = i % 2 == 0;
    Finding asked;
    if (yes) {
      if (world.finding == Finding::kNone) world.finding = random_real_finding(rng);
      asked = world.finding;
    } else {
      asked = other_real_finding(rng, world.finding);
    }
    add_image(split.images, image_name("vqa_closed", i), world, rng());
    place(i, QASample{record_id("closed", i), split.images.paths.back(), presence_question(asked),
                      yes ? "yes" : "no", AnswerType::kClosed});
  }
  return split;
}

CorpusFiles write_corpus(const std::filesystem::path& dir, const CorpusOptions& options) {
  std::error_code ec;
  std::filesystem::create_directories(dir / "images", ec);
  if (ec) throw Error(ErrorCode::kIo, "cannot create " + (dir / "images").string() + ": " + ec.message());

  auto write_images = [&](const GeneratedImages& g) {
    for (std::size_t i = 0; i < g.paths.size(); ++i) write_ppm(dir / g.paths[i], g.images[i]);
    return g.paths.size();
  };
  CorpusFiles files{dir / "align.jsonl", dir / "instruct.jsonl", dir / "vqa_train.jsonl",
                    dir / "vqa_test.jsonl", 0};

  const ConversationSet align = generate_caption_pairs(options.captions, options.seed);
  const ConversationSet instruct = generate_conversations(options.conversations, options.turns, options.seed);
  const VqaSplit vqa = generate_vqa_split(options.vqa_open, options.vqa_closed, options.seed);

  auto lines_of = [](const auto& records) {
    std::vector<std::string> lines;
    for (const auto& r : records) lines.push_back(to_json_line(r));
    return lines;
  };
  files.image_count = write_images(align.images) + write_images(instruct.images) + write_images(vqa.images);
  write_jsonl(files.align, lines_of(align.records));
  write_jsonl(files.instruct, lines_of(instruct.records));
  write_jsonl(files.vqa_train, lines_of(vqa.train));
  write_jsonl(files.vqa_test, lines_of(vqa.test));
  return files;
}

}  // namespace tlvm
