#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace tlvm {

using TokenId = std::int32_t;

// Byte-level vocabulary: ids 0..255 are raw bytes, followed by six specials.
namespace vocab {
inline constexpr TokenId kBos = 256;
inline constexpr TokenId kEos = 257;
inline constexpr TokenId kImage = 258;
inline constexpr TokenId kRoleUser = 259;
inline constexpr TokenId kRoleAssistant = 260;
inline constexpr TokenId kPad = 261;
inline constexpr TokenId kSize = 262;

inline constexpr bool is_special(TokenId id) { return id >= kBos && id < kSize; }
}  // namespace vocab

enum class Role { kUser, kAssistant };

struct Message {
  Role role;
  std::string text;
};

struct Conversation {
  std::vector<Message> messages;
};

struct RenderedSequence {
  std::vector<TokenId> tokens;
  // 1 on assistant text tokens and the EOS closing each assistant turn.
  std::vector<std::uint8_t> loss_mask;
  std::optional<std::size_t> image_slot;

  std::size_t size() const { return tokens.size(); }
};

std::vector<TokenId> encode(std::string_view text);

// Specials are dropped; throws kInvalidToken for ids outside [0, 262).
std::string decode(std::span<const TokenId> ids);

// BOS, [IMAGE], then ROLE marker + text per message; every assistant message
// is closed by EOS. Messages must alternate starting with the user.
RenderedSequence render_conversation(const Conversation& conversation, bool include_image);

// Same layout, but the conversation must end on a user message and the result
// ends with an open ROLE_ASSISTANT marker for generation.
RenderedSequence render_prompt(const Conversation& conversation, bool include_image);

// Keeps the first max_len tokens. Throws kTruncation if the IMAGE token would
// be cut off.
RenderedSequence truncate(const RenderedSequence& sequence, std::size_t max_len);

}  // namespace tlvm
