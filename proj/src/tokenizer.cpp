#include "tlvm/tokenizer.h"

#include "tlvm/error.h"

namespace tlvm {

std::vector<TokenId> encode(std::string_view text) {
  std::vector<TokenId> ids;
  ids.reserve(text.size());
  for (char c : text) ids.push_back(static_cast<TokenId>(static_cast<unsigned char>(c)));
  return ids;
}

std::string decode(std::span<const TokenId> ids) {
  std::string text;
  text.reserve(ids.size());
  for (TokenId id : ids) {
    if (id < 0 || id >= vocab::kSize) {
      throw Error(ErrorCode::kInvalidToken, "invalid token id " + std::to_string(id));
    }
    if (!vocab::is_special(id)) text.push_back(static_cast<char>(id));
  }
  return text;
}

namespace {

void check_alternation(const Conversation& conversation) {
  if (conversation.messages.empty()) {
    throw Error(ErrorCode::kMalformedConversation, "conversation has no messages");
  }
  for (std::size_t i = 0; i < conversation.messages.size(); ++i) {
    const Role expected = i % 2 == 0 ? Role::kUser : Role::kAssistant;
    if (conversation.messages[i].role != expected) {
      throw Error(ErrorCode::kMalformedConversation,
                  "message " + std::to_string(i) + " should be from the " +
                      (expected == Role::kUser ? "user" : "assistant"));
    }
  }
}

void push(RenderedSequence& seq, TokenId id, bool supervised) {
  seq.tokens.push_back(id);
  seq.loss_mask.push_back(supervised ? 1 : 0);
}

RenderedSequence render_messages(const Conversation& conversation, bool include_image) {
  RenderedSequence seq;
  push(seq, vocab::kBos, false);
  if (include_image) {
    seq.image_slot = seq.tokens.size();
    push(seq, vocab::kImage, false);
  }
  for (const Message& message : conversation.messages) {
    const bool assistant = message.role == Role::kAssistant;
    push(seq, assistant ? vocab::kRoleAssistant : vocab::kRoleUser, false);
    for (TokenId id : encode(message.text)) push(seq, id, assistant);
    if (assistant) push(seq, vocab::kEos, true);
  }
  return seq;
}

}  // namespace

RenderedSequence render_conversation(const Conversation& conversation, bool include_image) {
  check_alternation(conversation);
  return render_messages(conversation, include_image);
}

RenderedSequence render_prompt(const Conversation& conversation, bool include_image) {
  check_alternation(conversation);
  if (conversation.messages.back().role != Role::kUser) {
    throw Error(ErrorCode::kMalformedConversation, "a prompt must end with a user message");
  }
  RenderedSequence seq = render_messages(conversation, include_image);
  push(seq, vocab::kRoleAssistant, false);
  return seq;
}

RenderedSequence truncate(const RenderedSequence& sequence, std::size_t max_len) {
  if (max_len == 0) throw Error(ErrorCode::kTruncation, "max_len must be at least 1");
  if (sequence.size() <= max_len) return sequence;
  if (sequence.image_slot && *sequence.image_slot >= max_len) {
    throw Error(ErrorCode::kTruncation, "truncating to " + std::to_string(max_len) +
                                            " tokens would drop the image at position " +
                                            std::to_string(*sequence.image_slot));
  }
  RenderedSequence out;
  out.tokens.assign(sequence.tokens.begin(), sequence.tokens.begin() + max_len);
  out.loss_mask.assign(sequence.loss_mask.begin(), sequence.loss_mask.begin() + max_len);
  out.image_slot = sequence.image_slot;
  return out;
}

}  // namespace tlvm
