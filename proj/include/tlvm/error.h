#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace tlvm {

enum class ErrorCode {
  kShapeMismatch,
  kInvalidArgument,
  kInvalidToken,
  kMalformedConversation,
  kTruncation,
  kUnsupportedFormat,
  kTruncatedPayload,
  kBadMaxval,
  kMalformedHeader,
  kEmptyImage,
  kInvalidConfig,
  kBadMagic,
  kVersionMismatch,
  kTruncatedTable,
  kSchemaMismatch,
  kSequenceTooLong,
  kNonFiniteLoss,
  kUnknownFamily,
  kQidMismatch,
  kUndefinedMetric,
  kIo,
  kImageDecode,
};

/// Stable upper-case identifier for a code, e.g. "BAD_MAGIC".
std::string_view error_code_name(ErrorCode code);

/// The single exception type thrown by the library. Callers branch on code().
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& message)
      : std::runtime_error(message), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

}  // namespace tlvm
