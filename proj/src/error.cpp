#include "tlvm/error.h"

namespace tlvm {

std::string_view error_code_name(ErrorCode code) {
  switch (code) {
    case ErrorCode::kShapeMismatch: return "SHAPE_MISMATCH";
    case ErrorCode::kInvalidArgument: return "INVALID_ARGUMENT";
    case ErrorCode::kInvalidToken: return "INVALID_TOKEN";
    case ErrorCode::kMalformedConversation: return "MALFORMED_CONVERSATION";
    case ErrorCode::kTruncation: return "TRUNCATION";
    case ErrorCode::kUnsupportedFormat: return "UNSUPPORTED_FORMAT";
    case ErrorCode::kTruncatedPayload: return "TRUNCATED_PAYLOAD";
    case ErrorCode::kBadMaxval: return "BAD_MAXVAL";
    case ErrorCode::kMalformedHeader: return "MALFORMED_HEADER";
    case ErrorCode::kEmptyImage: return "EMPTY_IMAGE";
    case ErrorCode::kInvalidConfig: return "INVALID_CONFIG";
    case ErrorCode::kBadMagic: return "BAD_MAGIC";
    case ErrorCode::kVersionMismatch: return "VERSION_MISMATCH";
    case ErrorCode::kTruncatedTable: return "TRUNCATED_TABLE";
    case ErrorCode::kSchemaMismatch: return "SCHEMA_MISMATCH";
    case ErrorCode::kSequenceTooLong: return "SEQUENCE_TOO_LONG";
    case ErrorCode::kNonFiniteLoss: return "NON_FINITE_LOSS";
    case ErrorCode::kUnknownFamily: return "UNKNOWN_FAMILY";
    case ErrorCode::kQidMismatch: return "QID_MISMATCH";
    case ErrorCode::kUndefinedMetric: return "UNDEFINED_METRIC";
    case ErrorCode::kIo: return "IO";
    case ErrorCode::kImageDecode: return "IMAGE_DECODE";
  }
  return "UNKNOWN";
}

}  // namespace tlvm
