#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace fastgsc {

enum class ErrorCode {
  kEmptyPrompt,
  kDegenerateSum,
  kZeroSample,
  kStepOutOfRange,
  kNonFiniteLoss,
  kInconsistentConditionSets,
  kStepOrderViolation,
  kEmptySchedule,
  kEmptyFirstPhase,
  kNoValidAction,
  kAllMasked,
  kInvalidAction,
  kMissingCheckpoint,
  kConfigInvalid,
  kMalformedInput,
};

std::string_view to_string(ErrorCode code);

// Single exception type for every failure the library reports; callers
// branch on code() rather than on a class hierarchy.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& what)
      : std::runtime_error(std::string(to_string(code)) + ": " + what),
        code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

inline std::string_view to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::kEmptyPrompt: return "EmptyPrompt";
    case ErrorCode::kDegenerateSum: return "DegenerateSum";
    case ErrorCode::kZeroSample: return "ZeroSample";
    case ErrorCode::kStepOutOfRange: return "StepOutOfRange";
    case ErrorCode::kNonFiniteLoss: return "NonFiniteLoss";
    case ErrorCode::kInconsistentConditionSets: return "InconsistentConditionSets";
    case ErrorCode::kStepOrderViolation: return "StepOrderViolation";
    case ErrorCode::kEmptySchedule: return "EmptySchedule";
    case ErrorCode::kEmptyFirstPhase: return "EmptyFirstPhase";
    case ErrorCode::kNoValidAction: return "NoValidAction";
    case ErrorCode::kAllMasked: return "AllMasked";
    case ErrorCode::kInvalidAction: return "InvalidAction";
    case ErrorCode::kMissingCheckpoint: return "MissingCheckpoint";
    case ErrorCode::kConfigInvalid: return "ConfigInvalid";
    case ErrorCode::kMalformedInput: return "MalformedInput";
  }
  return "Unknown";
}

}  // namespace fastgsc
