// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace fedaudio {

enum class ErrorCode {
  // audio_io
  NotWav,
  UnsupportedEncoding,
  TruncatedFile,
  MalformedHeader,
  DimensionMismatch,
  UnknownLabel,
  // features
  InvalidLength,
  BadFrameLength,
  TooManyMels,
  ClipTooShort,
  SegmentLongerThanClip,
  EmptyTrainingSet,
  // partition
  EmptyInput,
  InfeasibleSpec,
  RetryExhausted,
  // corruption
  SilentClip,
  LengthMismatch,
  ZeroNoise,
  ClassCountMismatch,
  // model
  ShapeMismatch,
  EmptyShard,
  // fl_core
  LayoutMismatch,
  EmptyTestSet,
  // metrics
  Empty,
  // runner / generic
  ConfigError,
  InvalidArgument,
  IoError,
};

constexpr std::string_view to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::NotWav: return "NotWav";
    case ErrorCode::UnsupportedEncoding: return "UnsupportedEncoding";
    case ErrorCode::TruncatedFile: return "TruncatedFile";
    case ErrorCode::MalformedHeader: return "MalformedHeader";
    case ErrorCode::DimensionMismatch: return "DimensionMismatch";
    case ErrorCode::UnknownLabel: return "UnknownLabel";
    case ErrorCode::InvalidLength: return "InvalidLength";
    case ErrorCode::BadFrameLength: return "BadFrameLength";
    case ErrorCode::TooManyMels: return "TooManyMels";
    case ErrorCode::ClipTooShort: return "ClipTooShort";
    case ErrorCode::SegmentLongerThanClip: return "SegmentLongerThanClip";
    case ErrorCode::EmptyTrainingSet: return "EmptyTrainingSet";
    case ErrorCode::EmptyInput: return "EmptyInput";
    case ErrorCode::InfeasibleSpec: return "InfeasibleSpec";
    case ErrorCode::RetryExhausted: return "RetryExhausted";
    case ErrorCode::SilentClip: return "SilentClip";
    case ErrorCode::LengthMismatch: return "LengthMismatch";
    case ErrorCode::ZeroNoise: return "ZeroNoise";
    case ErrorCode::ClassCountMismatch: return "ClassCountMismatch";
    case ErrorCode::ShapeMismatch: return "ShapeMismatch";
    case ErrorCode::EmptyShard: return "EmptyShard";
    case ErrorCode::LayoutMismatch: return "LayoutMismatch";
    case ErrorCode::EmptyTestSet: return "EmptyTestSet";
    case ErrorCode::Empty: return "Empty";
    case ErrorCode::ConfigError: return "ConfigError";
    case ErrorCode::InvalidArgument: return "InvalidArgument";
    case ErrorCode::IoError: return "IoError";
  }
  return "Unknown";
}

/// Every recoverable failure in the library is reported as an Error carrying
/// a machine-checkable code; nothing in the library aborts on bad input.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& what)
      : std::runtime_error(std::string(to_string(code)) + ": " + what),
        code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

[[noreturn]] inline void fail(ErrorCode code, const std::string& what) {
  throw Error(code, what);
}

inline void require(bool cond, ErrorCode code, const std::string& what) {
  if (!cond) fail(code, what);
}

}  // namespace fedaudio
