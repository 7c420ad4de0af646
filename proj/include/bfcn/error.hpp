#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace bfcn {

enum class ErrorKind {
    code_overflow,
    bad_bit_width,
    length_mismatch,
    shape_mismatch,
    bit_width_mismatch,
    accumulator_overflow_risk,
    bad_config,
    non_divisible_input,
    bad_labels,
    bad_schedule,
    divergence_detected,
    missing_asset,
    bad_constant,
    bad_crop,
    empty_matrix,
    io_error,
    format_error,
};

constexpr std::string_view to_string(ErrorKind kind) {
    switch (kind) {
    case ErrorKind::code_overflow: return "CodeOverflow";
    case ErrorKind::bad_bit_width: return "BadBitWidth";
    case ErrorKind::length_mismatch: return "LengthMismatch";
    case ErrorKind::shape_mismatch: return "ShapeMismatch";
    case ErrorKind::bit_width_mismatch: return "BitWidthMismatch";
    case ErrorKind::accumulator_overflow_risk: return "AccumulatorOverflowRisk";
    case ErrorKind::bad_config: return "BadConfig";
    case ErrorKind::non_divisible_input: return "NonDivisibleInput";
    case ErrorKind::bad_labels: return "BadLabels";
    case ErrorKind::bad_schedule: return "BadSchedule";
    case ErrorKind::divergence_detected: return "DivergenceDetected";
    case ErrorKind::missing_asset: return "MissingAsset";
    case ErrorKind::bad_constant: return "BadConstant";
    case ErrorKind::bad_crop: return "BadCrop";
    case ErrorKind::empty_matrix: return "EmptyMatrix";
    case ErrorKind::io_error: return "IoError";
    case ErrorKind::format_error: return "FormatError";
    }
    return "Unknown";
}

/// Every failure raised by the library carries one of the ErrorKind tags so
/// callers (tests, the CLI exit-code mapping) can dispatch on it.
class Error : public std::runtime_error {
public:
    Error(ErrorKind kind, const std::string& what)
        : std::runtime_error(std::string(to_string(kind)) + ": " + what), kind_(kind) {}

    ErrorKind kind() const noexcept { return kind_; }

private:
    ErrorKind kind_;
};

[[noreturn]] inline void fail(ErrorKind kind, const std::string& what) {
    throw Error(kind, what);
}

inline void require(bool cond, ErrorKind kind, const std::string& what) {
    if (!cond) fail(kind, what);
}

} // namespace bfcn
