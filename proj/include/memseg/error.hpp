#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace memseg {

enum class ErrorCode {
    UnsupportedFormat,
    UnsupportedDatatype,
    DimensionError,
    CorruptData,
    SizeMismatch,
    IoError,
    InvalidArgument,
    InvalidChunkSize,
    EmptySchedule,
    EmptyStructure,
    Converged,
    CoordinateError,
    NoBoneInterface,
    MeasurementUnavailable,
    SpecError,
    DatasetError,
    DivergenceError,
    GradCheckFailure,
    ConfigMismatch,
    LoaderError,
};

inline std::string_view to_string(ErrorCode code) {
    switch (code) {
    case ErrorCode::UnsupportedFormat: return "UnsupportedFormat";
    case ErrorCode::UnsupportedDatatype: return "UnsupportedDatatype";
    case ErrorCode::DimensionError: return "DimensionError";
    case ErrorCode::CorruptData: return "CorruptData";
    case ErrorCode::SizeMismatch: return "SizeMismatch";
    case ErrorCode::IoError: return "IoError";
    case ErrorCode::InvalidArgument: return "InvalidArgument";
    case ErrorCode::InvalidChunkSize: return "InvalidChunkSize";
    case ErrorCode::EmptySchedule: return "EmptySchedule";
    case ErrorCode::EmptyStructure: return "EmptyStructure";
    case ErrorCode::Converged: return "Converged";
    case ErrorCode::CoordinateError: return "CoordinateError";
    case ErrorCode::NoBoneInterface: return "NoBoneInterface";
    case ErrorCode::MeasurementUnavailable: return "MeasurementUnavailable";
    case ErrorCode::SpecError: return "SpecError";
    case ErrorCode::DatasetError: return "DatasetError";
    case ErrorCode::DivergenceError: return "DivergenceError";
    case ErrorCode::GradCheckFailure: return "GradCheckFailure";
    case ErrorCode::ConfigMismatch: return "ConfigMismatch";
    case ErrorCode::LoaderError: return "LoaderError";
    }
    return "Unknown";
}

/// Single exception type for the library; the code lets callers (and the CLI's
/// exit-code mapping) dispatch without a class hierarchy.
class Error : public std::runtime_error {
public:
    Error(ErrorCode code, const std::string& message)
        : std::runtime_error(std::string(to_string(code)) + ": " + message), code_(code) {}

    ErrorCode code() const noexcept { return code_; }

private:
    ErrorCode code_;
};

[[noreturn]] inline void fail(ErrorCode code, const std::string& message) {
    throw Error(code, message);
}

} // namespace memseg
