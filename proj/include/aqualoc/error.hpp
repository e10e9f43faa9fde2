#ifndef AQUALOC_ERROR_HPP
#define AQUALOC_ERROR_HPP

#include <stdexcept>
#include <string>

namespace aqualoc {

enum class ErrorCode {
    InvalidArgument,
    UnsupportedPath,
    ObservationWindowExceeded,
    EmptyRegion,
    NumericOverflow,
    GridMismatch,
    Divergence,
    VersionMismatch,
    CorruptPayload,
    InitFailure,
    UnidentifiableGeometry,
    MissingCheckpoint,
    ConfigError,
    IoError,
};

const char* to_string(ErrorCode code) noexcept;

// Every failure raised by the library carries one of the codes above so the CLI
// can map it onto an exit status.
class Error : public std::runtime_error {
public:
    Error(ErrorCode code, const std::string& what)
        : std::runtime_error(std::string(to_string(code)) + ": " + what), code_(code) {}

    ErrorCode code() const noexcept { return code_; }

private:
    ErrorCode code_;
};

inline const char* to_string(ErrorCode code) noexcept {
    switch (code) {
    case ErrorCode::InvalidArgument: return "invalid-argument";
    case ErrorCode::UnsupportedPath: return "unsupported-path";
    case ErrorCode::ObservationWindowExceeded: return "observation-window-exceeded";
    case ErrorCode::EmptyRegion: return "empty-region";
    case ErrorCode::NumericOverflow: return "numeric-overflow";
    case ErrorCode::GridMismatch: return "grid-mismatch";
    case ErrorCode::Divergence: return "divergence";
    case ErrorCode::VersionMismatch: return "version-mismatch";
    case ErrorCode::CorruptPayload: return "corrupt-payload";
    case ErrorCode::InitFailure: return "init-failure";
    case ErrorCode::UnidentifiableGeometry: return "unidentifiable-geometry";
    case ErrorCode::MissingCheckpoint: return "missing-checkpoint";
    case ErrorCode::ConfigError: return "config-error";
    case ErrorCode::IoError: return "io-error";
    }
    return "unknown";
}

} // namespace aqualoc

#endif
