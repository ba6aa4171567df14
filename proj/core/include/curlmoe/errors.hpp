#pragma once

#include <stdexcept>
#include <string>

namespace curlmoe {

/// Shapes or sizes that do not agree (grid dims, matrix dims, patch sizes).
class ShapeError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

/// Bad user-supplied configuration (config file, CLI values).
class ConfigError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

enum class FormatErrorKind {
    OpenFailed,
    WriteFailed,
    TruncatedHeader,
    BadMagic,
    UnsupportedVersion,
    TruncatedData,
    DtypeMismatch,
    ShapeMismatch,
    MissingEntry,
    Malformed,
};

const char* to_string(FormatErrorKind kind);

/// On-disk format violations. Each kind is distinguishable by callers.
class FormatError : public std::runtime_error {
public:
    FormatError(FormatErrorKind kind, const std::string& what)
        : std::runtime_error(std::string(to_string(kind)) + ": " + what), kind_(kind) {}

    FormatErrorKind kind() const noexcept { return kind_; }

private:
    FormatErrorKind kind_;
};

/// Raised when a hard invariant (e.g. exact conservation) is violated at run time.
class InvariantViolation : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

}  // namespace curlmoe
