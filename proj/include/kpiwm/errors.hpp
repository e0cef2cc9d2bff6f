#pragma once

#include <stdexcept>
#include <string>

namespace kpiwm {

// Error taxonomy mirrored by CLI exit codes: config/schema problems exit 2,
// missing artifacts exit 3, version mismatches exit 4, anything else 1.
struct SchemaError : std::runtime_error {
    explicit SchemaError(const std::string& m) : std::runtime_error("schema error: " + m) {}
};

struct ConfigError : std::runtime_error {
    explicit ConfigError(const std::string& m) : std::runtime_error("config error: " + m) {}
};

struct SizingError : std::runtime_error {
    explicit SizingError(const std::string& m) : std::runtime_error("sizing error: " + m) {}
};

struct BoundsError : std::runtime_error {
    explicit BoundsError(const std::string& m) : std::runtime_error("bounds error: " + m) {}
};

struct ModeError : std::runtime_error {
    explicit ModeError(const std::string& m) : std::runtime_error("mode error: " + m) {}
};

struct NumericalError : std::runtime_error {
    explicit NumericalError(const std::string& m) : std::runtime_error("numerical error: " + m) {}
};

struct ShapeError : std::runtime_error {
    explicit ShapeError(const std::string& m) : std::runtime_error("shape error: " + m) {}
};

struct ArtifactError : std::runtime_error {
    explicit ArtifactError(const std::string& m) : std::runtime_error("artifact error: " + m) {}
};

struct VersionError : std::runtime_error {
    explicit VersionError(const std::string& m) : std::runtime_error("version error: " + m) {}
};

struct ArgumentError : std::runtime_error {
    explicit ArgumentError(const std::string& m) : std::runtime_error("argument error: " + m) {}
};

} // namespace kpiwm
