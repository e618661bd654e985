#pragma once

#include <stdexcept>
#include <string>

namespace neuro3d {

// Error taxonomy mirrored by the CLI exit codes:
//   ConfigError / ValidationError -> 2, ArtifactError -> 3, NumericalError -> 4.
struct ConfigError : std::runtime_error {
  explicit ConfigError(const std::string& m) : std::runtime_error(m) {}
};

struct ValidationError : std::runtime_error {
  explicit ValidationError(const std::string& m) : std::runtime_error(m) {}
};

// Missing or unreadable inputs (as opposed to present-but-inconsistent ones).
struct LoadError : std::runtime_error {
  explicit LoadError(const std::string& m) : std::runtime_error(m) {}
};

struct ArtifactError : std::runtime_error {
  explicit ArtifactError(const std::string& m) : std::runtime_error(m) {}
};

struct NumericalError : std::runtime_error {
  explicit NumericalError(const std::string& m) : std::runtime_error(m) {}
};

}  // namespace neuro3d
