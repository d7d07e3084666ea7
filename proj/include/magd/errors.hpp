#pragma once

#include <stdexcept>
#include <string>

namespace magd {

// Shape or size mismatch between operands.
struct DimensionError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

// Invalid configuration value (group count, schedule length, empty word set...).
struct ConfigError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

// API misuse: non-scalar loss, bad timestep pair, out-of-range index.
struct UsageError : std::logic_error {
  using std::logic_error::logic_error;
};

// Malformed file contents. Carries a human-readable location in the message.
struct FormatError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct IoError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct GuidanceError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

}  // namespace magd
