#pragma once

#include <stdexcept>
#include <string>

namespace csr {

// Invalid numeric input: zero norms, nonpositive scales, out-of-range indices.
class DomainError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

// Shapes or lengths that do not agree.
class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Malformed files: bad magic, truncated payloads, schema violations.
class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// A referenced file, sample, or checkpoint does not exist.
class NotFoundError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// A configuration file that violates its schema.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace csr
