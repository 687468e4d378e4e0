#pragma once

// Error taxonomy shared across the library.  Every throw carries an actionable
// message naming the offending entity (participant id, file, parameter).

#include <stdexcept>
#include <string>

namespace fedprog {

// Malformed in-memory structure (wrong dimensions, bad index sets, ...).
class StructuralError : public std::runtime_error {
 public:
  explicit StructuralError(const std::string& what) : std::runtime_error(what) {}
};

// Invalid argument to an operation (bad K, empty candidate grid, ...).
class ArgumentError : public std::invalid_argument {
 public:
  explicit ArgumentError(const std::string& what) : std::invalid_argument(what) {}
};

// Data violates a model precondition (nonpositive TTF under a log family, ...).
class DataError : public std::runtime_error {
 public:
  explicit DataError(const std::string& what) : std::runtime_error(what) {}
};

// Unreadable or malformed file content; message carries file and line.
class ParseError : public std::runtime_error {
 public:
  explicit ParseError(const std::string& what) : std::runtime_error(what) {}
};

// Inconsistent persisted artifacts (stored stats not matching raw data, ...).
class ValidationError : public std::runtime_error {
 public:
  explicit ValidationError(const std::string& what) : std::runtime_error(what) {}
};

// Unusable run configuration (all participants excluded, missing input file, ...).
class ConfigError : public std::runtime_error {
 public:
  explicit ConfigError(const std::string& what) : std::runtime_error(what) {}
};

// Numerical routine failed to converge; carries diagnostic state in the message.
class DiagnosticError : public std::runtime_error {
 public:
  explicit DiagnosticError(const std::string& what) : std::runtime_error(what) {}
};

}  // namespace fedprog
