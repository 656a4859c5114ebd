#pragma once

#include <stdexcept>
#include <string>

namespace m3d {

// Error taxonomy shared by the library and the CLI. The CLI maps these to
// stable exit codes: ValidationError -> 1, NumericError -> 2, IoError -> 3.

class ValidationError : public std::runtime_error {
 public:
  explicit ValidationError(const std::string& msg) : std::runtime_error(msg) {}
};

class NumericError : public std::runtime_error {
 public:
  explicit NumericError(const std::string& msg) : std::runtime_error(msg) {}
};

class IoError : public std::runtime_error {
 public:
  explicit IoError(const std::string& msg) : std::runtime_error(msg) {}
};

}  // namespace m3d
