#pragma once

#include <stdexcept>
#include <string>

namespace pear {

// Shape/dimension violations in tensor ops. Messages name the offending shapes.
class shape_error : public std::invalid_argument {
 public:
  explicit shape_error(const std::string& msg) : std::invalid_argument(msg) {}
};

// Caller misuse: bad ratios, out-of-range labels, contract violations.
// The CLI maps these to exit code 1.
class usage_error : public std::invalid_argument {
 public:
  explicit usage_error(const std::string& msg) : std::invalid_argument(msg) {}
};

// Malformed or inconsistent files. The CLI maps these to exit code 2.
class data_error : public std::runtime_error {
 public:
  enum class Kind { parse, version_mismatch, corrupt_payload, dangling_reference, io };

  data_error(Kind kind, const std::string& msg) : std::runtime_error(msg), kind_(kind) {}
  Kind kind() const { return kind_; }

 private:
  Kind kind_;
};

// Non-finite values where finite numbers are required (e.g. diverged loss).
// The CLI maps these to exit code 3.
class numeric_error : public std::runtime_error {
 public:
  explicit numeric_error(const std::string& msg) : std::runtime_error(msg) {}
};

}  // namespace pear
