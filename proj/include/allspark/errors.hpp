#pragma once

#include <stdexcept>
#include <string>

namespace allspark {

/// Shape/dimension mismatches between operands.
class shape_error : public std::runtime_error {
 public:
  explicit shape_error(const std::string& msg) : std::runtime_error(msg) {}
};

/// A caller broke an API precondition (bad argument, misuse).
class contract_error : public std::runtime_error {
 public:
  explicit contract_error(const std::string& msg) : std::runtime_error(msg) {}
};

/// An object was driven through an invalid state transition.
class state_error : public std::runtime_error {
 public:
  explicit state_error(const std::string& msg) : std::runtime_error(msg) {}
};

/// Non-finite values where finite math was required.
class numeric_error : public std::runtime_error {
 public:
  explicit numeric_error(const std::string& msg) : std::runtime_error(msg) {}
};

/// Malformed bytes in a serialized file; message names the offending offset.
class format_error : public std::runtime_error {
 public:
  explicit format_error(const std::string& msg) : std::runtime_error(msg) {}
};

/// Invalid configuration key or value.
class config_error : public std::runtime_error {
 public:
  explicit config_error(const std::string& msg) : std::runtime_error(msg) {}
};

}  // namespace allspark
