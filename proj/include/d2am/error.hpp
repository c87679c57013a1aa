#pragma once

#include <atomic>
#include <iostream>
#include <stdexcept>
#include <string>
#include <string_view>

namespace d2am {

// Shape or precondition violated by a caller.
class ContractError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

// User-supplied spec or config failed validation.
class ValidationError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Dataset or checkpoint could not be read back.
class LoadError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Non-finite value encountered during training.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline std::atomic<bool>& quiet_warnings() {
  static std::atomic<bool> quiet{false};
  return quiet;
}

inline void warn(std::string_view msg) {
  if (!quiet_warnings().load()) std::cerr << "[d2am] warning: " << msg << '\n';
}

inline void require(bool cond, const std::string& msg) {
  if (!cond) throw ContractError(msg);
}

}  // namespace d2am
