#pragma once

#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace gazedetr {

// Raised when a computation produces non-finite values (maps to CLI exit 3).
struct NumericError : std::runtime_error {
  explicit NumericError(const std::string& msg) : std::runtime_error(msg) {}
};

// Raised on malformed external inputs (maps to CLI exit 2).
struct DataError : std::runtime_error {
  explicit DataError(const std::string& msg) : std::runtime_error(msg) {}
};

[[noreturn]] inline void fail(const std::string& msg) {
  throw std::invalid_argument(msg);
}

inline void check(bool cond, const std::string& msg) {
  if (!cond) fail(msg);
}

inline std::string shape_str(const std::vector<int>& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

}  // namespace gazedetr
