#pragma once

#include <stdexcept>
#include <string>

namespace cfmdet {

// Base class for every error raised by the library. Messages are short and
// stable so callers (and tests) can match on them.
class Error : public std::runtime_error {
public:
  explicit Error(const std::string& what) : std::runtime_error(what) {}
};

}  // namespace cfmdet
