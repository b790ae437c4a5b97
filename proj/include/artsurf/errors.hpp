#pragma once

#include <stdexcept>
#include <string>

namespace artsurf {

// Bad user input: malformed config, schema violation, out-of-range argument. CLI exit 1.
class ValidationError : public std::runtime_error {
 public:
  explicit ValidationError(const std::string& msg) : std::runtime_error(msg) {}
};

// Failure at run time: NaN abort, empty mesh, no articulated motion. CLI exit 2.
class RuntimeFailure : public std::runtime_error {
 public:
  explicit RuntimeFailure(const std::string& msg) : std::runtime_error(msg) {}
};

}  // namespace artsurf
