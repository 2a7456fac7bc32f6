#pragma once

#include <stdexcept>
#include <string>

namespace relfm {

/// Invalid input: malformed files, violated invariants, bad arguments.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// The filesystem refused us (missing file, unwritable directory).
class IoError : public Error {
 public:
  using Error::Error;
};

}  // namespace relfm
