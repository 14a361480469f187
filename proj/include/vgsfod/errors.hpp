// Copyright 2026 The vgsfod Authors.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//      http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>
#include <vector>

namespace vgsfod {

// Base of every error the toolkit throws on purpose.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Argument outside an operation's domain (coordinates, shapes, empty input).
class DomainError : public Error {
 public:
  using Error::Error;
};

// Zero-area box or zero-norm vector.
class DegenerateError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

// Malformed binary or JSON payload. `offset` is the byte offset of the
// offending field for binary formats, 0 otherwise.
class FormatError : public Error {
 public:
  FormatError(const std::string& what, std::size_t offset)
      : Error(what + " (at byte offset " + std::to_string(offset) + ")"),
        message_(what),
        offset_(offset) {}
  std::size_t offset() const { return offset_; }
  // The message without the offset suffix, for rewrapping.
  const std::string& message() const { return message_; }

 private:
  std::string message_;
  std::size_t offset_;
};

// Failed invariant check on loaded or configured data. Carries the ids
// (image ids, class ids, field names) that violated it.
class ValidationError : public Error {
 public:
  explicit ValidationError(const std::string& what,
                           std::vector<std::string> offending = {})
      : Error(compose(what, offending)), offending_(std::move(offending)) {}
  const std::vector<std::string>& offending() const { return offending_; }

 private:
  static std::string compose(const std::string& what,
                             const std::vector<std::string>& ids) {
    if (ids.empty()) return what;
    std::string s = what + ": ";
    for (std::size_t i = 0; i < ids.size(); ++i) {
      if (i) s += ", ";
      s += ids[i];
    }
    return s;
  }
  std::vector<std::string> offending_;
};

// A loss or parameter went non-finite during training.
class NumericError : public Error {
 public:
  using Error::Error;
};

}  // namespace vgsfod
