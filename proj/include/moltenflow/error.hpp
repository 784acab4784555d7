// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace moltenflow {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Violated precondition (shape mismatch, out-of-range argument, ...).
class ContractViolation : public Error {
 public:
  using Error::Error;
};

// NaN/Inf encountered. `where` is a node id, step index, or -1 when unknown.
class NumericFailure : public Error {
 public:
  NumericFailure(const std::string& what, long where = -1, std::string stage = {})
      : Error(what), where_(where), stage_(std::move(stage)) {}
  long where() const noexcept { return where_; }
  const std::string& stage() const noexcept { return stage_; }

 private:
  long where_;
  std::string stage_;
};

class IoError : public Error {
 public:
  IoError(const std::string& what, std::string path = {})
      : Error(path.empty() ? what : what + ": " + path), path_(std::move(path)) {}
  const std::string& path() const noexcept { return path_; }

 private:
  std::string path_;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

class UnsupportedDimension : public Error {
 public:
  using Error::Error;
};

class DegenerateRange : public Error {
 public:
  DegenerateRange(const std::string& what, std::size_t objective)
      : Error(what), objective_(objective) {}
  std::size_t objective() const noexcept { return objective_; }

 private:
  std::size_t objective_;
};

inline void require(bool cond, const std::string& msg) {
  if (!cond) throw ContractViolation(msg);
}

}  // namespace moltenflow
