#pragma once

#include <stdexcept>
#include <string>
#include <vector>

namespace debias {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Input data with the wrong shape, size or content.
class InvalidInput : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

// Operation called in the wrong lifecycle state (step before forward, double commit, ...).
class StateError : public Error {
 public:
  using Error::Error;
};

// No class has both a nonempty easy and hard set, so no bias score can be formed.
class UnscoreableTask : public Error {
 public:
  using Error::Error;
};

class UndefinedMetric : public Error {
 public:
  using Error::Error;
};

// Carries every problem found, not just the first one.
class ValidationError : public Error {
 public:
  explicit ValidationError(std::vector<std::string> issues)
      : Error(join(issues)), issues_(std::move(issues)) {}

  const std::vector<std::string>& issues() const { return issues_; }

 private:
  static std::string join(const std::vector<std::string>& issues) {
    std::string out = std::to_string(issues.size()) + " validation error(s)";
    for (const auto& s : issues) out += "\n  " + s;
    return out;
  }
  std::vector<std::string> issues_;
};

}  // namespace debias
