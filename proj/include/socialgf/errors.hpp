#pragma once

#include <stdexcept>
#include <string>

namespace socialgf {

// Invalid configuration: bad shapes, infeasible scenarios, missing directives.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// API misuse: stale tapes, width mismatches, wrong layouts.
class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Numerical failure during optimization (non-finite loss or gradient, divergence).
class TrainingError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Unreadable, corrupt or version-mismatched artifact files.
class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// A representation cannot be resolved against a scenario.
class AdaptationError : public ConfigError {
 public:
  using ConfigError::ConfigError;
};

// Example collection ran out of budget before a category was filled.
class StarvationError : public std::runtime_error {
 public:
  StarvationError(std::string category, const std::string& what)
      : std::runtime_error(what), category_(std::move(category)) {}
  const std::string& category() const { return category_; }

 private:
  std::string category_;
};

}  // namespace socialgf
