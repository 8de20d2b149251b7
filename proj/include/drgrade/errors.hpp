#pragma once

#include <stdexcept>
#include <string>

namespace drgrade {

// Inconsistent architecture, shapes or option values.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// API misuse: calling backward without a forward cache, epoch out of range...
class UsageError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

// Non-finite loss or gradient during optimization.
class TrainingError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Blank, corrupt or fundus-less frame.
class UnusableImage : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Malformed input files (manifests, checkpoints, feature files).
class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// A metric that is undefined for the given inputs (single-class AUC, empty
// positive set for sensitivity...).
class UndefinedMetric : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

}  // namespace drgrade
