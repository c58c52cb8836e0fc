#ifndef CFBEAM_ERRORS_HPP
#define CFBEAM_ERRORS_HPP

#include <stdexcept>
#include <string>

namespace cfbeam {

/// Tensor or operand dimensions do not agree.
class ShapeError : public std::invalid_argument {
 public:
  explicit ShapeError(const std::string& what) : std::invalid_argument(what) {}
};

/// A layer configuration produces non-integer or non-positive output dimensions.
class ArchitectureError : public std::invalid_argument {
 public:
  explicit ArchitectureError(const std::string& what) : std::invalid_argument(what) {}
};

/// Batch normalization asked to compute batch statistics over a single sample.
class DegenerateBatchError : public std::invalid_argument {
 public:
  explicit DegenerateBatchError(const std::string& what) : std::invalid_argument(what) {}
};

/// Non-finite value encountered where finite arithmetic is required.
class NumericError : public std::runtime_error {
 public:
  explicit NumericError(const std::string& what) : std::runtime_error(what) {}
};

/// Invalid argument outside the shape/architecture categories.
class ArgumentError : public std::invalid_argument {
 public:
  explicit ArgumentError(const std::string& what) : std::invalid_argument(what) {}
};

/// Dataset or checkpoint I/O failure.
class PersistenceError : public std::runtime_error {
 public:
  explicit PersistenceError(const std::string& what) : std::runtime_error(what) {}
};

/// Experiment configuration is missing or inconsistent.
class ConfigError : public std::runtime_error {
 public:
  explicit ConfigError(const std::string& what) : std::runtime_error(what) {}
};

/// Training diverged (non-finite loss), reported with the epoch index.
class TrainingError : public std::runtime_error {
 public:
  TrainingError(const std::string& what, int epoch)
      : std::runtime_error(what + " (epoch " + std::to_string(epoch) + ")"), epoch_(epoch) {}
  int epoch() const { return epoch_; }

 private:
  int epoch_;
};

}  // namespace cfbeam

#endif  // CFBEAM_ERRORS_HPP
