#pragma once

#include <stdexcept>
#include <string>

namespace effiseg {

/// Tensor or kernel shapes that do not fit together.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// NaN/Inf encountered in an activation, loss or input.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Invalid model, training or run configuration.
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Unreadable, corrupt or incompatible file (checkpoints, weights, images).
class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Dataset layout problems: orphaned files, empty corpora.
class DatasetError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace effiseg
