#pragma once

#include <stdexcept>
#include <string>

namespace dualnorm {

// Invalid or mutually inconsistent configuration (routing, regime/mode, flags).
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Non-finite activations/gradients or negative variances.
class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Caller broke an operation's precondition (empty batch, shape mismatch).
class PreconditionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Malformed files: checkpoints, snapshots, dataset records.
class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace dualnorm
