#pragma once

#include <stdexcept>
#include <string>

namespace ctsft {

/// Base of every error raised by the library. Each subclass names the failing
/// contract so callers (the sweep harness in particular) can isolate failures.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Malformed argument: out-of-vocab token, empty sequence, bad HeadId, shape mismatch.
class InputError : public Error {
 public:
  using Error::Error;
};

/// Invalid configuration (dimensions, pool counts, missing means, ...).
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Non-finite values encountered during a computation.
class NumericError : public Error {
 public:
  using Error::Error;
};

/// Decomposition target that is not downstream of its source.
class TopologyError : public Error {
 public:
  using Error::Error;
};

/// The checkpoint is not competent enough to supply discovery inputs.
class DiscoveryError : public Error {
 public:
  using Error::Error;
};

/// A class needed for the label-balanced mean set is absent.
class BalanceError : public Error {
 public:
  using Error::Error;
};

class ScoringError : public Error {
 public:
  using Error::Error;
};

/// Training diverged; message carries the optimizer step index.
class TrainingError : public Error {
 public:
  using Error::Error;
};

class ReportError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

}  // namespace ctsft
