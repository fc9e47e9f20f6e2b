#pragma once

#include <stdexcept>
#include <string>

namespace convshard {

// Every error raised by the library derives from Error so callers can map
// categories onto process exit codes.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Tensor or kernel shapes that do not fit together.
class DimensionError : public Error {
 public:
  using Error::Error;
};

/// Invalid hyperparameters, presets, or run configuration.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Bad values in otherwise well-formed input (labels, timings).
class DataError : public Error {
 public:
  using Error::Error;
};

/// Internal bookkeeping that does not match, e.g. stale pooling indices.
class ConsistencyError : public Error {
 public:
  using Error::Error;
};

/// Malformed dataset files.
class IngestionError : public Error {
 public:
  using Error::Error;
};

/// A frame that can never be decoded. The connection must be dropped.
class ProtocolError : public Error {
 public:
  using Error::Error;
};

/// Not enough bytes yet for a full frame. Retry after more input arrives.
class IncompleteFrameError : public Error {
 public:
  using Error::Error;
};

/// A well-framed message whose contents contradict themselves.
class CorruptionError : public ProtocolError {
 public:
  using ProtocolError::ProtocolError;
};

class SizeError : public Error {
 public:
  using Error::Error;
};

class ConnectionError : public Error {
 public:
  using Error::Error;
};

class TimeoutError : public ConnectionError {
 public:
  using ConnectionError::ConnectionError;
};

/// A missing or inconsistent contribution from one device in the cluster.
class IncompletenessError : public Error {
 public:
  using Error::Error;
};

}  // namespace convshard
