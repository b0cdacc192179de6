#pragma once

#include <optional>
#include <stdexcept>
#include <string>

namespace descevo {

// Base of everything the library throws on purpose.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Invalid configuration values or combinations.
class ConfigError : public Error {
 public:
  using Error::Error;
};

// Bad input data: embeddings, descriptor files, class lists.
class DataError : public Error {
 public:
  using Error::Error;
};

// Archive does not start with the expected magic bytes.
class FormatError : public DataError {
 public:
  using DataError::DataError;
};

// Archive byte length disagrees with its header.
class CorruptionError : public DataError {
 public:
  using DataError::DataError;
};

// A caller broke a documented precondition.
class PreconditionError : public Error {
 public:
  using Error::Error;
};

// Failure talking to an LLM backend. `status` is the HTTP status when one was received.
class ProviderError : public Error {
 public:
  explicit ProviderError(const std::string& what, std::optional<int> status = std::nullopt)
      : Error(what), status_(status) {}

  std::optional<int> status() const noexcept { return status_; }

 private:
  std::optional<int> status_;
};

// An LLM reply that could not be turned into a descriptor set.
class ResponseError : public ProviderError {
 public:
  explicit ResponseError(const std::string& what) : ProviderError(what) {}
};

// An optimization step could not produce any usable candidate.
class IterationError : public ProviderError {
 public:
  explicit IterationError(const std::string& what) : ProviderError(what) {}
};

}  // namespace descevo
