#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace lifemap {

/// Base of every error raised by the library. The CLI maps subclasses to exit
/// codes: data errors exit 2, pipeline failures exit 3.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Input data (file, store, argument values) is unusable.
class DataError : public Error {
 public:
  using Error::Error;
};

/// A stage of the mapping pipeline could not produce a result.
class PipelineError : public Error {
 public:
  using Error::Error;
};

class DegenerateInput : public DataError {
 public:
  using DataError::DataError;
};

class ParseError : public DataError {
 public:
  ParseError(const std::string& source, std::size_t line, const std::string& what)
      : DataError(source + ":" + std::to_string(line) + ": " + what), line_(line) {}

  std::size_t line() const { return line_; }

 private:
  std::size_t line_;
};

class UnsupportedFormat : public DataError {
 public:
  using DataError::DataError;
};

class IoError : public DataError {
 public:
  using DataError::DataError;
};

class StoreExists : public DataError {
 public:
  using DataError::DataError;
};

class NoSuchSession : public DataError {
 public:
  using DataError::DataError;
};

class GridMismatch : public DataError {
 public:
  using DataError::DataError;
};

}  // namespace lifemap
