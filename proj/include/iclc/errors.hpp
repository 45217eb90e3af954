#pragma once

#include <stdexcept>
#include <string>

namespace iclc {

// All library failures derive from Error so callers can catch one type.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Model archive / config problems (missing tensor, shape mismatch, dtype).
class LoadError : public Error {
 public:
  using Error::Error;
};

// Out-of-range indices, bad tokens, malformed intervention edges.
class ArgumentError : public Error {
 public:
  using Error::Error;
};

// Dataset / JSON parse failures. Carries the 1-based line when known.
class ParseError : public Error {
 public:
  ParseError(const std::string& what, std::size_t line = 0)
      : Error(line ? what + " (line " + std::to_string(line) + ")" : what), line_(line) {}
  std::size_t line() const noexcept { return line_; }

 private:
  std::size_t line_;
};

// Template / verbalizer violations (multi-token labels, empty label space).
class TemplateError : public Error {
 public:
  using Error::Error;
};

// A role span requested from an input that does not contain it.
class SpanError : public Error {
 public:
  using Error::Error;
};

// Metric is mathematically undefined for the given data.
class UndefinedMetric : public Error {
 public:
  using Error::Error;
};

// Experiment configuration problems (mapped to exit code 2 by the CLI).
class ConfigError : public Error {
 public:
  using Error::Error;
};

}  // namespace iclc
