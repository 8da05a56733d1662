#pragma once

#include <stdexcept>
#include <string>

namespace avoid {

// Base for every error raised by the toolkit. Subclasses map onto the error
// categories the CLI reports (parse, integrity, config, input, transport, domain).
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ParseError : public Error {
 public:
  ParseError(const std::string& file, std::size_t line, const std::string& what)
      : Error(file + ":" + std::to_string(line) + ": " + what), line_(line) {}
  std::size_t line() const { return line_; }

 private:
  std::size_t line_;
};

class IntegrityError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

class InputError : public Error {
 public:
  using Error::Error;
};

class DomainError : public Error {
 public:
  using Error::Error;
};

class TransportError : public Error {
 public:
  TransportError(int status, const std::string& what)
      : Error(what + " (status " + std::to_string(status) + ")"), status_(status) {}
  int status() const { return status_; }

 private:
  int status_;
};

}  // namespace avoid
