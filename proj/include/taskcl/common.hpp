#pragma once

#include <stdexcept>
#include <string>

namespace taskcl {

// Invalid configuration, bad arguments, malformed inputs. CLI maps this to exit code 1.
class ConfigError : public std::runtime_error {
 public:
  explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

// Numerical failure during training/evaluation. CLI maps this to exit code 2.
class NumericalError : public std::runtime_error {
 public:
  explicit NumericalError(const std::string& msg) : std::runtime_error(msg) {}
};

// Hidden domain label was read inside a domain-blind (training) section.
class DomainAccessError : public std::logic_error {
 public:
  explicit DomainAccessError(const std::string& msg) : std::logic_error(msg) {}
};

}  // namespace taskcl
