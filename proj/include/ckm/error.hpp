#pragma once

#include <stdexcept>
#include <string>

namespace ckm {

// Errors carry a stable machine-readable kind used by the CLI's JSON error output.
class Error : public std::runtime_error {
 public:
  Error(std::string kind, const std::string& message)
      : std::runtime_error(message), kind_(std::move(kind)) {}
  const std::string& kind() const noexcept { return kind_; }

 private:
  std::string kind_;
};

class InvalidArgument : public Error {
 public:
  explicit InvalidArgument(const std::string& message) : Error("invalid_argument", message) {}
};

class GenerationFailure : public Error {
 public:
  explicit GenerationFailure(const std::string& message) : Error("generation_failure", message) {}
};

class DegenerateScene : public Error {
 public:
  explicit DegenerateScene(const std::string& message) : Error("degenerate_scene", message) {}
};

class NumericalError : public Error {
 public:
  explicit NumericalError(const std::string& message) : Error("numerical_error", message) {}
};

class IoError : public Error {
 public:
  explicit IoError(const std::string& message) : Error("io_error", message) {}
};

class GraphError : public Error {
 public:
  explicit GraphError(const std::string& message) : Error("graph_error", message) {}
};

}  // namespace ckm
