#pragma once

#include <stdexcept>
#include <string>

namespace cdaug {

// Malformed text input (annotation lines, config values).
class ParseError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// A coordinate or index outside the valid domain.
class BoundsError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Binary payload that does not match its declared layout.
class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ShapeError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Timestep pair out of order for a sampler transition.
class OrderingError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class SamplingError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// A pipeline step output no longer matches the hash recorded when it was made.
class StalenessError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Wraps any failure inside a pipeline step with the step's name.
class StepError : public std::runtime_error {
 public:
  StepError(std::string step, const std::string& what)
      : std::runtime_error("step '" + step + "' failed: " + what), step_(std::move(step)) {}
  const std::string& step() const { return step_; }

 private:
  std::string step_;
};

}  // namespace cdaug
