#pragma once

#include <stdexcept>
#include <string>

namespace attrib {

// Root of every exception thrown by the library.
class error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Bad input or configuration. The CLI maps these to exit code 2.
class validation_error : public error {
 public:
  using error::error;
};

// Failure while computing. The CLI maps these to exit code 3.
class runtime_failure : public error {
 public:
  using error::error;
};

class parameter_error : public validation_error {
 public:
  using validation_error::validation_error;
};

class ingestion_error : public validation_error {
 public:
  ingestion_error(const std::string& what, std::size_t line)
      : validation_error("line " + std::to_string(line) + ": " + what), line_(line) {}

  std::size_t line() const noexcept { return line_; }

 private:
  std::size_t line_;
};

class empty_domain_error : public validation_error {
 public:
  using validation_error::validation_error;
};

class mode_error : public validation_error {
 public:
  using validation_error::validation_error;
};

class capacity_error : public validation_error {
 public:
  using validation_error::validation_error;
};

class comparability_error : public validation_error {
 public:
  using validation_error::validation_error;
};

class undefined_metric_error : public validation_error {
 public:
  using validation_error::validation_error;
};

// The claim has no content tokens, so there is nothing to entail.
class degenerate_claim_error : public validation_error {
 public:
  using validation_error::validation_error;
};

// Query and span produce an all-zero TF-IDF vector.
class degenerate_unit_error : public validation_error {
 public:
  using validation_error::validation_error;
};

class singular_system_error : public validation_error {
 public:
  using validation_error::validation_error;
};

class scoring_error : public runtime_failure {
 public:
  using runtime_failure::runtime_failure;
};

class training_error : public runtime_failure {
 public:
  training_error(const std::string& what, std::size_t step)
      : runtime_failure("step " + std::to_string(step) + ": " + what), step_(step) {}

  std::size_t step() const noexcept { return step_; }

 private:
  std::size_t step_;
};

class external_evaluator_error : public runtime_failure {
 public:
  external_evaluator_error(const std::string& what, std::string payload)
      : runtime_failure(what + " [payload: " + payload + "]"), payload_(std::move(payload)) {}

  const std::string& payload() const noexcept { return payload_; }

 private:
  std::string payload_;
};

}  // namespace attrib
