#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace mflab {

/// Caller broke a documented precondition (size mismatch, empty window, ...).
class ContractViolation : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

/// Non-finite or otherwise out-of-domain numeric input.
class DomainError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

/// The N-particle integrator produced a non-finite state.
class IntegratorBlowUp : public std::runtime_error {
 public:
  IntegratorBlowUp(std::size_t particle, const std::string& what)
      : std::runtime_error(what), particle_(particle) {}
  std::size_t particle() const noexcept { return particle_; }

 private:
  std::size_t particle_;
};

/// Self-consistent field exceeded the blow-up threshold (attractive collapse).
class FieldBlowUp : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Persisted container failed validation (bad magic, truncated, hash mismatch).
class CorruptContainer : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace mflab
