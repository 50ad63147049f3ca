#pragma once

#include <stdexcept>
#include <string>

namespace cbsde {

/// Argument outside the mathematical domain of an operation (non-finite input,
/// query point outside an oracle box, formula used outside its validity range).
class DomainError : public std::domain_error {
public:
    using std::domain_error::domain_error;
};

/// Invalid configuration value (non-positive horizon, empty box, ...).
class ConfigError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

/// Caller violated a structural contract (shape mismatch, unsupported loss output).
class ContractError : public std::logic_error {
public:
    using std::logic_error::logic_error;
};

/// Training produced a non-finite loss. Carries the context needed to reproduce it.
class TrainingError : public std::runtime_error {
public:
    TrainingError(const std::string& what, long iteration, double param_norm)
        : std::runtime_error(what), iteration_(iteration), param_norm_(param_norm) {}

    long iteration() const noexcept { return iteration_; }
    double param_norm() const noexcept { return param_norm_; }

private:
    long iteration_;
    double param_norm_;
};

} // namespace cbsde
