#pragma once

#include <stdexcept>
#include <string>

namespace maglim {

/// Input violates a documented domain (non-finite values, invalid parameters,
/// empty datasets).
class DomainError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

/// A documented precondition of an operation does not hold.
class PreconditionError : public std::logic_error {
public:
    using std::logic_error::logic_error;
};

/// An iterative solver failed to reach its stopping criterion.
class SolverError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Malformed configuration, gain or dataset file.
class ParseError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

} // namespace maglim
