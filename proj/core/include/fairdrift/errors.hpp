#pragma once

// Error types shared across the library. Everything derives from Error so
// callers can catch the whole family, but each condition keeps its own type
// because the harness reacts differently to some of them (a DivergedError
// marks a run failed and the sweep continues; a SchemaError aborts before
// anything is written).

#include <cstddef>
#include <stdexcept>
#include <string>

namespace fairdrift {

class Error : public std::runtime_error {
public:
    explicit Error(const std::string& what) : std::runtime_error(what) {}
};

// A dataset view with zero samples was handed to an operation that needs data.
class EmptySubset : public Error {
public:
    explicit EmptySubset(const std::string& what) : Error(what) {}
};

// Structural mismatch: missing column, label out of range, wrong feature count.
class SchemaError : public Error {
public:
    explicit SchemaError(const std::string& what) : Error(what) {}
};

// Unparsable cell in a CSV file; carries the 1-based row and column.
class ParseError : public Error {
public:
    ParseError(const std::string& what, std::size_t row, std::size_t col)
        : Error(what + " (row " + std::to_string(row) + ", column " + std::to_string(col) + ")"),
          row(row), col(col) {}
    std::size_t row;
    std::size_t col;
};

// Two parameter vectors that were expected to share an architecture do not.
class LayoutError : public Error {
public:
    explicit LayoutError(const std::string& what) : Error(what) {}
};

// A non-finite value appeared where the contract promises finite output.
class NumericalOverflow : public Error {
public:
    explicit NumericalOverflow(const std::string& what) : Error(what) {}
};

// Zero-length direction passed to a directional derivative.
class ZeroDirection : public Error {
public:
    explicit ZeroDirection(const std::string& what) : Error(what) {}
};

// Dense Hessian assembly refused: parameter count above the supported cap.
class OracleTooLarge : public Error {
public:
    explicit OracleTooLarge(const std::string& what) : Error(what) {}
};

// Synthetic dataset spec that cannot produce a usable benchmark
// (duplicate class means, zero spread, empty group).
class DegenerateSpec : public Error {
public:
    explicit DegenerateSpec(const std::string& what) : Error(what) {}
};

// Training left the stable regime: loss above the divergence ceiling or
// non-finite parameters. Carries where it happened.
class DivergedError : public Error {
public:
    DivergedError(const std::string& what, std::size_t epoch, std::size_t step)
        : Error(what + " (epoch " + std::to_string(epoch) + ", step " + std::to_string(step) + ")"),
          epoch(epoch), step(step) {}
    std::size_t epoch;
    std::size_t step;
};

// Analytic gradient disagrees with the finite-difference probe.
class GradCheckFailure : public Error {
public:
    explicit GradCheckFailure(const std::string& what) : Error(what) {}
};

// Malformed experiment config (bad key, wrong type, inconsistent sections).
class ConfigError : public Error {
public:
    explicit ConfigError(const std::string& what) : Error(what) {}
};

} // namespace fairdrift
