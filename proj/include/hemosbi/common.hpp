#pragma once

#include <cstddef>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace hemosbi {

using Vec = std::vector<double>;

// SI internally; these constants are only used at I/O boundaries.
namespace units {
inline constexpr double mmHg = 133.322;        // Pa
inline constexpr double mL = 1e-6;             // m^3
inline constexpr double L_per_min = 1e-3 / 60; // m^3/s
} // namespace units

class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Argument outside the mathematical domain of an operation.
class DomainError : public Error {
public:
    using Error::Error;
};

/// Invalid user configuration (bad spec, bad grid, bad network).
class ConfigError : public Error {
public:
    using Error::Error;
};

/// Non-finite value encountered during a numeric computation.
class NumericError : public Error {
public:
    using Error::Error;
};

class ShapeError : public Error {
public:
    using Error::Error;
};

/// Degenerate or unusable signal (constant waveform, undetectable foot).
class SignalError : public Error {
public:
    using Error::Error;
};

class IoError : public Error {
public:
    using Error::Error;
};

class SolverError : public Error {
public:
    SolverError(const std::string& what, int segment, int cell, double time)
        : Error(what), segment_(segment), cell_(cell), time_(time) {}

    int segment() const { return segment_; }
    int cell() const { return cell_; }
    double time() const { return time_; }

private:
    int segment_;
    int cell_;
    double time_;
};

/// Code version baked in at configure time (git describe).
std::string code_version();

/// 64-bit FNV-1a, chainable through `seed`.
std::uint64_t fnv1a(const void* data, std::size_t bytes, std::uint64_t seed = 0xcbf29ce484222325ULL);
std::uint64_t fnv1a(const std::string& s, std::uint64_t seed = 0xcbf29ce484222325ULL);
std::string hex64(std::uint64_t h);

} // namespace hemosbi
