#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace optode {

/// Concentration in umol/L, intensities in camera counts (arbitrary units).
using Scalar = double;

/// Raised when inputs violate a format or value contract (CLI exit code 2).
class DataError : public std::runtime_error {
public:
    explicit DataError(const std::string& what) : std::runtime_error(what) {}
};

/// Raised when a numerical procedure cannot produce a result (CLI exit code 3).
class NumericError : public std::runtime_error {
public:
    explicit NumericError(const std::string& what) : std::runtime_error(what) {}
};

/// Value plus a flag telling the caller it was clamped into the physical range.
struct Clamped {
    Scalar value = 0.0;
    bool clamped = false;
};

/// Row-major index into a width x height grid.
inline std::size_t grid_index(int x, int y, int width) {
    return static_cast<std::size_t>(y) * static_cast<std::size_t>(width) +
           static_cast<std::size_t>(x);
}

}  // namespace optode
