#pragma once

#include <vector>

#include "optode/common.hpp"

namespace optode::linalg {

/// Solves A x = b for symmetric positive-definite A (row-major n x n) by
/// Cholesky factorization. Throws NumericError when A is not positive
/// definite (singular normal equations).
std::vector<Scalar> cholesky_solve(std::vector<Scalar> a, std::vector<Scalar> b, int n);

}  // namespace optode::linalg
