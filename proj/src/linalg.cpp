#include "optode/linalg.hpp"

#include <cmath>

namespace optode::linalg {

std::vector<Scalar> cholesky_solve(std::vector<Scalar> a, std::vector<Scalar> b, int n) {
    if (static_cast<int>(a.size()) != n * n || static_cast<int>(b.size()) != n)
        throw DataError("cholesky_solve: dimension mismatch");

    // In-place lower Cholesky.
    for (int j = 0; j < n; ++j) {
        Scalar d = a[j * n + j];
        for (int k = 0; k < j; ++k) d -= a[j * n + k] * a[j * n + k];
        if (!(d > 0.0)) throw NumericError("cholesky_solve: matrix not positive definite");
        const Scalar l = std::sqrt(d);
        a[j * n + j] = l;
        for (int i = j + 1; i < n; ++i) {
            Scalar s = a[i * n + j];
            for (int k = 0; k < j; ++k) s -= a[i * n + k] * a[j * n + k];
            a[i * n + j] = s / l;
        }
    }
    // Forward then backward substitution.
    for (int i = 0; i < n; ++i) {
        Scalar s = b[i];
        for (int k = 0; k < i; ++k) s -= a[i * n + k] * b[k];
        b[i] = s / a[i * n + i];
    }
    for (int i = n - 1; i >= 0; --i) {
        Scalar s = b[i];
        for (int k = i + 1; k < n; ++k) s -= a[k * n + i] * b[k];
        b[i] = s / a[i * n + i];
    }
    return b;
}

}  // namespace optode::linalg
