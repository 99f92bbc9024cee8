#pragma once

#include <cstddef>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace optode::par {

/// Sets the worker count for all parallel kernels. 0 = library default
/// (hardware threads). Thread count never changes results: every kernel
/// writes disjoint output elements with a fixed per-element operation order.
void set_threads(int n);
int threads();

/// Runs body(i) for i in [0, n). Parallel when OpenMP is available and more
/// than one thread is configured; plain loop otherwise.
template <typename Body>
void for_each(std::size_t n, const Body& body) {
#ifdef _OPENMP
    if (threads() != 1) {
#pragma omp parallel for schedule(static) num_threads(threads() > 0 ? threads() : omp_get_max_threads())
        for (long long i = 0; i < static_cast<long long>(n); ++i) {
            body(static_cast<std::size_t>(i));
        }
        return;
    }
#endif
    for (std::size_t i = 0; i < n; ++i) body(i);
}

/// Serial reference for for_each; kept so tests and the benchmark can compare
/// against the parallel path.
template <typename Body>
void for_each_serial(std::size_t n, const Body& body) {
    for (std::size_t i = 0; i < n; ++i) body(i);
}

}  // namespace optode::par
