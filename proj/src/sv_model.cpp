#include "optode/sv_model.hpp"

#include <cmath>

namespace optode::sv {

Scalar forward_linear(const SvLinear& p, Scalar o2) {
    p.validate();
    if (!(o2 >= 0.0)) throw DataError("forward_linear: o2 must be >= 0");
    return p.i0 / (1.0 + p.k_sv * o2);
}

Clamped invert_linear(const SvLinear& p, Scalar i) {
    p.validate();
    if (!(i > 0.0)) throw DataError("invert_linear: intensity must be > 0");
    if (p.k_sv == 0.0) throw NumericError("invert_linear: k_sv == 0 is not invertible");
    if (i > p.i0) return {0.0, true};
    return {(p.i0 / i - 1.0) / p.k_sv, false};
}

Scalar forward_two_site(const SvTwoSite& p, Scalar o2) {
    p.validate();
    if (!(o2 >= 0.0)) throw DataError("forward_two_site: o2 must be >= 0");
    return p.i0 * (p.a / (1.0 + p.k1 * o2) + (1.0 - p.a) / (1.0 + p.k2 * o2));
}

Clamped invert_two_site(const SvTwoSite& p, Scalar i, Scalar tol) {
    p.validate();
    if (!(i > 0.0)) throw DataError("invert_two_site: intensity must be > 0");
    if (!(tol > 0.0)) throw DataError("invert_two_site: tol must be > 0");
    if (p.k1 == 0.0 && p.k2 == 0.0)
        throw NumericError("invert_two_site: unquenchable parameters (k1 = k2 = 0)");
    if (i >= p.i0) return {0.0, i > p.i0};

    // Bracket: forward is non-increasing, forward(0) = i0 > i. Expand the
    // upper bound geometrically until the model drops below i.
    Scalar hi = 1.0;
    int expand = 0;
    while (forward_two_site(p, hi) > i) {
        hi *= 2.0;
        if (++expand > 200)
            throw NumericError("invert_two_site: intensity below the model asymptote");
    }

    Scalar lo = 0.0;
    const Scalar abs_tol = tol * p.i0;
    Scalar mid = 0.5 * hi;
    for (int iter = 0; iter < 200; ++iter) {
        mid = 0.5 * (lo + hi);
        const Scalar f = forward_two_site(p, mid);
        if (std::abs(f - i) <= abs_tol) break;
        if (f > i)
            lo = mid;
        else
            hi = mid;
    }
    return {mid, false};
}

Scalar physics_residual(Scalar i0, Scalar k_sv, Scalar i, Scalar o2_gt) {
    if (!(i > 0.0)) throw DataError("physics_residual: intensity must be > 0");
    return i0 / i - 1.0 - k_sv * o2_gt;
}

Scalar lod(Scalar sigma_zero, Scalar slope) {
    if (!(sigma_zero >= 0.0)) throw DataError("lod: sigma must be >= 0");
    if (!(slope > 0.0)) throw NumericError("lod: degenerate sensitivity (slope <= 0)");
    return 3.0 * sigma_zero / slope;
}

Scalar dynamic_range(Scalar i_max, Scalar i_min) {
    if (!(i_min >= 0.0)) throw DataError("dynamic_range: intensities must be >= 0");
    if (i_max < i_min)
        throw DataError("dynamic_range: i_max < i_min (mislabeled concentration sweep)");
    return i_max - i_min;
}

Scalar r_squared(std::span<const Scalar> observed, std::span<const Scalar> predicted) {
    if (observed.size() != predicted.size())
        throw DataError("r_squared: series lengths differ");
    if (observed.size() < 2) throw DataError("r_squared: need at least 2 samples");

    Scalar mean = 0.0;
    for (Scalar y : observed) mean += y;
    mean /= static_cast<Scalar>(observed.size());

    Scalar ss_res = 0.0;
    Scalar ss_tot = 0.0;
    for (std::size_t k = 0; k < observed.size(); ++k) {
        const Scalar r = observed[k] - predicted[k];
        const Scalar d = observed[k] - mean;
        ss_res += r * r;
        ss_tot += d * d;
    }
    if (ss_tot == 0.0)
        throw NumericError("r_squared: observations have zero variance");
    return 1.0 - ss_res / ss_tot;
}

}  // namespace optode::sv
