#pragma once

#include <span>

#include "optode/common.hpp"

namespace optode::sv {

/// One-site Stern-Volmer model: I = i0 / (1 + k_sv * [O2]).
struct SvLinear {
    Scalar i0 = 1.0;   ///< unquenched intensity, > 0
    Scalar k_sv = 0.0; ///< quenching constant, L/umol, >= 0

    void validate() const {
        if (!(i0 > 0.0)) throw DataError("SvLinear: i0 must be > 0");
        if (!(k_sv >= 0.0)) throw DataError("SvLinear: k_sv must be >= 0");
    }
};

/// Two-site model: I = i0 * [ a/(1 + k1*[O2]) + (1-a)/(1 + k2*[O2]) ].
/// Canonical form keeps k1 >= k2 to remove the site-swap symmetry.
struct SvTwoSite {
    Scalar i0 = 1.0;
    Scalar a = 1.0;  ///< fraction of the first site, in [0, 1]
    Scalar k1 = 0.0; ///< L/umol, >= 0
    Scalar k2 = 0.0; ///< L/umol, >= 0

    void validate() const {
        if (!(i0 > 0.0)) throw DataError("SvTwoSite: i0 must be > 0");
        if (!(a >= 0.0 && a <= 1.0)) throw DataError("SvTwoSite: a must be in [0,1]");
        if (!(k1 >= 0.0 && k2 >= 0.0)) throw DataError("SvTwoSite: k1, k2 must be >= 0");
        if (k1 < k2) throw DataError("SvTwoSite: canonical ordering requires k1 >= k2");
    }

    /// Swaps sites if needed so that k1 >= k2.
    void canonicalize() {
        if (k1 < k2) {
            std::swap(k1, k2);
            a = 1.0 - a;
        }
    }
};

/// Per-pixel calibration quality statistics used for cohort ranking.
struct PixelMetrics {
    Scalar k_sv = 0.0;
    Scalar i0 = 0.0;
    Scalar dr = 0.0;  ///< dynamic range, intensity counts, >= 0
    Scalar lod = 0.0; ///< limit of detection, umol/L, >= 0
    Scalar r2 = 0.0;  ///< coefficient of determination, <= 1; NaN when undefined
};

/// Quenched intensity of the one-site model. Requires o2 >= 0.
Scalar forward_linear(const SvLinear& p, Scalar o2);

/// Inverts the one-site model. Intensities above i0 (noise excursions) clamp
/// to 0 umol/L with the flag set. Throws NumericError when k_sv == 0 and
/// DataError when i <= 0.
Clamped invert_linear(const SvLinear& p, Scalar i);

/// Quenched intensity of the two-site model. Requires o2 >= 0.
Scalar forward_two_site(const SvTwoSite& p, Scalar o2);

/// Numerically inverts the two-site model by bisection on the monotone
/// forward map. tol is relative to i0. Same clamping rules as the linear
/// inverse; throws NumericError when the model is unquenchable (k1 == k2 == 0)
/// or the intensity lies below the model's asymptote.
Clamped invert_two_site(const SvTwoSite& p, Scalar i, Scalar tol = 1e-9);

/// Residual of the linear quenching law at one pixel:
///   (i0 / i) - 1 - k_sv * o2_gt.
/// Zero exactly when the sample lies on the calibration curve. Throws
/// DataError when i <= 0.
Scalar physics_residual(Scalar i0, Scalar k_sv, Scalar i, Scalar o2_gt);

/// Limit of detection 3*sigma/m, with sigma measured on the transformed
/// signal i0/I - 1 at the zero-oxygen plateau (so units cancel against the
/// slope m = k_sv). Throws NumericError when slope <= 0.
Scalar lod(Scalar sigma_zero, Scalar slope);

/// Intensity span across the concentration sweep. Throws DataError when
/// i_max < i_min (mislabeled sweep).
Scalar dynamic_range(Scalar i_max, Scalar i_min);

/// Coefficient of determination 1 - SS_res/SS_tot. May be negative for fits
/// worse than the mean. Throws DataError on length mismatch or short series,
/// NumericError when the observations have zero variance.
Scalar r_squared(std::span<const Scalar> observed, std::span<const Scalar> predicted);

}  // namespace optode::sv
