#pragma once

#include <span>
#include <string>
#include <vector>

#include "optode/simulator.hpp"
#include "optode/sv_model.hpp"

namespace optode::pixfit {

/// One pixel's calibration series: plateau-averaged intensities against the
/// plateau concentrations, plus the intensity noise level at zero oxygen.
struct PixelSeries {
    std::vector<Scalar> intensities;    ///< one mean per plateau
    std::vector<Scalar> concentrations; ///< strictly increasing, first is 0
    Scalar sigma_zero = 0.0;            ///< intensity std within the zero plateau

    void validate(std::size_t min_len) const;
};

/// Plateau-aggregated red-channel means for every pixel of a grid, the input
/// to fit_all_pixels. Built from day datasets or synthesized directly.
struct PlateauStack {
    int width = 0;
    int height = 0;
    std::vector<Scalar> concentrations;
    std::vector<std::vector<Scalar>> plateau_mean;  ///< [plateau][pixel]
    std::vector<Scalar> sigma_zero;                 ///< [pixel]

    PixelSeries series(int x, int y) const;
};

/// Aggregates the red channel of one or more days into per-plateau means and
/// zero-plateau stds. All days must share the same plateau concentrations.
PlateauStack aggregate_plateaus(std::span<const sim::DayDataset* const> days);
PlateauStack aggregate_plateaus(const std::vector<sim::DayDataset>& days);

enum class FitStatus { ok, degenerate, failed };

struct FitOptions {
    Scalar lm_lambda0 = 1e-3;   ///< initial damping
    int lm_max_iter = 200;
    Scalar step_tol = 1e-10;    ///< relative step norm convergence
};

struct LinearFit {
    sv::SvLinear params;
    sv::PixelMetrics metrics;
    FitStatus status = FitStatus::degenerate;
};

struct TwoSiteFit {
    sv::SvTwoSite params;
    sv::PixelMetrics metrics;
    FitStatus status = FitStatus::degenerate;
    Scalar sse = 0.0;  ///< intensity-domain sum of squared residuals
};

/// Ratio-domain least squares of i0/I - 1 against concentration with the
/// intercept pinned at zero and i0 taken from the zero-oxygen plateau mean.
LinearFit fit_linear_pixel(const PixelSeries& s);

/// Box-constrained damped least squares (Levenberg-Marquardt) on the
/// intensity-domain SSE. The result is re-canonicalized to k1 >= k2 and its
/// SSE never exceeds the SSE of the nested one-site solution.
TwoSiteFit fit_two_site_pixel(const PixelSeries& s, const sv::SvTwoSite& init,
                              const FitOptions& opts = {});

struct LmFit {
    sv::SvTwoSite params;
    Scalar sse = 0.0;
    FitStatus status = FitStatus::failed;
};

/// Raw two-site LM on arbitrary (concentration, intensity) samples; the
/// building block behind fit_two_site_pixel and the super-pixel calibrators.
LmFit lm_two_site(std::span<const Scalar> concentrations,
                  std::span<const Scalar> intensities, const sv::SvTwoSite& init,
                  const FitOptions& opts = {});

/// Default two-site start: mostly-linear mixture seeded from the pixel's own
/// one-site fit.
sv::SvTwoSite default_two_site_init(const PixelSeries& s, const LinearFit& linear);

struct ParameterMaps {
    int width = 0;
    int height = 0;
    std::vector<LinearFit> linear;      ///< row-major, width*height
    std::vector<TwoSiteFit> two_site;   ///< row-major, width*height

    /// Worst status of the two fits for a pixel.
    FitStatus combined_status(int x, int y) const;
};

/// Fits every pixel independently. Deterministic: results do not depend on
/// the evaluation schedule, and individual pixel failures never abort the
/// grid.
ParameterMaps fit_all_pixels(const PlateauStack& stack, const FitOptions& opts = {});

/// Serial reference for fit_all_pixels, kept for consistency tests and the
/// benchmark target.
ParameterMaps fit_all_pixels_serial(const PlateauStack& stack, const FitOptions& opts = {});

enum class RankMetric { k_sv, dr, i0, lod, r2 };
enum class ModelKind { linear, two_site };

RankMetric parse_rank_metric(const std::string& name);
ModelKind parse_model_kind(const std::string& name);

struct RankResult {
    std::vector<int> indices;  ///< row-major pixel indices, best first
    bool truncated = false;    ///< n exceeded the ok-pixel count
};

/// Top-n ok pixels by a quality metric. Higher is better except for LOD.
/// Ties break by row-major index, so the top-n list is always a prefix of the
/// top-(n+1) list.
RankResult rank_pixels(const ParameterMaps& maps, RankMetric metric, ModelKind model,
                       int n);

/// CSV export, one row per pixel per model class.
void export_maps_csv(const ParameterMaps& maps, const std::string& path);

/// ASCII PGM (P2) heatmap of one metric, min-max scaled to 16-bit.
void export_metric_pgm(const ParameterMaps& maps, RankMetric metric, ModelKind model,
                       const std::string& path);

}  // namespace optode::pixfit
