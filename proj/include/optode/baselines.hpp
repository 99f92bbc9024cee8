#pragma once

#include <array>
#include <span>
#include <string>
#include <vector>

#include "optode/pixel_fit.hpp"
#include "optode/simulator.hpp"
#include "optode/sv_model.hpp"

namespace optode::baseline {

/// Classical calibrator: a pixel cohort averaged into one virtual sensor with
/// a single fitted quenching curve.
struct SuperPixelCalibrator {
    int width = 0;
    int height = 0;
    std::vector<int> cohort;  ///< row-major pixel indices, unique
    pixfit::ModelKind model = pixfit::ModelKind::linear;
    sv::SvLinear linear;
    sv::SvTwoSite two_site;

    void validate() const;
};

/// Industry-style single-point calibration: all pixels averaged, linear fit
/// pooled over the training days.
SuperPixelCalibrator global_average_fit(std::span<const sim::DayDataset* const> train);

/// Cohort selected by per-pixel ranking on the training data, then fitted
/// like the global calibrator on the cohort-averaged signal.
SuperPixelCalibrator best_pixels_fit(std::span<const sim::DayDataset* const> train,
                                     pixfit::RankMetric metric, pixfit::ModelKind model,
                                     int n);

/// Averages the cohort and inverts the fitted quenching model. The clamp flag
/// reports super-unity intensities mapped to 0 umol/L.
Clamped predict_super_pixel(const SuperPixelCalibrator& c, const sim::Frame& frame);

/// Per-frame engineered features for the position-agnostic regression
/// baseline. All entries must be finite.
struct FeatureVector {
    Scalar mean_red = 0.0;
    Scalar std_red_window = 0.0;  ///< std of the frame-mean red within the plateau window
    Scalar mean_i0 = 0.0;
    Scalar mean_k_sv = 0.0;
    Scalar mean_lod = 0.0;
    Scalar mean_dr = 0.0;
    Scalar mean_r2 = 0.0;
    Scalar temperature = 0.0;

    void validate() const;
    std::array<Scalar, 8> raw() const {
        return {mean_red, std_red_window, mean_i0, mean_k_sv,
                mean_lod, mean_dr, mean_r2, temperature};
    }
};

/// Ok-pixel means of the fitted parameter maps, the aggregate physics
/// statistics fed to the feature regressor.
struct MapAggregates {
    Scalar mean_i0 = 0.0;
    Scalar mean_k_sv = 0.0;
    Scalar mean_lod = 0.0;
    Scalar mean_dr = 0.0;
    Scalar mean_r2 = 0.0;
};

MapAggregates compute_aggregates(const pixfit::ParameterMaps& maps);

/// One FeatureVector per frame of a day. Uses only the plateau window
/// boundaries of the day (measurement intervals), never the ground truth.
std::vector<FeatureVector> day_features(const sim::DayDataset& day,
                                        const MapAggregates& agg);

/// Closed-form ridge regression on standardized features expanded with
/// quadratic and reciprocal-intensity terms (the curvature a linear model
/// needs to track the inverse quenching law).
struct FeatureRegressor {
    Scalar lambda = 1e-2;
    Scalar intercept = 0.0;
    std::vector<Scalar> means;   ///< per basis column
    std::vector<Scalar> scales;  ///< per basis column; 1 for constant columns
    std::vector<Scalar> coeffs;
    MapAggregates aggregates;    ///< frozen training-map statistics

    Scalar predict(const FeatureVector& f) const;
};

FeatureRegressor feature_regressor_fit(std::span<const sim::DayDataset* const> train,
                                       Scalar ridge_lambda = 1e-2);

/// Expanded basis for one feature vector; exposed for tests.
std::vector<Scalar> feature_basis(const FeatureVector& f);

/// Versioned text manifests.
void save_calibrator(const SuperPixelCalibrator& c, const std::string& path);
SuperPixelCalibrator load_calibrator(const std::string& path);
void save_regressor(const FeatureRegressor& r, const std::string& path);
FeatureRegressor load_regressor(const std::string& path);

}  // namespace optode::baseline
