#pragma once

#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "optode/common.hpp"

namespace optode::sim {

/// Fouling blob process: opacity deposits accumulate on the film day after
/// day while the active deposition centers drift, so the occluded region is
/// non-stationary but total coverage never recedes.
struct FoulingConfig {
    int births_per_day = 2;        ///< new deposition centers per day
    Scalar deposit_rate = 0.35;    ///< optical depth added per blob per day
    Scalar drift_step = 3.0;       ///< center random-walk step, pixels/day
    Scalar radius0 = 3.0;          ///< initial Gaussian radius, pixels
    Scalar radius_growth = 1.10;   ///< radius multiplier per day
    int burst_day = -1;            ///< optional out-of-distribution burst (-1 = none)
    int burst_births = 0;
};

struct SimConfig {
    int width = 48;
    int height = 48;
    int days = 8;
    std::vector<Scalar> plateaus{0.0, 62.5, 125.0, 187.5, 250.0};  ///< umol/L
    int frames_per_plateau = 12;
    Scalar fps = 2.0;

    std::string film_mask = "full";  ///< "full" or "disk"

    Scalar base_i0 = 120.0;   ///< mean unquenched intensity, counts
    Scalar base_k_sv = 0.008; ///< mean quenching constant, L/umol
    Scalar het_i0 = 0.15;     ///< log-normal sigma of the i0 field
    Scalar het_k_sv = 0.10;   ///< log-normal sigma of the k_sv field

    /// Illumination field 1 + gx*u + gy*v + gxy*u*v + gx2*u^2 + gy2*v^2 with
    /// u, v in [-1, 1]; clamped at 0.1.
    Scalar illum_gx = 0.10;
    Scalar illum_gy = -0.08;
    Scalar illum_gxy = 0.0;
    Scalar illum_gx2 = -0.05;
    Scalar illum_gy2 = -0.05;

    FoulingConfig fouling;
    Scalar bleach_rate = 0.01;   ///< fractional i0 decay per day
    Scalar noise_sigma = 2.0;    ///< Gaussian intensity noise, counts
    Scalar background = 2.0;     ///< off-film baseline, counts ("disk" mask only)

    Scalar temp_base = 20.0;       ///< deg C
    Scalar temp_amplitude = 1.0;   ///< deg C swing over a day
    Scalar temp_k_coeff = 0.005;   ///< relative k_sv change per deg C around 20

    Scalar gt_noise_sigma = 1.0;   ///< probe noise before step averaging, umol/L
    Scalar gt_window_s = 10.0;     ///< step-averaging window

    std::uint64_t seed = 1;

    void validate() const;
    int frames_per_day() const { return frames_per_plateau * static_cast<int>(plateaus.size()); }
};

/// One captured image with its context. Pixel storage is row-major,
/// channel-interleaved (y, x, c) with c in {red, green, blue}; red carries the
/// quenching signal.
struct Frame {
    int width = 0;
    int height = 0;
    int channels = 3;
    std::vector<float> pixels;
    Scalar temperature = 20.0;  ///< deg C
    Scalar timestamp = 0.0;     ///< seconds from day start
    Scalar do_gt = 0.0;         ///< conditioned ground truth, umol/L

    float& at(int x, int y, int c) {
        return pixels[(static_cast<std::size_t>(y) * width + x) * channels + c];
    }
    float at(int x, int y, int c) const {
        return pixels[(static_cast<std::size_t>(y) * width + x) * channels + c];
    }
    Scalar red(int x, int y) const { return at(x, y, 0); }
};

/// [start_frame, end_frame) of one concentration plateau.
struct PlateauWindow {
    int start = 0;
    int end = 0;
    Scalar concentration = 0.0;
};

/// Ground-truth internals of the simulator, attached to generated days so
/// tests can audit recovery against the planted fields. Never serialized.
struct SimTruth {
    std::vector<Scalar> i0_field;      ///< per pixel, before illumination/decay
    std::vector<Scalar> k_sv_field;    ///< per pixel, at 20 deg C
    std::vector<Scalar> illumination;  ///< per pixel
    std::vector<std::uint8_t> film;    ///< per pixel, 1 = sensing film
    std::vector<Scalar> transmission;  ///< per pixel, day-specific fouling B_d in [0,1]
    Scalar decay = 1.0;                ///< photobleaching factor for this day
};

struct DayDataset {
    int day_index = 1;  ///< 1-based experimental day
    std::vector<Frame> frames;
    std::vector<PlateauWindow> plateau_windows;
    Scalar biofouling_score = 0.0;  ///< 1 - mean film transmission, in [0,1]
    std::shared_ptr<const SimTruth> truth;  ///< present on simulated data only
};

/// Generates the full multi-day calibration experiment. Output is a pure
/// function of cfg; per-frame noise streams are derived from (seed, day,
/// frame) so days and frames may be rendered concurrently without changing a
/// single bit of the result.
std::vector<DayDataset> simulate(const SimConfig& cfg);

/// Serial reference for simulate(); kept for the parallel-consistency tests
/// and the benchmark target.
std::vector<DayDataset> simulate_serial(const SimConfig& cfg);

/// Non-overlapping window means over a timestamped series (step averaging of
/// the reference probe). Output has one value per window, ceil(span/window)
/// windows. Throws DataError on an empty series or non-positive window.
std::vector<std::pair<Scalar, Scalar>> condition_ground_truth(
    const std::vector<std::pair<Scalar, Scalar>>& raw, Scalar window);

}  // namespace optode::sim
