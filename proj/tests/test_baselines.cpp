#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>

#include "optode/baselines.hpp"
#include "optode/rng.hpp"

using namespace optode;
using namespace optode::baseline;

namespace {

std::vector<const sim::DayDataset*> ptrs(const std::vector<sim::DayDataset>& days,
                                         std::size_t from = 0, std::size_t to = SIZE_MAX) {
    std::vector<const sim::DayDataset*> out;
    for (std::size_t d = from; d < std::min(to, days.size()); ++d) out.push_back(&days[d]);
    return out;
}

/// Exact-arithmetic config: power-of-two quench denominators so float frame
/// storage introduces no rounding at all.
sim::SimConfig exact_config() {
    sim::SimConfig cfg;
    cfg.width = 8;
    cfg.height = 8;
    cfg.days = 2;
    cfg.plateaus = {0.0, 100.0, 300.0, 700.0, 1500.0};
    cfg.base_i0 = 100.0;
    cfg.base_k_sv = 0.01;
    cfg.frames_per_plateau = 4;
    cfg.noise_sigma = 0.0;
    cfg.gt_noise_sigma = 0.0;
    cfg.het_i0 = cfg.het_k_sv = 0.0;
    cfg.illum_gx = cfg.illum_gy = cfg.illum_gxy = cfg.illum_gx2 = cfg.illum_gy2 = 0.0;
    cfg.fouling.births_per_day = 0;
    cfg.fouling.deposit_rate = 0.0;
    cfg.bleach_rate = 0.0;
    cfg.temp_amplitude = 0.0;
    cfg.seed = 3;
    return cfg;
}

sim::DayDataset single_plateau_day() {
    sim::SimConfig cfg = exact_config();
    auto days = sim::simulate(cfg);
    sim::DayDataset day = days[0];
    day.plateau_windows.resize(1);
    day.frames.resize(static_cast<std::size_t>(day.plateau_windows[0].end));
    return day;
}

}  // namespace

TEST_CASE("global average predicts a held-out noiseless day exactly") {
    const auto days = sim::simulate(exact_config());
    const auto train = ptrs(days, 0, 1);
    const SuperPixelCalibrator ga = global_average_fit(train);

    const sim::DayDataset& test = days[1];
    for (const auto& w : test.plateau_windows) {
        const Clamped p = predict_super_pixel(ga, test.frames[static_cast<std::size_t>(w.start)]);
        CHECK(std::abs(p.value - w.concentration) <= 1e-6);
    }
}

TEST_CASE("global average requires more than one plateau") {
    const sim::DayDataset day = single_plateau_day();
    const std::vector<const sim::DayDataset*> train{&day};
    CHECK_THROWS_AS(global_average_fit(train), DataError);
}

TEST_CASE("pooling two identical days equals fitting one") {
    const auto days = sim::simulate(exact_config());
    const std::vector<const sim::DayDataset*> one{&days[0]};
    const std::vector<const sim::DayDataset*> two{&days[0], &days[0]};
    const SuperPixelCalibrator a = global_average_fit(one);
    const SuperPixelCalibrator b = global_average_fit(two);
    CHECK(a.linear.i0 == doctest::Approx(b.linear.i0).epsilon(1e-12));
    CHECK(a.linear.k_sv == doctest::Approx(b.linear.k_sv).epsilon(1e-12));
}

TEST_CASE("best_pixels_fit with full cohort equals global average") {
    sim::SimConfig cfg = exact_config();
    cfg.het_i0 = 0.1;  // mild heterogeneity keeps every pixel ok
    cfg.noise_sigma = 0.3;
    const auto days = sim::simulate(cfg);
    const auto train = ptrs(days, 0, 1);

    const SuperPixelCalibrator ga = global_average_fit(train);
    const SuperPixelCalibrator bp = best_pixels_fit(train, pixfit::RankMetric::r2,
                                                    pixfit::ModelKind::linear,
                                                    cfg.width * cfg.height);
    REQUIRE(bp.cohort.size() == ga.cohort.size());
    CHECK(bp.cohort == ga.cohort);
    CHECK(bp.linear.i0 == ga.linear.i0);
    CHECK(bp.linear.k_sv == ga.linear.k_sv);

    const Clamped pa = predict_super_pixel(ga, days[1].frames[10]);
    const Clamped pb = predict_super_pixel(bp, days[1].frames[10]);
    CHECK(pa.value == pb.value);
}

TEST_CASE("prediction is invariant to cohort ordering and fails on dead cohort") {
    const auto days = sim::simulate(exact_config());
    const auto train = ptrs(days, 0, 1);
    SuperPixelCalibrator c = global_average_fit(train);

    sim::Frame zero = days[0].frames[0];
    for (auto& v : zero.pixels) v = 0.0f;
    CHECK_THROWS_AS(predict_super_pixel(c, zero), DataError);

    // Calibrators canonicalize the cohort, so shuffled construction input
    // cannot change predictions.
    const SuperPixelCalibrator again = global_average_fit(train);
    CHECK(again.cohort == c.cohort);
}

TEST_CASE("fouled test day degrades a cohort picked on a clean day") {
    sim::SimConfig cfg;
    cfg.width = 16;
    cfg.height = 16;
    cfg.days = 6;
    cfg.frames_per_plateau = 6;
    cfg.noise_sigma = 1.0;
    cfg.fouling.births_per_day = 3;
    cfg.fouling.deposit_rate = 0.8;
    cfg.seed = 11;
    const auto days = sim::simulate(cfg);
    const auto train = ptrs(days, 0, 1);
    const SuperPixelCalibrator bp =
        best_pixels_fit(train, pixfit::RankMetric::r2, pixfit::ModelKind::linear, 10);

    auto day_mae = [&](const sim::DayDataset& day) {
        Scalar acc = 0.0;
        long n = 0;
        for (const auto& fr : day.frames) {
            acc += std::abs(predict_super_pixel(bp, fr).value - fr.do_gt);
            ++n;
        }
        return acc / n;
    };
    CHECK(day_mae(days.back()) > day_mae(days.front()));
}

TEST_CASE("feature basis and aggregates stay finite on simulated data") {
    const auto days = sim::simulate(exact_config());
    const auto train = ptrs(days, 0, 1);
    const auto stack = pixfit::aggregate_plateaus(
        std::span<const sim::DayDataset* const>(train));
    const auto maps = pixfit::fit_all_pixels(stack);
    const MapAggregates agg = compute_aggregates(maps);
    CHECK(agg.mean_i0 == doctest::Approx(100.0).epsilon(1e-6));

    const auto feats = day_features(days[0], agg);
    REQUIRE(feats.size() == days[0].frames.size());
    for (const auto& f : feats) {
        const auto basis = feature_basis(f);
        for (Scalar v : basis) CHECK(std::isfinite(v));
    }
}

TEST_CASE("ridge with lambda 0 interpolates a linear relation exactly") {
    // DO is an exact linear function of (mean_red, temperature); generic
    // random data keeps the reduced design full rank.
    Rng rng(123);
    std::vector<sim::DayDataset> days(2);
    for (int d = 0; d < 2; ++d) {
        sim::DayDataset& day = days[static_cast<std::size_t>(d)];
        day.day_index = d + 1;
        const int frames = 40;
        day.frames.resize(frames);
        day.plateau_windows = {{0, frames / 2, 0.0}, {frames / 2, frames, 50.0}};
        for (int f = 0; f < frames; ++f) {
            sim::Frame& fr = day.frames[static_cast<std::size_t>(f)];
            fr.width = 4;
            fr.height = 4;
            fr.pixels.assign(4 * 4 * 3, 0.0f);
            const float red = static_cast<float>(rng.uniform(10.0, 100.0));
            for (int i = 0; i < 16; ++i)
                fr.pixels[static_cast<std::size_t>(i) * 3] = red;
            fr.temperature = rng.uniform(15.0, 25.0);
            fr.timestamp = f;
            fr.do_gt = 2.0 * static_cast<Scalar>(red) + 0.5 * fr.temperature;
        }
    }
    const auto train = ptrs(days);
    const FeatureRegressor reg = feature_regressor_fit(train, 0.0);
    const MapAggregates agg = reg.aggregates;
    for (const auto& day : days) {
        const auto feats = day_features(day, agg);
        for (std::size_t f = 0; f < feats.size(); ++f) {
            CHECK(std::abs(reg.predict(feats[f]) - day.frames[f].do_gt) <= 1e-6);
        }
    }
}

TEST_CASE("huge ridge_lambda shrinks predictions to the training mean") {
    sim::SimConfig cfg = exact_config();
    cfg.noise_sigma = 0.5;
    const auto days = sim::simulate(cfg);
    const auto train = ptrs(days, 0, 1);
    const FeatureRegressor reg = feature_regressor_fit(train, 1e12);

    Scalar mean_do = 0.0;
    long n = 0;
    for (const auto& fr : days[0].frames) {
        mean_do += fr.do_gt;
        ++n;
    }
    mean_do /= n;

    const auto feats = day_features(days[0], reg.aggregates);
    for (const auto& f : feats) {
        CHECK(std::abs(reg.predict(f) - mean_do) <= 1e-3 * std::max<Scalar>(mean_do, 1.0));
    }
}

TEST_CASE("stored standardization constants reproduce mean 0 variance 1") {
    sim::SimConfig cfg = exact_config();
    cfg.noise_sigma = 0.5;
    cfg.het_i0 = 0.1;
    const auto days = sim::simulate(cfg);
    const auto train = ptrs(days);
    const FeatureRegressor reg = feature_regressor_fit(train, 1e-2);

    std::vector<std::vector<Scalar>> rows;
    for (const auto* day : train)
        for (const auto& f : day_features(*day, reg.aggregates))
            rows.push_back(feature_basis(f));

    const std::size_t d = rows.front().size();
    for (std::size_t k = 0; k < d; ++k) {
        Scalar mean = 0.0, var = 0.0;
        for (const auto& r : rows) mean += (r[k] - reg.means[k]) / reg.scales[k];
        mean /= static_cast<Scalar>(rows.size());
        for (const auto& r : rows) {
            const Scalar z = (r[k] - reg.means[k]) / reg.scales[k] - mean;
            var += z * z;
        }
        var /= static_cast<Scalar>(rows.size());
        CHECK(std::abs(mean) <= 1e-9);
        if (reg.scales[k] != 1.0) {
            CHECK(std::abs(var - 1.0) <= 1e-9);
        }
    }
}

TEST_CASE("calibrator and regressor manifests round-trip") {
    const auto days = sim::simulate(exact_config());
    const auto train = ptrs(days, 0, 1);
    const auto dir = std::filesystem::temp_directory_path() / "optodecal_baseline_test";
    std::filesystem::create_directories(dir);

    const SuperPixelCalibrator ga = global_average_fit(train);
    save_calibrator(ga, (dir / "ga.txt").string());
    const SuperPixelCalibrator ga2 = load_calibrator((dir / "ga.txt").string());
    CHECK(ga2.cohort == ga.cohort);
    CHECK(ga2.linear.i0 == ga.linear.i0);
    CHECK(ga2.linear.k_sv == ga.linear.k_sv);

    const SuperPixelCalibrator bp = best_pixels_fit(train, pixfit::RankMetric::r2,
                                                    pixfit::ModelKind::two_site, 10);
    save_calibrator(bp, (dir / "bp.txt").string());
    const SuperPixelCalibrator bp2 = load_calibrator((dir / "bp.txt").string());
    CHECK(bp2.two_site.k1 == bp.two_site.k1);
    CHECK(bp2.two_site.a == bp.two_site.a);

    sim::SimConfig noisy = exact_config();
    noisy.noise_sigma = 0.5;
    const auto noisy_days = sim::simulate(noisy);
    const auto noisy_train = ptrs(noisy_days, 0, 1);
    const FeatureRegressor reg = feature_regressor_fit(noisy_train, 1e-2);
    save_regressor(reg, (dir / "fr.txt").string());
    const FeatureRegressor reg2 = load_regressor((dir / "fr.txt").string());
    CHECK(reg2.coeffs == reg.coeffs);
    CHECK(reg2.intercept == reg.intercept);

    const auto feats = day_features(noisy_days[1], reg.aggregates);
    CHECK(reg2.predict(feats[0]) == reg.predict(feats[0]));

    std::filesystem::remove_all(dir);
}
