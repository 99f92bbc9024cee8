#include "optode/simulator.hpp"

#include <algorithm>
#include <cmath>

#include "optode/parallel.hpp"
#include "optode/rng.hpp"

namespace optode::sim {

namespace {

// Stream tags for derived seeds; fixed so layouts never shift between runs.
constexpr std::uint64_t kTagFields = 1;
constexpr std::uint64_t kTagFouling = 2;
constexpr std::uint64_t kTagProbe = 3;
constexpr std::uint64_t kTagFrame = 4;

struct Blob {
    Scalar cx, cy;
    Scalar radius;
};

struct StaticFields {
    std::vector<Scalar> i0;
    std::vector<Scalar> k_sv;
    std::vector<Scalar> illum;
    std::vector<std::uint8_t> film;
};

StaticFields make_fields(const SimConfig& cfg) {
    const std::size_t n = static_cast<std::size_t>(cfg.width) * cfg.height;
    StaticFields f;
    f.i0.resize(n);
    f.k_sv.resize(n);
    f.illum.resize(n);
    f.film.resize(n);

    Rng rng(derive_seed(cfg.seed, kTagFields));
    for (int y = 0; y < cfg.height; ++y) {
        for (int x = 0; x < cfg.width; ++x) {
            const std::size_t idx = grid_index(x, y, cfg.width);
            f.i0[idx] = cfg.base_i0 * std::exp(cfg.het_i0 * rng.normal());
            f.k_sv[idx] = cfg.base_k_sv * std::exp(cfg.het_k_sv * rng.normal());

            const Scalar u = cfg.width > 1 ? 2.0 * x / (cfg.width - 1) - 1.0 : 0.0;
            const Scalar v = cfg.height > 1 ? 2.0 * y / (cfg.height - 1) - 1.0 : 0.0;
            Scalar l = 1.0 + cfg.illum_gx * u + cfg.illum_gy * v + cfg.illum_gxy * u * v +
                       cfg.illum_gx2 * u * u + cfg.illum_gy2 * v * v;
            f.illum[idx] = std::max(l, 0.1);

            if (cfg.film_mask == "disk") {
                const Scalar dx = x - 0.5 * (cfg.width - 1);
                const Scalar dy = y - 0.5 * (cfg.height - 1);
                const Scalar r = 0.45 * std::min(cfg.width, cfg.height);
                f.film[idx] = (dx * dx + dy * dy <= r * r) ? 1 : 0;
            } else {
                f.film[idx] = 1;
            }
        }
    }
    return f;
}

// Accumulated optical depth per day. Deposits only ever grow, so film
// transmission exp(-D) is pointwise non-increasing across days while the
// active centers drift to new regions.
std::vector<std::vector<Scalar>> make_deposits(const SimConfig& cfg) {
    const std::size_t n = static_cast<std::size_t>(cfg.width) * cfg.height;
    std::vector<std::vector<Scalar>> deposits(cfg.days, std::vector<Scalar>(n, 0.0));
    Rng rng(derive_seed(cfg.seed, kTagFouling));
    std::vector<Blob> blobs;
    std::vector<Scalar> depth(n, 0.0);

    for (int d = 0; d < cfg.days; ++d) {
        for (Blob& b : blobs) {
            b.cx += cfg.fouling.drift_step * rng.normal();
            b.cy += cfg.fouling.drift_step * rng.normal();
            b.cx = std::clamp(b.cx, 0.0, static_cast<Scalar>(cfg.width - 1));
            b.cy = std::clamp(b.cy, 0.0, static_cast<Scalar>(cfg.height - 1));
            b.radius *= cfg.fouling.radius_growth;
            b.radius = std::min(b.radius, 0.25 * std::min(cfg.width, cfg.height));
        }
        int births = cfg.fouling.births_per_day;
        if (d + 1 == cfg.fouling.burst_day) births += cfg.fouling.burst_births;
        for (int b = 0; b < births; ++b) {
            Blob nb;
            nb.cx = rng.uniform(0.0, cfg.width - 1.0);
            nb.cy = rng.uniform(0.0, cfg.height - 1.0);
            nb.radius = cfg.fouling.radius0;
            blobs.push_back(nb);
        }
        for (const Blob& b : blobs) {
            const Scalar inv2s2 = 1.0 / (2.0 * b.radius * b.radius);
            for (int y = 0; y < cfg.height; ++y) {
                for (int x = 0; x < cfg.width; ++x) {
                    const Scalar dx = x - b.cx;
                    const Scalar dy = y - b.cy;
                    depth[grid_index(x, y, cfg.width)] +=
                        cfg.fouling.deposit_rate * std::exp(-(dx * dx + dy * dy) * inv2s2);
                }
            }
        }
        deposits[d] = depth;
    }
    return deposits;
}

void render_frame(const SimConfig& cfg, const StaticFields& f,
                  const std::vector<Scalar>& transmission, Scalar decay, int day,
                  int frame_idx, Scalar o2_true, Frame& frame) {
    Rng rng(derive_seed(cfg.seed, kTagFrame,
                        static_cast<std::uint64_t>(day) * 1000003ULL + frame_idx));
    frame.width = cfg.width;
    frame.height = cfg.height;
    frame.channels = 3;
    frame.pixels.resize(static_cast<std::size_t>(cfg.width) * cfg.height * 3);

    const Scalar k_temp = 1.0 + cfg.temp_k_coeff * (frame.temperature - 20.0);
    for (int y = 0; y < cfg.height; ++y) {
        for (int x = 0; x < cfg.width; ++x) {
            const std::size_t idx = grid_index(x, y, cfg.width);
            Scalar clean;
            if (f.film[idx]) {
                const Scalar k_eff = f.k_sv[idx] * k_temp;
                clean = f.illum[idx] * transmission[idx] * f.i0[idx] * decay /
                        (1.0 + k_eff * o2_true);
            } else {
                clean = cfg.background * f.illum[idx];
            }
            Scalar red = clean;
            Scalar green = 0.2 * clean;
            Scalar blue = 0.2 * clean;
            if (cfg.noise_sigma > 0.0) {
                red += cfg.noise_sigma * rng.normal();
                green += cfg.noise_sigma * rng.normal();
                blue += cfg.noise_sigma * rng.normal();
            }
            frame.at(x, y, 0) = static_cast<float>(std::max(red, 0.0));
            frame.at(x, y, 1) = static_cast<float>(std::max(green, 0.0));
            frame.at(x, y, 2) = static_cast<float>(std::max(blue, 0.0));
        }
    }
}

std::vector<DayDataset> simulate_impl(const SimConfig& cfg, bool parallel) {
    cfg.validate();
    const StaticFields fields = make_fields(cfg);
    const auto deposits = make_deposits(cfg);
    const std::size_t n = static_cast<std::size_t>(cfg.width) * cfg.height;
    const int frames_per_day = cfg.frames_per_day();
    const Scalar day_span_s = frames_per_day / cfg.fps;

    std::vector<DayDataset> days(cfg.days);
    for (int d = 0; d < cfg.days; ++d) {
        DayDataset& day = days[d];
        day.day_index = d + 1;

        auto truth = std::make_shared<SimTruth>();
        truth->i0_field = fields.i0;
        truth->k_sv_field = fields.k_sv;
        truth->illumination = fields.illum;
        truth->film = fields.film;
        truth->decay = std::pow(1.0 - cfg.bleach_rate, d);
        truth->transmission.resize(n);
        Scalar mean_b = 0.0;
        std::size_t film_count = 0;
        for (std::size_t i = 0; i < n; ++i) {
            truth->transmission[i] = std::exp(-deposits[d][i]);
            if (fields.film[i]) {
                mean_b += truth->transmission[i];
                ++film_count;
            }
        }
        day.biofouling_score = 1.0 - mean_b / static_cast<Scalar>(film_count);
        day.truth = truth;

        // Reference-probe readings, then step averaging within each plateau.
        Rng probe(derive_seed(cfg.seed, kTagProbe, static_cast<std::uint64_t>(d)));
        day.frames.resize(frames_per_day);
        day.plateau_windows.resize(cfg.plateaus.size());
        std::vector<Scalar> gt(frames_per_day);
        for (std::size_t p = 0; p < cfg.plateaus.size(); ++p) {
            const int start = static_cast<int>(p) * cfg.frames_per_plateau;
            const int end = start + cfg.frames_per_plateau;
            day.plateau_windows[p] = {start, end, cfg.plateaus[p]};

            std::vector<std::pair<Scalar, Scalar>> raw;
            raw.reserve(cfg.frames_per_plateau);
            for (int i = start; i < end; ++i) {
                Scalar v = cfg.plateaus[p];
                if (cfg.gt_noise_sigma > 0.0) v += cfg.gt_noise_sigma * probe.normal();
                raw.emplace_back(i / cfg.fps, std::max(v, 0.0));
            }
            const auto stepped = condition_ground_truth(raw, cfg.gt_window_s);
            const Scalar t0 = raw.front().first;
            const Scalar span = raw.back().first - t0;
            const int windows = std::max<int>(1, static_cast<int>(std::ceil(span / cfg.gt_window_s)));
            for (int i = start; i < end; ++i) {
                int w = static_cast<int>((i / cfg.fps - t0) / cfg.gt_window_s);
                w = std::min(w, windows - 1);
                gt[i] = stepped[static_cast<std::size_t>(w)].second;
            }
        }

        for (int i = 0; i < frames_per_day; ++i) {
            Frame& fr = day.frames[i];
            fr.timestamp = i / cfg.fps;
            fr.temperature = cfg.temp_base +
                             cfg.temp_amplitude *
                                 std::sin(6.283185307179586 * fr.timestamp / day_span_s);
            fr.do_gt = gt[i];
        }

        const int plateau_len = cfg.frames_per_plateau;
        auto render_one = [&](std::size_t i) {
            const int pi = static_cast<int>(i) / plateau_len;
            render_frame(cfg, fields, truth->transmission, truth->decay, d,
                         static_cast<int>(i), cfg.plateaus[static_cast<std::size_t>(pi)],
                         day.frames[i]);
        };
        if (parallel)
            par::for_each(static_cast<std::size_t>(frames_per_day), render_one);
        else
            par::for_each_serial(static_cast<std::size_t>(frames_per_day), render_one);
    }
    return days;
}

}  // namespace

void SimConfig::validate() const {
    if (width < 2 || height < 2) throw DataError("SimConfig: grid must be at least 2x2");
    if (days < 1) throw DataError("SimConfig: need at least one day");
    if (plateaus.size() < 2) throw DataError("SimConfig: need at least two plateaus");
    if (plateaus.front() != 0.0) throw DataError("SimConfig: plateaus must start at 0");
    for (std::size_t i = 1; i < plateaus.size(); ++i)
        if (!(plateaus[i] > plateaus[i - 1]))
            throw DataError("SimConfig: plateaus must be strictly increasing");
    if (frames_per_plateau < 1) throw DataError("SimConfig: frames_per_plateau >= 1");
    if (!(fps > 0.0)) throw DataError("SimConfig: fps must be > 0");
    if (film_mask != "full" && film_mask != "disk")
        throw DataError("SimConfig: film_mask must be 'full' or 'disk'");
    if (!(base_i0 > 0.0) || !(base_k_sv > 0.0))
        throw DataError("SimConfig: base_i0 and base_k_sv must be > 0");
    if (noise_sigma < 0.0 || gt_noise_sigma < 0.0 || bleach_rate < 0.0 ||
        bleach_rate >= 1.0 || het_i0 < 0.0 || het_k_sv < 0.0)
        throw DataError("SimConfig: rates and sigmas must be >= 0 (bleach_rate < 1)");
    if (fouling.births_per_day < 0 || fouling.deposit_rate < 0.0 ||
        fouling.drift_step < 0.0 || fouling.radius0 <= 0.0 || fouling.radius_growth < 1.0)
        throw DataError("SimConfig: invalid fouling process parameters");
    if (!(gt_window_s > 0.0)) throw DataError("SimConfig: gt_window_s must be > 0");
}

std::vector<DayDataset> simulate(const SimConfig& cfg) { return simulate_impl(cfg, true); }

std::vector<DayDataset> simulate_serial(const SimConfig& cfg) {
    return simulate_impl(cfg, false);
}

std::vector<std::pair<Scalar, Scalar>> condition_ground_truth(
    const std::vector<std::pair<Scalar, Scalar>>& raw, Scalar window) {
    if (raw.empty()) throw DataError("condition_ground_truth: empty series");
    if (!(window > 0.0)) throw DataError("condition_ground_truth: window must be > 0");
    for (std::size_t i = 1; i < raw.size(); ++i)
        if (!(raw[i].first >= raw[i - 1].first))
            throw DataError("condition_ground_truth: timestamps must be increasing");

    const Scalar t0 = raw.front().first;
    const Scalar span = raw.back().first - t0;
    const int windows = std::max<int>(1, static_cast<int>(std::ceil(span / window)));

    std::vector<Scalar> sum(windows, 0.0);
    std::vector<int> count(windows, 0);
    for (const auto& [t, v] : raw) {
        int w = static_cast<int>((t - t0) / window);
        w = std::min(w, windows - 1);
        sum[static_cast<std::size_t>(w)] += v;
        count[static_cast<std::size_t>(w)] += 1;
    }
    std::vector<std::pair<Scalar, Scalar>> out;
    out.reserve(static_cast<std::size_t>(windows));
    Scalar last = raw.front().second;  // empty windows (sampling gaps) hold the last mean
    for (int w = 0; w < windows; ++w) {
        const Scalar t = t0 + (w + 0.5) * window;
        if (count[w] > 0) last = sum[w] / count[w];
        out.emplace_back(t, last);
    }
    return out;
}

}  // namespace optode::sim
