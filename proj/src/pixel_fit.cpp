#include "optode/pixel_fit.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>

#include "optode/parallel.hpp"

namespace optode::pixfit {

namespace {

constexpr Scalar kInf = std::numeric_limits<Scalar>::infinity();
constexpr Scalar kNaN = std::numeric_limits<Scalar>::quiet_NaN();

Scalar two_site_model(const sv::SvTwoSite& p, Scalar c) {
    return p.i0 * (p.a / (1.0 + p.k1 * c) + (1.0 - p.a) / (1.0 + p.k2 * c));
}

Scalar two_site_sse(const sv::SvTwoSite& p, std::span<const Scalar> conc,
                    std::span<const Scalar> intens) {
    Scalar sse = 0.0;
    for (std::size_t k = 0; k < intens.size(); ++k) {
        const Scalar r = two_site_model(p, conc[k]) - intens[k];
        sse += r * r;
    }
    return sse;
}

Scalar two_site_sse(const sv::SvTwoSite& p, const PixelSeries& s) {
    return two_site_sse(p, s.concentrations, s.intensities);
}

void clamp_to_box(sv::SvTwoSite& p) {
    p.i0 = std::max(p.i0, 1e-9);
    p.a = std::clamp(p.a, 0.0, 1.0);
    p.k1 = std::max(p.k1, 0.0);
    p.k2 = std::max(p.k2, 0.0);
}

/// Solves the symmetric 4x4 system via Gaussian elimination with partial
/// pivoting. Returns false on (near-)singularity.
bool solve4(Scalar a[4][4], Scalar b[4], Scalar x[4]) {
    int piv[4] = {0, 1, 2, 3};
    for (int col = 0; col < 4; ++col) {
        int best = col;
        for (int r = col + 1; r < 4; ++r)
            if (std::abs(a[piv[r]][col]) > std::abs(a[piv[best]][col])) best = r;
        std::swap(piv[col], piv[best]);
        const Scalar d = a[piv[col]][col];
        if (std::abs(d) < 1e-300) return false;
        for (int r = col + 1; r < 4; ++r) {
            const Scalar f = a[piv[r]][col] / d;
            for (int c = col; c < 4; ++c) a[piv[r]][c] -= f * a[piv[col]][c];
            b[piv[r]] -= f * b[piv[col]];
        }
    }
    for (int col = 3; col >= 0; --col) {
        Scalar acc = b[piv[col]];
        for (int c = col + 1; c < 4; ++c) acc -= a[piv[col]][c] * x[c];
        const Scalar d = a[piv[col]][col];
        if (std::abs(d) < 1e-300) return false;
        x[col] = acc / d;
    }
    return true;
}

sv::PixelMetrics metrics_from_transform(const PixelSeries& s, Scalar i0, Scalar slope,
                                        const std::vector<Scalar>& y_obs,
                                        const std::vector<Scalar>& y_pred,
                                        FitStatus& status) {
    sv::PixelMetrics m;
    m.i0 = i0;
    m.k_sv = slope;
    m.dr = std::max<Scalar>(s.intensities.front() - s.intensities.back(), 0.0);
    m.lod = slope > 0.0 ? sv::lod(s.sigma_zero / i0, slope) : kInf;
    try {
        m.r2 = sv::r_squared(y_obs, y_pred);
    } catch (const NumericError&) {
        m.r2 = kNaN;
        status = FitStatus::degenerate;
    }
    return m;
}

struct LmResult {
    sv::SvTwoSite params;
    Scalar sse = 0.0;
    bool converged = false;
    bool rank_deficient = false;
};

LmResult run_lm(std::span<const Scalar> conc, std::span<const Scalar> intens,
                sv::SvTwoSite p, const FitOptions& opts) {
    const std::size_t n = intens.size();
    clamp_to_box(p);
    Scalar sse = two_site_sse(p, conc, intens);
    Scalar lambda = opts.lm_lambda0;
    LmResult out{p, sse, false, false};

    for (int iter = 0; iter < opts.lm_max_iter; ++iter) {
        // Jacobian and residuals at the current point.
        Scalar jtj[4][4] = {};
        Scalar jtr[4] = {};
        for (std::size_t k = 0; k < n; ++k) {
            const Scalar c = conc[k];
            const Scalar d1 = 1.0 + p.k1 * c;
            const Scalar d2 = 1.0 + p.k2 * c;
            const Scalar model = p.i0 * (p.a / d1 + (1.0 - p.a) / d2);
            const Scalar r = model - intens[k];
            const Scalar j[4] = {
                p.a / d1 + (1.0 - p.a) / d2,            // d/d i0
                p.i0 * (1.0 / d1 - 1.0 / d2),           // d/d a
                -p.i0 * p.a * c / (d1 * d1),            // d/d k1
                -p.i0 * (1.0 - p.a) * c / (d2 * d2),    // d/d k2
            };
            for (int u = 0; u < 4; ++u) {
                jtr[u] += j[u] * r;
                for (int v = 0; v < 4; ++v) jtj[u][v] += j[u] * j[v];
            }
        }

        bool stepped = false;
        for (int attempt = 0; attempt < 40 && !stepped; ++attempt) {
            Scalar a[4][4];
            Scalar b[4];
            for (int u = 0; u < 4; ++u) {
                for (int v = 0; v < 4; ++v) a[u][v] = jtj[u][v];
                a[u][u] += lambda * std::max(jtj[u][u], 1e-12);
                b[u] = -jtr[u];
            }
            Scalar step[4];
            if (!solve4(a, b, step)) {
                out.rank_deficient = true;
                out.params = p;
                out.sse = sse;
                return out;
            }
            sv::SvTwoSite cand = p;
            cand.i0 += step[0];
            cand.a += step[1];
            cand.k1 += step[2];
            cand.k2 += step[3];
            clamp_to_box(cand);
            const Scalar cand_sse = two_site_sse(cand, conc, intens);
            if (cand_sse <= sse) {
                // Relative step norm against the parameter scale.
                Scalar num = 0.0, den = 0.0;
                const Scalar cur[4] = {p.i0, p.a, p.k1, p.k2};
                const Scalar nxt[4] = {cand.i0, cand.a, cand.k1, cand.k2};
                for (int u = 0; u < 4; ++u) {
                    num += (nxt[u] - cur[u]) * (nxt[u] - cur[u]);
                    den += std::max(std::abs(cur[u]), 1.0) * std::max(std::abs(cur[u]), 1.0);
                }
                p = cand;
                sse = cand_sse;
                lambda = std::max(lambda / 10.0, 1e-12);
                stepped = true;
                if (std::sqrt(num / den) < opts.step_tol) {
                    out.params = p;
                    out.sse = sse;
                    out.converged = true;
                    return out;
                }
            } else {
                lambda *= 10.0;
                if (lambda > 1e12) break;
            }
        }
        if (!stepped) break;  // damping exhausted, treat current point as final
    }
    out.params = p;
    out.sse = sse;
    // A stall with huge damping at an interior optimum still counts as
    // converged when the gradient is flat; otherwise report non-convergence.
    out.converged = false;
    return out;
}

LinearFit fit_linear_impl(const PixelSeries& s) {
    LinearFit fit;
    fit.params = {1.0, 0.0};
    fit.metrics.r2 = kNaN;
    fit.metrics.lod = kInf;

    const Scalar i0 = s.intensities.front();
    if (!(i0 > 0.0)) return fit;  // dead pixel
    bool positive = true;
    for (Scalar v : s.intensities) positive = positive && v > 0.0;
    if (!positive) return fit;

    Scalar syc = 0.0, scc = 0.0;
    std::vector<Scalar> y_obs(s.intensities.size());
    for (std::size_t k = 0; k < s.intensities.size(); ++k) {
        y_obs[k] = i0 / s.intensities[k] - 1.0;
        syc += y_obs[k] * s.concentrations[k];
        scc += s.concentrations[k] * s.concentrations[k];
    }
    Scalar slope = scc > 0.0 ? syc / scc : 0.0;
    slope = std::max(slope, 0.0);

    std::vector<Scalar> y_pred(s.intensities.size());
    for (std::size_t k = 0; k < s.intensities.size(); ++k)
        y_pred[k] = slope * s.concentrations[k];

    fit.params = {i0, slope};
    fit.status = slope > 0.0 ? FitStatus::ok : FitStatus::degenerate;
    fit.metrics = metrics_from_transform(s, i0, slope, y_obs, y_pred, fit.status);
    return fit;
}

ParameterMaps fit_all_impl(const PlateauStack& stack, const FitOptions& opts,
                           bool parallel) {
    if (stack.width <= 0 || stack.height <= 0)
        throw DataError("fit_all_pixels: empty grid");
    const std::size_t n = static_cast<std::size_t>(stack.width) * stack.height;
    for (const auto& plane : stack.plateau_mean)
        if (plane.size() != n) throw DataError("fit_all_pixels: inconsistent grid planes");

    ParameterMaps maps;
    maps.width = stack.width;
    maps.height = stack.height;
    maps.linear.resize(n);
    maps.two_site.resize(n);

    auto fit_one = [&](std::size_t idx) {
        // Individual pixel failures become statuses; nothing may escape the
        // parallel region.
        const int x = static_cast<int>(idx) % stack.width;
        const int y = static_cast<int>(idx) / stack.width;
        const PixelSeries s = stack.series(x, y);
        try {
            maps.linear[idx] = fit_linear_pixel(s);
        } catch (const std::exception&) {
            maps.linear[idx] = LinearFit{};
            maps.linear[idx].status = FitStatus::failed;
            maps.linear[idx].metrics.r2 = kNaN;
            maps.linear[idx].metrics.lod = kInf;
        }
        maps.two_site[idx] = TwoSiteFit{};
        maps.two_site[idx].metrics.r2 = kNaN;
        maps.two_site[idx].metrics.lod = kInf;
        if (maps.linear[idx].status == FitStatus::degenerate &&
            !(s.intensities.front() > 0.0)) {
            return;  // dead pixel: no usable signal for either model
        }
        try {
            const sv::SvTwoSite init = default_two_site_init(s, maps.linear[idx]);
            maps.two_site[idx] = fit_two_site_pixel(s, init, opts);
        } catch (const std::exception&) {
            maps.two_site[idx].status = FitStatus::failed;
        }
    };

    if (parallel)
        par::for_each(n, fit_one);
    else
        par::for_each_serial(n, fit_one);
    return maps;
}

Scalar metric_value(const ParameterMaps& maps, RankMetric metric, ModelKind model,
                    std::size_t idx) {
    const sv::PixelMetrics& m = model == ModelKind::linear ? maps.linear[idx].metrics
                                                           : maps.two_site[idx].metrics;
    switch (metric) {
        case RankMetric::k_sv: return m.k_sv;
        case RankMetric::dr: return m.dr;
        case RankMetric::i0: return m.i0;
        case RankMetric::lod: return m.lod;
        case RankMetric::r2: return m.r2;
    }
    return 0.0;
}

const char* status_name(FitStatus s) {
    switch (s) {
        case FitStatus::ok: return "ok";
        case FitStatus::degenerate: return "degenerate";
        case FitStatus::failed: return "failed";
    }
    return "?";
}

}  // namespace

void PixelSeries::validate(std::size_t min_len) const {
    if (intensities.size() != concentrations.size())
        throw DataError("PixelSeries: length mismatch");
    if (intensities.size() < min_len)
        throw DataError("PixelSeries: too few plateaus for this fit");
    if (concentrations.empty() || concentrations.front() != 0.0)
        throw DataError("PixelSeries: concentrations must start at 0");
    for (std::size_t k = 1; k < concentrations.size(); ++k)
        if (!(concentrations[k] > concentrations[k - 1]))
            throw DataError("PixelSeries: concentrations must be strictly increasing");
    if (sigma_zero < 0.0) throw DataError("PixelSeries: sigma_zero must be >= 0");
}

PixelSeries PlateauStack::series(int x, int y) const {
    PixelSeries s;
    s.concentrations = concentrations;
    s.intensities.resize(plateau_mean.size());
    const std::size_t idx = grid_index(x, y, width);
    for (std::size_t p = 0; p < plateau_mean.size(); ++p)
        s.intensities[p] = plateau_mean[p][idx];
    s.sigma_zero = sigma_zero[idx];
    return s;
}

PlateauStack aggregate_plateaus(std::span<const sim::DayDataset* const> days) {
    if (days.empty()) throw DataError("aggregate_plateaus: no days");
    const sim::DayDataset& first = *days.front();
    if (first.frames.empty()) throw DataError("aggregate_plateaus: empty day");

    PlateauStack stack;
    stack.width = first.frames.front().width;
    stack.height = first.frames.front().height;
    stack.concentrations.reserve(first.plateau_windows.size());
    for (const auto& w : first.plateau_windows) stack.concentrations.push_back(w.concentration);

    const std::size_t n = static_cast<std::size_t>(stack.width) * stack.height;
    const std::size_t plateaus = stack.concentrations.size();
    stack.plateau_mean.assign(plateaus, std::vector<Scalar>(n, 0.0));
    stack.sigma_zero.assign(n, 0.0);
    std::vector<long> counts(plateaus, 0);
    std::vector<Scalar> zero_sq(n, 0.0);
    long zero_count = 0;

    for (const sim::DayDataset* day : days) {
        if (day->plateau_windows.size() != plateaus)
            throw DataError("aggregate_plateaus: plateau count differs between days");
        for (std::size_t p = 0; p < plateaus; ++p) {
            if (day->plateau_windows[p].concentration != stack.concentrations[p])
                throw DataError("aggregate_plateaus: plateau levels differ between days");
            const auto& w = day->plateau_windows[p];
            for (int fi = w.start; fi < w.end; ++fi) {
                const sim::Frame& fr = day->frames[static_cast<std::size_t>(fi)];
                for (std::size_t i = 0; i < n; ++i) {
                    const Scalar v = fr.pixels[i * 3];
                    stack.plateau_mean[p][i] += v;
                    if (p == 0) zero_sq[i] += v * v;
                }
                counts[p] += 1;
                if (p == 0) ++zero_count;
            }
        }
    }
    for (std::size_t p = 0; p < plateaus; ++p) {
        if (counts[p] == 0) throw DataError("aggregate_plateaus: empty plateau window");
        for (std::size_t i = 0; i < n; ++i) stack.plateau_mean[p][i] /= counts[p];
    }
    for (std::size_t i = 0; i < n; ++i) {
        const Scalar mean = stack.plateau_mean[0][i];
        const Scalar var = std::max(zero_sq[i] / zero_count - mean * mean, 0.0);
        stack.sigma_zero[i] = std::sqrt(var);
    }
    return stack;
}

PlateauStack aggregate_plateaus(const std::vector<sim::DayDataset>& days) {
    std::vector<const sim::DayDataset*> ptrs;
    ptrs.reserve(days.size());
    for (const auto& d : days) ptrs.push_back(&d);
    return aggregate_plateaus(std::span<const sim::DayDataset* const>(ptrs));
}

LinearFit fit_linear_pixel(const PixelSeries& s) {
    s.validate(3);
    return fit_linear_impl(s);
}

sv::SvTwoSite default_two_site_init(const PixelSeries& s, const LinearFit& linear) {
    sv::SvTwoSite init;
    init.i0 = linear.params.i0 > 0.0 ? linear.params.i0
                                     : std::max<Scalar>(s.intensities.front(), 1.0);
    init.a = 0.8;
    init.k1 = linear.params.k_sv > 0.0 ? linear.params.k_sv : 1e-3;
    init.k2 = init.k1 / 10.0;
    return init;
}

TwoSiteFit fit_two_site_pixel(const PixelSeries& s, const sv::SvTwoSite& init,
                              const FitOptions& opts) {
    s.validate(4);
    init.validate();  // precondition: init must satisfy the type invariants

    TwoSiteFit fit;
    fit.metrics.r2 = kNaN;
    fit.metrics.lod = kInf;
    if (!(s.intensities.front() > 0.0)) return fit;  // dead pixel

    LmResult best = run_lm(s.concentrations, s.intensities, init, opts);

    // The one-site solution is nested inside the two-site family; restarting
    // from it guarantees the richer model never fits worse.
    const LinearFit lin = fit_linear_impl(s);
    if (lin.params.i0 > 0.0) {
        sv::SvTwoSite nested{lin.params.i0, 1.0, lin.params.k_sv, 0.0};
        if (two_site_sse(nested, s) < best.sse) {
            const LmResult alt = run_lm(s.concentrations, s.intensities, nested, opts);
            if (alt.sse < best.sse) best = alt;
        }
    }

    best.params.canonicalize();
    fit.params = best.params;
    fit.sse = best.sse;
    if (best.rank_deficient)
        fit.status = FitStatus::degenerate;
    else if (!best.converged)
        fit.status = FitStatus::failed;  // carries the best iterate
    else
        fit.status = FitStatus::ok;

    // Quality metrics in the transformed ratio domain.
    const Scalar i0 = fit.params.i0;
    const Scalar slope = fit.params.a * fit.params.k1 + (1.0 - fit.params.a) * fit.params.k2;
    std::vector<Scalar> y_obs(s.intensities.size()), y_pred(s.intensities.size());
    bool transform_ok = i0 > 0.0;
    for (std::size_t k = 0; k < s.intensities.size() && transform_ok; ++k) {
        if (!(s.intensities[k] > 0.0)) transform_ok = false;
    }
    if (transform_ok) {
        for (std::size_t k = 0; k < s.intensities.size(); ++k) {
            y_obs[k] = i0 / s.intensities[k] - 1.0;
            const Scalar model = two_site_model(fit.params, s.concentrations[k]);
            y_pred[k] = model > 0.0 ? i0 / model - 1.0 : kInf;
        }
        fit.metrics = metrics_from_transform(s, i0, slope, y_obs, y_pred, fit.status);
    } else {
        fit.status = FitStatus::degenerate;
    }
    return fit;
}

LmFit lm_two_site(std::span<const Scalar> concentrations,
                  std::span<const Scalar> intensities, const sv::SvTwoSite& init,
                  const FitOptions& opts) {
    if (concentrations.size() != intensities.size() || intensities.size() < 4)
        throw DataError("lm_two_site: need >= 4 matched samples");
    init.validate();
    LmResult r = run_lm(concentrations, intensities, init, opts);
    r.params.canonicalize();
    LmFit out;
    out.params = r.params;
    out.sse = r.sse;
    out.status = r.rank_deficient ? FitStatus::degenerate
                 : r.converged    ? FitStatus::ok
                                  : FitStatus::failed;
    return out;
}

FitStatus ParameterMaps::combined_status(int x, int y) const {
    const std::size_t idx = grid_index(x, y, width);
    const FitStatus a = linear[idx].status;
    const FitStatus b = two_site[idx].status;
    if (a == FitStatus::failed || b == FitStatus::failed) return FitStatus::failed;
    if (a == FitStatus::degenerate || b == FitStatus::degenerate)
        return FitStatus::degenerate;
    return FitStatus::ok;
}

ParameterMaps fit_all_pixels(const PlateauStack& stack, const FitOptions& opts) {
    return fit_all_impl(stack, opts, true);
}

ParameterMaps fit_all_pixels_serial(const PlateauStack& stack, const FitOptions& opts) {
    return fit_all_impl(stack, opts, false);
}

RankMetric parse_rank_metric(const std::string& name) {
    if (name == "k_sv" || name == "ksv") return RankMetric::k_sv;
    if (name == "dr") return RankMetric::dr;
    if (name == "i0") return RankMetric::i0;
    if (name == "lod") return RankMetric::lod;
    if (name == "r2") return RankMetric::r2;
    throw DataError("unknown rank metric: " + name);
}

ModelKind parse_model_kind(const std::string& name) {
    if (name == "linear") return ModelKind::linear;
    if (name == "two_site") return ModelKind::two_site;
    throw DataError("unknown model kind: " + name);
}

RankResult rank_pixels(const ParameterMaps& maps, RankMetric metric, ModelKind model,
                       int n) {
    if (n < 1) throw DataError("rank_pixels: n must be >= 1");
    const std::size_t total = static_cast<std::size_t>(maps.width) * maps.height;
    std::vector<int> ok;
    ok.reserve(total);
    for (std::size_t i = 0; i < total; ++i) {
        const FitStatus st = model == ModelKind::linear ? maps.linear[i].status
                                                        : maps.two_site[i].status;
        if (st == FitStatus::ok) ok.push_back(static_cast<int>(i));
    }
    const bool lower_better = metric == RankMetric::lod;
    std::stable_sort(ok.begin(), ok.end(), [&](int a, int b) {
        Scalar va = metric_value(maps, metric, model, static_cast<std::size_t>(a));
        Scalar vb = metric_value(maps, metric, model, static_cast<std::size_t>(b));
        if (std::isnan(va)) va = lower_better ? kInf : -kInf;
        if (std::isnan(vb)) vb = lower_better ? kInf : -kInf;
        if (va != vb) return lower_better ? va < vb : va > vb;
        return a < b;  // deterministic tie-break, row-major
    });

    RankResult out;
    if (static_cast<std::size_t>(n) > ok.size()) {
        out.truncated = true;
        out.indices = ok;
    } else {
        out.indices.assign(ok.begin(), ok.begin() + n);
    }
    return out;
}

void export_maps_csv(const ParameterMaps& maps, const std::string& path) {
    std::ofstream f(path);
    if (!f) throw DataError("export_maps_csv: cannot open " + path);
    f << "x,y,model,i0,a,k1,k2,k_sv,dr,lod,r2,status\n";
    f.precision(12);
    for (int y = 0; y < maps.height; ++y) {
        for (int x = 0; x < maps.width; ++x) {
            const std::size_t idx = grid_index(x, y, maps.width);
            const LinearFit& lf = maps.linear[idx];
            f << x << ',' << y << ",linear," << lf.params.i0 << ",,,," << lf.params.k_sv
              << ',' << lf.metrics.dr << ',' << lf.metrics.lod << ',' << lf.metrics.r2
              << ',' << status_name(lf.status) << '\n';
            const TwoSiteFit& tf = maps.two_site[idx];
            f << x << ',' << y << ",two_site," << tf.params.i0 << ',' << tf.params.a << ','
              << tf.params.k1 << ',' << tf.params.k2 << ',' << tf.metrics.k_sv << ','
              << tf.metrics.dr << ',' << tf.metrics.lod << ',' << tf.metrics.r2 << ','
              << status_name(tf.status) << '\n';
        }
    }
}

void export_metric_pgm(const ParameterMaps& maps, RankMetric metric, ModelKind model,
                       const std::string& path) {
    const std::size_t n = static_cast<std::size_t>(maps.width) * maps.height;
    Scalar lo = kInf, hi = -kInf;
    std::vector<Scalar> values(n, kNaN);
    for (std::size_t i = 0; i < n; ++i) {
        const Scalar v = metric_value(maps, metric, model, i);
        if (std::isfinite(v)) {
            values[i] = v;
            lo = std::min(lo, v);
            hi = std::max(hi, v);
        }
    }
    if (!(hi > lo)) {
        lo = 0.0;
        hi = 1.0;
    }
    std::ofstream f(path);
    if (!f) throw DataError("export_metric_pgm: cannot open " + path);
    f << "P2\n" << maps.width << ' ' << maps.height << "\n65535\n";
    for (int y = 0; y < maps.height; ++y) {
        for (int x = 0; x < maps.width; ++x) {
            const Scalar v = values[grid_index(x, y, maps.width)];
            int q = 0;
            if (std::isfinite(v))
                q = static_cast<int>(std::lround(65535.0 * (v - lo) / (hi - lo)));
            f << std::clamp(q, 0, 65535) << (x + 1 == maps.width ? '\n' : ' ');
        }
    }
}

}  // namespace optode::pixfit
