#include "optode/baselines.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <sstream>

#include "optode/linalg.hpp"

namespace optode::baseline {

namespace {

struct PooledSamples {
    std::vector<Scalar> signal;  ///< cohort-mean red intensity per frame
    std::vector<Scalar> conc;    ///< conditioned ground truth per frame
    Scalar i0 = 0.0;             ///< zero-plateau mean of the signal
};

Scalar cohort_mean_red(const sim::Frame& frame, const std::vector<int>& cohort) {
    Scalar acc = 0.0;
    for (int idx : cohort) acc += frame.pixels[static_cast<std::size_t>(idx) * 3];
    return acc / static_cast<Scalar>(cohort.size());
}

PooledSamples pool_samples(std::span<const sim::DayDataset* const> train,
                           const std::vector<int>& cohort) {
    if (train.empty()) throw DataError("super-pixel fit: no training days");
    PooledSamples out;
    Scalar zero_sum = 0.0;
    long zero_count = 0;
    std::vector<Scalar> levels;

    for (const sim::DayDataset* day : train) {
        if (day->plateau_windows.empty())
            throw DataError("super-pixel fit: day without plateau windows");
        for (const auto& w : day->plateau_windows) {
            if (std::find(levels.begin(), levels.end(), w.concentration) == levels.end())
                levels.push_back(w.concentration);
            for (int fi = w.start; fi < w.end; ++fi) {
                const sim::Frame& fr = day->frames[static_cast<std::size_t>(fi)];
                const Scalar s = cohort_mean_red(fr, cohort);
                out.signal.push_back(s);
                out.conc.push_back(fr.do_gt);
                if (w.concentration == 0.0) {
                    zero_sum += s;
                    ++zero_count;
                }
            }
        }
    }
    if (levels.size() < 2)
        throw DataError("super-pixel fit: need at least two plateau levels");
    if (zero_count == 0)
        throw DataError("super-pixel fit: missing zero-oxygen plateau, cannot estimate i0");
    out.i0 = zero_sum / static_cast<Scalar>(zero_count);
    if (!(out.i0 > 0.0))
        throw DataError("super-pixel fit: non-positive zero-oxygen intensity");
    return out;
}

sv::SvLinear fit_linear_samples(const PooledSamples& s) {
    Scalar syc = 0.0, scc = 0.0;
    for (std::size_t k = 0; k < s.signal.size(); ++k) {
        if (!(s.signal[k] > 0.0)) continue;
        const Scalar y = s.i0 / s.signal[k] - 1.0;
        syc += y * s.conc[k];
        scc += s.conc[k] * s.conc[k];
    }
    if (!(scc > 0.0)) throw DataError("super-pixel fit: no non-zero concentrations");
    const Scalar slope = syc / scc;
    if (!(slope > 0.0))
        throw NumericError("super-pixel fit: no quenching sensitivity in the signal");
    return {s.i0, slope};
}

SuperPixelCalibrator fit_cohort(std::span<const sim::DayDataset* const> train,
                                std::vector<int> cohort, pixfit::ModelKind model) {
    if (cohort.empty()) throw DataError("super-pixel fit: empty cohort");
    std::sort(cohort.begin(), cohort.end());
    cohort.erase(std::unique(cohort.begin(), cohort.end()), cohort.end());

    const sim::Frame& f0 = train.front()->frames.front();
    SuperPixelCalibrator c;
    c.width = f0.width;
    c.height = f0.height;
    c.cohort = std::move(cohort);
    c.model = model;
    if (c.cohort.back() >= c.width * c.height)
        throw DataError("super-pixel fit: cohort index outside the grid");

    const PooledSamples samples = pool_samples(train, c.cohort);
    c.linear = fit_linear_samples(samples);
    if (model == pixfit::ModelKind::two_site) {
        sv::SvTwoSite init{c.linear.i0, 0.8, c.linear.k_sv, c.linear.k_sv / 10.0};
        const pixfit::LmFit lm =
            pixfit::lm_two_site(samples.conc, samples.signal, init);
        if (lm.status == pixfit::FitStatus::degenerate)
            throw NumericError("super-pixel fit: two-site fit is rank deficient");
        c.two_site = lm.params;
    }
    return c;
}

constexpr const char* kCalibratorHeader = "optodecal_calibrator v1";

std::string join_csv(const std::vector<Scalar>& v) {
    std::ostringstream os;
    os.precision(17);
    for (std::size_t i = 0; i < v.size(); ++i) os << (i ? "," : "") << v[i];
    return os.str();
}

std::vector<Scalar> split_csv(const std::string& s) {
    std::vector<Scalar> out;
    std::istringstream is(s);
    std::string tok;
    while (std::getline(is, tok, ',')) {
        if (!tok.empty()) out.push_back(std::stod(tok));
    }
    return out;
}

std::map<std::string, std::string> read_kv_file(const std::string& path,
                                                const char* expected_header) {
    std::ifstream f(path);
    if (!f) throw DataError("cannot open " + path);
    std::string line;
    if (!std::getline(f, line) || line != expected_header)
        throw DataError(path + ": unsupported file header");
    std::map<std::string, std::string> kv;
    while (std::getline(f, line)) {
        const auto eq = line.find('=');
        if (eq == std::string::npos) continue;
        std::string key = line.substr(0, eq);
        std::string val = line.substr(eq + 1);
        auto trim = [](std::string& s) {
            s.erase(0, s.find_first_not_of(" \t"));
            s.erase(s.find_last_not_of(" \t") + 1);
        };
        trim(key);
        trim(val);
        kv[key] = val;
    }
    return kv;
}

}  // namespace

void SuperPixelCalibrator::validate() const {
    if (cohort.empty()) throw DataError("SuperPixelCalibrator: empty cohort");
    if (width <= 0 || height <= 0) throw DataError("SuperPixelCalibrator: bad grid");
    for (std::size_t i = 0; i < cohort.size(); ++i) {
        if (cohort[i] < 0 || cohort[i] >= width * height)
            throw DataError("SuperPixelCalibrator: cohort index outside the grid");
        if (i > 0 && cohort[i] <= cohort[i - 1])
            throw DataError("SuperPixelCalibrator: cohort must be sorted and unique");
    }
}

SuperPixelCalibrator global_average_fit(std::span<const sim::DayDataset* const> train) {
    if (train.empty()) throw DataError("global_average_fit: no training days");
    const sim::Frame& f0 = train.front()->frames.front();
    std::vector<int> all(static_cast<std::size_t>(f0.width) * f0.height);
    for (std::size_t i = 0; i < all.size(); ++i) all[i] = static_cast<int>(i);
    return fit_cohort(train, std::move(all), pixfit::ModelKind::linear);
}

SuperPixelCalibrator best_pixels_fit(std::span<const sim::DayDataset* const> train,
                                     pixfit::RankMetric metric, pixfit::ModelKind model,
                                     int n) {
    std::vector<const sim::DayDataset*> days(train.begin(), train.end());
    const pixfit::PlateauStack stack =
        pixfit::aggregate_plateaus(std::span<const sim::DayDataset* const>(days));
    const pixfit::ParameterMaps maps = pixfit::fit_all_pixels(stack);
    const pixfit::RankResult ranked = pixfit::rank_pixels(maps, metric, model, n);
    if (ranked.indices.empty())
        throw DataError("best_pixels_fit: no usable pixels to rank");
    return fit_cohort(train, ranked.indices, model);
}

Clamped predict_super_pixel(const SuperPixelCalibrator& c, const sim::Frame& frame) {
    c.validate();
    if (frame.width != c.width || frame.height != c.height)
        throw DataError("predict_super_pixel: frame grid does not match calibrator");
    const Scalar signal = cohort_mean_red(frame, c.cohort);
    if (!(signal > 0.0))
        throw DataError("predict_super_pixel: non-positive cohort intensity");
    if (c.model == pixfit::ModelKind::linear) return sv::invert_linear(c.linear, signal);
    return sv::invert_two_site(c.two_site, signal);
}

void FeatureVector::validate() const {
    for (Scalar v : raw())
        if (!std::isfinite(v)) throw DataError("FeatureVector: non-finite entry");
}

MapAggregates compute_aggregates(const pixfit::ParameterMaps& maps) {
    MapAggregates agg;
    long count = 0;
    for (const auto& lf : maps.linear) {
        if (lf.status != pixfit::FitStatus::ok) continue;
        agg.mean_i0 += lf.metrics.i0;
        agg.mean_k_sv += lf.metrics.k_sv;
        agg.mean_lod += lf.metrics.lod;
        agg.mean_dr += lf.metrics.dr;
        agg.mean_r2 += lf.metrics.r2;
        ++count;
    }
    if (count > 0) {
        agg.mean_i0 /= count;
        agg.mean_k_sv /= count;
        agg.mean_lod /= count;
        agg.mean_dr /= count;
        agg.mean_r2 /= count;
    }
    return agg;
}

std::vector<FeatureVector> day_features(const sim::DayDataset& day,
                                        const MapAggregates& agg) {
    const std::size_t n_frames = day.frames.size();
    std::vector<Scalar> mean_red(n_frames, 0.0);
    for (std::size_t f = 0; f < n_frames; ++f) {
        const sim::Frame& fr = day.frames[f];
        Scalar acc = 0.0;
        const std::size_t n = static_cast<std::size_t>(fr.width) * fr.height;
        for (std::size_t i = 0; i < n; ++i) acc += fr.pixels[i * 3];
        mean_red[f] = acc / static_cast<Scalar>(n);
    }

    // Signal scatter within each measurement interval.
    std::vector<Scalar> window_std(n_frames, 0.0);
    for (const auto& w : day.plateau_windows) {
        Scalar sum = 0.0, sq = 0.0;
        const int len = w.end - w.start;
        for (int f = w.start; f < w.end; ++f) {
            sum += mean_red[static_cast<std::size_t>(f)];
            sq += mean_red[static_cast<std::size_t>(f)] * mean_red[static_cast<std::size_t>(f)];
        }
        const Scalar mean = sum / len;
        const Scalar var = std::max(sq / len - mean * mean, 0.0);
        for (int f = w.start; f < w.end; ++f)
            window_std[static_cast<std::size_t>(f)] = std::sqrt(var);
    }

    std::vector<FeatureVector> out(n_frames);
    for (std::size_t f = 0; f < n_frames; ++f) {
        FeatureVector& fv = out[f];
        fv.mean_red = mean_red[f];
        fv.std_red_window = window_std[f];
        fv.mean_i0 = agg.mean_i0;
        fv.mean_k_sv = agg.mean_k_sv;
        fv.mean_lod = agg.mean_lod;
        fv.mean_dr = agg.mean_dr;
        fv.mean_r2 = agg.mean_r2;
        fv.temperature = day.frames[f].temperature;
        fv.validate();
    }
    return out;
}

std::vector<Scalar> feature_basis(const FeatureVector& f) {
    const auto raw = f.raw();
    std::vector<Scalar> b(raw.begin(), raw.end());
    for (std::size_t i = 0; i < raw.size(); ++i)
        for (std::size_t j = i; j < raw.size(); ++j) b.push_back(raw[i] * raw[j]);
    const Scalar inv_red = 1.0 / std::max<Scalar>(f.mean_red, 1e-6);
    b.push_back(inv_red);
    b.push_back(inv_red * f.temperature);
    b.push_back(inv_red * f.mean_i0);
    return b;
}

Scalar FeatureRegressor::predict(const FeatureVector& f) const {
    f.validate();
    const std::vector<Scalar> b = feature_basis(f);
    if (b.size() != coeffs.size())
        throw DataError("FeatureRegressor: basis size mismatch");
    Scalar y = intercept;
    for (std::size_t k = 0; k < b.size(); ++k)
        y += coeffs[k] * (b[k] - means[k]) / scales[k];
    return y;
}

FeatureRegressor feature_regressor_fit(std::span<const sim::DayDataset* const> train,
                                       Scalar ridge_lambda) {
    if (train.empty()) throw DataError("feature_regressor_fit: no training days");
    if (ridge_lambda < 0.0) throw DataError("feature_regressor_fit: lambda must be >= 0");

    std::vector<const sim::DayDataset*> days(train.begin(), train.end());
    const pixfit::PlateauStack stack =
        pixfit::aggregate_plateaus(std::span<const sim::DayDataset* const>(days));
    const pixfit::ParameterMaps maps = pixfit::fit_all_pixels(stack);

    FeatureRegressor reg;
    reg.lambda = ridge_lambda;
    reg.aggregates = compute_aggregates(maps);

    std::vector<std::vector<Scalar>> rows;
    std::vector<Scalar> y;
    for (const sim::DayDataset* day : train) {
        const auto feats = day_features(*day, reg.aggregates);
        for (std::size_t f = 0; f < feats.size(); ++f) {
            rows.push_back(feature_basis(feats[f]));
            y.push_back(day->frames[f].do_gt);
        }
    }
    const std::size_t n = rows.size();
    const std::size_t d = rows.front().size();
    if (n < 2) throw DataError("feature_regressor_fit: too few samples");

    reg.means.assign(d, 0.0);
    reg.scales.assign(d, 1.0);
    for (const auto& r : rows)
        for (std::size_t k = 0; k < d; ++k) reg.means[k] += r[k];
    for (std::size_t k = 0; k < d; ++k) reg.means[k] /= static_cast<Scalar>(n);
    std::vector<Scalar> var(d, 0.0);
    for (const auto& r : rows)
        for (std::size_t k = 0; k < d; ++k)
            var[k] += (r[k] - reg.means[k]) * (r[k] - reg.means[k]);
    std::vector<bool> keep(d, true);
    for (std::size_t k = 0; k < d; ++k) {
        var[k] /= static_cast<Scalar>(n);
        // Rounding noise on a constant column scales with its magnitude, so
        // the constancy threshold must too.
        if (var[k] <= 1e-18 * (1.0 + reg.means[k] * reg.means[k])) {
            keep[k] = false;
            reg.scales[k] = 1.0;
        } else {
            reg.scales[k] = std::sqrt(var[k]);
        }
    }

    std::vector<std::size_t> cols;
    for (std::size_t k = 0; k < d; ++k)
        if (keep[k]) cols.push_back(k);
    const std::size_t m = cols.size();

    Scalar ymean = 0.0;
    for (Scalar v : y) ymean += v;
    ymean /= static_cast<Scalar>(n);

    std::vector<Scalar> xtx(m * m, 0.0);
    std::vector<Scalar> xty(m, 0.0);
    std::vector<Scalar> z(m);
    for (std::size_t r = 0; r < n; ++r) {
        for (std::size_t c = 0; c < m; ++c)
            z[c] = (rows[r][cols[c]] - reg.means[cols[c]]) / reg.scales[cols[c]];
        const Scalar yc = y[r] - ymean;
        for (std::size_t i = 0; i < m; ++i) {
            xty[i] += z[i] * yc;
            for (std::size_t j = i; j < m; ++j) xtx[i * m + j] += z[i] * z[j];
        }
    }
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < i; ++j) xtx[i * m + j] = xtx[j * m + i];
    for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t j = 0; j < m; ++j) xtx[i * m + j] /= static_cast<Scalar>(n);
        xty[i] /= static_cast<Scalar>(n);
        xtx[i * m + i] += ridge_lambda;
    }

    std::vector<Scalar> beta;
    try {
        beta = linalg::cholesky_solve(std::move(xtx), std::move(xty), static_cast<int>(m));
    } catch (const NumericError&) {
        throw NumericError("feature_regressor_fit: singular normal matrix (lambda = 0)");
    }

    reg.coeffs.assign(d, 0.0);
    for (std::size_t c = 0; c < m; ++c) reg.coeffs[cols[c]] = beta[c];
    reg.intercept = ymean;
    return reg;
}

void save_calibrator(const SuperPixelCalibrator& c, const std::string& path) {
    c.validate();
    std::ofstream f(path);
    if (!f) throw DataError("save_calibrator: cannot open " + path);
    f << kCalibratorHeader << "\n";
    f << "kind = super_pixel\n";
    f << "model = " << (c.model == pixfit::ModelKind::linear ? "linear" : "two_site") << '\n';
    f << "width = " << c.width << "\nheight = " << c.height << '\n';
    f << "cohort = ";
    for (std::size_t i = 0; i < c.cohort.size(); ++i) f << (i ? "," : "") << c.cohort[i];
    f << '\n';
    f.precision(17);
    f << "i0 = " << (c.model == pixfit::ModelKind::linear ? c.linear.i0 : c.two_site.i0) << '\n';
    if (c.model == pixfit::ModelKind::linear) {
        f << "k_sv = " << c.linear.k_sv << '\n';
    } else {
        f << "a = " << c.two_site.a << "\nk1 = " << c.two_site.k1
          << "\nk2 = " << c.two_site.k2 << '\n';
    }
}

SuperPixelCalibrator load_calibrator(const std::string& path) {
    const auto kv = read_kv_file(path, kCalibratorHeader);
    if (kv.at("kind") != "super_pixel")
        throw DataError(path + ": not a super-pixel calibrator");
    SuperPixelCalibrator c;
    c.model = pixfit::parse_model_kind(kv.at("model"));
    c.width = std::stoi(kv.at("width"));
    c.height = std::stoi(kv.at("height"));
    for (Scalar v : split_csv(kv.at("cohort"))) c.cohort.push_back(static_cast<int>(v));
    if (c.model == pixfit::ModelKind::linear) {
        c.linear.i0 = std::stod(kv.at("i0"));
        c.linear.k_sv = std::stod(kv.at("k_sv"));
    } else {
        c.two_site.i0 = std::stod(kv.at("i0"));
        c.two_site.a = std::stod(kv.at("a"));
        c.two_site.k1 = std::stod(kv.at("k1"));
        c.two_site.k2 = std::stod(kv.at("k2"));
    }
    c.validate();
    return c;
}

void save_regressor(const FeatureRegressor& r, const std::string& path) {
    std::ofstream f(path);
    if (!f) throw DataError("save_regressor: cannot open " + path);
    f << kCalibratorHeader << "\n";
    f << "kind = feature_ridge\n";
    f.precision(17);
    f << "lambda = " << r.lambda << '\n';
    f << "intercept = " << r.intercept << '\n';
    f << "means = " << join_csv(r.means) << '\n';
    f << "scales = " << join_csv(r.scales) << '\n';
    f << "coeffs = " << join_csv(r.coeffs) << '\n';
    f << "aggregates = "
      << join_csv({r.aggregates.mean_i0, r.aggregates.mean_k_sv, r.aggregates.mean_lod,
                   r.aggregates.mean_dr, r.aggregates.mean_r2})
      << '\n';
}

FeatureRegressor load_regressor(const std::string& path) {
    const auto kv = read_kv_file(path, kCalibratorHeader);
    if (kv.at("kind") != "feature_ridge")
        throw DataError(path + ": not a feature regressor");
    FeatureRegressor r;
    r.lambda = std::stod(kv.at("lambda"));
    r.intercept = std::stod(kv.at("intercept"));
    r.means = split_csv(kv.at("means"));
    r.scales = split_csv(kv.at("scales"));
    r.coeffs = split_csv(kv.at("coeffs"));
    const auto agg = split_csv(kv.at("aggregates"));
    if (agg.size() != 5 || r.means.size() != r.coeffs.size() ||
        r.scales.size() != r.coeffs.size())
        throw DataError(path + ": malformed feature regressor");
    r.aggregates = {agg[0], agg[1], agg[2], agg[3], agg[4]};
    return r;
}

}  // namespace optode::baseline
