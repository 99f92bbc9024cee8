#include "optode/calibrator_net.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>

#include <json.hpp>

#include "optode/rng.hpp"
#include "optode/sv_model.hpp"

namespace optode::nn {

namespace {

constexpr Scalar kInScale = 100.0;    // image counts -> O(1) activations
constexpr Scalar kDoScale = 250.0;    // head output -> umol/L
constexpr Scalar kI0Scale = 100.0;    // softplus unit -> counts
constexpr Scalar kKScale = 0.01;      // softplus unit -> L/umol
constexpr Scalar kIntensityEps = 1e-3;
constexpr Scalar kConfFloor = 1e-3;
constexpr Scalar kSoftplusOne = 0.54132485461292;  // softplus(x) = 1

Scalar norm_temp(Scalar t) { return (t - 20.0) / 10.0; }

void init_xavier(Param& p, Rng& rng, int fan_in, int fan_out) {
    const Scalar lim = std::sqrt(6.0 / static_cast<Scalar>(fan_in + fan_out));
    for (auto& v : p.value.data) v = rng.uniform(-lim, lim);
}

struct AdamHyper {
    Scalar beta1 = 0.9;
    Scalar beta2 = 0.999;
    Scalar eps = 1e-8;
};

void adamw_step(std::vector<Param>& params, Scalar lr, Scalar wd, long t,
                const AdamHyper& hp = {}) {
    const Scalar bc1 = 1.0 - std::pow(hp.beta1, static_cast<Scalar>(t));
    const Scalar bc2 = 1.0 - std::pow(hp.beta2, static_cast<Scalar>(t));
    for (Param& p : params) {
        for (std::size_t i = 0; i < p.value.size(); ++i) {
            const Scalar g = p.grad.data[i];
            p.adam_m.data[i] = hp.beta1 * p.adam_m.data[i] + (1.0 - hp.beta1) * g;
            p.adam_v.data[i] = hp.beta2 * p.adam_v.data[i] + (1.0 - hp.beta2) * g * g;
            const Scalar mh = p.adam_m.data[i] / bc1;
            const Scalar vh = p.adam_v.data[i] / bc2;
            p.value.data[i] -= lr * (mh / (std::sqrt(vh) + hp.eps) + wd * p.value.data[i]);
            p.grad.data[i] = 0.0;
        }
    }
}

}  // namespace

void ModelConfig::validate() const {
    if (backbone != "conv_small" && backbone != "attention_small")
        throw DataError("ModelConfig: unknown backbone " + backbone);
    if (width < down_factor() || height < down_factor() || width % down_factor() ||
        height % down_factor())
        throw DataError("ModelConfig: token size must divide both image sides");
    if (embed_dim < 4 || embed_dim % 4)
        throw DataError("ModelConfig: embed_dim must be a multiple of 4");
    if (backbone == "attention_small") {
        if (heads_attn < 1 || embed_dim % heads_attn)
            throw DataError("ModelConfig: embed_dim must divide by heads_attn");
        if (layers < 1) throw DataError("ModelConfig: need at least one layer");
        if (patch < 1) throw DataError("ModelConfig: patch must be >= 1");
    }
    if (!(lr > 0.0) || !(weight_decay >= 0.0))
        throw DataError("ModelConfig: lr must be > 0 and weight_decay >= 0");
    if (lambda_physics < 0.0 || lambda_biofouling < 0.0)
        throw DataError("ModelConfig: loss weights must be >= 0");
    if (epochs < 1 || batch_size < 1)
        throw DataError("ModelConfig: epochs and batch_size must be >= 1");
    if (input_channels != (pgnn ? 5 : 3))
        throw DataError("ModelConfig: input_channels is derived from the pgnn flag");
}

int ModelConfig::down_factor() const {
    return backbone == "conv_small" ? 8 : patch;
}

struct CalibratorNet::Batch {
    int b = 0;
    int n = 0;  // pixels
    std::vector<Scalar> images;     // [B,C,H,W]
    std::vector<Scalar> temp;       // [B,1]
    std::vector<Scalar> gt;         // [B,1]
    std::vector<Scalar> bio;        // [B,1]
    std::vector<Scalar> inv_red;    // [B,N]
    std::vector<Scalar> mask;       // [B,N]
    std::vector<Scalar> inv_count;  // [B]
    std::vector<Scalar> cgt;        // [B]
    std::vector<Scalar> frozen_i0;  // [B,N] (pgnn only)
    std::vector<Scalar> frozen_k;   // [B,N]
};

struct CalibratorNet::ForwardNodes {
    int tokens = -1;
    int score = -1;     // [B,T] reliability logits
    int attn_w = -1;    // [B,T] softmax over tokens
    int conf_tok = -1;  // [B,T] sigmoid
    int do_pred = -1;   // [B,1]
    int bio_pred = -1;  // [B,1]
    int i0_px = -1;     // [B,N]
    int k_px = -1;      // [B,N]
    int conf_px = -1;   // [B,N]
};

CalibratorNet::CalibratorNet(ModelConfig cfg) : cfg_(std::move(cfg)) {
    cfg_.input_channels = cfg_.pgnn ? 5 : 3;
    cfg_.validate();
    Rng rng(derive_seed(cfg_.seed, 0x77));
    const int d = cfg_.embed_dim;
    const int cin = cfg_.input_channels;

    auto add_matmul = [&](const std::string& name, int in, int out) {
        params_.emplace_back(name, std::vector<int>{in, out});
        init_xavier(params_.back(), rng, in, out);
        params_.emplace_back(name + ".bias", std::vector<int>{out});
    };
    auto add_conv = [&](const std::string& name, int out, int in, int k) {
        params_.emplace_back(name, std::vector<int>{out, in, k, k});
        init_xavier(params_.back(), rng, in * k * k, out * k * k);
        params_.emplace_back(name + ".bias", std::vector<int>{out});
    };
    auto add_layernorm = [&](const std::string& name) {
        params_.emplace_back(name + ".gamma", std::vector<int>{d});
        std::fill(params_.back().value.data.begin(), params_.back().value.data.end(), 1.0);
        params_.emplace_back(name + ".beta", std::vector<int>{d});
    };

    if (cfg_.backbone == "conv_small") {
        add_conv("conv1", d / 4, cin, 3);
        add_conv("conv2", d / 2, d / 4, 3);
        add_conv("conv3", d, d / 2, 3);
    } else {
        add_matmul("patch_embed", cin * cfg_.patch * cfg_.patch, d);
        params_.emplace_back("pos_embed", std::vector<int>{cfg_.tokens(), d});
        for (auto& v : params_.back().value.data) v = rng.normal(0.0, 0.02);
        for (int l = 0; l < cfg_.layers; ++l) {
            const std::string p = "block" + std::to_string(l) + ".";
            add_layernorm(p + "ln1");
            add_matmul(p + "wq", d, d);
            add_matmul(p + "wk", d, d);
            add_matmul(p + "wv", d, d);
            add_matmul(p + "wo", d, d);
            add_layernorm(p + "ln2");
            add_matmul(p + "mlp1", d, 2 * d);
            add_matmul(p + "mlp2", 2 * d, d);
        }
        add_layernorm("ln_final");
    }

    add_matmul("head.score", d, 1);
    const int hid = std::max(d / 2, 4);
    add_matmul("head.do1", d + 1, hid);
    add_matmul("head.do2", hid, 1);
    add_matmul("head.sv", d, 2);
    add_matmul("head.bio", d, 1);
    for (auto& p : params_) {
        // Quenching maps start near physical magnitudes (softplus -> 1); the
        // final regression layer starts at zero so early predictions are 0
        // umol/L instead of amplified init noise.
        if (p.name == "head.sv.bias")
            std::fill(p.value.data.begin(), p.value.data.end(), kSoftplusOne);
        if (p.name == "head.do2")
            std::fill(p.value.data.begin(), p.value.data.end(), 0.0);
    }
}

std::size_t CalibratorNet::param_count() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += p.value.size();
    return n;
}

std::vector<Scalar> CalibratorNet::snapshot() const {
    std::vector<Scalar> out;
    out.reserve(param_count());
    for (const auto& p : params_) out.insert(out.end(), p.value.data.begin(), p.value.data.end());
    return out;
}

void CalibratorNet::restore(const std::vector<Scalar>& snap) {
    std::size_t off = 0;
    for (auto& p : params_) {
        std::copy(snap.begin() + off, snap.begin() + off + p.value.size(),
                  p.value.data.begin());
        off += p.value.size();
    }
    if (off != snap.size()) throw DataError("restore: snapshot size mismatch");
}

CalibratorNet::Batch CalibratorNet::make_batch(
    std::span<const sim::Frame* const> frames, std::span<const Scalar> bio_scores,
    const pixfit::ParameterMaps* frozen,
    const std::vector<std::pair<bool, bool>>* flips) const {
    const int b = static_cast<int>(frames.size());
    const int h = cfg_.height, w = cfg_.width, c = cfg_.input_channels;
    const int n = h * w;
    Batch out;
    out.b = b;
    out.n = n;
    out.images.assign(static_cast<std::size_t>(b) * c * n, 0.0);
    out.temp.resize(static_cast<std::size_t>(b));
    out.gt.resize(static_cast<std::size_t>(b));
    out.bio.resize(static_cast<std::size_t>(b));
    out.inv_red.assign(static_cast<std::size_t>(b) * n, 0.0);
    out.mask.assign(static_cast<std::size_t>(b) * n, 0.0);
    out.inv_count.resize(static_cast<std::size_t>(b));
    out.cgt.resize(static_cast<std::size_t>(b));
    if (cfg_.pgnn) {
        if (!frozen) throw DataError("pgnn forward requires precomputed parameter maps");
        if (frozen->width != w || frozen->height != h)
            throw DataError("pgnn maps do not match the frame grid");
        out.frozen_i0.assign(static_cast<std::size_t>(b) * n, 0.0);
        out.frozen_k.assign(static_cast<std::size_t>(b) * n, 0.0);
    }

    for (int s = 0; s < b; ++s) {
        const sim::Frame& fr = *frames[static_cast<std::size_t>(s)];
        if (fr.width != w || fr.height != h || fr.channels != 3)
            throw DataError("frame grid does not match the model config");
        const bool fh = flips ? (*flips)[static_cast<std::size_t>(s)].first : false;
        const bool fv = flips ? (*flips)[static_cast<std::size_t>(s)].second : false;
        out.temp[static_cast<std::size_t>(s)] = norm_temp(fr.temperature);
        out.gt[static_cast<std::size_t>(s)] = fr.do_gt;
        out.cgt[static_cast<std::size_t>(s)] = fr.do_gt;
        out.bio[static_cast<std::size_t>(s)] =
            bio_scores.empty() ? 0.0 : bio_scores[static_cast<std::size_t>(s)];

        Scalar count = 0.0;
        for (int y = 0; y < h; ++y) {
            const int sy = fv ? h - 1 - y : y;
            for (int x = 0; x < w; ++x) {
                const int sx = fh ? w - 1 - x : x;
                const std::size_t px = grid_index(x, y, w);
                for (int ch = 0; ch < 3; ++ch) {
                    out.images[((static_cast<std::size_t>(s) * c + ch) * h + y) * w + x] =
                        fr.at(sx, sy, ch) / kInScale;
                }
                const Scalar red = fr.at(sx, sy, 0);
                if (red > kIntensityEps) {
                    out.inv_red[static_cast<std::size_t>(s) * n + px] = 1.0 / red;
                    out.mask[static_cast<std::size_t>(s) * n + px] = 1.0;
                    count += 1.0;
                }
                if (cfg_.pgnn) {
                    const std::size_t src = grid_index(sx, sy, w);
                    const auto& lf = frozen->linear[src];
                    const bool ok = lf.status == pixfit::FitStatus::ok;
                    const Scalar i0v = ok ? lf.params.i0 : 0.0;
                    const Scalar kv = ok ? lf.params.k_sv : 0.0;
                    out.frozen_i0[static_cast<std::size_t>(s) * n + px] = i0v;
                    out.frozen_k[static_cast<std::size_t>(s) * n + px] = kv;
                    out.images[((static_cast<std::size_t>(s) * c + 3) * h + y) * w + x] =
                        i0v / kI0Scale;
                    out.images[((static_cast<std::size_t>(s) * c + 4) * h + y) * w + x] =
                        kv / kKScale;
                    if (!ok) out.mask[static_cast<std::size_t>(s) * n + px] = 0.0;
                }
            }
        }
        if (cfg_.pgnn) {
            // Recount after the frozen-map degeneracy mask.
            count = 0.0;
            for (int i = 0; i < n; ++i)
                count += out.mask[static_cast<std::size_t>(s) * n + i];
        }
        out.inv_count[static_cast<std::size_t>(s)] = 1.0 / std::max<Scalar>(count, 1.0);
    }
    return out;
}

CalibratorNet::ForwardNodes CalibratorNet::build_forward(Graph& g, const Batch& batch) {
    const int b = batch.b;
    const int d = cfg_.embed_dim;
    const int t = cfg_.tokens();
    std::size_t pi = 0;
    auto next = [&]() -> Param& { return params_[pi++]; };

    const int x = g.input({b, cfg_.input_channels, cfg_.height, cfg_.width}, batch.images);
    int tokens;
    if (cfg_.backbone == "conv_small") {
        Param& w1 = next();
        Param& b1 = next();
        Param& w2 = next();
        Param& b2 = next();
        Param& w3 = next();
        Param& b3 = next();
        int h1 = g.relu(g.conv2d(x, g.param(w1), g.param(b1), 2, 1));
        int h2 = g.relu(g.conv2d(h1, g.param(w2), g.param(b2), 2, 1));
        int h3 = g.relu(g.conv2d(h2, g.param(w3), g.param(b3), 2, 1));
        tokens = g.chw_to_tokens(h3);
    } else {
        Param& pe_w = next();
        Param& pe_b = next();
        Param& pos = next();
        int tok = g.add_pos(
            g.add_bias(g.matmul(g.extract_patches(x, cfg_.patch), g.param(pe_w)),
                       g.param(pe_b)),
            g.param(pos));
        const Scalar inv_sqrt_dh =
            1.0 / std::sqrt(static_cast<Scalar>(d / cfg_.heads_attn));
        for (int l = 0; l < cfg_.layers; ++l) {
            Param& ln1g = next();
            Param& ln1b = next();
            Param& wq = next();
            Param& bq = next();
            Param& wk = next();
            Param& bk = next();
            Param& wv = next();
            Param& bv = next();
            Param& wo = next();
            Param& bo = next();
            Param& ln2g = next();
            Param& ln2b = next();
            Param& m1w = next();
            Param& m1b = next();
            Param& m2w = next();
            Param& m2b = next();

            const int hnorm = g.layernorm(tok, g.param(ln1g), g.param(ln1b));
            const int q = g.split_heads(
                g.add_bias(g.matmul(hnorm, g.param(wq)), g.param(bq)), cfg_.heads_attn);
            const int k = g.split_heads(
                g.add_bias(g.matmul(hnorm, g.param(wk)), g.param(bk)), cfg_.heads_attn);
            const int v = g.split_heads(
                g.add_bias(g.matmul(hnorm, g.param(wv)), g.param(bv)), cfg_.heads_attn);
            const int probs = g.softmax_lastdim(g.scale(g.bmm_nt(q, k), inv_sqrt_dh));
            const int ctx = g.merge_heads(g.bmm(probs, v), cfg_.heads_attn);
            tok = g.add(tok, g.add_bias(g.matmul(ctx, g.param(wo)), g.param(bo)));

            const int h2 = g.layernorm(tok, g.param(ln2g), g.param(ln2b));
            const int mid = g.gelu(g.add_bias(g.matmul(h2, g.param(m1w)), g.param(m1b)));
            tok = g.add(tok, g.add_bias(g.matmul(mid, g.param(m2w)), g.param(m2b)));
        }
        Param& lnfg = next();
        Param& lnfb = next();
        tokens = g.layernorm(tok, g.param(lnfg), g.param(lnfb));
    }

    ForwardNodes f;
    f.tokens = tokens;

    Param& score_w = next();
    Param& score_b = next();
    f.score = g.reshape(
        g.add_bias(g.matmul(tokens, g.param(score_w)), g.param(score_b)), {b, t});
    f.attn_w = g.softmax_lastdim(f.score);
    f.conf_tok = g.sigmoid(f.score);

    const int pooled = g.sum_axis1(g.mul_bcast_last(tokens, f.attn_w));
    const int temp = g.input({b, 1}, batch.temp);
    Param& do1w = next();
    Param& do1b = next();
    Param& do2w = next();
    Param& do2b = next();
    const int doh = g.relu(g.add_bias(
        g.matmul(g.concat_lastdim(pooled, temp), g.param(do1w)), g.param(do1b)));
    f.do_pred = g.scale(g.add_bias(g.matmul(doh, g.param(do2w)), g.param(do2b)), kDoScale);

    Param& sv_w = next();
    Param& sv_b = next();
    const int sv = g.softplus(g.add_bias(g.matmul(tokens, g.param(sv_w)), g.param(sv_b)));
    const int i0_tok = g.scale(g.reshape(g.slice_lastdim(sv, 0, 1), {b, t}), kI0Scale);
    const int k_tok = g.scale(g.reshape(g.slice_lastdim(sv, 1, 1), {b, t}), kKScale);

    Param& bio_w = next();
    Param& bio_b = next();
    f.bio_pred = g.sigmoid(
        g.add_bias(g.matmul(g.mean_axis1(tokens), g.param(bio_w)), g.param(bio_b)));

    const int gh = cfg_.grid_h(), gw = cfg_.grid_w(), factor = cfg_.down_factor();
    auto to_pixels = [&](int tok_node) {
        return g.reshape(
            g.upsample_nearest(g.reshape(tok_node, {b, 1, gh, gw}), factor),
            {b, cfg_.height * cfg_.width});
    };
    if (cfg_.pgnn) {
        f.i0_px = g.input({b, batch.n}, batch.frozen_i0);
        f.k_px = g.input({b, batch.n}, batch.frozen_k);
    } else {
        f.i0_px = to_pixels(i0_tok);
        f.k_px = to_pixels(k_tok);
    }
    f.conf_px = to_pixels(f.conf_tok);

    if (pi != params_.size()) throw NumericError("internal: parameter walk mismatch");
    return f;
}

int CalibratorNet::build_loss(Graph& g, const Batch& batch, const ForwardNodes& f,
                              bool* floored) const {
    const int b = batch.b;
    const int gt = g.input({b, 1}, batch.gt);
    const int diff = g.sub(f.do_pred, gt);
    int total = g.mean_all(g.mul(diff, diff));

    if (cfg_.lambda_physics > 0.0) {
        const int inv_red = g.input({b, batch.n}, batch.inv_red);
        const int mask = g.input({b, batch.n}, batch.mask);
        const int cgt = g.input({b}, batch.cgt);
        const int inv_count = g.input({b}, batch.inv_count);

        const int r = g.sub(g.add_scalar(g.mul(f.i0_px, inv_red), -1.0),
                            g.mul_bcast_col(f.k_px, cgt));
        const int mc = g.mul(f.conf_px, mask);
        const int weighted = g.mul(g.row_sum(g.mul(mc, g.mul(r, r))), inv_count);
        const int conf_mean = g.mul(g.row_sum(mc), inv_count);
        if (floored) {
            for (Scalar v : g.value(conf_mean))
                if (v < kConfFloor) *floored = true;
        }
        const int l_phys = g.mean_all(g.div(weighted, g.clamp_min(conf_mean, kConfFloor)));
        total = g.add(total, g.scale(l_phys, cfg_.lambda_physics));
    }
    if (cfg_.lambda_biofouling > 0.0) {
        const int bio_gt = g.input({b, 1}, batch.bio);
        const int bdiff = g.sub(f.bio_pred, bio_gt);
        total = g.add(total, g.scale(g.mean_all(g.mul(bdiff, bdiff)), cfg_.lambda_biofouling));
    }
    return total;
}

ModelOutputs CalibratorNet::forward(const sim::Frame& frame,
                                    const pixfit::ParameterMaps* frozen) {
    const sim::Frame* fp = &frame;
    const Batch batch = make_batch(std::span<const sim::Frame* const>(&fp, 1), {}, frozen,
                                   nullptr);
    Graph g;
    const ForwardNodes f = build_forward(g, batch);

    ModelOutputs out;
    out.do_pred = g.value(f.do_pred)[0];
    out.biofouling_pred = g.value(f.bio_pred)[0];
    out.i0_map = g.value(f.i0_px);
    out.k_sv_map = g.value(f.k_px);
    out.confidence = g.value(f.conf_px);

    // Pooling weights, min-max scaled per frame, at pixel resolution.
    const std::vector<Scalar>& w_tok = g.value(f.attn_w);
    Scalar lo = w_tok[0], hi = w_tok[0];
    for (Scalar v : w_tok) {
        lo = std::min(lo, v);
        hi = std::max(hi, v);
    }
    const Scalar span = hi - lo;
    const int gw = cfg_.grid_w(), factor = cfg_.down_factor();
    out.attention.assign(static_cast<std::size_t>(cfg_.width) * cfg_.height, 0.0);
    for (int y = 0; y < cfg_.height; ++y)
        for (int x = 0; x < cfg_.width; ++x) {
            const Scalar v = w_tok[static_cast<std::size_t>(y / factor) * gw + x / factor];
            out.attention[grid_index(x, y, cfg_.width)] = span > 0.0 ? (v - lo) / span : 0.0;
        }

    for (Scalar v : out.i0_map)
        if (!std::isfinite(v)) throw NumericError("forward: non-finite output");
    if (!std::isfinite(out.do_pred)) throw NumericError("forward: non-finite prediction");
    return out;
}

LossBreakdown composite_loss(const ModelOutputs& out, const sim::Frame& frame,
                             const sim::DayDataset& day, const ModelConfig& cfg) {
    LossBreakdown lb;
    const Scalar derr = out.do_pred - frame.do_gt;
    lb.l_data = derr * derr;

    const std::size_t n = static_cast<std::size_t>(frame.width) * frame.height;
    if (out.i0_map.size() != n || out.confidence.size() != n)
        throw DataError("composite_loss: map size does not match the frame");
    Scalar num = 0.0, conf_sum = 0.0, count = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const Scalar red = frame.pixels[i * 3];
        if (!(red > kIntensityEps)) continue;
        const Scalar r =
            sv::physics_residual(out.i0_map[i], out.k_sv_map[i], red, frame.do_gt);
        num += out.confidence[i] * r * r;
        conf_sum += out.confidence[i];
        count += 1.0;
    }
    if (count > 0.0) {
        Scalar conf_mean = conf_sum / count;
        if (conf_mean < kConfFloor) {
            conf_mean = kConfFloor;
            lb.confidence_floored = true;
        }
        lb.l_physics = (num / count) / conf_mean;
    }
    const Scalar berr = out.biofouling_pred - day.biofouling_score;
    lb.l_biofouling = berr * berr;
    lb.l_total = lb.l_data + cfg.lambda_physics * lb.l_physics +
                 cfg.lambda_biofouling * lb.l_biofouling;
    return lb;
}

TrainHistory train_model(CalibratorNet& net,
                         std::span<const sim::DayDataset* const> train_days,
                         std::span<const sim::DayDataset* const> val_days,
                         const pixfit::ParameterMaps* frozen_maps,
                         const TrainOptions& opts) {
    const ModelConfig& cfg = net.config();
    if (train_days.empty()) throw DataError("train: need at least one training day");
    if (cfg.pgnn && !frozen_maps) throw DataError("train: pgnn requires frozen maps");
    for (const auto* td : train_days)
        for (const auto* vd : val_days)
            if (td->day_index == vd->day_index)
                throw DataError("train: train and validation days must be disjoint");

    struct Sample {
        const sim::DayDataset* day;
        int frame;
    };
    std::vector<Sample> samples;
    for (const auto* day : train_days)
        for (std::size_t fi = 0; fi < day->frames.size(); ++fi)
            samples.push_back({day, static_cast<int>(fi)});

    Rng order_rng(derive_seed(cfg.seed, 0xA11));
    TrainHistory hist;
    std::vector<Scalar> best_weights = net.snapshot();
    Scalar best_metric = std::numeric_limits<Scalar>::infinity();
    long step = 0;
    const bool want_breakdown =
        opts.aux_metrics || cfg.lambda_physics > 0.0 || cfg.lambda_biofouling > 0.0;

    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        order_rng.shuffle(samples);
        EpochStats stats;
        stats.epoch = epoch;
        long batches = 0;

        for (std::size_t start = 0; start < samples.size(); start += cfg.batch_size) {
            const std::size_t end = std::min(samples.size(),
                                             start + static_cast<std::size_t>(cfg.batch_size));
            std::vector<const sim::Frame*> frames;
            std::vector<Scalar> bios;
            std::vector<std::pair<bool, bool>> flips;
            for (std::size_t s = start; s < end; ++s) {
                const Sample& smp = samples[s];
                frames.push_back(&smp.day->frames[static_cast<std::size_t>(smp.frame)]);
                bios.push_back(smp.day->biofouling_score);
                if (cfg.augment)
                    flips.emplace_back(order_rng.uniform() < 0.5, order_rng.uniform() < 0.5);
                else
                    flips.emplace_back(false, false);
                if (opts.usage_log)
                    opts.usage_log->record(smp.day->day_index, smp.frame, eval::Role::train);
            }
            const CalibratorNet::Batch batch =
                net.make_batch(frames, bios, frozen_maps, &flips);
            Graph g;
            const CalibratorNet::ForwardNodes f = net.build_forward(g, batch);
            bool floored = false;
            const int loss = net.build_loss(g, batch, f, &floored);
            const Scalar loss_val = g.value(loss)[0];
            if (!std::isfinite(loss_val))
                throw NumericError(
                    "train: loss became non-finite (learning rate too high?)");
            g.backward(loss);
            adamw_step(net.params(), cfg.lr, cfg.weight_decay, ++step);

            if (want_breakdown) {
                // Reference breakdown from the same graph values.
                Scalar ld = 0.0;
                for (int s = 0; s < batch.b; ++s) {
                    const Scalar e = g.value(f.do_pred)[static_cast<std::size_t>(s)] -
                                     batch.gt[static_cast<std::size_t>(s)];
                    ld += e * e;
                }
                ld /= batch.b;
                Scalar lp = 0.0;
                for (int s = 0; s < batch.b; ++s) {
                    Scalar num = 0.0, conf_sum = 0.0;
                    for (int i = 0; i < batch.n; ++i) {
                        const std::size_t idx = static_cast<std::size_t>(s) * batch.n + i;
                        if (batch.mask[idx] == 0.0) continue;
                        const Scalar r = g.value(f.i0_px)[idx] * batch.inv_red[idx] - 1.0 -
                                         g.value(f.k_px)[idx] * batch.cgt[static_cast<std::size_t>(s)];
                        num += g.value(f.conf_px)[idx] * r * r;
                        conf_sum += g.value(f.conf_px)[idx];
                    }
                    const Scalar inv_cnt = batch.inv_count[static_cast<std::size_t>(s)];
                    lp += (num * inv_cnt) / std::max(conf_sum * inv_cnt, kConfFloor);
                }
                lp /= batch.b;
                Scalar lbio = 0.0;
                for (int s = 0; s < batch.b; ++s) {
                    const Scalar e = g.value(f.bio_pred)[static_cast<std::size_t>(s)] -
                                     batch.bio[static_cast<std::size_t>(s)];
                    lbio += e * e;
                }
                lbio /= batch.b;
                stats.l_data += ld;
                stats.l_physics += lp;
                stats.l_biofouling += lbio;
                stats.l_total += ld + cfg.lambda_physics * lp + cfg.lambda_biofouling * lbio;
            } else {
                stats.l_data += loss_val;
                stats.l_total += loss_val;
            }
            ++batches;
        }
        stats.l_data /= batches;
        stats.l_physics /= batches;
        stats.l_biofouling /= batches;
        stats.l_total /= batches;

        if (!val_days.empty()) {
            Scalar mae = 0.0;
            long count = 0;
            for (const auto* day : val_days) {
                for (std::size_t fi = 0; fi < day->frames.size(); ++fi) {
                    if (opts.usage_log)
                        opts.usage_log->record(day->day_index, static_cast<int>(fi),
                                               eval::Role::val);
                    const ModelOutputs out =
                        net.forward(day->frames[fi], frozen_maps);
                    mae += std::abs(out.do_pred - day->frames[fi].do_gt);
                    ++count;
                }
            }
            stats.val_mae = mae / static_cast<Scalar>(count);
        } else {
            stats.val_mae = std::numeric_limits<Scalar>::quiet_NaN();
        }

        const Scalar metric = val_days.empty() ? stats.l_total : stats.val_mae;
        if (metric < best_metric) {
            best_metric = metric;
            best_weights = net.snapshot();
            hist.best_epoch = epoch;
        }
        hist.epochs.push_back(stats);
    }
    net.restore(best_weights);
    hist.best_val_mae = best_metric;
    return hist;
}

Scalar gradient_check(const ModelConfig& cfg, const sim::Frame& frame, Scalar epsilon) {
    CalibratorNet net(cfg);
    return gradient_check(net, frame, epsilon);
}

Scalar gradient_check(CalibratorNet& net, const sim::Frame& frame, Scalar epsilon) {
    if (!(epsilon >= 1e-7 && epsilon <= 1e-3))
        throw DataError("gradient_check: epsilon must lie in [1e-7, 1e-3]");
    const sim::Frame* fp = &frame;
    std::vector<Scalar> bio{0.5};
    const CalibratorNet::Batch batch = net.make_batch(
        std::span<const sim::Frame* const>(&fp, 1), bio, nullptr, nullptr);

    auto loss_value = [&]() {
        Graph g;
        const CalibratorNet::ForwardNodes f = net.build_forward(g, batch);
        return g.value(net.build_loss(g, batch, f, nullptr))[0];
    };

    for (auto& p : net.params()) std::fill(p.grad.data.begin(), p.grad.data.end(), 0.0);
    {
        Graph g;
        const CalibratorNet::ForwardNodes f = net.build_forward(g, batch);
        g.backward(net.build_loss(g, batch, f, nullptr));
    }

    Scalar worst = 0.0;
    for (auto& p : net.params()) {
        for (std::size_t i = 0; i < p.value.size(); ++i) {
            const Scalar keep = p.value.data[i];
            p.value.data[i] = keep + epsilon;
            const Scalar up = loss_value();
            p.value.data[i] = keep - epsilon;
            const Scalar dn = loss_value();
            p.value.data[i] = keep;
            const Scalar fd = (up - dn) / (2.0 * epsilon);
            const Scalar an = p.grad.data[i];
            const Scalar rel =
                std::abs(fd - an) / std::max(std::abs(fd) + std::abs(an), 1e-2);
            worst = std::max(worst, rel);
        }
    }
    return worst;
}

std::vector<Scalar> residual_map(CalibratorNet& net, const sim::Frame& frame,
                                 const pixfit::ParameterMaps* frozen) {
    const ModelOutputs out = net.forward(frame, frozen);
    const std::size_t n = static_cast<std::size_t>(frame.width) * frame.height;
    std::vector<Scalar> map(n, std::numeric_limits<Scalar>::quiet_NaN());
    for (std::size_t i = 0; i < n; ++i) {
        const Scalar red = frame.pixels[i * 3];
        if (!(red > kIntensityEps)) continue;
        map[i] = sv::physics_residual(out.i0_map[i], out.k_sv_map[i], red, frame.do_gt);
    }
    return map;
}

void save_model(const CalibratorNet& net, const std::string& path, int epoch,
                Scalar val_mae) {
    const ModelConfig& cfg = net.config();
    nlohmann::json meta{{"version", 1},
                        {"backbone", cfg.backbone},
                        {"width", cfg.width},
                        {"height", cfg.height},
                        {"patch", cfg.patch},
                        {"embed_dim", cfg.embed_dim},
                        {"layers", cfg.layers},
                        {"heads_attn", cfg.heads_attn},
                        {"lambda_physics", cfg.lambda_physics},
                        {"lambda_biofouling", cfg.lambda_biofouling},
                        {"lr", cfg.lr},
                        {"weight_decay", cfg.weight_decay},
                        {"epochs", cfg.epochs},
                        {"batch_size", cfg.batch_size},
                        {"seed", cfg.seed},
                        {"augment", cfg.augment},
                        {"pgnn", cfg.pgnn},
                        {"epoch", epoch},
                        {"val_mae", val_mae}};
    nlohmann::json plist = nlohmann::json::array();
    for (const auto& p : net.params())
        plist.push_back({{"name", p.name}, {"shape", p.value.shape}});
    meta["params"] = plist;

    std::ofstream f(path, std::ios::binary);
    if (!f) throw DataError("save_model: cannot open " + path);
    f << "OPTODECAL_MODEL v1\n" << meta.dump() << "\nBINARY\n";
    for (const auto& p : net.params()) {
        for (Scalar v : p.value.data) {
            const float fv = static_cast<float>(v);
            f.write(reinterpret_cast<const char*>(&fv), sizeof(float));
        }
    }
}

CalibratorNet load_model(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw DataError("load_model: cannot open " + path);
    std::string header, meta_line, marker;
    std::getline(f, header);
    if (header != "OPTODECAL_MODEL v1")
        throw DataError("load_model: unsupported model format: " + header);
    std::getline(f, meta_line);
    std::getline(f, marker);
    if (marker != "BINARY") throw DataError("load_model: missing binary marker");

    const nlohmann::json meta = nlohmann::json::parse(meta_line);
    ModelConfig cfg;
    cfg.backbone = meta.at("backbone").get<std::string>();
    cfg.width = meta.at("width").get<int>();
    cfg.height = meta.at("height").get<int>();
    cfg.patch = meta.at("patch").get<int>();
    cfg.embed_dim = meta.at("embed_dim").get<int>();
    cfg.layers = meta.at("layers").get<int>();
    cfg.heads_attn = meta.at("heads_attn").get<int>();
    cfg.lambda_physics = meta.at("lambda_physics").get<Scalar>();
    cfg.lambda_biofouling = meta.at("lambda_biofouling").get<Scalar>();
    cfg.lr = meta.at("lr").get<Scalar>();
    cfg.weight_decay = meta.at("weight_decay").get<Scalar>();
    cfg.epochs = meta.at("epochs").get<int>();
    cfg.batch_size = meta.at("batch_size").get<int>();
    cfg.seed = meta.at("seed").get<std::uint64_t>();
    cfg.augment = meta.at("augment").get<bool>();
    cfg.pgnn = meta.at("pgnn").get<bool>();
    cfg.input_channels = cfg.pgnn ? 5 : 3;

    CalibratorNet net(cfg);
    const auto& plist = meta.at("params");
    if (plist.size() != net.params().size())
        throw DataError("load_model: parameter list mismatch");
    for (std::size_t i = 0; i < net.params().size(); ++i) {
        Param& p = net.params()[i];
        if (plist[i].at("name").get<std::string>() != p.name)
            throw DataError("load_model: parameter order mismatch at " + p.name);
        for (auto& v : p.value.data) {
            float fv = 0.0f;
            f.read(reinterpret_cast<char*>(&fv), sizeof(float));
            if (!f) throw DataError("load_model: truncated weight blob");
            v = static_cast<Scalar>(fv);
        }
    }
    return net;
}

}  // namespace optode::nn
