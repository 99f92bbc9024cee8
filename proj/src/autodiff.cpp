#include "optode/autodiff.hpp"

#include <algorithm>
#include <cmath>

#include "optode/parallel.hpp"

namespace optode::nn {

namespace {

std::size_t rows_before_last(const std::vector<int>& shape) {
    std::size_t r = 1;
    for (std::size_t i = 0; i + 1 < shape.size(); ++i) r *= static_cast<std::size_t>(shape[i]);
    return r;
}

constexpr Scalar kInvSqrt2 = 0.70710678118654752440;
constexpr Scalar kInvSqrt2Pi = 0.39894228040143267794;

}  // namespace

int Graph::make(std::vector<int> shape) {
    Node n;
    n.shape = std::move(shape);
    const std::size_t count = Tensor::numel(n.shape);
    n.val.assign(count, 0.0);
    n.grd.assign(count, 0.0);
    nodes_.push_back(std::move(n));
    return static_cast<int>(nodes_.size()) - 1;
}

int Graph::input(std::vector<int> shape, const Scalar* data) {
    const int id = make(std::move(shape));
    std::copy(data, data + at(id).val.size(), at(id).val.begin());
    return id;
}

int Graph::param(Param& p) {
    const int id = make(p.value.shape);
    at(id).val = p.value.data;
    param_nodes_.emplace_back(id, &p);
    return id;
}

int Graph::add(int a, int b) {
    if (at(a).shape != at(b).shape) throw DataError("add: shape mismatch");
    const int out = make(at(a).shape);
    auto& o = at(out).val;
    for (std::size_t i = 0; i < o.size(); ++i) o[i] = at(a).val[i] + at(b).val[i];
    backward_ops_.push_back([this, a, b, out] {
        for (std::size_t i = 0; i < at(out).grd.size(); ++i) {
            at(a).grd[i] += at(out).grd[i];
            at(b).grd[i] += at(out).grd[i];
        }
    });
    return out;
}

int Graph::sub(int a, int b) {
    if (at(a).shape != at(b).shape) throw DataError("sub: shape mismatch");
    const int out = make(at(a).shape);
    for (std::size_t i = 0; i < at(out).val.size(); ++i)
        at(out).val[i] = at(a).val[i] - at(b).val[i];
    backward_ops_.push_back([this, a, b, out] {
        for (std::size_t i = 0; i < at(out).grd.size(); ++i) {
            at(a).grd[i] += at(out).grd[i];
            at(b).grd[i] -= at(out).grd[i];
        }
    });
    return out;
}

int Graph::mul(int a, int b) {
    if (at(a).shape != at(b).shape) throw DataError("mul: shape mismatch");
    const int out = make(at(a).shape);
    for (std::size_t i = 0; i < at(out).val.size(); ++i)
        at(out).val[i] = at(a).val[i] * at(b).val[i];
    backward_ops_.push_back([this, a, b, out] {
        for (std::size_t i = 0; i < at(out).grd.size(); ++i) {
            at(a).grd[i] += at(out).grd[i] * at(b).val[i];
            at(b).grd[i] += at(out).grd[i] * at(a).val[i];
        }
    });
    return out;
}

int Graph::div(int a, int b) {
    if (at(a).shape != at(b).shape) throw DataError("div: shape mismatch");
    const int out = make(at(a).shape);
    for (std::size_t i = 0; i < at(out).val.size(); ++i)
        at(out).val[i] = at(a).val[i] / at(b).val[i];
    backward_ops_.push_back([this, a, b, out] {
        for (std::size_t i = 0; i < at(out).grd.size(); ++i) {
            const Scalar inv = 1.0 / at(b).val[i];
            at(a).grd[i] += at(out).grd[i] * inv;
            at(b).grd[i] -= at(out).grd[i] * at(a).val[i] * inv * inv;
        }
    });
    return out;
}

int Graph::scale(int a, Scalar c) {
    const int out = make(at(a).shape);
    for (std::size_t i = 0; i < at(out).val.size(); ++i) at(out).val[i] = c * at(a).val[i];
    backward_ops_.push_back([this, a, out, c] {
        for (std::size_t i = 0; i < at(out).grd.size(); ++i)
            at(a).grd[i] += c * at(out).grd[i];
    });
    return out;
}

int Graph::add_scalar(int a, Scalar c) {
    const int out = make(at(a).shape);
    for (std::size_t i = 0; i < at(out).val.size(); ++i) at(out).val[i] = at(a).val[i] + c;
    backward_ops_.push_back([this, a, out] {
        for (std::size_t i = 0; i < at(out).grd.size(); ++i) at(a).grd[i] += at(out).grd[i];
    });
    return out;
}

int Graph::add_bias(int x, int bias) {
    const int d = at(x).shape.back();
    if (at(bias).shape != std::vector<int>{d}) throw DataError("add_bias: shape mismatch");
    const int out = make(at(x).shape);
    const std::size_t rows = rows_before_last(at(x).shape);
    for (std::size_t r = 0; r < rows; ++r)
        for (int c = 0; c < d; ++c)
            at(out).val[r * d + c] = at(x).val[r * d + c] + at(bias).val[static_cast<std::size_t>(c)];
    backward_ops_.push_back([this, x, bias, out, rows, d] {
        for (std::size_t i = 0; i < at(out).grd.size(); ++i) at(x).grd[i] += at(out).grd[i];
        for (int c = 0; c < d; ++c) {
            Scalar acc = 0.0;
            for (std::size_t r = 0; r < rows; ++r) acc += at(out).grd[r * d + c];
            at(bias).grd[static_cast<std::size_t>(c)] += acc;
        }
    });
    return out;
}

int Graph::add_pos(int x, int pos) {
    const std::vector<int> s = at(x).shape;
    if (s.size() != 3 || at(pos).shape != std::vector<int>{s[1], s[2]})
        throw DataError("add_pos: shape mismatch");
    const int out = make(s);
    const std::size_t td = static_cast<std::size_t>(s[1]) * s[2];
    for (int b = 0; b < s[0]; ++b)
        for (std::size_t i = 0; i < td; ++i)
            at(out).val[b * td + i] = at(x).val[b * td + i] + at(pos).val[i];
    const int batch = s[0];
    backward_ops_.push_back([this, x, pos, out, td, batch] {
        for (std::size_t i = 0; i < at(out).grd.size(); ++i) at(x).grd[i] += at(out).grd[i];
        for (std::size_t i = 0; i < td; ++i) {
            Scalar acc = 0.0;
            for (int b = 0; b < batch; ++b) acc += at(out).grd[b * td + i];
            at(pos).grd[i] += acc;
        }
    });
    return out;
}

int Graph::mul_bcast_last(int x, int w) {
    const std::vector<int> s = at(x).shape;
    if (s.size() != 3 || at(w).shape != std::vector<int>{s[0], s[1]})
        throw DataError("mul_bcast_last: shape mismatch");
    const int out = make(s);
    const int t = s[1], d = s[2];
    for (int b = 0; b < s[0]; ++b)
        for (int i = 0; i < t; ++i) {
            const Scalar wv = at(w).val[static_cast<std::size_t>(b) * t + i];
            for (int c = 0; c < d; ++c) {
                const std::size_t idx = (static_cast<std::size_t>(b) * t + i) * d + c;
                at(out).val[idx] = at(x).val[idx] * wv;
            }
        }
    const int batch = s[0];
    backward_ops_.push_back([this, x, w, out, batch, t, d] {
        for (int b = 0; b < batch; ++b)
            for (int i = 0; i < t; ++i) {
                const std::size_t wi = static_cast<std::size_t>(b) * t + i;
                Scalar acc = 0.0;
                for (int c = 0; c < d; ++c) {
                    const std::size_t idx = wi * d + c;
                    at(x).grd[idx] += at(out).grd[idx] * at(w).val[wi];
                    acc += at(out).grd[idx] * at(x).val[idx];
                }
                at(w).grd[wi] += acc;
            }
    });
    return out;
}

int Graph::mul_bcast_col(int x, int s) {
    const std::vector<int> xs = at(x).shape;
    if (xs.size() != 2 || at(s).shape != std::vector<int>{xs[0]})
        throw DataError("mul_bcast_col: shape mismatch");
    const int out = make(xs);
    const int n = xs[1];
    for (int b = 0; b < xs[0]; ++b) {
        const Scalar sv = at(s).val[static_cast<std::size_t>(b)];
        for (int i = 0; i < n; ++i)
            at(out).val[static_cast<std::size_t>(b) * n + i] =
                at(x).val[static_cast<std::size_t>(b) * n + i] * sv;
    }
    const int batch = xs[0];
    backward_ops_.push_back([this, x, s, out, batch, n] {
        for (int b = 0; b < batch; ++b) {
            Scalar acc = 0.0;
            for (int i = 0; i < n; ++i) {
                const std::size_t idx = static_cast<std::size_t>(b) * n + i;
                at(x).grd[idx] += at(out).grd[idx] * at(s).val[static_cast<std::size_t>(b)];
                acc += at(out).grd[idx] * at(x).val[idx];
            }
            at(s).grd[static_cast<std::size_t>(b)] += acc;
        }
    });
    return out;
}

int Graph::clamp_min(int a, Scalar floor) {
    const int out = make(at(a).shape);
    for (std::size_t i = 0; i < at(out).val.size(); ++i)
        at(out).val[i] = std::max(at(a).val[i], floor);
    backward_ops_.push_back([this, a, out, floor] {
        for (std::size_t i = 0; i < at(out).grd.size(); ++i)
            if (at(a).val[i] > floor) at(a).grd[i] += at(out).grd[i];
    });
    return out;
}

int Graph::matmul(int x, int w) {
    const std::vector<int> xs = at(x).shape;
    const std::vector<int> ws = at(w).shape;
    if (ws.size() != 2 || xs.back() != ws[0]) throw DataError("matmul: shape mismatch");
    const int d = ws[0], e = ws[1];
    std::vector<int> out_shape = xs;
    out_shape.back() = e;
    const int out = make(out_shape);
    const std::size_t rows = rows_before_last(xs);

    const Scalar* xv = at(x).val.data();
    const Scalar* wv = at(w).val.data();
    Scalar* ov = at(out).val.data();
    par::for_each(rows, [&](std::size_t r) {
        for (int j = 0; j < e; ++j) {
            Scalar acc = 0.0;
            for (int k = 0; k < d; ++k) acc += xv[r * d + k] * wv[static_cast<std::size_t>(k) * e + j];
            ov[r * e + j] = acc;
        }
    });
    backward_ops_.push_back([this, x, w, out, rows, d, e] {
        const Scalar* g = at(out).grd.data();
        const Scalar* xv2 = at(x).val.data();
        const Scalar* wv2 = at(w).val.data();
        Scalar* xg = at(x).grd.data();
        Scalar* wg = at(w).grd.data();
        par::for_each(rows, [&](std::size_t r) {
            for (int k = 0; k < d; ++k) {
                Scalar acc = 0.0;
                for (int j = 0; j < e; ++j) acc += g[r * e + j] * wv2[static_cast<std::size_t>(k) * e + j];
                xg[r * d + k] += acc;
            }
        });
        par::for_each(static_cast<std::size_t>(d), [&](std::size_t k) {
            for (int j = 0; j < e; ++j) {
                Scalar acc = 0.0;
                for (std::size_t r = 0; r < rows; ++r) acc += xv2[r * d + k] * g[r * e + j];
                wg[k * e + j] += acc;
            }
        });
    });
    return out;
}

int Graph::bmm(int a, int b) {
    const std::vector<int> as = at(a).shape;
    const std::vector<int> bs = at(b).shape;
    if (as.size() != 3 || bs.size() != 3 || as[0] != bs[0] || as[2] != bs[1])
        throw DataError("bmm: shape mismatch");
    const int n = as[0], t = as[1], k = as[2], s = bs[2];
    const int out = make({n, t, s});
    const Scalar* av = at(a).val.data();
    const Scalar* bv = at(b).val.data();
    Scalar* ov = at(out).val.data();
    par::for_each(static_cast<std::size_t>(n) * t, [&](std::size_t nt) {
        const std::size_t bi = nt / t;
        for (int j = 0; j < s; ++j) {
            Scalar acc = 0.0;
            for (int q = 0; q < k; ++q)
                acc += av[nt * k + q] * bv[(bi * k + q) * s + j];
            ov[nt * s + j] = acc;
        }
    });
    backward_ops_.push_back([this, a, b, out, n, t, k, s] {
        const Scalar* g = at(out).grd.data();
        const Scalar* av2 = at(a).val.data();
        const Scalar* bv2 = at(b).val.data();
        Scalar* ag = at(a).grd.data();
        Scalar* bg = at(b).grd.data();
        par::for_each(static_cast<std::size_t>(n) * t, [&](std::size_t nt) {
            const std::size_t bi = nt / t;
            for (int q = 0; q < k; ++q) {
                Scalar acc = 0.0;
                for (int j = 0; j < s; ++j) acc += g[nt * s + j] * bv2[(bi * k + q) * s + j];
                ag[nt * k + q] += acc;
            }
        });
        par::for_each(static_cast<std::size_t>(n) * k, [&](std::size_t nk) {
            const std::size_t bi = nk / k;
            const int q = static_cast<int>(nk % k);
            for (int j = 0; j < s; ++j) {
                Scalar acc = 0.0;
                for (int i = 0; i < t; ++i)
                    acc += av2[(bi * t + i) * k + q] * g[(bi * t + i) * s + j];
                bg[nk * s + j] += acc;
            }
        });
    });
    return out;
}

int Graph::bmm_nt(int a, int b) {
    const std::vector<int> as = at(a).shape;
    const std::vector<int> bs = at(b).shape;
    if (as.size() != 3 || bs.size() != 3 || as[0] != bs[0] || as[2] != bs[2])
        throw DataError("bmm_nt: shape mismatch");
    const int n = as[0], t = as[1], k = as[2], s = bs[1];
    const int out = make({n, t, s});
    const Scalar* av = at(a).val.data();
    const Scalar* bv = at(b).val.data();
    Scalar* ov = at(out).val.data();
    par::for_each(static_cast<std::size_t>(n) * t, [&](std::size_t nt) {
        const std::size_t bi = nt / t;
        for (int j = 0; j < s; ++j) {
            Scalar acc = 0.0;
            for (int q = 0; q < k; ++q)
                acc += av[nt * k + q] * bv[(bi * s + j) * k + q];
            ov[nt * s + j] = acc;
        }
    });
    backward_ops_.push_back([this, a, b, out, n, t, k, s] {
        const Scalar* g = at(out).grd.data();
        const Scalar* av2 = at(a).val.data();
        const Scalar* bv2 = at(b).val.data();
        Scalar* ag = at(a).grd.data();
        Scalar* bg = at(b).grd.data();
        par::for_each(static_cast<std::size_t>(n) * t, [&](std::size_t nt) {
            const std::size_t bi = nt / t;
            for (int q = 0; q < k; ++q) {
                Scalar acc = 0.0;
                for (int j = 0; j < s; ++j) acc += g[nt * s + j] * bv2[(bi * s + j) * k + q];
                ag[nt * k + q] += acc;
            }
        });
        par::for_each(static_cast<std::size_t>(n) * s, [&](std::size_t ns) {
            const std::size_t bi = ns / s;
            for (int q = 0; q < k; ++q) {
                Scalar acc = 0.0;
                for (int i = 0; i < t; ++i)
                    acc += g[(bi * t + i) * s + (ns % s)] * av2[(bi * t + i) * k + q];
                bg[ns * k + q] += acc;
            }
        });
    });
    return out;
}

int Graph::conv2d(int x, int w, int b, int stride, int pad) {
    const std::vector<int> xs = at(x).shape;
    const std::vector<int> ws = at(w).shape;
    if (xs.size() != 4 || ws.size() != 4 || xs[1] != ws[1])
        throw DataError("conv2d: shape mismatch");
    const int batch = xs[0], cin = xs[1], h = xs[2], wd = xs[3];
    const int cout = ws[0], kh = ws[2], kw = ws[3];
    if (at(b).shape != std::vector<int>{cout}) throw DataError("conv2d: bias mismatch");
    const int oh = (h + 2 * pad - kh) / stride + 1;
    const int ow = (wd + 2 * pad - kw) / stride + 1;
    const int out = make({batch, cout, oh, ow});

    const Scalar* xv = at(x).val.data();
    const Scalar* wv = at(w).val.data();
    const Scalar* bv = at(b).val.data();
    Scalar* ov = at(out).val.data();
    par::for_each(static_cast<std::size_t>(batch) * cout, [&](std::size_t bo) {
        const int bi = static_cast<int>(bo) / cout;
        const int oc = static_cast<int>(bo) % cout;
        for (int oy = 0; oy < oh; ++oy)
            for (int ox = 0; ox < ow; ++ox) {
                Scalar acc = bv[oc];
                for (int ic = 0; ic < cin; ++ic)
                    for (int ky = 0; ky < kh; ++ky) {
                        const int iy = oy * stride + ky - pad;
                        if (iy < 0 || iy >= h) continue;
                        for (int kx = 0; kx < kw; ++kx) {
                            const int ix = ox * stride + kx - pad;
                            if (ix < 0 || ix >= wd) continue;
                            acc += xv[((static_cast<std::size_t>(bi) * cin + ic) * h + iy) * wd + ix] *
                                   wv[((static_cast<std::size_t>(oc) * cin + ic) * kh + ky) * kw + kx];
                        }
                    }
                ov[(bo * oh + oy) * ow + ox] = acc;
            }
    });
    backward_ops_.push_back([this, x, w, b, out, batch, cin, h, wd, cout, kh, kw, oh, ow,
                             stride, pad] {
        const Scalar* g = at(out).grd.data();
        const Scalar* xv2 = at(x).val.data();
        const Scalar* wv2 = at(w).val.data();
        Scalar* xg = at(x).grd.data();
        Scalar* wg = at(w).grd.data();
        Scalar* bg = at(b).grd.data();
        // d/dx: gather over the outputs each input pixel feeds.
        par::for_each(static_cast<std::size_t>(batch) * cin, [&](std::size_t bc) {
            const int bi = static_cast<int>(bc) / cin;
            const int ic = static_cast<int>(bc) % cin;
            for (int iy = 0; iy < h; ++iy)
                for (int ix = 0; ix < wd; ++ix) {
                    Scalar acc = 0.0;
                    for (int oc = 0; oc < cout; ++oc)
                        for (int ky = 0; ky < kh; ++ky) {
                            const int num_y = iy + pad - ky;
                            if (num_y < 0 || num_y % stride) continue;
                            const int oy = num_y / stride;
                            if (oy >= oh) continue;
                            for (int kx = 0; kx < kw; ++kx) {
                                const int num_x = ix + pad - kx;
                                if (num_x < 0 || num_x % stride) continue;
                                const int ox = num_x / stride;
                                if (ox >= ow) continue;
                                acc += g[((static_cast<std::size_t>(bi) * cout + oc) * oh + oy) * ow + ox] *
                                       wv2[((static_cast<std::size_t>(oc) * cin + ic) * kh + ky) * kw + kx];
                            }
                        }
                    xg[(bc * h + iy) * wd + ix] += acc;
                }
        });
        // d/dw and d/db: gather per filter.
        par::for_each(static_cast<std::size_t>(cout), [&](std::size_t oc) {
            Scalar bias_acc = 0.0;
            for (int bi = 0; bi < batch; ++bi)
                for (int oy = 0; oy < oh; ++oy)
                    for (int ox = 0; ox < ow; ++ox)
                        bias_acc += g[((static_cast<std::size_t>(bi) * cout + oc) * oh + oy) * ow + ox];
            bg[oc] += bias_acc;
            for (int ic = 0; ic < cin; ++ic)
                for (int ky = 0; ky < kh; ++ky)
                    for (int kx = 0; kx < kw; ++kx) {
                        Scalar acc = 0.0;
                        for (int bi = 0; bi < batch; ++bi)
                            for (int oy = 0; oy < oh; ++oy) {
                                const int iy = oy * stride + ky - pad;
                                if (iy < 0 || iy >= h) continue;
                                for (int ox = 0; ox < ow; ++ox) {
                                    const int ix = ox * stride + kx - pad;
                                    if (ix < 0 || ix >= wd) continue;
                                    acc += xv2[((static_cast<std::size_t>(bi) * cin + ic) * h + iy) * wd + ix] *
                                           g[((static_cast<std::size_t>(bi) * cout + oc) * oh + oy) * ow + ox];
                                }
                            }
                        wg[((oc * cin + ic) * kh + ky) * kw + kx] += acc;
                    }
        });
    });
    return out;
}

int Graph::chw_to_tokens(int x) {
    const std::vector<int> s = at(x).shape;
    if (s.size() != 4) throw DataError("chw_to_tokens: need [B,C,G,G]");
    const int batch = s[0], c = s[1], g = s[2], g2 = s[3];
    const int t = g * g2;
    const int out = make({batch, t, c});
    for (int b = 0; b < batch; ++b)
        for (int ch = 0; ch < c; ++ch)
            for (int i = 0; i < t; ++i)
                at(out).val[(static_cast<std::size_t>(b) * t + i) * c + ch] =
                    at(x).val[(static_cast<std::size_t>(b) * c + ch) * t + i];
    backward_ops_.push_back([this, x, out, batch, c, t] {
        for (int b = 0; b < batch; ++b)
            for (int ch = 0; ch < c; ++ch)
                for (int i = 0; i < t; ++i)
                    at(x).grd[(static_cast<std::size_t>(b) * c + ch) * t + i] +=
                        at(out).grd[(static_cast<std::size_t>(b) * t + i) * c + ch];
    });
    return out;
}

int Graph::extract_patches(int x, int patch) {
    const std::vector<int> s = at(x).shape;
    if (s.size() != 4 || s[2] % patch || s[3] % patch)
        throw DataError("extract_patches: patch must divide the image side");
    const int batch = s[0], c = s[1], h = s[2], w = s[3];
    const int gy = h / patch, gx = w / patch, t = gy * gx;
    const int d = c * patch * patch;
    const int out = make({batch, t, d});
    auto src_index = [=](int b, int ch, int y, int xx) {
        return ((static_cast<std::size_t>(b) * c + ch) * h + y) * w + xx;
    };
    for (int b = 0; b < batch; ++b)
        for (int ty = 0; ty < gy; ++ty)
            for (int tx = 0; tx < gx; ++tx) {
                const int tok = ty * gx + tx;
                for (int ch = 0; ch < c; ++ch)
                    for (int py = 0; py < patch; ++py)
                        for (int px = 0; px < patch; ++px) {
                            const int f = (ch * patch + py) * patch + px;
                            at(out).val[(static_cast<std::size_t>(b) * t + tok) * d + f] =
                                at(x).val[src_index(b, ch, ty * patch + py, tx * patch + px)];
                        }
            }
    backward_ops_.push_back([this, x, out, batch, c, h, w, patch, gy, gx, t, d, src_index] {
        for (int b = 0; b < batch; ++b)
            for (int ty = 0; ty < gy; ++ty)
                for (int tx = 0; tx < gx; ++tx) {
                    const int tok = ty * gx + tx;
                    for (int ch = 0; ch < c; ++ch)
                        for (int py = 0; py < patch; ++py)
                            for (int px = 0; px < patch; ++px) {
                                const int f = (ch * patch + py) * patch + px;
                                at(x).grd[src_index(b, ch, ty * patch + py, tx * patch + px)] +=
                                    at(out).grd[(static_cast<std::size_t>(b) * t + tok) * d + f];
                            }
                }
    });
    return out;
}

int Graph::upsample_nearest(int x, int factor) {
    const std::vector<int> s = at(x).shape;
    if (s.size() != 4) throw DataError("upsample_nearest: need [B,C,h,w]");
    const int batch = s[0], c = s[1], h = s[2], w = s[3];
    const int oh = h * factor, ow = w * factor;
    const int out = make({batch, c, oh, ow});
    for (int bc = 0; bc < batch * c; ++bc)
        for (int y = 0; y < oh; ++y)
            for (int xx = 0; xx < ow; ++xx)
                at(out).val[(static_cast<std::size_t>(bc) * oh + y) * ow + xx] =
                    at(x).val[(static_cast<std::size_t>(bc) * h + y / factor) * w + xx / factor];
    backward_ops_.push_back([this, x, out, batch, c, h, w, factor] {
        const int oh2 = h * factor, ow2 = w * factor;
        for (int bc = 0; bc < batch * c; ++bc)
            for (int y = 0; y < h; ++y)
                for (int xx = 0; xx < w; ++xx) {
                    Scalar acc = 0.0;
                    for (int dy = 0; dy < factor; ++dy)
                        for (int dx = 0; dx < factor; ++dx)
                            acc += at(out).grd[(static_cast<std::size_t>(bc) * oh2 + y * factor + dy) *
                                                   ow2 + xx * factor + dx];
                    at(x).grd[(static_cast<std::size_t>(bc) * h + y) * w + xx] += acc;
                }
    });
    return out;
}

int Graph::relu(int a) {
    const int out = make(at(a).shape);
    for (std::size_t i = 0; i < at(out).val.size(); ++i)
        at(out).val[i] = at(a).val[i] > 0.0 ? at(a).val[i] : 0.0;
    backward_ops_.push_back([this, a, out] {
        for (std::size_t i = 0; i < at(out).grd.size(); ++i)
            if (at(a).val[i] > 0.0) at(a).grd[i] += at(out).grd[i];
    });
    return out;
}

int Graph::gelu(int a) {
    const int out = make(at(a).shape);
    for (std::size_t i = 0; i < at(out).val.size(); ++i) {
        const Scalar x = at(a).val[i];
        at(out).val[i] = 0.5 * x * (1.0 + std::erf(x * kInvSqrt2));
    }
    backward_ops_.push_back([this, a, out] {
        for (std::size_t i = 0; i < at(out).grd.size(); ++i) {
            const Scalar x = at(a).val[i];
            const Scalar phi = 0.5 * (1.0 + std::erf(x * kInvSqrt2));
            const Scalar pdf = kInvSqrt2Pi * std::exp(-0.5 * x * x);
            at(a).grd[i] += at(out).grd[i] * (phi + x * pdf);
        }
    });
    return out;
}

int Graph::sigmoid(int a) {
    const int out = make(at(a).shape);
    for (std::size_t i = 0; i < at(out).val.size(); ++i) {
        const Scalar x = at(a).val[i];
        at(out).val[i] = x >= 0.0 ? 1.0 / (1.0 + std::exp(-x))
                                  : std::exp(x) / (1.0 + std::exp(x));
    }
    backward_ops_.push_back([this, a, out] {
        for (std::size_t i = 0; i < at(out).grd.size(); ++i) {
            const Scalar y = at(out).val[i];
            at(a).grd[i] += at(out).grd[i] * y * (1.0 - y);
        }
    });
    return out;
}

int Graph::softplus(int a) {
    const int out = make(at(a).shape);
    for (std::size_t i = 0; i < at(out).val.size(); ++i) {
        const Scalar x = at(a).val[i];
        at(out).val[i] = x > 30.0 ? x : (x < -30.0 ? std::exp(x) : std::log1p(std::exp(x)));
    }
    backward_ops_.push_back([this, a, out] {
        for (std::size_t i = 0; i < at(out).grd.size(); ++i) {
            const Scalar x = at(a).val[i];
            const Scalar sig = x >= 0.0 ? 1.0 / (1.0 + std::exp(-x))
                                        : std::exp(x) / (1.0 + std::exp(x));
            at(a).grd[i] += at(out).grd[i] * sig;
        }
    });
    return out;
}

int Graph::softmax_lastdim(int a) {
    const int d = at(a).shape.back();
    const std::size_t rows = rows_before_last(at(a).shape);
    const int out = make(at(a).shape);
    for (std::size_t r = 0; r < rows; ++r) {
        Scalar mx = at(a).val[r * d];
        for (int c = 1; c < d; ++c) mx = std::max(mx, at(a).val[r * d + c]);
        Scalar z = 0.0;
        for (int c = 0; c < d; ++c) {
            const Scalar e = std::exp(at(a).val[r * d + c] - mx);
            at(out).val[r * d + c] = e;
            z += e;
        }
        for (int c = 0; c < d; ++c) at(out).val[r * d + c] /= z;
    }
    backward_ops_.push_back([this, a, out, rows, d] {
        for (std::size_t r = 0; r < rows; ++r) {
            Scalar dot = 0.0;
            for (int c = 0; c < d; ++c)
                dot += at(out).grd[r * d + c] * at(out).val[r * d + c];
            for (int c = 0; c < d; ++c)
                at(a).grd[r * d + c] +=
                    at(out).val[r * d + c] * (at(out).grd[r * d + c] - dot);
        }
    });
    return out;
}

int Graph::layernorm(int x, int gamma, int beta, Scalar eps) {
    const int d = at(x).shape.back();
    if (at(gamma).shape != std::vector<int>{d} || at(beta).shape != std::vector<int>{d})
        throw DataError("layernorm: parameter shape mismatch");
    const std::size_t rows = rows_before_last(at(x).shape);
    const int out = make(at(x).shape);
    std::vector<Scalar> inv_sigma(rows), xhat(rows * static_cast<std::size_t>(d));
    for (std::size_t r = 0; r < rows; ++r) {
        Scalar mu = 0.0;
        for (int c = 0; c < d; ++c) mu += at(x).val[r * d + c];
        mu /= d;
        Scalar var = 0.0;
        for (int c = 0; c < d; ++c) {
            const Scalar diff = at(x).val[r * d + c] - mu;
            var += diff * diff;
        }
        var /= d;
        inv_sigma[r] = 1.0 / std::sqrt(var + eps);
        for (int c = 0; c < d; ++c) {
            xhat[r * d + c] = (at(x).val[r * d + c] - mu) * inv_sigma[r];
            at(out).val[r * d + c] =
                at(gamma).val[static_cast<std::size_t>(c)] * xhat[r * d + c] +
                at(beta).val[static_cast<std::size_t>(c)];
        }
    }
    backward_ops_.push_back([this, x, gamma, beta, out, rows, d,
                             inv_sigma = std::move(inv_sigma), xhat = std::move(xhat)] {
        for (std::size_t r = 0; r < rows; ++r) {
            Scalar mean_dyh = 0.0, mean_dyh_xhat = 0.0;
            for (int c = 0; c < d; ++c) {
                const Scalar dyh =
                    at(out).grd[r * d + c] * at(gamma).val[static_cast<std::size_t>(c)];
                mean_dyh += dyh;
                mean_dyh_xhat += dyh * xhat[r * d + c];
            }
            mean_dyh /= d;
            mean_dyh_xhat /= d;
            for (int c = 0; c < d; ++c) {
                const Scalar dyh =
                    at(out).grd[r * d + c] * at(gamma).val[static_cast<std::size_t>(c)];
                at(x).grd[r * d + c] +=
                    inv_sigma[r] * (dyh - mean_dyh - xhat[r * d + c] * mean_dyh_xhat);
            }
        }
        for (int c = 0; c < d; ++c) {
            Scalar dg = 0.0, db = 0.0;
            for (std::size_t r = 0; r < rows; ++r) {
                dg += at(out).grd[r * d + c] * xhat[r * d + c];
                db += at(out).grd[r * d + c];
            }
            at(gamma).grd[static_cast<std::size_t>(c)] += dg;
            at(beta).grd[static_cast<std::size_t>(c)] += db;
        }
    });
    return out;
}

int Graph::reshape(int a, std::vector<int> shape) {
    if (Tensor::numel(shape) != at(a).val.size()) throw DataError("reshape: size mismatch");
    const int out = make(std::move(shape));
    at(out).val = at(a).val;
    backward_ops_.push_back([this, a, out] {
        for (std::size_t i = 0; i < at(out).grd.size(); ++i) at(a).grd[i] += at(out).grd[i];
    });
    return out;
}

int Graph::concat_lastdim(int a, int b) {
    const std::vector<int> as = at(a).shape;
    const std::vector<int> bs = at(b).shape;
    if (as.size() != bs.size()) throw DataError("concat_lastdim: rank mismatch");
    for (std::size_t i = 0; i + 1 < as.size(); ++i)
        if (as[i] != bs[i]) throw DataError("concat_lastdim: leading shape mismatch");
    const int da = as.back(), db = bs.back();
    std::vector<int> out_shape = as;
    out_shape.back() = da + db;
    const int out = make(out_shape);
    const std::size_t rows = rows_before_last(as);
    for (std::size_t r = 0; r < rows; ++r) {
        for (int c = 0; c < da; ++c)
            at(out).val[r * (da + db) + c] = at(a).val[r * da + c];
        for (int c = 0; c < db; ++c)
            at(out).val[r * (da + db) + da + c] = at(b).val[r * db + c];
    }
    backward_ops_.push_back([this, a, b, out, rows, da, db] {
        for (std::size_t r = 0; r < rows; ++r) {
            for (int c = 0; c < da; ++c)
                at(a).grd[r * da + c] += at(out).grd[r * (da + db) + c];
            for (int c = 0; c < db; ++c)
                at(b).grd[r * db + c] += at(out).grd[r * (da + db) + da + c];
        }
    });
    return out;
}

int Graph::slice_lastdim(int a, int offset, int len) {
    const std::vector<int> as = at(a).shape;
    const int d = as.back();
    if (offset < 0 || len < 1 || offset + len > d) throw DataError("slice_lastdim: range");
    std::vector<int> out_shape = as;
    out_shape.back() = len;
    const int out = make(out_shape);
    const std::size_t rows = rows_before_last(as);
    for (std::size_t r = 0; r < rows; ++r)
        for (int c = 0; c < len; ++c)
            at(out).val[r * len + c] = at(a).val[r * d + offset + c];
    backward_ops_.push_back([this, a, out, rows, d, offset, len] {
        for (std::size_t r = 0; r < rows; ++r)
            for (int c = 0; c < len; ++c)
                at(a).grd[r * d + offset + c] += at(out).grd[r * len + c];
    });
    return out;
}

int Graph::split_heads(int x, int heads) {
    const std::vector<int> s = at(x).shape;
    if (s.size() != 3 || s[2] % heads) throw DataError("split_heads: shape mismatch");
    const int b = s[0], t = s[1], d = s[2], dh = d / heads;
    const int out = make({b * heads, t, dh});
    for (int bi = 0; bi < b; ++bi)
        for (int hd = 0; hd < heads; ++hd)
            for (int i = 0; i < t; ++i)
                for (int c = 0; c < dh; ++c)
                    at(out).val[((static_cast<std::size_t>(bi) * heads + hd) * t + i) * dh + c] =
                        at(x).val[(static_cast<std::size_t>(bi) * t + i) * d + hd * dh + c];
    backward_ops_.push_back([this, x, out, b, t, d, dh, heads] {
        for (int bi = 0; bi < b; ++bi)
            for (int hd = 0; hd < heads; ++hd)
                for (int i = 0; i < t; ++i)
                    for (int c = 0; c < dh; ++c)
                        at(x).grd[(static_cast<std::size_t>(bi) * t + i) * d + hd * dh + c] +=
                            at(out).grd[((static_cast<std::size_t>(bi) * heads + hd) * t + i) * dh + c];
    });
    return out;
}

int Graph::merge_heads(int x, int heads) {
    const std::vector<int> s = at(x).shape;
    if (s.size() != 3 || s[0] % heads) throw DataError("merge_heads: shape mismatch");
    const int b = s[0] / heads, t = s[1], dh = s[2], d = dh * heads;
    const int out = make({b, t, d});
    for (int bi = 0; bi < b; ++bi)
        for (int hd = 0; hd < heads; ++hd)
            for (int i = 0; i < t; ++i)
                for (int c = 0; c < dh; ++c)
                    at(out).val[(static_cast<std::size_t>(bi) * t + i) * d + hd * dh + c] =
                        at(x).val[((static_cast<std::size_t>(bi) * heads + hd) * t + i) * dh + c];
    backward_ops_.push_back([this, x, out, b, t, d, dh, heads] {
        for (int bi = 0; bi < b; ++bi)
            for (int hd = 0; hd < heads; ++hd)
                for (int i = 0; i < t; ++i)
                    for (int c = 0; c < dh; ++c)
                        at(x).grd[((static_cast<std::size_t>(bi) * heads + hd) * t + i) * dh + c] +=
                            at(out).grd[(static_cast<std::size_t>(bi) * t + i) * d + hd * dh + c];
    });
    return out;
}

int Graph::sum_axis1(int x) {
    const std::vector<int> s = at(x).shape;
    if (s.size() != 3) throw DataError("sum_axis1: need [B,T,D]");
    const int b = s[0], t = s[1], d = s[2];
    const int out = make({b, d});
    for (int bi = 0; bi < b; ++bi)
        for (int c = 0; c < d; ++c) {
            Scalar acc = 0.0;
            for (int i = 0; i < t; ++i)
                acc += at(x).val[(static_cast<std::size_t>(bi) * t + i) * d + c];
            at(out).val[static_cast<std::size_t>(bi) * d + c] = acc;
        }
    backward_ops_.push_back([this, x, out, b, t, d] {
        for (int bi = 0; bi < b; ++bi)
            for (int i = 0; i < t; ++i)
                for (int c = 0; c < d; ++c)
                    at(x).grd[(static_cast<std::size_t>(bi) * t + i) * d + c] +=
                        at(out).grd[static_cast<std::size_t>(bi) * d + c];
    });
    return out;
}

int Graph::mean_axis1(int x) {
    const int t = at(x).shape[1];
    return scale(sum_axis1(x), 1.0 / static_cast<Scalar>(t));
}

int Graph::row_sum(int x) {
    const std::vector<int> s = at(x).shape;
    if (s.size() != 2) throw DataError("row_sum: need [B,N]");
    const int b = s[0], n = s[1];
    const int out = make({b});
    for (int bi = 0; bi < b; ++bi) {
        Scalar acc = 0.0;
        for (int i = 0; i < n; ++i) acc += at(x).val[static_cast<std::size_t>(bi) * n + i];
        at(out).val[static_cast<std::size_t>(bi)] = acc;
    }
    backward_ops_.push_back([this, x, out, b, n] {
        for (int bi = 0; bi < b; ++bi)
            for (int i = 0; i < n; ++i)
                at(x).grd[static_cast<std::size_t>(bi) * n + i] +=
                    at(out).grd[static_cast<std::size_t>(bi)];
    });
    return out;
}

int Graph::mean_all(int x) {
    const std::size_t n = at(x).val.size();
    const int out = make({1});
    Scalar acc = 0.0;
    for (Scalar v : at(x).val) acc += v;
    at(out).val[0] = acc / static_cast<Scalar>(n);
    backward_ops_.push_back([this, x, out, n] {
        const Scalar g = at(out).grd[0] / static_cast<Scalar>(n);
        for (std::size_t i = 0; i < n; ++i) at(x).grd[i] += g;
    });
    return out;
}

void Graph::backward(int loss) {
    if (at(loss).val.size() != 1) throw DataError("backward: loss must be a scalar node");
    at(loss).grd[0] = 1.0;
    for (auto it = backward_ops_.rbegin(); it != backward_ops_.rend(); ++it) (*it)();
    for (auto& [id, p] : param_nodes_) {
        const auto& g = at(id).grd;
        for (std::size_t i = 0; i < g.size(); ++i) p->grad.data[i] += g[i];
    }
}

}  // namespace optode::nn
