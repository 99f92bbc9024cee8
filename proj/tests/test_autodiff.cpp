#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <functional>

#include "optode/autodiff.hpp"
#include "optode/rng.hpp"

using namespace optode;
using namespace optode::nn;

namespace {

void randomize(Param& p, Rng& rng, Scalar scale = 0.5) {
    for (auto& v : p.value.data) v = rng.uniform(-scale, scale);
}

/// Max relative error between reverse-mode and central-difference gradients
/// of a scalar-valued builder over every element of every param.
Scalar fd_check(std::vector<Param*> params,
                const std::function<int(Graph&)>& build, Scalar eps = 1e-6) {
    for (Param* p : params) std::fill(p->grad.data.begin(), p->grad.data.end(), 0.0);
    Graph g;
    const int loss = build(g);
    g.backward(loss);

    auto eval = [&]() {
        Graph h;
        return h.value(build(h))[0];
    };

    Scalar worst = 0.0;
    for (Param* p : params) {
        for (std::size_t i = 0; i < p->value.size(); ++i) {
            const Scalar keep = p->value.data[i];
            p->value.data[i] = keep + eps;
            const Scalar up = eval();
            p->value.data[i] = keep - eps;
            const Scalar dn = eval();
            p->value.data[i] = keep;
            const Scalar fd = (up - dn) / (2.0 * eps);
            const Scalar an = p->grad.data[i];
            const Scalar rel = std::abs(fd - an) / std::max({std::abs(fd), std::abs(an), 1e-4});
            worst = std::max(worst, rel);
        }
    }
    return worst;
}

}  // namespace

TEST_CASE("matmul + bias + relu chain") {
    Rng rng(1);
    Param x("x", {3, 4}), w("w", {4, 5}), b("b", {5});
    randomize(x, rng);
    randomize(w, rng);
    randomize(b, rng);
    const Scalar err = fd_check({&x, &w, &b}, [&](Graph& g) {
        return g.mean_all(g.relu(g.add_bias(g.matmul(g.param(x), g.param(w)), g.param(b))));
    });
    CHECK(err <= 1e-6);
}

TEST_CASE("eltwise add/sub/mul/div/scale/add_scalar") {
    Rng rng(2);
    Param a("a", {2, 3}), b("b", {2, 3});
    randomize(a, rng);
    randomize(b, rng);
    for (auto& v : b.value.data) v += v >= 0 ? 1.5 : -1.5;  // keep division well away from 0
    const Scalar err = fd_check({&a, &b}, [&](Graph& g) {
        const int na = g.param(a);
        const int nb = g.param(b);
        const int u = g.add(g.mul(na, nb), g.sub(na, nb));
        const int v = g.div(u, nb);
        return g.mean_all(g.add_scalar(g.scale(v, 0.7), 0.3));
    });
    CHECK(err <= 1e-6);
}

TEST_CASE("gelu, sigmoid, softplus, clamp_min") {
    Rng rng(3);
    Param a("a", {4, 4});
    randomize(a, rng, 2.0);
    const Scalar err = fd_check({&a}, [&](Graph& g) {
        const int n = g.param(a);
        const int u = g.add(g.gelu(n), g.add(g.sigmoid(n), g.softplus(n)));
        return g.mean_all(g.clamp_min(u, 0.4));
    });
    CHECK(err <= 1e-5);  // clamp kink tolerated away from boundary
}

TEST_CASE("softmax over the last dim") {
    Rng rng(4);
    Param a("a", {3, 6}), w("w", {3, 6});
    randomize(a, rng, 2.0);
    randomize(w, rng);
    const Scalar err = fd_check({&a, &w}, [&](Graph& g) {
        return g.mean_all(g.mul(g.softmax_lastdim(g.param(a)), g.param(w)));
    });
    CHECK(err <= 1e-6);
}

TEST_CASE("layernorm") {
    Rng rng(5);
    Param x("x", {4, 7}), gamma("g", {7}), beta("b", {7});
    randomize(x, rng, 1.5);
    randomize(gamma, rng);
    for (auto& v : gamma.value.data) v += 1.0;
    randomize(beta, rng);
    Param w("w", {4, 7});
    randomize(w, rng);
    const Scalar err = fd_check({&x, &gamma, &beta, &w}, [&](Graph& g) {
        const int y = g.layernorm(g.param(x), g.param(gamma), g.param(beta));
        return g.mean_all(g.mul(y, g.param(w)));
    });
    CHECK(err <= 1e-5);
}

TEST_CASE("bmm and bmm_nt") {
    Rng rng(6);
    Param a("a", {2, 3, 4}), b("b", {2, 4, 5}), c("c", {2, 6, 5});
    randomize(a, rng);
    randomize(b, rng);
    randomize(c, rng);
    const Scalar err = fd_check({&a, &b, &c}, [&](Graph& g) {
        const int ab = g.bmm(g.param(a), g.param(b));     // [2,3,5]
        const int abc = g.bmm_nt(ab, g.param(c));  // [2,3,5] x [2,6,5]^T -> [2,3,6]
        return g.mean_all(abc);
    });
    CHECK(err <= 1e-6);
}

TEST_CASE("conv2d stride 1 and stride 2") {
    Rng rng(7);
    Param x("x", {2, 3, 6, 6}), w1("w1", {4, 3, 3, 3}), b1("b1", {4});
    Param w2("w2", {5, 4, 3, 3}), b2("b2", {5});
    randomize(x, rng);
    randomize(w1, rng);
    randomize(b1, rng);
    randomize(w2, rng);
    randomize(b2, rng);
    const Scalar err = fd_check({&x, &w1, &b1, &w2, &b2}, [&](Graph& g) {
        const int c1 = g.relu(g.conv2d(g.param(x), g.param(w1), g.param(b1), 1, 1));
        const int c2 = g.conv2d(c1, g.param(w2), g.param(b2), 2, 1);
        return g.mean_all(c2);
    });
    CHECK(err <= 1e-5);
}

TEST_CASE("patch extraction, positional add, token reshuffles") {
    Rng rng(8);
    Param x("x", {2, 3, 4, 4}), emb("emb", {12, 6}), pos("pos", {4, 6});
    randomize(x, rng);
    randomize(emb, rng);
    randomize(pos, rng);
    const Scalar err = fd_check({&x, &emb, &pos}, [&](Graph& g) {
        const int patches = g.extract_patches(g.param(x), 2);  // [2,4,12]
        const int tok = g.add_pos(g.matmul(patches, g.param(emb)), g.param(pos));
        const int heads = g.merge_heads(g.split_heads(tok, 2), 2);
        return g.mean_all(heads);
    });
    CHECK(err <= 1e-6);
}

TEST_CASE("attention block composite") {
    Rng rng(9);
    const int d = 8, t = 5, b = 2, h = 2;
    Param x("x", {b, t, d}), wq("wq", {d, d}), wk("wk", {d, d}), wv("wv", {d, d}),
        wo("wo", {d, d});
    randomize(x, rng);
    randomize(wq, rng);
    randomize(wk, rng);
    randomize(wv, rng);
    randomize(wo, rng);
    const Scalar err = fd_check({&x, &wq, &wk, &wv, &wo}, [&](Graph& g) {
        const int nx = g.param(x);
        const int q = g.split_heads(g.matmul(nx, g.param(wq)), h);
        const int k = g.split_heads(g.matmul(nx, g.param(wk)), h);
        const int v = g.split_heads(g.matmul(nx, g.param(wv)), h);
        const int scores = g.scale(g.bmm_nt(q, k), 1.0 / std::sqrt(static_cast<Scalar>(d / h)));
        const int probs = g.softmax_lastdim(scores);
        const int ctx = g.merge_heads(g.bmm(probs, v), h);
        return g.mean_all(g.matmul(ctx, g.param(wo)));
    });
    CHECK(err <= 1e-5);
}

TEST_CASE("upsample, broadcast products, row reductions") {
    Rng rng(10);
    Param m("m", {2, 1, 2, 2}), w("w", {2, 3}), s("s", {2});
    randomize(m, rng);
    randomize(w, rng);
    for (auto& v : s.value.data) v = rng.uniform(0.5, 1.5);
    Param tok("tok", {2, 3, 4});
    randomize(tok, rng);
    const Scalar err = fd_check({&m, &w, &s, &tok}, [&](Graph& g) {
        const int up = g.upsample_nearest(g.param(m), 2);        // [2,1,4,4]
        const int flat = g.reshape(up, {2, 16});
        const int scaled = g.mul_bcast_col(flat, g.param(s));    // [2,16]
        const int rs = g.row_sum(scaled);                        // [2]
        const int gated = g.mul_bcast_last(g.param(tok), g.param(w));  // [2,3,4]
        const int pooled = g.sum_axis1(gated);                   // [2,4]
        const int pooled_mean = g.mean_all(g.concat_lastdim(
            pooled, g.reshape(rs, {2, 1})));
        return pooled_mean;
    });
    CHECK(err <= 1e-6);
}

TEST_CASE("slice_lastdim and mean_axis1") {
    Rng rng(11);
    Param x("x", {2, 4, 6});
    randomize(x, rng);
    const Scalar err = fd_check({&x}, [&](Graph& g) {
        const int n = g.param(x);
        const int a = g.slice_lastdim(n, 0, 2);
        const int b = g.slice_lastdim(n, 2, 4);
        const int am = g.mean_axis1(a);
        const int bm = g.mean_axis1(b);
        return g.mean_all(g.concat_lastdim(am, bm));
    });
    CHECK(err <= 1e-6);
}

TEST_CASE("same graph twice gives bit-identical values and gradients") {
    Rng rng(12);
    Param x("x", {3, 3}), w("w", {3, 3});
    randomize(x, rng);
    randomize(w, rng);
    auto run = [&]() {
        std::fill(x.grad.data.begin(), x.grad.data.end(), 0.0);
        std::fill(w.grad.data.begin(), w.grad.data.end(), 0.0);
        Graph g;
        const int loss = g.mean_all(g.gelu(g.matmul(g.param(x), g.param(w))));
        g.backward(loss);
        return std::make_pair(g.value(loss)[0], x.grad.data);
    };
    const auto a = run();
    const auto b = run();
    CHECK(a.first == b.first);
    CHECK(a.second == b.second);
}
