#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "optode/common.hpp"

namespace optode::nn {

/// Dense row-major tensor of doubles.
struct Tensor {
    std::vector<int> shape;
    std::vector<Scalar> data;

    Tensor() = default;
    explicit Tensor(std::vector<int> s) : shape(std::move(s)) {
        data.assign(numel(shape), 0.0);
    }
    static std::size_t numel(const std::vector<int>& s) {
        std::size_t n = 1;
        for (int d : s) n *= static_cast<std::size_t>(d);
        return n;
    }
    std::size_t size() const { return data.size(); }
};

/// Trainable parameter with its gradient and optimizer state.
struct Param {
    std::string name;
    Tensor value;
    Tensor grad;
    Tensor adam_m;
    Tensor adam_v;

    explicit Param(std::string n, std::vector<int> shape)
        : name(std::move(n)), value(shape), grad(shape), adam_m(shape), adam_v(shape) {}
};

/// Eager reverse-mode tape. Every op computes its value immediately and
/// pushes a closure that scatters gradients to its inputs; backward() runs
/// the closures in reverse creation order. Parallel loops inside ops write
/// disjoint elements only, so results are bit-identical for any thread count.
class Graph {
public:
    /// Leaf holding externally supplied values (no gradient consumer).
    int input(std::vector<int> shape, const Scalar* data);
    int input(std::vector<int> shape, const std::vector<Scalar>& data) {
        return input(std::move(shape), data.data());
    }

    /// Leaf bound to a Param; backward() accumulates into p.grad.
    int param(Param& p);

    // Elementwise and broadcast arithmetic.
    int add(int a, int b);                  ///< same shape
    int sub(int a, int b);                  ///< same shape
    int mul(int a, int b);                  ///< same shape
    int div(int a, int b);                  ///< same shape
    int scale(int a, Scalar c);
    int add_scalar(int a, Scalar c);
    int add_bias(int x, int bias);          ///< x [..., D] + bias [D]
    int add_pos(int x, int pos);            ///< x [B,T,D] + pos [T,D]
    int mul_bcast_last(int x, int w);       ///< x [B,T,D] * w [B,T]
    int mul_bcast_col(int x, int s);        ///< x [B,N] * s [B]
    int clamp_min(int a, Scalar floor);     ///< gradient blocked where clamped

    // Linear algebra.
    int matmul(int x, int w);               ///< x [..., D] * w [D, E]
    int bmm(int a, int b);                  ///< [N,T,K] x [N,K,S] -> [N,T,S]
    int bmm_nt(int a, int b);               ///< [N,T,K] x [N,S,K]^T -> [N,T,S]

    // Convolutional path.
    int conv2d(int x, int w, int b, int stride, int pad);  ///< x [B,C,H,W], w [O,C,k,k]
    int chw_to_tokens(int x);               ///< [B,C,G,G] -> [B,G*G,C]
    int extract_patches(int x, int patch);  ///< [B,C,H,W] -> [B,T,C*p*p]
    int upsample_nearest(int x, int factor);///< [B,C,h,w] -> [B,C,h*f,w*f]

    // Nonlinearities and normalization.
    int relu(int a);
    int gelu(int a);
    int sigmoid(int a);
    int softplus(int a);
    int softmax_lastdim(int a);
    int layernorm(int x, int gamma, int beta, Scalar eps = 1e-5);

    // Shape plumbing and reductions.
    int reshape(int a, std::vector<int> shape);
    int concat_lastdim(int a, int b);       ///< [R, D1] ++ [R, D2]
    int slice_lastdim(int a, int offset, int len);
    int split_heads(int x, int heads);      ///< [B,T,D] -> [B*h, T, D/h]
    int merge_heads(int x, int heads);      ///< [B*h,T,d] -> [B,T,d*h]
    int sum_axis1(int x);                   ///< [B,T,D] -> [B,D]
    int mean_axis1(int x);                  ///< [B,T,D] -> [B,D]
    int row_sum(int x);                     ///< [B,N] -> [B]
    int mean_all(int x);                    ///< [..] -> [1]

    const std::vector<int>& shape(int id) const { return nodes_[static_cast<std::size_t>(id)].shape; }
    const std::vector<Scalar>& value(int id) const { return nodes_[static_cast<std::size_t>(id)].val; }
    const std::vector<Scalar>& grad(int id) const { return nodes_[static_cast<std::size_t>(id)].grd; }

    /// Seeds d(loss)/d(loss) = 1, runs all op closures in reverse order, then
    /// adds leaf gradients into their bound Params.
    void backward(int loss);

private:
    struct Node {
        std::vector<int> shape;
        std::vector<Scalar> val;
        std::vector<Scalar> grd;
    };
    int make(std::vector<int> shape);
    Node& at(int id) { return nodes_[static_cast<std::size_t>(id)]; }

    std::vector<Node> nodes_;
    std::vector<std::function<void()>> backward_ops_;
    std::vector<std::pair<int, Param*>> param_nodes_;
};

}  // namespace optode::nn
