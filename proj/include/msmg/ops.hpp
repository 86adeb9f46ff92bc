#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <vector>

#include "msmg/graph.hpp"
#include "msmg/tensor.hpp"

// Differentiable dense-tensor kernels. Each op runs its forward pass eagerly
// and records a closure computing the vector-Jacobian product on the tape.
// Plain loops over row-major data; deterministic, single-threaded.

namespace msmg::ops {

namespace detail {

inline void axis_strides(const std::vector<std::size_t>& shape, std::size_t axis,
                         std::size_t& outer, std::size_t& len, std::size_t& inner) {
    if (axis >= shape.size()) throw ShapeError("axis " + std::to_string(axis) + " out of range");
    outer = 1;
    for (std::size_t i = 0; i < axis; ++i) outer *= shape[i];
    len = shape[axis];
    inner = 1;
    for (std::size_t i = axis + 1; i < shape.size(); ++i) inner *= shape[i];
}

}  // namespace detail

template <class T>
int constant(Graph<T>& g, Tensor<T> v) {
    return g.leaf(std::move(v), false);
}

// ---------------------------------------------------------------------------
// elementwise arithmetic

// a + b; b may have dim0 == 1 against a's dim0 == N (batch broadcast).
template <class T>
int add(Graph<T>& g, int a, int b) {
    const Tensor<T>& av = g.value(a);
    const Tensor<T>& bv = g.value(b);
    if (!av.same_shape(bv)) {
        if (av.rank() != bv.rank() || bv.dim(0) != 1 ||
            !std::equal(av.shape.begin() + 1, av.shape.end(), bv.shape.begin() + 1))
            throw ShapeError("add: shape mismatch " + shape_str(av.shape) + " vs " +
                             shape_str(bv.shape));
    }
    Tensor<T> out(av.shape);
    const std::size_t bn = bv.size();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] + bv[i % bn];
    return g.op(std::move(out), {a, b}, [a, b, bn](Graph<T>& gg, int self) {
        const Tensor<T>& go = gg.grad(self);
        if (gg.needs_grad(a)) {
            Tensor<T>& ga = gg.grad(a);
            for (std::size_t i = 0; i < go.size(); ++i) ga[i] += go[i];
        }
        if (gg.needs_grad(b)) {
            Tensor<T>& gb = gg.grad(b);
            for (std::size_t i = 0; i < go.size(); ++i) gb[i % bn] += go[i];
        }
    });
}

template <class T>
int add_scalar(Graph<T>& g, int a, T c) {
    Tensor<T> out = g.value(a);
    for (auto& v : out.data) v += c;
    return g.op(std::move(out), {a}, [a](Graph<T>& gg, int self) {
        const Tensor<T>& go = gg.grad(self);
        Tensor<T>& ga = gg.grad(a);
        for (std::size_t i = 0; i < go.size(); ++i) ga[i] += go[i];
    });
}

template <class T>
int scale(Graph<T>& g, int a, T c) {
    Tensor<T> out = g.value(a);
    for (auto& v : out.data) v *= c;
    return g.op(std::move(out), {a}, [a, c](Graph<T>& gg, int self) {
        const Tensor<T>& go = gg.grad(self);
        Tensor<T>& ga = gg.grad(a);
        for (std::size_t i = 0; i < go.size(); ++i) ga[i] += c * go[i];
    });
}

template <class T>
int mul(Graph<T>& g, int a, int b) {
    const Tensor<T>& av = g.value(a);
    const Tensor<T>& bv = g.value(b);
    check_same_shape(av, bv, "mul");
    Tensor<T> out(av.shape);
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * bv[i];
    return g.op(std::move(out), {a, b}, [a, b](Graph<T>& gg, int self) {
        const Tensor<T>& go = gg.grad(self);
        const Tensor<T>& av = gg.value(a);
        const Tensor<T>& bv = gg.value(b);
        if (gg.needs_grad(a)) {
            Tensor<T>& ga = gg.grad(a);
            for (std::size_t i = 0; i < go.size(); ++i) ga[i] += go[i] * bv[i];
        }
        if (gg.needs_grad(b)) {
            Tensor<T>& gb = gg.grad(b);
            for (std::size_t i = 0; i < go.size(); ++i) gb[i] += go[i] * av[i];
        }
    });
}

template <class T>
int div(Graph<T>& g, int a, int b) {
    const Tensor<T>& av = g.value(a);
    const Tensor<T>& bv = g.value(b);
    check_same_shape(av, bv, "div");
    Tensor<T> out(av.shape);
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] / bv[i];
    return g.op(std::move(out), {a, b}, [a, b](Graph<T>& gg, int self) {
        const Tensor<T>& go = gg.grad(self);
        const Tensor<T>& av = gg.value(a);
        const Tensor<T>& bv = gg.value(b);
        if (gg.needs_grad(a)) {
            Tensor<T>& ga = gg.grad(a);
            for (std::size_t i = 0; i < go.size(); ++i) ga[i] += go[i] / bv[i];
        }
        if (gg.needs_grad(b)) {
            Tensor<T>& gb = gg.grad(b);
            for (std::size_t i = 0; i < go.size(); ++i)
                gb[i] -= go[i] * av[i] / (bv[i] * bv[i]);
        }
    });
}

// ---------------------------------------------------------------------------
// activations

template <class T>
int relu(Graph<T>& g, int a) {
    Tensor<T> out = g.value(a);
    for (auto& v : out.data) v = v > T(0) ? v : T(0);
    return g.op(std::move(out), {a}, [a](Graph<T>& gg, int self) {
        const Tensor<T>& go = gg.grad(self);
        const Tensor<T>& av = gg.value(a);
        Tensor<T>& ga = gg.grad(a);
        for (std::size_t i = 0; i < go.size(); ++i)
            if (av[i] > T(0)) ga[i] += go[i];
    });
}

// tanh-approximation GELU; closed-form derivative.
template <class T>
int gelu(Graph<T>& g, int a) {
    const T c = static_cast<T>(0.7978845608028654);  // sqrt(2/pi)
    const T k = static_cast<T>(0.044715);
    Tensor<T> out = g.value(a);
    for (auto& v : out.data) {
        T u = c * (v + k * v * v * v);
        v = T(0.5) * v * (T(1) + std::tanh(u));
    }
    return g.op(std::move(out), {a}, [a, c, k](Graph<T>& gg, int self) {
        const Tensor<T>& go = gg.grad(self);
        const Tensor<T>& av = gg.value(a);
        Tensor<T>& ga = gg.grad(a);
        for (std::size_t i = 0; i < go.size(); ++i) {
            T x = av[i];
            T u = c * (x + k * x * x * x);
            T th = std::tanh(u);
            T d = T(0.5) * (T(1) + th) +
                  T(0.5) * x * (T(1) - th * th) * c * (T(1) + T(3) * k * x * x);
            ga[i] += go[i] * d;
        }
    });
}

template <class T>
int activation(Graph<T>& g, int a, const std::string& kind) {
    if (kind == "relu") return relu(g, a);
    if (kind == "gelu") return gelu(g, a);
    throw ConfigError("unknown activation kind: " + kind);
}

template <class T>
int sigmoid(Graph<T>& g, int a) {
    Tensor<T> out = g.value(a);
    for (auto& v : out.data) {
        double x = static_cast<double>(v);
        v = static_cast<T>(x >= 0 ? 1.0 / (1.0 + std::exp(-x))
                                  : std::exp(x) / (1.0 + std::exp(x)));
    }
    return g.op(std::move(out), {a}, [a](Graph<T>& gg, int self) {
        const Tensor<T>& go = gg.grad(self);
        const Tensor<T>& ov = gg.value(self);
        Tensor<T>& ga = gg.grad(a);
        for (std::size_t i = 0; i < go.size(); ++i)
            ga[i] += go[i] * ov[i] * (T(1) - ov[i]);
    });
}

// sqrt(x + eps), the eps guarding the derivative at zero.
template <class T>
int sqrt_eps(Graph<T>& g, int a, T eps) {
    Tensor<T> out = g.value(a);
    for (auto& v : out.data) v = std::sqrt(v + eps);
    return g.op(std::move(out), {a}, [a](Graph<T>& gg, int self) {
        const Tensor<T>& go = gg.grad(self);
        const Tensor<T>& ov = gg.value(self);
        Tensor<T>& ga = gg.grad(a);
        for (std::size_t i = 0; i < go.size(); ++i)
            ga[i] += go[i] / (T(2) * ov[i]);
    });
}

// ---------------------------------------------------------------------------
// softmax

// Max-subtracted softmax along `axis`.
template <class T>
int softmax(Graph<T>& g, int a, std::size_t axis) {
    const Tensor<T>& av = g.value(a);
    std::size_t outer, len, inner;
    detail::axis_strides(av.shape, axis, outer, len, inner);
    Tensor<T> out(av.shape);
    for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t in = 0; in < inner; ++in) {
            const std::size_t base = o * len * inner + in;
            T mx = av[base];
            for (std::size_t j = 1; j < len; ++j) mx = std::max(mx, av[base + j * inner]);
            T sum = T(0);
            for (std::size_t j = 0; j < len; ++j) {
                T e = std::exp(av[base + j * inner] - mx);
                out[base + j * inner] = e;
                sum += e;
            }
            for (std::size_t j = 0; j < len; ++j) out[base + j * inner] /= sum;
        }
    return g.op(std::move(out), {a}, [a, outer, len, inner](Graph<T>& gg, int self) {
        const Tensor<T>& go = gg.grad(self);
        const Tensor<T>& y = gg.value(self);
        Tensor<T>& ga = gg.grad(a);
        for (std::size_t o = 0; o < outer; ++o)
            for (std::size_t in = 0; in < inner; ++in) {
                const std::size_t base = o * len * inner + in;
                T dot = T(0);
                for (std::size_t j = 0; j < len; ++j)
                    dot += go[base + j * inner] * y[base + j * inner];
                for (std::size_t j = 0; j < len; ++j)
                    ga[base + j * inner] +=
                        y[base + j * inner] * (go[base + j * inner] - dot);
            }
    });
}

// ---------------------------------------------------------------------------
// shape manipulation

template <class T>
int reshape(Graph<T>& g, int a, std::vector<std::size_t> shape) {
    const Tensor<T>& av = g.value(a);
    if (numel(shape) != av.size())
        throw ShapeError("reshape: " + shape_str(av.shape) + " -> " + shape_str(shape) +
                         " changes element count");
    Tensor<T> out;
    out.shape = std::move(shape);
    out.data = av.data;
    return g.op(std::move(out), {a}, [a](Graph<T>& gg, int self) {
        const Tensor<T>& go = gg.grad(self);
        Tensor<T>& ga = gg.grad(a);
        for (std::size_t i = 0; i < go.size(); ++i) ga[i] += go[i];
    });
}

template <class T>
int permute(Graph<T>& g, int a, std::vector<std::size_t> perm) {
    const Tensor<T>& av = g.value(a);
    const std::size_t r = av.rank();
    if (perm.size() != r) throw ShapeError("permute: rank mismatch");
    std::vector<std::size_t> oshape(r), istride(r, 1), ostride(r, 1);
    for (std::size_t i = 0; i < r; ++i) oshape[i] = av.shape[perm[i]];
    for (std::size_t i = r; i-- > 1;) istride[i - 1] = istride[i] * av.shape[i];
    for (std::size_t i = r; i-- > 1;) ostride[i - 1] = ostride[i] * oshape[i];
    Tensor<T> out(oshape);
    std::vector<std::size_t> idx(r, 0);
    for (std::size_t oi = 0; oi < out.size(); ++oi) {
        std::size_t rem = oi, src = 0;
        for (std::size_t d = 0; d < r; ++d) {
            std::size_t q = rem / ostride[d];
            rem -= q * ostride[d];
            src += q * istride[perm[d]];
        }
        out[oi] = av[src];
    }
    return g.op(std::move(out), {a},
                [a, perm, istride, ostride, r](Graph<T>& gg, int self) {
        const Tensor<T>& go = gg.grad(self);
        Tensor<T>& ga = gg.grad(a);
        for (std::size_t oi = 0; oi < go.size(); ++oi) {
            std::size_t rem = oi, src = 0;
            for (std::size_t d = 0; d < r; ++d) {
                std::size_t q = rem / ostride[d];
                rem -= q * ostride[d];
                src += q * istride[perm[d]];
            }
            ga[src] += go[oi];
        }
    });
}

template <class T>
int concat(Graph<T>& g, std::size_t axis, const std::vector<int>& parts) {
    if (parts.empty()) throw ShapeError("concat: no inputs");
    const Tensor<T>& first = g.value(parts[0]);
    std::vector<std::size_t> oshape = first.shape;
    std::size_t total = 0;
    for (int p : parts) {
        const Tensor<T>& pv = g.value(p);
        if (pv.rank() != first.rank())
            throw ShapeError("concat: rank mismatch");
        for (std::size_t d = 0; d < first.rank(); ++d)
            if (d != axis && pv.shape[d] != first.shape[d])
                throw ShapeError("concat: mismatch on axis " + std::to_string(d));
        total += pv.shape[axis];
    }
    oshape[axis] = total;
    std::size_t outer, olen, inner;
    detail::axis_strides(oshape, axis, outer, olen, inner);
    Tensor<T> out(oshape);
    std::vector<std::size_t> lens, offsets;
    std::size_t off = 0;
    for (int p : parts) {
        std::size_t l = g.value(p).shape[axis];
        lens.push_back(l);
        offsets.push_back(off);
        off += l;
    }
    for (std::size_t pi = 0; pi < parts.size(); ++pi) {
        const Tensor<T>& pv = g.value(parts[pi]);
        for (std::size_t o = 0; o < outer; ++o)
            for (std::size_t j = 0; j < lens[pi]; ++j)
                for (std::size_t in = 0; in < inner; ++in)
                    out[(o * olen + offsets[pi] + j) * inner + in] =
                        pv[(o * lens[pi] + j) * inner + in];
    }
    std::vector<int> parts_copy = parts;
    return g.op(std::move(out), parts,
                [parts_copy, lens, offsets, outer, olen, inner](Graph<T>& gg, int self) {
        const Tensor<T>& go = gg.grad(self);
        for (std::size_t pi = 0; pi < parts_copy.size(); ++pi) {
            if (!gg.needs_grad(parts_copy[pi])) continue;
            Tensor<T>& gp = gg.grad(parts_copy[pi]);
            for (std::size_t o = 0; o < outer; ++o)
                for (std::size_t j = 0; j < lens[pi]; ++j)
                    for (std::size_t in = 0; in < inner; ++in)
                        gp[(o * lens[pi] + j) * inner + in] +=
                            go[(o * olen + offsets[pi] + j) * inner + in];
        }
    });
}

template <class T>
int slice(Graph<T>& g, int a, std::size_t axis, std::size_t start, std::size_t len) {
    const Tensor<T>& av = g.value(a);
    std::size_t outer, alen, inner;
    detail::axis_strides(av.shape, axis, outer, alen, inner);
    if (start + len > alen)
        throw ShapeError("slice: range [" + std::to_string(start) + "," +
                         std::to_string(start + len) + ") exceeds axis " +
                         std::to_string(axis) + " of " + shape_str(av.shape));
    std::vector<std::size_t> oshape = av.shape;
    oshape[axis] = len;
    Tensor<T> out(oshape);
    for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t j = 0; j < len; ++j)
            for (std::size_t in = 0; in < inner; ++in)
                out[(o * len + j) * inner + in] = av[(o * alen + start + j) * inner + in];
    return g.op(std::move(out), {a},
                [a, outer, alen, inner, start, len](Graph<T>& gg, int self) {
        const Tensor<T>& go = gg.grad(self);
        Tensor<T>& ga = gg.grad(a);
        for (std::size_t o = 0; o < outer; ++o)
            for (std::size_t j = 0; j < len; ++j)
                for (std::size_t in = 0; in < inner; ++in)
                    ga[(o * alen + start + j) * inner + in] += go[(o * len + j) * inner + in];
    });
}

// N×C×H×W -> N×(H·W)×C
template <class T>
int flatten_spatial(Graph<T>& g, int a) {
    const Tensor<T>& av = g.value(a);
    if (av.rank() != 4) throw ShapeError("flatten_spatial: expected rank-4 NCHW");
    const std::size_t n = av.dim(0), c = av.dim(1), hw = av.dim(2) * av.dim(3);
    int p = permute(g, a, {0, 2, 3, 1});
    return reshape(g, p, {n, hw, c});
}

// N×(H·W)×C -> N×C×H×W
template <class T>
int unflatten_spatial(Graph<T>& g, int a, std::size_t h, std::size_t w) {
    const Tensor<T>& av = g.value(a);
    if (av.rank() != 3) throw ShapeError("unflatten_spatial: expected rank-3 N×L×C");
    if (av.dim(1) != h * w)
        throw ShapeError("unflatten_spatial: token count " + std::to_string(av.dim(1)) +
                         " != " + std::to_string(h) + "*" + std::to_string(w));
    int r = reshape(g, a, {av.dim(0), h, w, av.dim(2)});
    return permute(g, r, {0, 3, 1, 2});
}

// ---------------------------------------------------------------------------
// matmul / linear

// A[...,M,K] · B[...,K,N]. Leading dims must match, or B may be rank-2
// (shared across all leading indices, e.g. a weight matrix).
template <class T>
int matmul(Graph<T>& g, int a, int b) {
    const Tensor<T>& av = g.value(a);
    const Tensor<T>& bv = g.value(b);
    if (av.rank() < 2 || bv.rank() < 2) throw ShapeError("matmul: rank < 2");
    const std::size_t M = av.shape[av.rank() - 2], K = av.shape[av.rank() - 1];
    const std::size_t Kb = bv.shape[bv.rank() - 2], N = bv.shape[bv.rank() - 1];
    if (K != Kb)
        throw ShapeError("matmul: inner dims " + std::to_string(K) + " vs " +
                         std::to_string(Kb));
    const bool shared_b = bv.rank() == 2 && av.rank() > 2;
    std::size_t batch = av.size() / (M * K);
    if (!shared_b) {
        if (!std::equal(av.shape.begin(), av.shape.end() - 2, bv.shape.begin()) ||
            av.rank() != bv.rank())
            throw ShapeError("matmul: leading dims differ, " + shape_str(av.shape) + " vs " +
                             shape_str(bv.shape));
    }
    std::vector<std::size_t> oshape(av.shape.begin(), av.shape.end() - 1);
    oshape.push_back(N);
    Tensor<T> out(oshape);
    for (std::size_t bt = 0; bt < batch; ++bt) {
        const T* A = av.data.data() + bt * M * K;
        const T* B = bv.data.data() + (shared_b ? 0 : bt * K * N);
        T* C = out.data.data() + bt * M * N;
        for (std::size_t m = 0; m < M; ++m)
            for (std::size_t k = 0; k < K; ++k) {
                const T amk = A[m * K + k];
                const T* brow = B + k * N;
                T* crow = C + m * N;
                for (std::size_t nn = 0; nn < N; ++nn) crow[nn] += amk * brow[nn];
            }
    }
    return g.op(std::move(out), {a, b},
                [a, b, M, K, N, batch, shared_b](Graph<T>& gg, int self) {
        const Tensor<T>& go = gg.grad(self);
        const Tensor<T>& av = gg.value(a);
        const Tensor<T>& bv = gg.value(b);
        if (gg.needs_grad(a)) {
            Tensor<T>& ga = gg.grad(a);
            for (std::size_t bt = 0; bt < batch; ++bt) {
                const T* G = go.data.data() + bt * M * N;
                const T* B = bv.data.data() + (shared_b ? 0 : bt * K * N);
                T* dA = ga.data.data() + bt * M * K;
                for (std::size_t m = 0; m < M; ++m)
                    for (std::size_t nn = 0; nn < N; ++nn) {
                        const T gmn = G[m * N + nn];
                        for (std::size_t k = 0; k < K; ++k)
                            dA[m * K + k] += gmn * B[k * N + nn];
                    }
            }
        }
        if (gg.needs_grad(b)) {
            Tensor<T>& gb = gg.grad(b);
            for (std::size_t bt = 0; bt < batch; ++bt) {
                const T* G = go.data.data() + bt * M * N;
                const T* A = av.data.data() + bt * M * K;
                T* dB = gb.data.data() + (shared_b ? 0 : bt * K * N);
                for (std::size_t k = 0; k < K; ++k)
                    for (std::size_t m = 0; m < M; ++m) {
                        const T amk = A[m * K + k];
                        for (std::size_t nn = 0; nn < N; ++nn)
                            dB[k * N + nn] += amk * G[m * N + nn];
                    }
            }
        }
    });
}

// Broadcast-add a [E] vector along the last axis.
template <class T>
int add_lastdim(Graph<T>& g, int a, int bias) {
    const Tensor<T>& av = g.value(a);
    const Tensor<T>& bv = g.value(bias);
    const std::size_t E = av.shape.back();
    if (bv.size() != E)
        throw ShapeError("bias: expected " + std::to_string(E) + " values, got " +
                         std::to_string(bv.size()));
    Tensor<T> out = av;
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += bv[i % E];
    return g.op(std::move(out), {a, bias}, [a, bias, E](Graph<T>& gg, int self) {
        const Tensor<T>& go = gg.grad(self);
        if (gg.needs_grad(a)) {
            Tensor<T>& ga = gg.grad(a);
            for (std::size_t i = 0; i < go.size(); ++i) ga[i] += go[i];
        }
        if (gg.needs_grad(bias)) {
            Tensor<T>& gb = gg.grad(bias);
            for (std::size_t i = 0; i < go.size(); ++i) gb[i % E] += go[i];
        }
    });
}

// x[...,D] · w[D,E] + b[E]
template <class T>
int linear(Graph<T>& g, int x, int w, int b = -1) {
    int y = matmul(g, x, w);
    if (b >= 0) y = add_lastdim(g, y, b);
    return y;
}

// ---------------------------------------------------------------------------
// normalization

// LayerNorm over the last axis D: y = (x - mean)/sqrt(var + eps) * gain + shift.
template <class T>
int layer_norm(Graph<T>& g, int x, int gain, int shift, T eps = static_cast<T>(1e-5)) {
    const Tensor<T>& xv = g.value(x);
    const std::size_t D = xv.shape.back();
    if (D == 0) throw ShapeError("layer_norm: last axis is 0");
    if (g.value(gain).size() != D || g.value(shift).size() != D)
        throw ShapeError("layer_norm: gain/shift size != " + std::to_string(D));
    const std::size_t rows = xv.size() / D;
    Tensor<T> out(xv.shape);
    Tensor<T> xhat(xv.shape);
    std::vector<T> rstd(rows);
    const Tensor<T>& gv = g.value(gain);
    const Tensor<T>& sv = g.value(shift);
    for (std::size_t r = 0; r < rows; ++r) {
        const T* row = xv.data.data() + r * D;
        T mean = T(0);
        for (std::size_t j = 0; j < D; ++j) mean += row[j];
        mean /= static_cast<T>(D);
        T var = T(0);
        for (std::size_t j = 0; j < D; ++j) var += (row[j] - mean) * (row[j] - mean);
        var /= static_cast<T>(D);
        const T rs = T(1) / std::sqrt(var + eps);
        rstd[r] = rs;
        for (std::size_t j = 0; j < D; ++j) {
            T h = (row[j] - mean) * rs;
            xhat[r * D + j] = h;
            out[r * D + j] = h * gv[j] + sv[j];
        }
    }
    int xhat_id = g.leaf(std::move(xhat), false);  // saved state
    return g.op(std::move(out), {x, gain, shift},
                [x, gain, shift, xhat_id, rows, D, rstd](Graph<T>& gg, int self) {
        const Tensor<T>& go = gg.grad(self);
        const Tensor<T>& xh = gg.value(xhat_id);
        const Tensor<T>& gv = gg.value(gain);
        if (gg.needs_grad(gain)) {
            Tensor<T>& gga = gg.grad(gain);
            for (std::size_t r = 0; r < rows; ++r)
                for (std::size_t j = 0; j < D; ++j)
                    gga[j] += go[r * D + j] * xh[r * D + j];
        }
        if (gg.needs_grad(shift)) {
            Tensor<T>& gsh = gg.grad(shift);
            for (std::size_t r = 0; r < rows; ++r)
                for (std::size_t j = 0; j < D; ++j) gsh[j] += go[r * D + j];
        }
        if (gg.needs_grad(x)) {
            Tensor<T>& gx = gg.grad(x);
            for (std::size_t r = 0; r < rows; ++r) {
                T sum_d = T(0), sum_dh = T(0);
                for (std::size_t j = 0; j < D; ++j) {
                    T dh = go[r * D + j] * gv[j];
                    sum_d += dh;
                    sum_dh += dh * xh[r * D + j];
                }
                const T invD = T(1) / static_cast<T>(D);
                for (std::size_t j = 0; j < D; ++j) {
                    T dh = go[r * D + j] * gv[j];
                    gx[r * D + j] +=
                        rstd[r] * (dh - invD * sum_d - xh[r * D + j] * invD * sum_dh);
                }
            }
        }
    });
}

// Per-channel batch normalization over N,H,W. In training mode the batch
// statistics normalize and update the running buffers in-place; in eval mode
// the running buffers normalize.
template <class T>
int batch_norm2d(Graph<T>& g, int x, int gamma, int beta, Tensor<T>& running_mean,
                 Tensor<T>& running_var, bool training, T momentum = static_cast<T>(0.1),
                 T eps = static_cast<T>(1e-5)) {
    const Tensor<T>& xv = g.value(x);
    if (xv.rank() != 4) throw ShapeError("batch_norm2d: expected rank-4 NCHW");
    const std::size_t N = xv.dim(0), C = xv.dim(1), H = xv.dim(2), W = xv.dim(3);
    const std::size_t m = N * H * W;
    std::vector<T> mean(C), var(C);
    if (training) {
        for (std::size_t c = 0; c < C; ++c) {
            T s = T(0);
            for (std::size_t n = 0; n < N; ++n)
                for (std::size_t p = 0; p < H * W; ++p) s += xv[(n * C + c) * H * W + p];
            mean[c] = s / static_cast<T>(m);
            T v = T(0);
            for (std::size_t n = 0; n < N; ++n)
                for (std::size_t p = 0; p < H * W; ++p) {
                    T d = xv[(n * C + c) * H * W + p] - mean[c];
                    v += d * d;
                }
            var[c] = v / static_cast<T>(m);
            const T unbiased = m > 1 ? v / static_cast<T>(m - 1) : var[c];
            running_mean[c] = (T(1) - momentum) * running_mean[c] + momentum * mean[c];
            running_var[c] = (T(1) - momentum) * running_var[c] + momentum * unbiased;
        }
    } else {
        for (std::size_t c = 0; c < C; ++c) {
            mean[c] = running_mean[c];
            var[c] = running_var[c];
        }
    }
    const Tensor<T>& gam = g.value(gamma);
    const Tensor<T>& bet = g.value(beta);
    Tensor<T> out(xv.shape);
    Tensor<T> xhat(xv.shape);
    std::vector<T> rstd(C);
    for (std::size_t c = 0; c < C; ++c) rstd[c] = T(1) / std::sqrt(var[c] + eps);
    for (std::size_t n = 0; n < N; ++n)
        for (std::size_t c = 0; c < C; ++c)
            for (std::size_t p = 0; p < H * W; ++p) {
                const std::size_t i = (n * C + c) * H * W + p;
                T h = (xv[i] - mean[c]) * rstd[c];
                xhat[i] = h;
                out[i] = h * gam[c] + bet[c];
            }
    int xhat_id = g.leaf(std::move(xhat), false);
    return g.op(std::move(out), {x, gamma, beta},
                [x, gamma, beta, xhat_id, N, C, H, W, m, rstd, training](Graph<T>& gg,
                                                                         int self) {
        const Tensor<T>& go = gg.grad(self);
        const Tensor<T>& xh = gg.value(xhat_id);
        const Tensor<T>& gam = gg.value(gamma);
        if (gg.needs_grad(gamma)) {
            Tensor<T>& gq = gg.grad(gamma);
            for (std::size_t n = 0; n < N; ++n)
                for (std::size_t c = 0; c < C; ++c)
                    for (std::size_t p = 0; p < H * W; ++p) {
                        const std::size_t i = (n * C + c) * H * W + p;
                        gq[c] += go[i] * xh[i];
                    }
        }
        if (gg.needs_grad(beta)) {
            Tensor<T>& gb = gg.grad(beta);
            for (std::size_t n = 0; n < N; ++n)
                for (std::size_t c = 0; c < C; ++c)
                    for (std::size_t p = 0; p < H * W; ++p)
                        gb[c] += go[(n * C + c) * H * W + p];
        }
        if (gg.needs_grad(x)) {
            Tensor<T>& gx = gg.grad(x);
            if (training) {
                for (std::size_t c = 0; c < C; ++c) {
                    T sum_d = T(0), sum_dh = T(0);
                    for (std::size_t n = 0; n < N; ++n)
                        for (std::size_t p = 0; p < H * W; ++p) {
                            const std::size_t i = (n * C + c) * H * W + p;
                            T dh = go[i] * gam[c];
                            sum_d += dh;
                            sum_dh += dh * xh[i];
                        }
                    const T invm = T(1) / static_cast<T>(m);
                    for (std::size_t n = 0; n < N; ++n)
                        for (std::size_t p = 0; p < H * W; ++p) {
                            const std::size_t i = (n * C + c) * H * W + p;
                            T dh = go[i] * gam[c];
                            gx[i] += rstd[c] * (dh - invm * sum_d - xh[i] * invm * sum_dh);
                        }
                }
            } else {
                for (std::size_t n = 0; n < N; ++n)
                    for (std::size_t c = 0; c < C; ++c)
                        for (std::size_t p = 0; p < H * W; ++p) {
                            const std::size_t i = (n * C + c) * H * W + p;
                            gx[i] += go[i] * gam[c] * rstd[c];
                        }
            }
        }
    });
}

// ---------------------------------------------------------------------------
// convolution / pooling

// input N×C×H×W, weight O×(C/groups)×K×K, optional bias O.
template <class T>
int conv2d(Graph<T>& g, int x, int w, int b, std::size_t stride, std::size_t padding,
           std::size_t groups = 1) {
    const Tensor<T>& xv = g.value(x);
    const Tensor<T>& wv = g.value(w);
    if (xv.rank() != 4) throw ShapeError("conv2d: input must be rank-4 NCHW, got " +
                                         shape_str(xv.shape));
    if (wv.rank() != 4) throw ShapeError("conv2d: weight must be rank-4 OIKK, got " +
                                         shape_str(wv.shape));
    const std::size_t N = xv.dim(0), C = xv.dim(1), H = xv.dim(2), W = xv.dim(3);
    const std::size_t O = wv.dim(0), CI = wv.dim(1), KH = wv.dim(2), KW = wv.dim(3);
    if (groups == 0 || C % groups != 0)
        throw ShapeError("conv2d: channel axis (" + std::to_string(C) +
                         ") not divisible by groups " + std::to_string(groups));
    if (CI != C / groups)
        throw ShapeError("conv2d: weight input-channel axis is " + std::to_string(CI) +
                         ", expected " + std::to_string(C / groups));
    if (O % groups != 0)
        throw ShapeError("conv2d: output-channel axis not divisible by groups");
    if (H + 2 * padding < KH || W + 2 * padding < KW)
        throw ShapeError("conv2d: kernel exceeds padded spatial axes");
    const std::size_t OH = (H + 2 * padding - KH) / stride + 1;
    const std::size_t OW = (W + 2 * padding - KW) / stride + 1;
    const std::size_t cg = C / groups, og = O / groups;
    const Tensor<T>* bias = b >= 0 ? &g.value(b) : nullptr;
    if (bias && bias->size() != O)
        throw ShapeError("conv2d: bias axis is " + std::to_string(bias->size()) +
                         ", expected " + std::to_string(O));
    Tensor<T> out({N, O, OH, OW});
    for (std::size_t n = 0; n < N; ++n)
        for (std::size_t o = 0; o < O; ++o) {
            const std::size_t grp = o / og;
            for (std::size_t oy = 0; oy < OH; ++oy)
                for (std::size_t ox = 0; ox < OW; ++ox) {
                    T acc = bias ? (*bias)[o] : T(0);
                    for (std::size_t ic = 0; ic < cg; ++ic) {
                        const std::size_t c = grp * cg + ic;
                        for (std::size_t ky = 0; ky < KH; ++ky) {
                            const std::ptrdiff_t iy =
                                static_cast<std::ptrdiff_t>(oy * stride + ky) -
                                static_cast<std::ptrdiff_t>(padding);
                            if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(H)) continue;
                            for (std::size_t kx = 0; kx < KW; ++kx) {
                                const std::ptrdiff_t ix =
                                    static_cast<std::ptrdiff_t>(ox * stride + kx) -
                                    static_cast<std::ptrdiff_t>(padding);
                                if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(W)) continue;
                                acc += xv.at4(n, c, static_cast<std::size_t>(iy),
                                              static_cast<std::size_t>(ix)) *
                                       wv[((o * cg + ic) * KH + ky) * KW + kx];
                            }
                        }
                    }
                    out.at4(n, o, oy, ox) = acc;
                }
        }
    return g.op(std::move(out), {x, w, b},
                [x, w, b, N, C, H, W, O, KH, KW, OH, OW, stride, padding, cg,
                 og](Graph<T>& gg, int self) {
        const Tensor<T>& go = gg.grad(self);
        const Tensor<T>& xv = gg.value(x);
        const Tensor<T>& wv = gg.value(w);
        const bool need_x = gg.needs_grad(x);
        const bool need_w = gg.needs_grad(w);
        Tensor<T>* gx = need_x ? &gg.grad(x) : nullptr;
        Tensor<T>* gw = need_w ? &gg.grad(w) : nullptr;
        Tensor<T>* gb = (b >= 0 && gg.needs_grad(b)) ? &gg.grad(b) : nullptr;
        for (std::size_t n = 0; n < N; ++n)
            for (std::size_t o = 0; o < O; ++o) {
                const std::size_t grp = o / og;
                for (std::size_t oy = 0; oy < OH; ++oy)
                    for (std::size_t ox = 0; ox < OW; ++ox) {
                        const T gv = go.at4(n, o, oy, ox);
                        if (gv == T(0)) continue;
                        if (gb) (*gb)[o] += gv;
                        for (std::size_t ic = 0; ic < cg; ++ic) {
                            const std::size_t c = grp * cg + ic;
                            for (std::size_t ky = 0; ky < KH; ++ky) {
                                const std::ptrdiff_t iy =
                                    static_cast<std::ptrdiff_t>(oy * stride + ky) -
                                    static_cast<std::ptrdiff_t>(padding);
                                if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(H)) continue;
                                for (std::size_t kx = 0; kx < KW; ++kx) {
                                    const std::ptrdiff_t ix =
                                        static_cast<std::ptrdiff_t>(ox * stride + kx) -
                                        static_cast<std::ptrdiff_t>(padding);
                                    if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(W))
                                        continue;
                                    const std::size_t wi =
                                        ((o * cg + ic) * KH + ky) * KW + kx;
                                    if (gx)
                                        gx->at4(n, c, static_cast<std::size_t>(iy),
                                                static_cast<std::size_t>(ix)) +=
                                            gv * wv[wi];
                                    if (gw)
                                        (*gw)[wi] +=
                                            gv * xv.at4(n, c, static_cast<std::size_t>(iy),
                                                        static_cast<std::size_t>(ix));
                                }
                            }
                        }
                    }
            }
    });
}

// Gradient routes to the first (row-major) maximal element of each window.
template <class T>
int max_pool2d(Graph<T>& g, int x, std::size_t kernel, std::size_t stride) {
    const Tensor<T>& xv = g.value(x);
    if (xv.rank() != 4) throw ShapeError("max_pool2d: expected rank-4 NCHW");
    const std::size_t N = xv.dim(0), C = xv.dim(1), H = xv.dim(2), W = xv.dim(3);
    if (kernel > H || kernel > W)
        throw ShapeError("max_pool2d: kernel " + std::to_string(kernel) +
                         " exceeds spatial axes " + shape_str(xv.shape));
    const std::size_t OH = (H - kernel) / stride + 1;
    const std::size_t OW = (W - kernel) / stride + 1;
    Tensor<T> out({N, C, OH, OW});
    std::vector<std::size_t> argmax(out.size());
    for (std::size_t n = 0; n < N; ++n)
        for (std::size_t c = 0; c < C; ++c)
            for (std::size_t oy = 0; oy < OH; ++oy)
                for (std::size_t ox = 0; ox < OW; ++ox) {
                    T best = xv.at4(n, c, oy * stride, ox * stride);
                    std::size_t besti = ((n * C + c) * H + oy * stride) * W + ox * stride;
                    for (std::size_t ky = 0; ky < kernel; ++ky)
                        for (std::size_t kx = 0; kx < kernel; ++kx) {
                            const T v = xv.at4(n, c, oy * stride + ky, ox * stride + kx);
                            if (v > best) {
                                best = v;
                                besti = ((n * C + c) * H + oy * stride + ky) * W +
                                        ox * stride + kx;
                            }
                        }
                    const std::size_t oi = ((n * C + c) * OH + oy) * OW + ox;
                    out[oi] = best;
                    argmax[oi] = besti;
                }
    return g.op(std::move(out), {x}, [x, argmax](Graph<T>& gg, int self) {
        const Tensor<T>& go = gg.grad(self);
        Tensor<T>& gx = gg.grad(x);
        for (std::size_t i = 0; i < go.size(); ++i) gx[argmax[i]] += go[i];
    });
}

// ---------------------------------------------------------------------------
// resampling

// Integer-factor bilinear upsample, align-corners OFF (half-pixel centers).
template <class T>
int bilinear_upsample(Graph<T>& g, int x, std::size_t factor) {
    if (factor == 0) throw ShapeError("bilinear_upsample: factor must be positive");
    const Tensor<T>& xv = g.value(x);
    if (xv.rank() != 4) throw ShapeError("bilinear_upsample: expected rank-4 NCHW");
    const std::size_t N = xv.dim(0), C = xv.dim(1), H = xv.dim(2), W = xv.dim(3);
    const std::size_t OH = H * factor, OW = W * factor;
    // Per output row/col: source indices and interpolation weight.
    auto coords = [factor](std::size_t out_len, std::size_t in_len) {
        std::vector<std::size_t> i0(out_len), i1(out_len);
        std::vector<T> w1(out_len);
        for (std::size_t i = 0; i < out_len; ++i) {
            double src = (static_cast<double>(i) + 0.5) / static_cast<double>(factor) - 0.5;
            src = std::max(0.0, std::min(src, static_cast<double>(in_len - 1)));
            const std::size_t lo = static_cast<std::size_t>(src);
            i0[i] = lo;
            i1[i] = std::min(lo + 1, in_len - 1);
            w1[i] = static_cast<T>(src - static_cast<double>(lo));
        }
        return std::tuple(i0, i1, w1);
    };
    auto [y0, y1, wy] = coords(OH, H);
    auto [x0, x1, wx] = coords(OW, W);
    Tensor<T> out({N, C, OH, OW});
    for (std::size_t n = 0; n < N; ++n)
        for (std::size_t c = 0; c < C; ++c)
            for (std::size_t oy = 0; oy < OH; ++oy)
                for (std::size_t ox = 0; ox < OW; ++ox) {
                    const T a = xv.at4(n, c, y0[oy], x0[ox]);
                    const T bq = xv.at4(n, c, y0[oy], x1[ox]);
                    const T cc = xv.at4(n, c, y1[oy], x0[ox]);
                    const T d = xv.at4(n, c, y1[oy], x1[ox]);
                    const T top = a + (bq - a) * wx[ox];
                    const T bot = cc + (d - cc) * wx[ox];
                    out.at4(n, c, oy, ox) = top + (bot - top) * wy[oy];
                }
    return g.op(std::move(out), {x},
                [x, N, C, OH, OW, y0 = y0, y1 = y1, wy = wy, x0 = x0, x1 = x1,
                 wx = wx](Graph<T>& gg, int self) {
        const Tensor<T>& go = gg.grad(self);
        Tensor<T>& gx = gg.grad(x);
        for (std::size_t n = 0; n < N; ++n)
            for (std::size_t c = 0; c < C; ++c)
                for (std::size_t oy = 0; oy < OH; ++oy)
                    for (std::size_t ox = 0; ox < OW; ++ox) {
                        const T gv = go.at4(n, c, oy, ox);
                        const T wyv = wy[oy], wxv = wx[ox];
                        gx.at4(n, c, y0[oy], x0[ox]) += gv * (T(1) - wyv) * (T(1) - wxv);
                        gx.at4(n, c, y0[oy], x1[ox]) += gv * (T(1) - wyv) * wxv;
                        gx.at4(n, c, y1[oy], x0[ox]) += gv * wyv * (T(1) - wxv);
                        gx.at4(n, c, y1[oy], x1[ox]) += gv * wyv * wxv;
                    }
    });
}

// ---------------------------------------------------------------------------
// reductions

template <class T>
int sum_all(Graph<T>& g, int a) {
    const Tensor<T>& av = g.value(a);
    T s = T(0);
    for (const T& v : av.data) s += v;
    return g.op(Tensor<T>::scalar(s), {a}, [a](Graph<T>& gg, int self) {
        const T go = gg.grad(self)[0];
        Tensor<T>& ga = gg.grad(a);
        for (auto& v : ga.data) v += go;
    });
}

template <class T>
int mean_all(Graph<T>& g, int a) {
    const std::size_t n = g.value(a).size();
    return scale(g, sum_all(g, a), T(1) / static_cast<T>(n));
}

// Sum over all axes but the first: [N,...] -> [N].
template <class T>
int sum_per_sample(Graph<T>& g, int a) {
    const Tensor<T>& av = g.value(a);
    const std::size_t N = av.dim(0), inner = av.size() / N;
    Tensor<T> out({N});
    for (std::size_t n = 0; n < N; ++n) {
        T s = T(0);
        for (std::size_t i = 0; i < inner; ++i) s += av[n * inner + i];
        out[n] = s;
    }
    return g.op(std::move(out), {a}, [a, N, inner](Graph<T>& gg, int self) {
        const Tensor<T>& go = gg.grad(self);
        Tensor<T>& ga = gg.grad(a);
        for (std::size_t n = 0; n < N; ++n)
            for (std::size_t i = 0; i < inner; ++i) ga[n * inner + i] += go[n];
    });
}

}  // namespace msmg::ops
