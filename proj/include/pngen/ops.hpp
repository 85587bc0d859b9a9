#pragma once

#include <Eigen/Core>
#include <cmath>
#include <vector>

#ifdef _OPENMP
#include <omp.h>
#endif

#include "pngen/graph.hpp"
#include "pngen/rng.hpp"

// Differentiable tensor ops over Graph vars. Image-like tensors are NHWC;
// token tensors are (N, T, D); matrices are (rows, cols).
namespace pngen::nn {

template <typename T>
using MatMap = Eigen::Map<Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
template <typename T>
using CMatMap =
    Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;

// work size below which threading overhead is not worth paying
inline constexpr int64_t kParallelMinWork = 1 << 15;

namespace detail {

template <typename T, typename FwdFn, typename GradFn>
Var<T> unary(Var<T> x, FwdFn fwd, GradFn grad) {
    Graph<T>& g = *x.g;
    const Tensor<T>& xv = x.val();
    Tensor<T> out(xv.shape);
    const int64_t n = xv.numel();
#pragma omp parallel for schedule(static) if (n >= kParallelMinWork)
    for (int64_t i = 0; i < n; ++i) out[i] = fwd(xv[i]);
    int xid = x.id;
    int oid = g.add_node(std::move(out), g.wants(xid));
    g.set_backward(oid, [xid, oid, grad](Graph<T>& gg) {
        const Tensor<T>& dy = gg.grad_buf(oid);
        const Tensor<T>& xv2 = gg.value(xid);
        const Tensor<T>& yv = gg.value(oid);
        Tensor<T>& dx = gg.grad_buf(xid);
        const int64_t n = dy.numel();
#pragma omp parallel for schedule(static) if (n >= kParallelMinWork)
        for (int64_t i = 0; i < n; ++i) dx[i] += grad(xv2[i], yv[i]) * dy[i];
    });
    return {&g, oid};
}

}  // namespace detail

// ---------------------------------------------------------------------------
// elementwise
// ---------------------------------------------------------------------------

template <typename T>
Var<T> add(Var<T> a, Var<T> b) {
    Graph<T>& g = *a.g;
    check_same_shape(a.val(), b.val(), "add");
    Tensor<T> out = a.val();
    const Tensor<T>& bv = b.val();
    const int64_t n_add = out.numel();
#pragma omp parallel for schedule(static) if (n_add >= kParallelMinWork)
    for (int64_t i = 0; i < n_add; ++i) out[i] += bv[i];
    int aid = a.id, bid = b.id;
    int oid = g.add_node(std::move(out), g.wants(aid) || g.wants(bid));
    g.set_backward(oid, [aid, bid, oid](Graph<T>& gg) {
        const Tensor<T>& dy = gg.grad_buf(oid);
        if (gg.wants(aid)) {
            Tensor<T>& da = gg.grad_buf(aid);
            for (int64_t i = 0; i < dy.numel(); ++i) da[i] += dy[i];
        }
        if (gg.wants(bid)) {
            Tensor<T>& db = gg.grad_buf(bid);
            for (int64_t i = 0; i < dy.numel(); ++i) db[i] += dy[i];
        }
    });
    return {&g, oid};
}

template <typename T>
Var<T> sub(Var<T> a, Var<T> b) {
    Graph<T>& g = *a.g;
    check_same_shape(a.val(), b.val(), "sub");
    Tensor<T> out = a.val();
    const Tensor<T>& bv = b.val();
    const int64_t n_sub = out.numel();
#pragma omp parallel for schedule(static) if (n_sub >= kParallelMinWork)
    for (int64_t i = 0; i < n_sub; ++i) out[i] -= bv[i];
    int aid = a.id, bid = b.id;
    int oid = g.add_node(std::move(out), g.wants(aid) || g.wants(bid));
    g.set_backward(oid, [aid, bid, oid](Graph<T>& gg) {
        const Tensor<T>& dy = gg.grad_buf(oid);
        if (gg.wants(aid)) {
            Tensor<T>& da = gg.grad_buf(aid);
            for (int64_t i = 0; i < dy.numel(); ++i) da[i] += dy[i];
        }
        if (gg.wants(bid)) {
            Tensor<T>& db = gg.grad_buf(bid);
            for (int64_t i = 0; i < dy.numel(); ++i) db[i] -= dy[i];
        }
    });
    return {&g, oid};
}

template <typename T>
Var<T> mul(Var<T> a, Var<T> b) {
    Graph<T>& g = *a.g;
    check_same_shape(a.val(), b.val(), "mul");
    Tensor<T> out = a.val();
    const Tensor<T>& bv = b.val();
    const int64_t n_mul = out.numel();
#pragma omp parallel for schedule(static) if (n_mul >= kParallelMinWork)
    for (int64_t i = 0; i < n_mul; ++i) out[i] *= bv[i];
    int aid = a.id, bid = b.id;
    int oid = g.add_node(std::move(out), g.wants(aid) || g.wants(bid));
    g.set_backward(oid, [aid, bid, oid](Graph<T>& gg) {
        const Tensor<T>& dy = gg.grad_buf(oid);
        const Tensor<T>& av = gg.value(aid);
        const Tensor<T>& bv2 = gg.value(bid);
        if (gg.wants(aid)) {
            Tensor<T>& da = gg.grad_buf(aid);
            for (int64_t i = 0; i < dy.numel(); ++i) da[i] += bv2[i] * dy[i];
        }
        if (gg.wants(bid)) {
            Tensor<T>& db = gg.grad_buf(bid);
            for (int64_t i = 0; i < dy.numel(); ++i) db[i] += av[i] * dy[i];
        }
    });
    return {&g, oid};
}

template <typename T>
Var<T> scale(Var<T> x, T c) {
    return detail::unary(
        x, [c](T v) { return v * c; }, [c](T, T) { return c; });
}

template <typename T>
Var<T> offset(Var<T> x, T c) {
    return detail::unary(
        x, [c](T v) { return v + c; }, [](T, T) { return T(1); });
}

template <typename T>
Var<T> neg(Var<T> x) {
    return scale(x, T(-1));
}

template <typename T>
Var<T> relu(Var<T> x) {
    return detail::unary(
        x, [](T v) { return v > T(0) ? v : T(0); },
        [](T v, T) { return v > T(0) ? T(1) : T(0); });
}

template <typename T>
Var<T> silu(Var<T> x) {
    auto sig = [](T v) { return T(1) / (T(1) + std::exp(-v)); };
    return detail::unary(
        x, [sig](T v) { return v * sig(v); },
        [sig](T v, T) {
            T s = sig(v);
            return s * (T(1) + v * (T(1) - s));
        });
}

template <typename T>
Var<T> gelu(Var<T> x) {
    constexpr double inv_sqrt2 = 0.7071067811865475244;
    constexpr double inv_sqrt2pi = 0.3989422804014326779;
    return detail::unary(
        x,
        [](T v) {
            return static_cast<T>(0.5 * static_cast<double>(v) *
                                  (1.0 + std::erf(static_cast<double>(v) * inv_sqrt2)));
        },
        [](T v, T) {
            double vd = static_cast<double>(v);
            double cdf = 0.5 * (1.0 + std::erf(vd * inv_sqrt2));
            double pdf = inv_sqrt2pi * std::exp(-0.5 * vd * vd);
            return static_cast<T>(cdf + vd * pdf);
        });
}

template <typename T>
Var<T> tanh_(Var<T> x) {
    return detail::unary(
        x, [](T v) { return std::tanh(v); }, [](T, T y) { return T(1) - y * y; });
}

template <typename T>
Var<T> square(Var<T> x) {
    return detail::unary(
        x, [](T v) { return v * v; }, [](T v, T) { return T(2) * v; });
}

template <typename T>
Var<T> sqrt_(Var<T> x) {
    return detail::unary(
        x, [](T v) { return std::sqrt(v); },
        [](T, T y) { return T(0.5) / y; });
}

template <typename T>
Var<T> exp_(Var<T> x) {
    return detail::unary(
        x, [](T v) { return std::exp(v); }, [](T, T y) { return y; });
}

template <typename T>
Var<T> abs_(Var<T> x) {
    return detail::unary(
        x, [](T v) { return std::abs(v); },
        [](T v, T) { return v > T(0) ? T(1) : (v < T(0) ? T(-1) : T(0)); });
}

// Clamp with pass-through gradient strictly inside the interval.
template <typename T>
Var<T> clamp_(Var<T> x, T lo, T hi) {
    return detail::unary(
        x, [lo, hi](T v) { return v < lo ? lo : (v > hi ? hi : v); },
        [lo, hi](T v, T) { return (v > lo && v < hi) ? T(1) : T(0); });
}

// ---------------------------------------------------------------------------
// reductions and shape
// ---------------------------------------------------------------------------

template <typename T>
Var<T> sum_all(Var<T> x) {
    Graph<T>& g = *x.g;
    const Tensor<T>& xv = x.val();
    Tensor<T> out({1});
    T acc = T(0);
    for (int64_t i = 0; i < xv.numel(); ++i) acc += xv[i];
    out[0] = acc;
    int xid = x.id;
    int oid = g.add_node(std::move(out), g.wants(xid));
    g.set_backward(oid, [xid, oid](Graph<T>& gg) {
        T dy = gg.grad_buf(oid)[0];
        Tensor<T>& dx = gg.grad_buf(xid);
        for (int64_t i = 0; i < dx.numel(); ++i) dx[i] += dy;
    });
    return {&g, oid};
}

template <typename T>
Var<T> mean_all(Var<T> x) {
    int64_t n = x.val().numel();
    return scale(sum_all(x), T(1) / static_cast<T>(n));
}

template <typename T>
Var<T> sum_lastdim(Var<T> x) {
    Graph<T>& g = *x.g;
    const Tensor<T>& xv = x.val();
    const int c = xv.last_dim();
    const int64_t rows = xv.rows();
    std::vector<int> oshape(xv.shape.begin(), xv.shape.end() - 1);
    if (oshape.empty()) oshape = {1};
    Tensor<T> out(oshape);
    for (int64_t r = 0; r < rows; ++r) {
        T acc = T(0);
        const T* p = xv.ptr() + r * c;
        for (int i = 0; i < c; ++i) acc += p[i];
        out[r] = acc;
    }
    int xid = x.id;
    int oid = g.add_node(std::move(out), g.wants(xid));
    g.set_backward(oid, [xid, oid, rows, c](Graph<T>& gg) {
        const Tensor<T>& dy = gg.grad_buf(oid);
        Tensor<T>& dx = gg.grad_buf(xid);
        for (int64_t r = 0; r < rows; ++r) {
            T* p = dx.ptr() + r * c;
            T dv = dy[r];
            for (int i = 0; i < c; ++i) p[i] += dv;
        }
    });
    return {&g, oid};
}

template <typename T>
Var<T> mean_lastdim(Var<T> x) {
    return scale(sum_lastdim(x), T(1) / static_cast<T>(x.val().last_dim()));
}

// Per-channel mean over spatial dims: (N,H,W,C) -> (N,C).
template <typename T>
Var<T> mean_spatial(Var<T> x) {
    Graph<T>& g = *x.g;
    const Tensor<T>& xv = x.val();
    check_contract(xv.rank() == 4, "mean_spatial expects NHWC");
    const int n = xv.dim(0), hw = xv.dim(1) * xv.dim(2), c = xv.dim(3);
    Tensor<T> out({n, c}, T(0));
    for (int b = 0; b < n; ++b) {
        const T* p = xv.ptr() + static_cast<int64_t>(b) * hw * c;
        for (int s = 0; s < hw; ++s)
            for (int j = 0; j < c; ++j) out.at(b, j) += p[static_cast<int64_t>(s) * c + j];
    }
    T inv = T(1) / static_cast<T>(hw);
    for (auto& v : out.data) v *= inv;
    int xid = x.id;
    int oid = g.add_node(std::move(out), g.wants(xid));
    g.set_backward(oid, [xid, oid, n, hw, c, inv](Graph<T>& gg) {
        const Tensor<T>& dy = gg.grad_buf(oid);
        Tensor<T>& dx = gg.grad_buf(xid);
        for (int b = 0; b < n; ++b) {
            T* p = dx.ptr() + static_cast<int64_t>(b) * hw * c;
            for (int s = 0; s < hw; ++s)
                for (int j = 0; j < c; ++j)
                    p[static_cast<int64_t>(s) * c + j] += dy[static_cast<int64_t>(b) * c + j] * inv;
        }
    });
    return {&g, oid};
}

template <typename T>
Var<T> reshape(Var<T> x, std::vector<int> shape) {
    Graph<T>& g = *x.g;
    Tensor<T> out = x.val().reshaped(shape);
    int xid = x.id;
    int oid = g.add_node(std::move(out), g.wants(xid));
    g.set_backward(oid, [xid, oid](Graph<T>& gg) {
        const Tensor<T>& dy = gg.grad_buf(oid);
        Tensor<T>& dx = gg.grad_buf(xid);
        for (int64_t i = 0; i < dy.numel(); ++i) dx[i] += dy[i];
    });
    return {&g, oid};
}

template <typename T>
Var<T> concat_lastdim(const std::vector<Var<T>>& xs) {
    check_contract(!xs.empty(), "concat_lastdim: empty input list");
    Graph<T>& g = *xs[0].g;
    const auto& s0 = xs[0].val().shape;
    int64_t rows = xs[0].val().rows();
    int total_c = 0;
    bool rg = false;
    for (const auto& x : xs) {
        check_contract(std::equal(s0.begin(), s0.end() - 1, x.val().shape.begin()),
                       "concat_lastdim: leading dims differ");
        check_contract(x.val().rows() == rows, "concat_lastdim: row count differs");
        total_c += x.val().last_dim();
        rg = rg || g.wants(x.id);
    }
    std::vector<int> oshape(s0.begin(), s0.end() - 1);
    oshape.push_back(total_c);
    Tensor<T> out(oshape);
    std::vector<int> ids, widths;
    int off = 0;
    for (const auto& x : xs) {
        const Tensor<T>& xv = x.val();
        int c = xv.last_dim();
        for (int64_t r = 0; r < rows; ++r)
            std::copy(xv.ptr() + r * c, xv.ptr() + (r + 1) * c, out.ptr() + r * total_c + off);
        ids.push_back(x.id);
        widths.push_back(c);
        off += c;
    }
    int oid = g.add_node(std::move(out), rg);
    g.set_backward(oid, [ids, widths, rows, total_c, oid](Graph<T>& gg) {
        const Tensor<T>& dy = gg.grad_buf(oid);
        int off2 = 0;
        for (size_t k = 0; k < ids.size(); ++k) {
            int c = widths[k];
            if (gg.wants(ids[k])) {
                Tensor<T>& dx = gg.grad_buf(ids[k]);
                for (int64_t r = 0; r < rows; ++r) {
                    const T* src = dy.ptr() + r * total_c + off2;
                    T* dst = dx.ptr() + r * c;
                    for (int i = 0; i < c; ++i) dst[i] += src[i];
                }
            }
            off2 += c;
        }
    });
    return {&g, oid};
}

template <typename T>
Var<T> slice_lastdim(Var<T> x, int from, int to) {
    Graph<T>& g = *x.g;
    const Tensor<T>& xv = x.val();
    const int c = xv.last_dim();
    check_contract(0 <= from && from < to && to <= c, "slice_lastdim: bad range");
    const int64_t rows = xv.rows();
    const int w = to - from;
    std::vector<int> oshape(xv.shape.begin(), xv.shape.end() - 1);
    oshape.push_back(w);
    Tensor<T> out(oshape);
    for (int64_t r = 0; r < rows; ++r)
        std::copy(xv.ptr() + r * c + from, xv.ptr() + r * c + to, out.ptr() + r * w);
    int xid = x.id;
    int oid = g.add_node(std::move(out), g.wants(xid));
    g.set_backward(oid, [xid, oid, rows, c, from, w](Graph<T>& gg) {
        const Tensor<T>& dy = gg.grad_buf(oid);
        Tensor<T>& dx = gg.grad_buf(xid);
        for (int64_t r = 0; r < rows; ++r) {
            const T* src = dy.ptr() + r * w;
            T* dst = dx.ptr() + r * c + from;
            for (int i = 0; i < w; ++i) dst[i] += src[i];
        }
    });
    return {&g, oid};
}

// ---------------------------------------------------------------------------
// normalization and softmax (over the last dim)
// ---------------------------------------------------------------------------

template <typename T>
Var<T> softmax_lastdim(Var<T> x) {
    Graph<T>& g = *x.g;
    const Tensor<T>& xv = x.val();
    const int c = xv.last_dim();
    const int64_t rows = xv.rows();
    Tensor<T> out(xv.shape);
#pragma omp parallel for schedule(static) if (rows * c >= kParallelMinWork)
    for (int64_t r = 0; r < rows; ++r) {
        const T* p = xv.ptr() + r * c;
        T* q = out.ptr() + r * c;
        T mx = p[0];
        for (int i = 1; i < c; ++i) mx = std::max(mx, p[i]);
        T sum = T(0);
        for (int i = 0; i < c; ++i) {
            q[i] = std::exp(p[i] - mx);
            sum += q[i];
        }
        T inv = T(1) / sum;
        for (int i = 0; i < c; ++i) q[i] *= inv;
    }
    int xid = x.id;
    int oid = g.add_node(std::move(out), g.wants(xid));
    g.set_backward(oid, [xid, oid, rows, c](Graph<T>& gg) {
        const Tensor<T>& dy = gg.grad_buf(oid);
        const Tensor<T>& yv = gg.value(oid);
        Tensor<T>& dx = gg.grad_buf(xid);
        for (int64_t r = 0; r < rows; ++r) {
            const T* dyp = dy.ptr() + r * c;
            const T* yp = yv.ptr() + r * c;
            T* dxp = dx.ptr() + r * c;
            T dot = T(0);
            for (int i = 0; i < c; ++i) dot += dyp[i] * yp[i];
            for (int i = 0; i < c; ++i) dxp[i] += yp[i] * (dyp[i] - dot);
        }
    });
    return {&g, oid};
}

// Plain layer normalization over the last dim (no learnable affine).
template <typename T>
Var<T> layernorm_lastdim(Var<T> x, T eps = T(1e-6)) {
    Graph<T>& g = *x.g;
    const Tensor<T>& xv = x.val();
    const int c = xv.last_dim();
    const int64_t rows = xv.rows();
    Tensor<T> out(xv.shape);
    Tensor<T> inv_std({static_cast<int>(rows)});
#pragma omp parallel for schedule(static) if (rows * c >= kParallelMinWork)
    for (int64_t r = 0; r < rows; ++r) {
        const T* p = xv.ptr() + r * c;
        T* q = out.ptr() + r * c;
        T mu = T(0);
        for (int i = 0; i < c; ++i) mu += p[i];
        mu /= static_cast<T>(c);
        T var = T(0);
        for (int i = 0; i < c; ++i) var += (p[i] - mu) * (p[i] - mu);
        var /= static_cast<T>(c);
        T is = T(1) / std::sqrt(var + eps);
        inv_std[r] = is;
        for (int i = 0; i < c; ++i) q[i] = (p[i] - mu) * is;
    }
    int xid = x.id;
    int oid = g.add_node(std::move(out), g.wants(xid));
    auto is_holder = std::make_shared<Tensor<T>>(std::move(inv_std));
    g.set_backward(oid, [xid, oid, rows, c, is_holder](Graph<T>& gg) {
        const Tensor<T>& dy = gg.grad_buf(oid);
        const Tensor<T>& yv = gg.value(oid);
        Tensor<T>& dx = gg.grad_buf(xid);
#pragma omp parallel for schedule(static) if (rows * c >= kParallelMinWork)
        for (int64_t r = 0; r < rows; ++r) {
            const T* dyp = dy.ptr() + r * c;
            const T* yp = yv.ptr() + r * c;
            T* dxp = dx.ptr() + r * c;
            T mean_dy = T(0), mean_dyy = T(0);
            for (int i = 0; i < c; ++i) {
                mean_dy += dyp[i];
                mean_dyy += dyp[i] * yp[i];
            }
            mean_dy /= static_cast<T>(c);
            mean_dyy /= static_cast<T>(c);
            T is = (*is_holder)[r];
            for (int i = 0; i < c; ++i)
                dxp[i] += is * (dyp[i] - mean_dy - yp[i] * mean_dyy);
        }
    });
    return {&g, oid};
}

// Pointwise feature normalization: y = x / sqrt(mean_c(x^2) + eps).
template <typename T>
Var<T> pixnorm_lastdim(Var<T> x, T eps = T(1e-8)) {
    Graph<T>& g = *x.g;
    const Tensor<T>& xv = x.val();
    const int c = xv.last_dim();
    const int64_t rows = xv.rows();
    Tensor<T> out(xv.shape);
    Tensor<T> inv_r({static_cast<int>(rows)});
    for (int64_t r = 0; r < rows; ++r) {
        const T* p = xv.ptr() + r * c;
        T ms = T(0);
        for (int i = 0; i < c; ++i) ms += p[i] * p[i];
        T ir = T(1) / std::sqrt(ms / static_cast<T>(c) + eps);
        inv_r[r] = ir;
        T* q = out.ptr() + r * c;
        for (int i = 0; i < c; ++i) q[i] = p[i] * ir;
    }
    int xid = x.id;
    int oid = g.add_node(std::move(out), g.wants(xid));
    auto ir_holder = std::make_shared<Tensor<T>>(std::move(inv_r));
    g.set_backward(oid, [xid, oid, rows, c, ir_holder, eps](Graph<T>& gg) {
        const Tensor<T>& dy = gg.grad_buf(oid);
        const Tensor<T>& xv2 = gg.value(xid);
        Tensor<T>& dx = gg.grad_buf(xid);
        for (int64_t r = 0; r < rows; ++r) {
            const T* dyp = dy.ptr() + r * c;
            const T* xp = xv2.ptr() + r * c;
            T* dxp = dx.ptr() + r * c;
            T ir = (*ir_holder)[r];
            T dot = T(0);
            for (int i = 0; i < c; ++i) dot += dyp[i] * xp[i];
            T k = dot * ir * ir * ir / static_cast<T>(c);
            for (int i = 0; i < c; ++i) dxp[i] += ir * dyp[i] - k * xp[i];
        }
    });
    return {&g, oid};
}

// Unit normalization over the last dim: y = x / sqrt(sum(x^2) + eps).
template <typename T>
Var<T> l2norm_lastdim(Var<T> x, T eps = T(1e-12)) {
    Graph<T>& g = *x.g;
    const Tensor<T>& xv = x.val();
    const int c = xv.last_dim();
    const int64_t rows = xv.rows();
    Tensor<T> out(xv.shape);
    Tensor<T> inv_r({static_cast<int>(rows)});
    for (int64_t r = 0; r < rows; ++r) {
        const T* p = xv.ptr() + r * c;
        T ss = T(0);
        for (int i = 0; i < c; ++i) ss += p[i] * p[i];
        T ir = T(1) / std::sqrt(ss + eps);
        inv_r[r] = ir;
        T* q = out.ptr() + r * c;
        for (int i = 0; i < c; ++i) q[i] = p[i] * ir;
    }
    int xid = x.id;
    int oid = g.add_node(std::move(out), g.wants(xid));
    auto ir_holder = std::make_shared<Tensor<T>>(std::move(inv_r));
    g.set_backward(oid, [xid, oid, rows, c, ir_holder](Graph<T>& gg) {
        const Tensor<T>& dy = gg.grad_buf(oid);
        const Tensor<T>& xv2 = gg.value(xid);
        Tensor<T>& dx = gg.grad_buf(xid);
        for (int64_t r = 0; r < rows; ++r) {
            const T* dyp = dy.ptr() + r * c;
            const T* xp = xv2.ptr() + r * c;
            T* dxp = dx.ptr() + r * c;
            T ir = (*ir_holder)[r];
            T dot = T(0);
            for (int i = 0; i < c; ++i) dot += dyp[i] * xp[i];
            T k = dot * ir * ir * ir;
            for (int i = 0; i < c; ++i) dxp[i] += ir * dyp[i] - k * xp[i];
        }
    });
    return {&g, oid};
}

// ---------------------------------------------------------------------------
// broadcast helpers
// ---------------------------------------------------------------------------

// Multiply (N, ..., C) by a per-sample channel vector (N, C).
template <typename T>
Var<T> mul_channels(Var<T> x, Var<T> v) {
    Graph<T>& g = *x.g;
    const Tensor<T>& xv = x.val();
    const Tensor<T>& vv = v.val();
    check_contract(vv.rank() == 2 && xv.rank() >= 2 && vv.dim(0) == xv.dim(0) &&
                       vv.dim(1) == xv.last_dim(),
                   "mul_channels: expected x (N,...,C) and v (N,C)");
    const int n = xv.dim(0), c = xv.last_dim();
    const int64_t mid = xv.numel() / (static_cast<int64_t>(n) * c);
    Tensor<T> out = xv;
#pragma omp parallel for schedule(static) if (xv.numel() >= kParallelMinWork)
    for (int b = 0; b < n; ++b) {
        const T* vp = vv.ptr() + static_cast<int64_t>(b) * c;
        T* p = out.ptr() + static_cast<int64_t>(b) * mid * c;
        for (int64_t s = 0; s < mid; ++s)
            for (int j = 0; j < c; ++j) p[s * c + j] *= vp[j];
    }
    int xid = x.id, vid = v.id;
    int oid = g.add_node(std::move(out), g.wants(xid) || g.wants(vid));
    g.set_backward(oid, [xid, vid, oid, n, mid, c](Graph<T>& gg) {
        const Tensor<T>& dy = gg.grad_buf(oid);
        const Tensor<T>& xv2 = gg.value(xid);
        const Tensor<T>& vv2 = gg.value(vid);
        if (gg.wants(xid)) {
            Tensor<T>& dx = gg.grad_buf(xid);
            for (int b = 0; b < n; ++b) {
                const T* vp = vv2.ptr() + static_cast<int64_t>(b) * c;
                const T* dyp = dy.ptr() + static_cast<int64_t>(b) * mid * c;
                T* dxp = dx.ptr() + static_cast<int64_t>(b) * mid * c;
                for (int64_t s = 0; s < mid; ++s)
                    for (int j = 0; j < c; ++j) dxp[s * c + j] += vp[j] * dyp[s * c + j];
            }
        }
        if (gg.wants(vid)) {
            Tensor<T>& dv = gg.grad_buf(vid);
            for (int b = 0; b < n; ++b) {
                const T* xp = xv2.ptr() + static_cast<int64_t>(b) * mid * c;
                const T* dyp = dy.ptr() + static_cast<int64_t>(b) * mid * c;
                T* dvp = dv.ptr() + static_cast<int64_t>(b) * c;
                for (int64_t s = 0; s < mid; ++s)
                    for (int j = 0; j < c; ++j) dvp[j] += xp[s * c + j] * dyp[s * c + j];
            }
        }
    });
    return {&g, oid};
}

// Add a per-sample channel vector (N, C) to (N, ..., C).
template <typename T>
Var<T> add_channels(Var<T> x, Var<T> v) {
    Graph<T>& g = *x.g;
    const Tensor<T>& xv = x.val();
    const Tensor<T>& vv = v.val();
    check_contract(vv.rank() == 2 && xv.rank() >= 2 && vv.dim(0) == xv.dim(0) &&
                       vv.dim(1) == xv.last_dim(),
                   "add_channels: expected x (N,...,C) and v (N,C)");
    const int n = xv.dim(0), c = xv.last_dim();
    const int64_t mid = xv.numel() / (static_cast<int64_t>(n) * c);
    Tensor<T> out = xv;
    for (int b = 0; b < n; ++b) {
        const T* vp = vv.ptr() + static_cast<int64_t>(b) * c;
        T* p = out.ptr() + static_cast<int64_t>(b) * mid * c;
        for (int64_t s = 0; s < mid; ++s)
            for (int j = 0; j < c; ++j) p[s * c + j] += vp[j];
    }
    int xid = x.id, vid = v.id;
    int oid = g.add_node(std::move(out), g.wants(xid) || g.wants(vid));
    g.set_backward(oid, [xid, vid, oid, n, mid, c](Graph<T>& gg) {
        const Tensor<T>& dy = gg.grad_buf(oid);
        if (gg.wants(xid)) {
            Tensor<T>& dx = gg.grad_buf(xid);
            for (int64_t i = 0; i < dy.numel(); ++i) dx[i] += dy[i];
        }
        if (gg.wants(vid)) {
            Tensor<T>& dv = gg.grad_buf(vid);
            for (int b = 0; b < n; ++b) {
                const T* dyp = dy.ptr() + static_cast<int64_t>(b) * mid * c;
                T* dvp = dv.ptr() + static_cast<int64_t>(b) * c;
                for (int64_t s = 0; s < mid; ++s)
                    for (int j = 0; j < c; ++j) dvp[j] += dyp[s * c + j];
            }
        }
    });
    return {&g, oid};
}

// Broadcast a tensor over a new leading batch dim: (...) -> (N, ...).
template <typename T>
Var<T> tile0(Var<T> x, int n) {
    Graph<T>& g = *x.g;
    const Tensor<T>& xv = x.val();
    std::vector<int> oshape;
    oshape.push_back(n);
    oshape.insert(oshape.end(), xv.shape.begin(), xv.shape.end());
    Tensor<T> out(oshape);
    const int64_t m = xv.numel();
    for (int b = 0; b < n; ++b)
        std::copy(xv.ptr(), xv.ptr() + m, out.ptr() + static_cast<int64_t>(b) * m);
    int xid = x.id;
    int oid = g.add_node(std::move(out), g.wants(xid));
    g.set_backward(oid, [xid, oid, n, m](Graph<T>& gg) {
        const Tensor<T>& dy = gg.grad_buf(oid);
        Tensor<T>& dx = gg.grad_buf(xid);
        for (int b = 0; b < n; ++b) {
            const T* p = dy.ptr() + static_cast<int64_t>(b) * m;
            for (int64_t i = 0; i < m; ++i) dx[i] += p[i];
        }
    });
    return {&g, oid};
}

// Multiply each sample of (N, ...) by a fixed scalar s[n] (non-differentiable
// coefficients, e.g. noise-level scalings).
template <typename T>
Var<T> scale_rows(Var<T> x, std::vector<T> s) {
    Graph<T>& g = *x.g;
    const Tensor<T>& xv = x.val();
    check_contract(static_cast<int>(s.size()) == xv.dim(0), "scale_rows: coefficient count");
    const int n = xv.dim(0);
    const int64_t m = xv.numel() / n;
    Tensor<T> out = xv;
    for (int b = 0; b < n; ++b) {
        T* p = out.ptr() + static_cast<int64_t>(b) * m;
        for (int64_t i = 0; i < m; ++i) p[i] *= s[static_cast<size_t>(b)];
    }
    int xid = x.id;
    int oid = g.add_node(std::move(out), g.wants(xid));
    g.set_backward(oid, [xid, oid, n, m, s](Graph<T>& gg) {
        const Tensor<T>& dy = gg.grad_buf(oid);
        Tensor<T>& dx = gg.grad_buf(xid);
        for (int b = 0; b < n; ++b) {
            const T* p = dy.ptr() + static_cast<int64_t>(b) * m;
            T* q = dx.ptr() + static_cast<int64_t>(b) * m;
            for (int64_t i = 0; i < m; ++i) q[i] += s[static_cast<size_t>(b)] * p[i];
        }
    });
    return {&g, oid};
}

// Multiply a whole tensor by a scalar Var of shape (1).
template <typename T>
Var<T> scale_by(Var<T> x, Var<T> s) {
    Graph<T>& g = *x.g;
    check_contract(s.val().numel() == 1, "scale_by: scalar var expected");
    T sv = s.val()[0];
    Tensor<T> out = x.val();
    for (auto& v : out.data) v *= sv;
    int xid = x.id, sid = s.id;
    int oid = g.add_node(std::move(out), g.wants(xid) || g.wants(sid));
    g.set_backward(oid, [xid, sid, oid](Graph<T>& gg) {
        const Tensor<T>& dy = gg.grad_buf(oid);
        const Tensor<T>& xv = gg.value(xid);
        T sv2 = gg.value(sid)[0];
        if (gg.wants(xid)) {
            Tensor<T>& dx = gg.grad_buf(xid);
            for (int64_t i = 0; i < dy.numel(); ++i) dx[i] += sv2 * dy[i];
        }
        if (gg.wants(sid)) {
            T acc = T(0);
            for (int64_t i = 0; i < dy.numel(); ++i) acc += xv[i] * dy[i];
            gg.grad_buf(sid)[0] += acc;
        }
    });
    return {&g, oid};
}

// Add a constant tensor broadcast over the batch dim: x (N,...) + c (...).
template <typename T>
Var<T> add_const_bcast0(Var<T> x, const Tensor<T>& c) {
    Graph<T>& g = *x.g;
    const Tensor<T>& xv = x.val();
    const int n = xv.dim(0);
    const int64_t m = xv.numel() / n;
    check_contract(c.numel() == m, "add_const_bcast0: size mismatch");
    Tensor<T> out = xv;
    for (int b = 0; b < n; ++b) {
        T* p = out.ptr() + static_cast<int64_t>(b) * m;
        for (int64_t i = 0; i < m; ++i) p[i] += c[i];
    }
    int xid = x.id;
    int oid = g.add_node(std::move(out), g.wants(xid));
    g.set_backward(oid, [xid, oid](Graph<T>& gg) {
        const Tensor<T>& dy = gg.grad_buf(oid);
        Tensor<T>& dx = gg.grad_buf(xid);
        for (int64_t i = 0; i < dy.numel(); ++i) dx[i] += dy[i];
    });
    return {&g, oid};
}

template <typename T>
Var<T> stopgrad(Var<T> x) {
    return x.g->constant(x.val());
}

// Inverted dropout; identity when rs is null (inference).
template <typename T>
Var<T> dropout(Var<T> x, double rate, RandomStream* rs) {
    if (rs == nullptr || rate <= 0.0) return x;
    Graph<T>& g = *x.g;
    const Tensor<T>& xv = x.val();
    auto mask = std::make_shared<Tensor<T>>(xv.shape);
    T keep_scale = static_cast<T>(1.0 / (1.0 - rate));
    for (int64_t i = 0; i < xv.numel(); ++i)
        (*mask)[i] = rs->uniform() < rate ? T(0) : keep_scale;
    Tensor<T> out = xv;
    for (int64_t i = 0; i < out.numel(); ++i) out[i] *= (*mask)[i];
    int xid = x.id;
    int oid = g.add_node(std::move(out), g.wants(xid));
    g.set_backward(oid, [xid, oid, mask](Graph<T>& gg) {
        const Tensor<T>& dy = gg.grad_buf(oid);
        Tensor<T>& dx = gg.grad_buf(xid);
        for (int64_t i = 0; i < dy.numel(); ++i) dx[i] += (*mask)[i] * dy[i];
    });
    return {&g, oid};
}

// ---------------------------------------------------------------------------
// linear algebra
// ---------------------------------------------------------------------------

// (M,K) x (K,N) -> (M,N).
template <typename T>
Var<T> matmul(Var<T> x, Var<T> w) {
    Graph<T>& g = *x.g;
    const Tensor<T>& xv = x.val();
    const Tensor<T>& wv = w.val();
    check_contract(xv.rank() == 2 && wv.rank() == 2 && xv.dim(1) == wv.dim(0),
                   "matmul: inner dims must agree");
    const int m = xv.dim(0), k = xv.dim(1), n = wv.dim(1);
    Tensor<T> out({m, n});
    {
        CMatMap<T> X(xv.ptr(), m, k), W(wv.ptr(), k, n);
        MatMap<T> Y(out.ptr(), m, n);
        Y.noalias() = X * W;
    }
    int xid = x.id, wid = w.id;
    int oid = g.add_node(std::move(out), g.wants(xid) || g.wants(wid));
    g.set_backward(oid, [xid, wid, oid, m, k, n](Graph<T>& gg) {
        const Tensor<T>& dy = gg.grad_buf(oid);
        CMatMap<T> dY(dy.ptr(), m, n);
        if (gg.wants(xid)) {
            CMatMap<T> W(gg.value(wid).ptr(), k, n);
            MatMap<T> dX(gg.grad_buf(xid).ptr(), m, k);
            dX.noalias() += dY * W.transpose();
        }
        if (gg.wants(wid)) {
            CMatMap<T> X(gg.value(xid).ptr(), m, k);
            MatMap<T> dW(gg.grad_buf(wid).ptr(), k, n);
            dW.noalias() += X.transpose() * dY;
        }
    });
    return {&g, oid};
}

template <typename T>
Var<T> add_bias_lastdim(Var<T> x, Var<T> b) {
    Graph<T>& g = *x.g;
    const Tensor<T>& xv = x.val();
    const Tensor<T>& bv = b.val();
    const int c = xv.last_dim();
    check_contract(bv.numel() == c, "add_bias_lastdim: bias size mismatch");
    const int64_t rows = xv.rows();
    Tensor<T> out = xv;
    for (int64_t r = 0; r < rows; ++r) {
        T* p = out.ptr() + r * c;
        for (int i = 0; i < c; ++i) p[i] += bv[i];
    }
    int xid = x.id, bid = b.id;
    int oid = g.add_node(std::move(out), g.wants(xid) || g.wants(bid));
    g.set_backward(oid, [xid, bid, oid, rows, c](Graph<T>& gg) {
        const Tensor<T>& dy = gg.grad_buf(oid);
        if (gg.wants(xid)) {
            Tensor<T>& dx = gg.grad_buf(xid);
            for (int64_t i = 0; i < dy.numel(); ++i) dx[i] += dy[i];
        }
        if (gg.wants(bid)) {
            Tensor<T>& db = gg.grad_buf(bid);
            for (int64_t r = 0; r < rows; ++r) {
                const T* p = dy.ptr() + r * c;
                for (int i = 0; i < c; ++i) db[i] += p[i];
            }
        }
    });
    return {&g, oid};
}

// Batched matmul (B,M,K) x (B,K,N) -> (B,M,N).
template <typename T>
Var<T> bmm(Var<T> a, Var<T> b) {
    Graph<T>& g = *a.g;
    const Tensor<T>& av = a.val();
    const Tensor<T>& bv = b.val();
    check_contract(av.rank() == 3 && bv.rank() == 3 && av.dim(0) == bv.dim(0) &&
                       av.dim(2) == bv.dim(1),
                   "bmm: shape mismatch");
    const int bb = av.dim(0), m = av.dim(1), k = av.dim(2), n = bv.dim(2);
    Tensor<T> out({bb, m, n});
    for (int i = 0; i < bb; ++i) {
        CMatMap<T> A(av.ptr() + static_cast<int64_t>(i) * m * k, m, k);
        CMatMap<T> B(bv.ptr() + static_cast<int64_t>(i) * k * n, k, n);
        MatMap<T> Y(out.ptr() + static_cast<int64_t>(i) * m * n, m, n);
        Y.noalias() = A * B;
    }
    int aid = a.id, bid = b.id;
    int oid = g.add_node(std::move(out), g.wants(aid) || g.wants(bid));
    g.set_backward(oid, [aid, bid, oid, bb, m, k, n](Graph<T>& gg) {
        const Tensor<T>& dy = gg.grad_buf(oid);
        for (int i = 0; i < bb; ++i) {
            CMatMap<T> dY(dy.ptr() + static_cast<int64_t>(i) * m * n, m, n);
            if (gg.wants(aid)) {
                CMatMap<T> B(gg.value(bid).ptr() + static_cast<int64_t>(i) * k * n, k, n);
                MatMap<T> dA(gg.grad_buf(aid).ptr() + static_cast<int64_t>(i) * m * k, m, k);
                dA.noalias() += dY * B.transpose();
            }
            if (gg.wants(bid)) {
                CMatMap<T> A(gg.value(aid).ptr() + static_cast<int64_t>(i) * m * k, m, k);
                MatMap<T> dB(gg.grad_buf(bid).ptr() + static_cast<int64_t>(i) * k * n, k, n);
                dB.noalias() += A.transpose() * dY;
            }
        }
    });
    return {&g, oid};
}

// Batched matmul with the second factor transposed: (B,M,K) x (B,N,K) -> (B,M,N).
template <typename T>
Var<T> bmm_nt(Var<T> a, Var<T> b) {
    Graph<T>& g = *a.g;
    const Tensor<T>& av = a.val();
    const Tensor<T>& bv = b.val();
    check_contract(av.rank() == 3 && bv.rank() == 3 && av.dim(0) == bv.dim(0) &&
                       av.dim(2) == bv.dim(2),
                   "bmm_nt: shape mismatch");
    const int bb = av.dim(0), m = av.dim(1), k = av.dim(2), n = bv.dim(1);
    Tensor<T> out({bb, m, n});
    for (int i = 0; i < bb; ++i) {
        CMatMap<T> A(av.ptr() + static_cast<int64_t>(i) * m * k, m, k);
        CMatMap<T> B(bv.ptr() + static_cast<int64_t>(i) * n * k, n, k);
        MatMap<T> Y(out.ptr() + static_cast<int64_t>(i) * m * n, m, n);
        Y.noalias() = A * B.transpose();
    }
    int aid = a.id, bid = b.id;
    int oid = g.add_node(std::move(out), g.wants(aid) || g.wants(bid));
    g.set_backward(oid, [aid, bid, oid, bb, m, k, n](Graph<T>& gg) {
        const Tensor<T>& dy = gg.grad_buf(oid);
        for (int i = 0; i < bb; ++i) {
            CMatMap<T> dY(dy.ptr() + static_cast<int64_t>(i) * m * n, m, n);
            if (gg.wants(aid)) {
                CMatMap<T> B(gg.value(bid).ptr() + static_cast<int64_t>(i) * n * k, n, k);
                MatMap<T> dA(gg.grad_buf(aid).ptr() + static_cast<int64_t>(i) * m * k, m, k);
                dA.noalias() += dY * B;
            }
            if (gg.wants(bid)) {
                CMatMap<T> A(gg.value(aid).ptr() + static_cast<int64_t>(i) * m * k, m, k);
                MatMap<T> dB(gg.grad_buf(bid).ptr() + static_cast<int64_t>(i) * n * k, n, k);
                dB.noalias() += dY.transpose() * A;
            }
        }
    });
    return {&g, oid};
}

// (N,T,D) -> (N*heads, T, D/heads)
template <typename T>
Var<T> split_heads(Var<T> x, int heads) {
    Graph<T>& g = *x.g;
    const Tensor<T>& xv = x.val();
    check_contract(xv.rank() == 3 && xv.dim(2) % heads == 0, "split_heads: bad shape");
    const int n = xv.dim(0), t = xv.dim(1), d = xv.dim(2), dh = d / heads;
    Tensor<T> out({n * heads, t, dh});
    for (int b = 0; b < n; ++b)
        for (int a = 0; a < heads; ++a)
            for (int s = 0; s < t; ++s)
                std::copy(xv.ptr() + (static_cast<int64_t>(b) * t + s) * d + a * dh,
                          xv.ptr() + (static_cast<int64_t>(b) * t + s) * d + (a + 1) * dh,
                          out.ptr() + ((static_cast<int64_t>(b) * heads + a) * t + s) * dh);
    int xid = x.id;
    int oid = g.add_node(std::move(out), g.wants(xid));
    g.set_backward(oid, [xid, oid, n, t, d, dh, heads](Graph<T>& gg) {
        const Tensor<T>& dy = gg.grad_buf(oid);
        Tensor<T>& dx = gg.grad_buf(xid);
        for (int b = 0; b < n; ++b)
            for (int a = 0; a < heads; ++a)
                for (int s = 0; s < t; ++s) {
                    const T* src = dy.ptr() + ((static_cast<int64_t>(b) * heads + a) * t + s) * dh;
                    T* dst = dx.ptr() + (static_cast<int64_t>(b) * t + s) * d + a * dh;
                    for (int i = 0; i < dh; ++i) dst[i] += src[i];
                }
    });
    return {&g, oid};
}

// (N*heads, T, D/heads) -> (N,T,D)
template <typename T>
Var<T> merge_heads(Var<T> x, int heads) {
    Graph<T>& g = *x.g;
    const Tensor<T>& xv = x.val();
    check_contract(xv.rank() == 3 && xv.dim(0) % heads == 0, "merge_heads: bad shape");
    const int n = xv.dim(0) / heads, t = xv.dim(1), dh = xv.dim(2), d = dh * heads;
    Tensor<T> out({n, t, d});
    for (int b = 0; b < n; ++b)
        for (int a = 0; a < heads; ++a)
            for (int s = 0; s < t; ++s)
                std::copy(xv.ptr() + ((static_cast<int64_t>(b) * heads + a) * t + s) * dh,
                          xv.ptr() + ((static_cast<int64_t>(b) * heads + a) * t + s + 1) * dh,
                          out.ptr() + (static_cast<int64_t>(b) * t + s) * d + a * dh);
    int xid = x.id;
    int oid = g.add_node(std::move(out), g.wants(xid));
    g.set_backward(oid, [xid, oid, n, t, d, dh, heads](Graph<T>& gg) {
        const Tensor<T>& dy = gg.grad_buf(oid);
        Tensor<T>& dx = gg.grad_buf(xid);
        for (int b = 0; b < n; ++b)
            for (int a = 0; a < heads; ++a)
                for (int s = 0; s < t; ++s) {
                    const T* src = dy.ptr() + (static_cast<int64_t>(b) * t + s) * d + a * dh;
                    T* dst = dx.ptr() + ((static_cast<int64_t>(b) * heads + a) * t + s) * dh;
                    for (int i = 0; i < dh; ++i) dst[i] += src[i];
                }
    });
    return {&g, oid};
}

// ---------------------------------------------------------------------------
// convolution and resampling (NHWC)
// ---------------------------------------------------------------------------

struct ConvDims {
    int n, h, w, cin, kh, kw, cout, oh, ow, stride, pad;
};

namespace detail {

template <typename T>
void im2col(const T* x, const ConvDims& d, int sample, T* cols) {
    const int64_t plane = static_cast<int64_t>(d.h) * d.w * d.cin;
    const T* xs = x + sample * plane;
    const int patch = d.kh * d.kw * d.cin;
    for (int oy = 0; oy < d.oh; ++oy) {
        for (int ox = 0; ox < d.ow; ++ox) {
            T* row = cols + (static_cast<int64_t>(oy) * d.ow + ox) * patch;
            int iy0 = oy * d.stride - d.pad;
            int ix0 = ox * d.stride - d.pad;
            for (int ky = 0; ky < d.kh; ++ky) {
                int iy = iy0 + ky;
                for (int kx = 0; kx < d.kw; ++kx) {
                    int ix = ix0 + kx;
                    T* dst = row + (static_cast<int64_t>(ky) * d.kw + kx) * d.cin;
                    if (iy < 0 || iy >= d.h || ix < 0 || ix >= d.w) {
                        std::fill(dst, dst + d.cin, T(0));
                    } else {
                        const T* src = xs + (static_cast<int64_t>(iy) * d.w + ix) * d.cin;
                        std::copy(src, src + d.cin, dst);
                    }
                }
            }
        }
    }
}

template <typename T>
void col2im_add(const T* cols, const ConvDims& d, int sample, T* dx) {
    const int64_t plane = static_cast<int64_t>(d.h) * d.w * d.cin;
    T* xs = dx + sample * plane;
    const int patch = d.kh * d.kw * d.cin;
    for (int oy = 0; oy < d.oh; ++oy) {
        for (int ox = 0; ox < d.ow; ++ox) {
            const T* row = cols + (static_cast<int64_t>(oy) * d.ow + ox) * patch;
            int iy0 = oy * d.stride - d.pad;
            int ix0 = ox * d.stride - d.pad;
            for (int ky = 0; ky < d.kh; ++ky) {
                int iy = iy0 + ky;
                if (iy < 0 || iy >= d.h) continue;
                for (int kx = 0; kx < d.kw; ++kx) {
                    int ix = ix0 + kx;
                    if (ix < 0 || ix >= d.w) continue;
                    const T* src = row + (static_cast<int64_t>(ky) * d.kw + kx) * d.cin;
                    T* dst = xs + (static_cast<int64_t>(iy) * d.w + ix) * d.cin;
                    for (int ci = 0; ci < d.cin; ++ci) dst[ci] += src[ci];
                }
            }
        }
    }
}

}  // namespace detail

// x (N,H,W,Cin), w (KH,KW,Cin,Cout), b (Cout). Zero padding.
template <typename T>
Var<T> conv2d(Var<T> x, Var<T> w, Var<T> b, int stride = 1, int pad = -1) {
    Graph<T>& g = *x.g;
    const Tensor<T>& xv = x.val();
    const Tensor<T>& wv = w.val();
    check_contract(xv.rank() == 4 && wv.rank() == 4, "conv2d: expected NHWC input and KKIO weight");
    check_contract(xv.dim(3) == wv.dim(2), "conv2d: channel mismatch");
    ConvDims d;
    d.n = xv.dim(0);
    d.h = xv.dim(1);
    d.w = xv.dim(2);
    d.cin = xv.dim(3);
    d.kh = wv.dim(0);
    d.kw = wv.dim(1);
    d.cout = wv.dim(3);
    d.stride = stride;
    d.pad = pad < 0 ? d.kh / 2 : pad;
    d.oh = (d.h + 2 * d.pad - d.kh) / d.stride + 1;
    d.ow = (d.w + 2 * d.pad - d.kw) / d.stride + 1;
    check_contract(d.oh > 0 && d.ow > 0, "conv2d: output would be empty");
    const int patch = d.kh * d.kw * d.cin;
    const int64_t orows = static_cast<int64_t>(d.oh) * d.ow;

    Tensor<T> out({d.n, d.oh, d.ow, d.cout});
    const Tensor<T>& bv = b.val();
    check_contract(bv.numel() == d.cout, "conv2d: bias size mismatch");
#pragma omp parallel for schedule(static) if (d.n > 1)
    for (int s = 0; s < d.n; ++s) {
        std::vector<T> cols(static_cast<size_t>(orows) * patch);
        detail::im2col(xv.ptr(), d, s, cols.data());
        CMatMap<T> C(cols.data(), orows, patch);
        CMatMap<T> W(wv.ptr(), patch, d.cout);
        MatMap<T> Y(out.ptr() + s * orows * d.cout, orows, d.cout);
        Y.noalias() = C * W;
        Y.rowwise() += Eigen::Map<const Eigen::Matrix<T, 1, Eigen::Dynamic>>(bv.ptr(), d.cout);
    }

    int xid = x.id, wid = w.id, bid = b.id;
    int oid = g.add_node(std::move(out), g.wants(xid) || g.wants(wid) || g.wants(bid));
    g.set_backward(oid, [xid, wid, bid, oid, d, patch, orows](Graph<T>& gg) {
        const Tensor<T>& dy = gg.grad_buf(oid);
        if (gg.wants(bid)) {
            Tensor<T>& db = gg.grad_buf(bid);
            for (int64_t r = 0; r < static_cast<int64_t>(d.n) * orows; ++r) {
                const T* p = dy.ptr() + r * d.cout;
                for (int i = 0; i < d.cout; ++i) db[i] += p[i];
            }
        }
        if (gg.wants(wid)) {
            // im2col is recomputed per sample; samples are accumulated into
            // fixed per-chunk partials summed in chunk order, so the
            // reduction order never depends on thread scheduling.
            const Tensor<T>& xv2 = gg.value(xid);
            MatMap<T> dW(gg.grad_buf(wid).ptr(), patch, d.cout);
            int chunks = 1;
#ifdef _OPENMP
            chunks = std::min(d.n, omp_get_max_threads());
#endif
            std::vector<Tensor<T>> partials(static_cast<size_t>(chunks),
                                            Tensor<T>::zeros({patch, d.cout}));
#pragma omp parallel for schedule(static) if (chunks > 1)
            for (int ci = 0; ci < chunks; ++ci) {
                std::vector<T> cols(static_cast<size_t>(orows) * patch);
                MatMap<T> dWp(partials[static_cast<size_t>(ci)].ptr(), patch, d.cout);
                for (int s = ci; s < d.n; s += chunks) {
                    detail::im2col(xv2.ptr(), d, s, cols.data());
                    CMatMap<T> C(cols.data(), orows, patch);
                    CMatMap<T> dY(dy.ptr() + s * orows * d.cout, orows, d.cout);
                    dWp.noalias() += C.transpose() * dY;
                }
            }
            for (int ci = 0; ci < chunks; ++ci)
                dW += MatMap<T>(partials[static_cast<size_t>(ci)].ptr(), patch, d.cout);
        }
        if (gg.wants(xid)) {
            const Tensor<T>& wv2 = gg.value(wid);
            Tensor<T>& dx = gg.grad_buf(xid);
#pragma omp parallel for schedule(static) if (d.n > 1)
            for (int s = 0; s < d.n; ++s) {
                std::vector<T> gcols(static_cast<size_t>(orows) * patch);
                CMatMap<T> dY(dy.ptr() + s * orows * d.cout, orows, d.cout);
                CMatMap<T> W(wv2.ptr(), patch, d.cout);
                MatMap<T> G(gcols.data(), orows, patch);
                G.noalias() = dY * W.transpose();
                detail::col2im_add(gcols.data(), d, s, dx.ptr());
            }
        }
    });
    return {&g, oid};
}

// Pixel downsampling (space-to-depth): (N,H,W,C) -> (N,H/r,W/r,C*r*r).
template <typename T>
Var<T> space_to_depth(Var<T> x, int r) {
    Graph<T>& g = *x.g;
    const Tensor<T>& xv = x.val();
    check_contract(xv.rank() == 4 && xv.dim(1) % r == 0 && xv.dim(2) % r == 0,
                   "space_to_depth: dims not divisible by factor");
    const int n = xv.dim(0), h = xv.dim(1), w = xv.dim(2), c = xv.dim(3);
    const int oh = h / r, ow = w / r, oc = c * r * r;
    Tensor<T> out({n, oh, ow, oc});
    for (int b = 0; b < n; ++b)
        for (int oy = 0; oy < oh; ++oy)
            for (int ox = 0; ox < ow; ++ox) {
                T* dst = out.ptr() + ((static_cast<int64_t>(b) * oh + oy) * ow + ox) * oc;
                for (int dy = 0; dy < r; ++dy)
                    for (int dx = 0; dx < r; ++dx) {
                        const T* src = xv.ptr() +
                                       ((static_cast<int64_t>(b) * h + oy * r + dy) * w + ox * r + dx) * c;
                        std::copy(src, src + c, dst + (static_cast<int64_t>(dy) * r + dx) * c);
                    }
            }
    int xid = x.id;
    int oid = g.add_node(std::move(out), g.wants(xid));
    g.set_backward(oid, [xid, oid, n, h, w, c, r, oh, ow, oc](Graph<T>& gg) {
        const Tensor<T>& dyt = gg.grad_buf(oid);
        Tensor<T>& dx = gg.grad_buf(xid);
        for (int b = 0; b < n; ++b)
            for (int oy = 0; oy < oh; ++oy)
                for (int ox = 0; ox < ow; ++ox) {
                    const T* src = dyt.ptr() + ((static_cast<int64_t>(b) * oh + oy) * ow + ox) * oc;
                    for (int dy = 0; dy < r; ++dy)
                        for (int dxo = 0; dxo < r; ++dxo) {
                            T* dst = dx.ptr() +
                                     ((static_cast<int64_t>(b) * h + oy * r + dy) * w + ox * r + dxo) * c;
                            const T* s2 = src + (static_cast<int64_t>(dy) * r + dxo) * c;
                            for (int i = 0; i < c; ++i) dst[i] += s2[i];
                        }
                }
    });
    return {&g, oid};
}

// Inverse of space_to_depth: (N,H,W,C*r*r) -> (N,H*r,W*r,C).
template <typename T>
Var<T> depth_to_space(Var<T> x, int r) {
    Graph<T>& g = *x.g;
    const Tensor<T>& xv = x.val();
    check_contract(xv.rank() == 4 && xv.dim(3) % (r * r) == 0,
                   "depth_to_space: channels not divisible by factor^2");
    const int n = xv.dim(0), ih = xv.dim(1), iw = xv.dim(2), ic = xv.dim(3);
    const int c = ic / (r * r), oh = ih * r, ow = iw * r;
    Tensor<T> out({n, oh, ow, c});
    for (int b = 0; b < n; ++b)
        for (int iy = 0; iy < ih; ++iy)
            for (int ix = 0; ix < iw; ++ix) {
                const T* src = xv.ptr() + ((static_cast<int64_t>(b) * ih + iy) * iw + ix) * ic;
                for (int dy = 0; dy < r; ++dy)
                    for (int dx = 0; dx < r; ++dx) {
                        T* dst = out.ptr() +
                                 ((static_cast<int64_t>(b) * oh + iy * r + dy) * ow + ix * r + dx) * c;
                        const T* s2 = src + (static_cast<int64_t>(dy) * r + dx) * c;
                        std::copy(s2, s2 + c, dst);
                    }
            }
    int xid = x.id;
    int oid = g.add_node(std::move(out), g.wants(xid));
    g.set_backward(oid, [xid, oid, n, ih, iw, ic, c, r, oh, ow](Graph<T>& gg) {
        const Tensor<T>& dy2 = gg.grad_buf(oid);
        Tensor<T>& dx = gg.grad_buf(xid);
        for (int b = 0; b < n; ++b)
            for (int iy = 0; iy < ih; ++iy)
                for (int ix = 0; ix < iw; ++ix) {
                    T* dst = dx.ptr() + ((static_cast<int64_t>(b) * ih + iy) * iw + ix) * ic;
                    for (int dyo = 0; dyo < r; ++dyo)
                        for (int dxo = 0; dxo < r; ++dxo) {
                            const T* src =
                                dy2.ptr() +
                                ((static_cast<int64_t>(b) * oh + iy * r + dyo) * ow + ix * r + dxo) * c;
                            T* d2 = dst + (static_cast<int64_t>(dyo) * r + dxo) * c;
                            for (int i = 0; i < c; ++i) d2[i] += src[i];
                        }
                }
    });
    return {&g, oid};
}

// Nearest-neighbor 2x upsampling.
template <typename T>
Var<T> upsample_nearest2(Var<T> x) {
    Graph<T>& g = *x.g;
    const Tensor<T>& xv = x.val();
    check_contract(xv.rank() == 4, "upsample_nearest2: NHWC expected");
    const int n = xv.dim(0), h = xv.dim(1), w = xv.dim(2), c = xv.dim(3);
    Tensor<T> out({n, h * 2, w * 2, c});
    for (int b = 0; b < n; ++b)
        for (int y = 0; y < h * 2; ++y)
            for (int xo = 0; xo < w * 2; ++xo) {
                const T* src = xv.ptr() + ((static_cast<int64_t>(b) * h + y / 2) * w + xo / 2) * c;
                T* dst = out.ptr() + ((static_cast<int64_t>(b) * h * 2 + y) * w * 2 + xo) * c;
                std::copy(src, src + c, dst);
            }
    int xid = x.id;
    int oid = g.add_node(std::move(out), g.wants(xid));
    g.set_backward(oid, [xid, oid, n, h, w, c](Graph<T>& gg) {
        const Tensor<T>& dy = gg.grad_buf(oid);
        Tensor<T>& dx = gg.grad_buf(xid);
        for (int b = 0; b < n; ++b)
            for (int y = 0; y < h * 2; ++y)
                for (int xo = 0; xo < w * 2; ++xo) {
                    const T* src = dy.ptr() + ((static_cast<int64_t>(b) * h * 2 + y) * w * 2 + xo) * c;
                    T* dst = dx.ptr() + ((static_cast<int64_t>(b) * h + y / 2) * w + xo / 2) * c;
                    for (int i = 0; i < c; ++i) dst[i] += src[i];
                }
    });
    return {&g, oid};
}

// 2x2 average pooling.
template <typename T>
Var<T> avgpool2(Var<T> x) {
    Graph<T>& g = *x.g;
    const Tensor<T>& xv = x.val();
    check_contract(xv.rank() == 4 && xv.dim(1) % 2 == 0 && xv.dim(2) % 2 == 0,
                   "avgpool2: dims must be even");
    const int n = xv.dim(0), h = xv.dim(1), w = xv.dim(2), c = xv.dim(3);
    const int oh = h / 2, ow = w / 2;
    Tensor<T> out({n, oh, ow, c}, T(0));
    for (int b = 0; b < n; ++b)
        for (int y = 0; y < h; ++y)
            for (int xo = 0; xo < w; ++xo) {
                const T* src = xv.ptr() + ((static_cast<int64_t>(b) * h + y) * w + xo) * c;
                T* dst = out.ptr() + ((static_cast<int64_t>(b) * oh + y / 2) * ow + xo / 2) * c;
                for (int i = 0; i < c; ++i) dst[i] += src[i] * T(0.25);
            }
    int xid = x.id;
    int oid = g.add_node(std::move(out), g.wants(xid));
    g.set_backward(oid, [xid, oid, n, h, w, c, oh, ow](Graph<T>& gg) {
        const Tensor<T>& dy = gg.grad_buf(oid);
        Tensor<T>& dx = gg.grad_buf(xid);
        for (int b = 0; b < n; ++b)
            for (int y = 0; y < h; ++y)
                for (int xo = 0; xo < w; ++xo) {
                    const T* src = dy.ptr() + ((static_cast<int64_t>(b) * oh + y / 2) * ow + xo / 2) * c;
                    T* dst = dx.ptr() + ((static_cast<int64_t>(b) * h + y) * w + xo) * c;
                    for (int i = 0; i < c; ++i) dst[i] += src[i] * T(0.25);
                }
    });
    return {&g, oid};
}

// Bilinear resampling to (oh, ow); half-pixel-centered sampling.
template <typename T>
Var<T> upsample_bilinear(Var<T> x, int oh, int ow) {
    Graph<T>& g = *x.g;
    const Tensor<T>& xv = x.val();
    check_contract(xv.rank() == 4, "upsample_bilinear: NHWC expected");
    const int n = xv.dim(0), h = xv.dim(1), w = xv.dim(2), c = xv.dim(3);
    if (oh == h && ow == w) return x;

    struct Tap {
        int i0, i1;
        T w0, w1;
    };
    auto taps = [](int in, int out) {
        std::vector<Tap> v(static_cast<size_t>(out));
        double s = static_cast<double>(in) / out;
        for (int o = 0; o < out; ++o) {
            double src = (o + 0.5) * s - 0.5;
            double f = std::floor(src);
            int i0 = static_cast<int>(f);
            double frac = src - f;
            int i1 = i0 + 1;
            i0 = std::max(0, std::min(in - 1, i0));
            i1 = std::max(0, std::min(in - 1, i1));
            v[static_cast<size_t>(o)] = {i0, i1, static_cast<T>(1.0 - frac), static_cast<T>(frac)};
        }
        return v;
    };
    auto ty = std::make_shared<std::vector<Tap>>(taps(h, oh));
    auto tx = std::make_shared<std::vector<Tap>>(taps(w, ow));

    Tensor<T> out({n, oh, ow, c}, T(0));
    for (int b = 0; b < n; ++b)
        for (int y = 0; y < oh; ++y) {
            const Tap& a = (*ty)[static_cast<size_t>(y)];
            for (int xo = 0; xo < ow; ++xo) {
                const Tap& bb = (*tx)[static_cast<size_t>(xo)];
                const T* p00 = xv.ptr() + ((static_cast<int64_t>(b) * h + a.i0) * w + bb.i0) * c;
                const T* p01 = xv.ptr() + ((static_cast<int64_t>(b) * h + a.i0) * w + bb.i1) * c;
                const T* p10 = xv.ptr() + ((static_cast<int64_t>(b) * h + a.i1) * w + bb.i0) * c;
                const T* p11 = xv.ptr() + ((static_cast<int64_t>(b) * h + a.i1) * w + bb.i1) * c;
                T* dst = out.ptr() + ((static_cast<int64_t>(b) * oh + y) * ow + xo) * c;
                for (int i = 0; i < c; ++i)
                    dst[i] = a.w0 * (bb.w0 * p00[i] + bb.w1 * p01[i]) +
                             a.w1 * (bb.w0 * p10[i] + bb.w1 * p11[i]);
            }
        }
    int xid = x.id;
    int oid = g.add_node(std::move(out), g.wants(xid));
    g.set_backward(oid, [xid, oid, n, h, w, c, oh, ow, ty, tx](Graph<T>& gg) {
        const Tensor<T>& dy = gg.grad_buf(oid);
        Tensor<T>& dx = gg.grad_buf(xid);
        for (int b = 0; b < n; ++b)
            for (int y = 0; y < oh; ++y) {
                const Tap& a = (*ty)[static_cast<size_t>(y)];
                for (int xo = 0; xo < ow; ++xo) {
                    const Tap& bb = (*tx)[static_cast<size_t>(xo)];
                    const T* src = dy.ptr() + ((static_cast<int64_t>(b) * oh + y) * ow + xo) * c;
                    T* p00 = dx.ptr() + ((static_cast<int64_t>(b) * h + a.i0) * w + bb.i0) * c;
                    T* p01 = dx.ptr() + ((static_cast<int64_t>(b) * h + a.i0) * w + bb.i1) * c;
                    T* p10 = dx.ptr() + ((static_cast<int64_t>(b) * h + a.i1) * w + bb.i0) * c;
                    T* p11 = dx.ptr() + ((static_cast<int64_t>(b) * h + a.i1) * w + bb.i1) * c;
                    for (int i = 0; i < c; ++i) {
                        p00[i] += a.w0 * bb.w0 * src[i];
                        p01[i] += a.w0 * bb.w1 * src[i];
                        p10[i] += a.w1 * bb.w0 * src[i];
                        p11[i] += a.w1 * bb.w1 * src[i];
                    }
                }
            }
    });
    return {&g, oid};
}

}  // namespace pngen::nn
