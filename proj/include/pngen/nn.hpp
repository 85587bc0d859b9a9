#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "pngen/ops.hpp"
#include "pngen/rng.hpp"

namespace pngen::nn {

// ---------------------------------------------------------------------------
// initialization
// ---------------------------------------------------------------------------

enum class Init { kKaiming, kXavier, kZero, kNormal02 };

template <typename T>
Tensor<T> init_tensor(std::vector<int> shape, int fan_in, Init mode, RandomStream& rs) {
    Tensor<T> t(std::move(shape));
    switch (mode) {
        case Init::kZero:
            break;
        case Init::kKaiming:
            rs.fill_normal(t, 0.0, std::sqrt(2.0 / std::max(1, fan_in)));
            break;
        case Init::kXavier:
            rs.fill_normal(t, 0.0, std::sqrt(1.0 / std::max(1, fan_in)));
            break;
        case Init::kNormal02:
            rs.fill_normal(t, 0.0, 0.02);
            break;
    }
    return t;
}

// ---------------------------------------------------------------------------
// layers
// ---------------------------------------------------------------------------

template <typename T>
struct Linear {
    Param<T>* w = nullptr;
    Param<T>* b = nullptr;

    Linear() = default;
    Linear(ParamStore<T>& ps, const std::string& name, int in, int out, RandomStream& rs,
           Init mode = Init::kXavier) {
        w = ps.add(name + ".w", init_tensor<T>({in, out}, in, mode, rs));
        b = ps.add(name + ".b", Tensor<T>::zeros({out}));
    }

    // x: (..., in) flattened to rows.
    Var<T> operator()(Graph<T>& g, Var<T> x) const {
        const auto& s = x.shape();
        const int in = w->value.dim(0), out = w->value.dim(1);
        std::vector<int> oshape(s.begin(), s.end() - 1);
        oshape.push_back(out);
        Var<T> flat = reshape(x, {static_cast<int>(x.val().rows()), in});
        Var<T> y = add_bias_lastdim(matmul(flat, g.leaf(w)), g.leaf(b));
        return reshape(y, oshape);
    }
};

template <typename T>
struct Conv2d {
    Param<T>* w = nullptr;
    Param<T>* b = nullptr;
    int stride = 1;

    Conv2d() = default;
    Conv2d(ParamStore<T>& ps, const std::string& name, int cin, int cout, int k, int stride_,
           RandomStream& rs, Init mode = Init::kKaiming)
        : stride(stride_) {
        w = ps.add(name + ".w", init_tensor<T>({k, k, cin, cout}, k * k * cin, mode, rs));
        b = ps.add(name + ".b", Tensor<T>::zeros({cout}));
    }

    Var<T> operator()(Graph<T>& g, Var<T> x) const {
        return conv2d(x, g.leaf(w), g.leaf(b), stride);
    }
};

// Pre-activation residual block: x + conv(silu(conv(silu(ln(x))))).
template <typename T>
struct ResBlock {
    Conv2d<T> c1, c2;

    ResBlock() = default;
    ResBlock(ParamStore<T>& ps, const std::string& name, int c, RandomStream& rs)
        : c1(ps, name + ".c1", c, c, 3, 1, rs), c2(ps, name + ".c2", c, c, 3, 1, rs) {}

    Var<T> operator()(Graph<T>& g, Var<T> x) const {
        Var<T> h = c1(g, silu(layernorm_lastdim(x)));
        h = c2(g, silu(h));
        return add(x, h);
    }
};

// ---------------------------------------------------------------------------
// optimizers
// ---------------------------------------------------------------------------

struct OptimizerConfig {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

template <typename T>
class Adam {
public:
    explicit Adam(OptimizerConfig cfg = {}) : cfg_(cfg) {}

    void step(ParamStore<T>& ps, double lr) {
        ++t_;
        double bc1 = 1.0 - std::pow(cfg_.beta1, t_);
        double bc2 = 1.0 - std::pow(cfg_.beta2, t_);
        for (const auto& p : ps.all()) {
            if (!p->trainable) continue;
            ensure_state(*p);
            for (int64_t i = 0; i < p->value.numel(); ++i) {
                double gv = static_cast<double>(p->grad[i]);
                double m = cfg_.beta1 * p->opt_m[i] + (1.0 - cfg_.beta1) * gv;
                double v = cfg_.beta2 * p->opt_v[i] + (1.0 - cfg_.beta2) * gv * gv;
                p->opt_m[i] = static_cast<T>(m);
                p->opt_v[i] = static_cast<T>(v);
                double mh = m / bc1;
                double vh = v / bc2;
                p->value[i] -= static_cast<T>(lr * mh / (std::sqrt(vh) + cfg_.eps));
            }
        }
    }

    int64_t iterations() const { return t_; }

private:
    void ensure_state(Param<T>& p) {
        if (p.opt_m.shape != p.value.shape) p.opt_m = Tensor<T>::zeros(p.value.shape);
        if (p.opt_v.shape != p.value.shape) p.opt_v = Tensor<T>::zeros(p.value.shape);
    }

    OptimizerConfig cfg_;
    int64_t t_ = 0;
};

// Rectified Adam: falls back to an unadapted step while the variance
// estimate is untrustworthy (small t), then rectifies it.
template <typename T>
class RAdam {
public:
    explicit RAdam(OptimizerConfig cfg = {}) : cfg_(cfg) {}

    void step(ParamStore<T>& ps, double lr) {
        ++t_;
        double b2t = std::pow(cfg_.beta2, t_);
        double bc1 = 1.0 - std::pow(cfg_.beta1, t_);
        double rho_inf = 2.0 / (1.0 - cfg_.beta2) - 1.0;
        double rho = rho_inf - 2.0 * static_cast<double>(t_) * b2t / (1.0 - b2t);
        bool rectify = rho > 4.0;
        double r = 1.0;
        if (rectify)
            r = std::sqrt(((rho - 4.0) * (rho - 2.0) * rho_inf) /
                          ((rho_inf - 4.0) * (rho_inf - 2.0) * rho));
        for (const auto& p : ps.all()) {
            if (!p->trainable) continue;
            ensure_state(*p);
            for (int64_t i = 0; i < p->value.numel(); ++i) {
                double gv = static_cast<double>(p->grad[i]);
                double m = cfg_.beta1 * p->opt_m[i] + (1.0 - cfg_.beta1) * gv;
                double v = cfg_.beta2 * p->opt_v[i] + (1.0 - cfg_.beta2) * gv * gv;
                p->opt_m[i] = static_cast<T>(m);
                p->opt_v[i] = static_cast<T>(v);
                double mh = m / bc1;
                if (rectify) {
                    double vh = std::sqrt(v / (1.0 - b2t));
                    p->value[i] -= static_cast<T>(lr * r * mh / (vh + cfg_.eps));
                } else {
                    p->value[i] -= static_cast<T>(lr * mh);
                }
            }
        }
    }

    int64_t iterations() const { return t_; }

private:
    void ensure_state(Param<T>& p) {
        if (p.opt_m.shape != p.value.shape) p.opt_m = Tensor<T>::zeros(p.value.shape);
        if (p.opt_v.shape != p.value.shape) p.opt_v = Tensor<T>::zeros(p.value.shape);
    }

    OptimizerConfig cfg_;
    int64_t t_ = 0;
};

// lr(k) for k in [0, total-1], annealing lr0 -> lr_min on a half cosine.
inline double cosine_lr(int64_t k, int64_t total, double lr0, double lr_min) {
    if (total <= 1) return lr_min;
    double c = std::cos(3.14159265358979323846 * static_cast<double>(k) /
                        static_cast<double>(total - 1));
    return lr_min + 0.5 * (lr0 - lr_min) * (1.0 + c);
}

template <typename T>
double global_grad_norm(ParamStore<T>& ps) {
    double acc = 0.0;
    for (const auto& p : ps.all()) {
        if (!p->trainable) continue;
        for (int64_t i = 0; i < p->grad.numel(); ++i) {
            double v = static_cast<double>(p->grad[i]);
            acc += v * v;
        }
    }
    return std::sqrt(acc);
}

template <typename T>
double clip_gradients(ParamStore<T>& ps, double max_norm) {
    double norm = global_grad_norm(ps);
    if (norm > max_norm && norm > 0.0) {
        T s = static_cast<T>(max_norm / norm);
        for (const auto& p : ps.all())
            for (auto& v : p->grad.data) v *= s;
    }
    return norm;
}

// ---------------------------------------------------------------------------
// exponential moving average of parameters
// ---------------------------------------------------------------------------

template <typename T>
class EmaParams {
public:
    EmaParams() = default;

    void init_from(const ParamStore<T>& ps) {
        values_.clear();
        for (const auto& p : ps.all()) values_.push_back(p->value);
    }

    bool empty() const { return values_.empty(); }

    void update(const ParamStore<T>& ps, double decay) {
        check_contract(decay >= 0.0 && decay < 1.0, "ema decay must be in [0, 1)");
        check_contract(values_.size() == ps.size(), "ema/parameter set mismatch");
        size_t idx = 0;
        for (const auto& p : ps.all()) {
            Tensor<T>& e = values_[idx++];
            check_contract(e.shape == p->value.shape, "ema shape drift");
            for (int64_t i = 0; i < e.numel(); ++i)
                e[i] = static_cast<T>(decay * e[i] + (1.0 - decay) * p->value[i]);
        }
    }

    // Copy EMA weights into a parameter store (for evaluation/generation).
    void load_into(ParamStore<T>& ps) const {
        check_contract(values_.size() == ps.size(), "ema/parameter set mismatch");
        size_t idx = 0;
        for (const auto& p : ps.all()) p->value = values_[idx++];
    }

    const std::vector<Tensor<T>>& values() const { return values_; }
    std::vector<Tensor<T>>& values() { return values_; }

private:
    std::vector<Tensor<T>> values_;
};

}  // namespace pngen::nn
