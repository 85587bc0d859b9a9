#include "pngen/schedule.hpp"

#include <algorithm>
#include <cmath>

#include "pngen/errors.hpp"

namespace pngen::schedule {

void SigmaSchedule::validate() const {
    check_config(sigma_min > 0.0, "sigma_min must be positive");
    check_config(sigma_max > sigma_min, "sigma_max must exceed sigma_min");
    check_config(tau > 0.0, "tau must be positive");
    check_config(num_steps >= 2, "num_steps must be >= 2");
}

void Curriculum::validate() const {
    check_config(s0 >= 1, "curriculum s0 must be >= 1");
    check_config(s1 >= s0, "curriculum s1 must be >= s0");
    check_config(total_iterations > 0, "curriculum requires a positive iteration count");
}

void TimestepSampler::validate() const {
    check_config(p_std > 0.0, "p_std must be positive");
}

void EDMCoefficients::validate() const {
    check_config(sigma_data > 0.0, "sigma_data must be positive");
}

int curriculum_steps(int64_t k, const Curriculum& c) {
    c.validate();
    check_contract(k >= 0 && k <= c.total_iterations, "curriculum iteration index out of range");
    double ratio_log = std::log2(static_cast<double>(c.s1) / static_cast<double>(c.s0));
    int64_t k_prime = static_cast<int64_t>(std::floor(static_cast<double>(c.total_iterations) /
                                                      (ratio_log + 1.0)));
    k_prime = std::max<int64_t>(k_prime, 1);
    double expo = static_cast<double>(k) / static_cast<double>(k_prime);
    if (c.floor_exponent) expo = std::floor(expo);
    double grown = static_cast<double>(c.s0) * std::exp2(expo);
    double steps = std::min(grown, static_cast<double>(c.s1));
    return static_cast<int>(steps) + 1;
}

double sigma_at(int t, int num_steps, const SigmaSchedule& s) {
    SigmaSchedule checked = s;
    checked.num_steps = num_steps;
    checked.validate();
    if (t < 1 || t > num_steps) throw std::out_of_range("sigma_at: t out of range [1, N]");
    double inv_tau = 1.0 / s.tau;
    double lo = std::pow(s.sigma_min, inv_tau);
    double hi = std::pow(s.sigma_max, inv_tau);
    double u = lo + (static_cast<double>(t - 1) / static_cast<double>(num_steps - 1)) * (hi - lo);
    return std::pow(u, s.tau);
}

std::vector<double> sigma_grid(int num_steps, const SigmaSchedule& s) {
    std::vector<double> grid(static_cast<size_t>(num_steps));
    for (int t = 1; t <= num_steps; ++t) grid[static_cast<size_t>(t - 1)] = sigma_at(t, num_steps, s);
    return grid;
}

std::vector<double> timestep_probs(int num_steps, const SigmaSchedule& s,
                                   const TimestepSampler& ts) {
    ts.validate();
    check_contract(num_steps >= 2, "timestep_probs requires N >= 2");
    std::vector<double> grid = sigma_grid(num_steps, s);
    std::vector<double> p(static_cast<size_t>(num_steps - 1));
    double denom = std::sqrt(2.0) * ts.p_std;
    double total = 0.0;
    for (int t = 0; t + 1 < num_steps; ++t) {
        double a = std::erf((std::log(grid[static_cast<size_t>(t + 1)]) - ts.p_mean) / denom);
        double b = std::erf((std::log(grid[static_cast<size_t>(t)]) - ts.p_mean) / denom);
        p[static_cast<size_t>(t)] = a - b;
        total += a - b;
    }
    for (double& v : p) v /= total;
    return p;
}

int sample_timestep(const std::vector<double>& probs, RandomStream& rs) {
    double u = rs.uniform();
    double acc = 0.0;
    for (size_t i = 0; i < probs.size(); ++i) {
        acc += probs[i];
        if (u < acc) return static_cast<int>(i) + 1;
    }
    return static_cast<int>(probs.size());
}

Coeffs edm_coeffs(double sigma_t, double sigma_0, const EDMCoefficients& e) {
    e.validate();
    check_contract(sigma_0 >= 0.0 && sigma_t >= sigma_0, "edm_coeffs requires sigma_t >= sigma_0 >= 0");
    double sd2 = e.sigma_data * e.sigma_data;
    double gap = sigma_t - sigma_0;
    Coeffs c;
    c.c_in = 1.0 / std::sqrt(sd2 + sigma_t * sigma_t);
    c.c_skip = sd2 / (gap * gap + sd2);
    c.c_out = e.sigma_data * gap / std::sqrt(sd2 + sigma_t * sigma_t);
    return c;
}

double pseudo_huber_c(int64_t m) {
    return 0.00054 * std::sqrt(static_cast<double>(m));
}

double pseudo_huber(const double* x, const double* y, int64_t m) {
    double sq = 0.0;
    for (int64_t i = 0; i < m; ++i) {
        double d = x[i] - y[i];
        sq += d * d;
    }
    double c = pseudo_huber_c(m);
    return std::sqrt(sq + c * c) - c;
}

double pseudo_huber(const Tensor<double>& x, const Tensor<double>& y) {
    check_same_shape(x, y, "pseudo_huber");
    return pseudo_huber(x.ptr(), y.ptr(), x.numel());
}

double pseudo_huber(const Tensor<float>& x, const Tensor<float>& y) {
    check_same_shape(x, y, "pseudo_huber");
    double sq = 0.0;
    for (int64_t i = 0; i < x.numel(); ++i) {
        double d = static_cast<double>(x[i]) - static_cast<double>(y[i]);
        sq += d * d;
    }
    double c = pseudo_huber_c(x.numel());
    return std::sqrt(sq + c * c) - c;
}

double loss_weight(double sigma_t, double sigma_t1) {
    check_contract(sigma_t1 > sigma_t, "loss_weight requires sigma_{t+1} > sigma_t");
    return 1.0 / (sigma_t1 - sigma_t);
}

}  // namespace pngen::schedule
