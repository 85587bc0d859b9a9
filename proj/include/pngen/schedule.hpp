#pragma once

#include <cstdint>
#include <vector>

#include "pngen/rng.hpp"
#include "pngen/tensor.hpp"

// Closed-form mathematics of consistency-model training: the sigma grid, the
// discretization curriculum, the timestep sampling distribution, boundary
// coefficients, distance and weighting functions. Everything here is a pure
// function computed in double precision.
namespace pngen::schedule {

struct SigmaSchedule {
    double sigma_min = 0.002;
    double sigma_max = 80.0;
    double tau = 7.0;  // curvature exponent; larger tau packs steps near sigma_min
    int num_steps = 2;

    void validate() const;
};

struct Curriculum {
    int s0 = 10;   // minimum discretization steps
    int s1 = 160;  // maximum discretization steps
    int64_t total_iterations = 250000;
    // The growth exponent k/K' is real-valued by default; enable to floor it
    // into stair-steps instead.
    bool floor_exponent = false;

    void validate() const;
};

struct TimestepSampler {
    double p_mean = -1.1;
    double p_std = 2.0;

    void validate() const;
};

struct EDMCoefficients {
    double sigma_data = 0.5;

    void validate() const;
};

struct Coeffs {
    double c_in;
    double c_skip;
    double c_out;
};

// Step count N(k) = min(s0 * 2^(k/K'), s1) + 1 with K' = floor(K / (log2(s1/s0) + 1)).
int curriculum_steps(int64_t k, const Curriculum& c);

// sigma_t = (sigma_min^(1/tau) + (t-1)/(N-1) * (sigma_max^(1/tau) - sigma_min^(1/tau)))^tau,
// t in {1..N}.
double sigma_at(int t, int num_steps, const SigmaSchedule& s);

std::vector<double> sigma_grid(int num_steps, const SigmaSchedule& s);

// p(t) over t in {1..N-1}, proportional to the erf-difference of adjacent
// log-sigmas under a lognormal sampling distribution; normalized to sum 1.
std::vector<double> timestep_probs(int num_steps, const SigmaSchedule& s,
                                   const TimestepSampler& ts);

// Draws a step index t in {1..N-1} from the given probability vector.
int sample_timestep(const std::vector<double>& probs, RandomStream& rs);

Coeffs edm_coeffs(double sigma_t, double sigma_0, const EDMCoefficients& e);

// sqrt(|x - y|^2 + c^2) - c with c = 0.00054 * sqrt(m).
double pseudo_huber_c(int64_t m);
double pseudo_huber(const double* x, const double* y, int64_t m);
double pseudo_huber(const Tensor<double>& x, const Tensor<double>& y);
double pseudo_huber(const Tensor<float>& x, const Tensor<float>& y);

// lambda = 1 / (sigma_{t+1} - sigma_t).
double loss_weight(double sigma_t, double sigma_t1);

// Variance-exploding forward corruption x_t = x_0 + sigma_t * eps.
template <typename T>
Tensor<T> add_noise(const Tensor<T>& x0, double sigma_t, const Tensor<T>& eps) {
    check_same_shape(x0, eps, "add_noise");
    Tensor<T> out = x0;
    for (int64_t i = 0; i < out.numel(); ++i)
        out[i] = static_cast<T>(static_cast<double>(x0[i]) + sigma_t * static_cast<double>(eps[i]));
    return out;
}

}  // namespace pngen::schedule
