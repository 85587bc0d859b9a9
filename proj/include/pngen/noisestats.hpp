#pragma once

#include <functional>
#include <vector>

#include "pngen/tensor.hpp"

// Noise-residual statistics (local Pearson correlation maps, channel moments)
// and evaluation metrics (KLD, AKLD, PSNR, SSIM). Metrics accumulate in
// double regardless of the storage type.
namespace pngen::noisestats {

template <typename T>
struct CorrelationMap {
    Tensor<T> values;  // (H, W, rho*rho), entries in [-1, 1]
    int rho = 0;
};

// Collapses (H,W,C) to the channel-mean plane (H,W). A 2-D input passes
// through unchanged.
template <typename T>
Tensor<T> channel_mean_plane(const Tensor<T>& residual);

// Per-pixel Pearson correlation between the offset-j neighbor series and the
// center series over the rho x rho window around each pixel; reflect padding
// at borders. Zero-variance series yield coefficient 0. With per_channel set,
// maps are computed per channel and averaged.
template <typename T>
CorrelationMap<T> local_correlation_map(const Tensor<T>& residual, int rho,
                                        bool per_channel = false);

// (H,W,rho^2) -> (H,W,2*rho): row-wise means of the rho x rho channel grid
// followed by column-wise means.
template <typename T>
Tensor<T> rowcol_average(const CorrelationMap<T>& cm);

struct NoiseHistogram {
    std::vector<double> bin_edges;  // bins+1 sorted edges
    std::vector<double> probs;      // bins entries, >= 0, summing to 1
};

// Pooled histogram over a set of residuals on [lo, hi], epsilon-smoothed and
// renormalized.
NoiseHistogram make_histogram(const std::vector<const Tensor<float>*>& residuals, int bins,
                              double lo = -1.0, double hi = 1.0, double eps = 1e-10);

// D_KL(p || q) in nats; histograms must share binning.
double kld_between(const NoiseHistogram& p, const NoiseHistogram& q);

inline constexpr int kDefaultKldBins = 256;

double kld(const std::vector<Tensor<float>>& real, const std::vector<Tensor<float>>& fake,
           int bins = kDefaultKldBins);

// Convenience overload for one residual per side.
double kld(const Tensor<float>& real, const Tensor<float>& fake, int bins = kDefaultKldBins);

using Generator = std::function<Tensor<float>(const Tensor<float>& clean)>;

inline constexpr int kDefaultAkldSamples = 10;

// Mean over n_samples draws of kld(real residual, generated residual).
double akld(const Tensor<float>& clean, const Tensor<float>& real_noisy, const Generator& gen,
            int n_samples = kDefaultAkldSamples, int bins = kDefaultKldBins);

// Peak signal-to-noise ratio in dB for [0,1] images; +infinity when equal.
double psnr(const Tensor<float>& a, const Tensor<float>& b);

// Structural similarity, 11x11 Gaussian window (sigma 1.5), K1=0.01, K2=0.03,
// dynamic range 1; valid-window region, averaged over channels.
double ssim(const Tensor<float>& a, const Tensor<float>& b);

}  // namespace pngen::noisestats
