#include "pngen/noisestats.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "pngen/errors.hpp"

namespace pngen::noisestats {

namespace {

// np.pad 'reflect' index (no edge repetition); valid for |i| < 2n-2.
inline int reflect_index(int i, int n) {
    if (i < 0) i = -i;
    if (i >= n) i = 2 * n - 2 - i;
    return i;
}

// Integral image with one guard row/col: I(y,x) = sum over [0,y) x [0,x).
void integral(const std::vector<double>& src, int h, int w, std::vector<double>& out) {
    out.assign(static_cast<size_t>(h + 1) * (w + 1), 0.0);
    for (int y = 0; y < h; ++y) {
        double row = 0.0;
        for (int x = 0; x < w; ++x) {
            row += src[static_cast<size_t>(y) * w + x];
            out[static_cast<size_t>(y + 1) * (w + 1) + (x + 1)] =
                out[static_cast<size_t>(y) * (w + 1) + (x + 1)] + row;
        }
    }
}

inline double rect_sum(const std::vector<double>& I, int w1, int y0, int x0, int y1, int x1) {
    // inclusive box [y0..y1] x [x0..x1]
    return I[static_cast<size_t>(y1 + 1) * w1 + (x1 + 1)] -
           I[static_cast<size_t>(y0) * w1 + (x1 + 1)] -
           I[static_cast<size_t>(y1 + 1) * w1 + x0] + I[static_cast<size_t>(y0) * w1 + x0];
}

// Correlation map of one (H,W) plane, double internals.
void corr_map_plane(const std::vector<double>& plane, int h, int w, int rho,
                    std::vector<double>& out) {
    const int r = (rho - 1) / 2;
    const int pad = rho - 1;
    const int hp = h + 2 * pad, wp = w + 2 * pad;
    const int n = rho * rho;
    const double var_floor = 1e-12;

    std::vector<double> padded(static_cast<size_t>(hp) * wp);
    for (int y = 0; y < hp; ++y)
        for (int x = 0; x < wp; ++x)
            padded[static_cast<size_t>(y) * wp + x] =
                plane[static_cast<size_t>(reflect_index(y - pad, h)) * w + reflect_index(x - pad, w)];

    std::vector<double> sq(padded.size());
    for (size_t i = 0; i < padded.size(); ++i) sq[i] = padded[i] * padded[i];

    std::vector<double> ip, ip2, ips;
    integral(padded, hp, wp, ip);
    integral(sq, hp, wp, ip2);

    std::vector<double> prod(padded.size());
    out.assign(static_cast<size_t>(h) * w * n, 0.0);

    for (int dy = -r; dy <= r; ++dy) {
        for (int dx = -r; dx <= r; ++dx) {
            const int ch = (dy + r) * rho + (dx + r);
            // prod(y,x) = padded(y,x) * padded(y+dy,x+dx) where defined.
            std::fill(prod.begin(), prod.end(), 0.0);
            int y0 = std::max(0, -dy), y1 = std::min(hp, hp - dy);
            int x0 = std::max(0, -dx), x1 = std::min(wp, wp - dx);
            for (int y = y0; y < y1; ++y)
                for (int x = x0; x < x1; ++x)
                    prod[static_cast<size_t>(y) * wp + x] =
                        padded[static_cast<size_t>(y) * wp + x] *
                        padded[static_cast<size_t>(y + dy) * wp + (x + dx)];
            integral(prod, hp, wp, ips);

            for (int py = 0; py < h; ++py) {
                for (int px = 0; px < w; ++px) {
                    int cy = py + pad, cx = px + pad;
                    double sx = rect_sum(ip, wp + 1, cy - r, cx - r, cy + r, cx + r);
                    double sxx = rect_sum(ip2, wp + 1, cy - r, cx - r, cy + r, cx + r);
                    double sa = rect_sum(ip, wp + 1, cy - r + dy, cx - r + dx, cy + r + dy, cx + r + dx);
                    double saa =
                        rect_sum(ip2, wp + 1, cy - r + dy, cx - r + dx, cy + r + dy, cx + r + dx);
                    double sxa = rect_sum(ips, wp + 1, cy - r, cx - r, cy + r, cx + r);
                    double var_x = (sxx - sx * sx / n) / n;
                    double var_a = (saa - sa * sa / n) / n;
                    double value = 0.0;
                    if (var_x >= var_floor && var_a >= var_floor) {
                        double cov = (sxa - sx * sa / n) / n;
                        value = cov / std::sqrt(var_x * var_a);
                        // rounding can push marginally past +-1; never by more
                        check_contract(std::abs(value) <= 1.0 + 1e-9,
                                       "correlation magnitude exceeded 1");
                    }
                    out[(static_cast<size_t>(py) * w + px) * n + ch] = value;
                }
            }
        }
    }
}

}  // namespace

template <typename T>
Tensor<T> channel_mean_plane(const Tensor<T>& residual) {
    if (residual.rank() == 2) return residual;
    check_contract(residual.rank() == 3, "expected (H,W,C) residual");
    const int h = residual.dim(0), w = residual.dim(1), c = residual.dim(2);
    Tensor<T> plane({h, w});
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            double acc = 0.0;
            for (int j = 0; j < c; ++j) acc += residual.at(y, x, j);
            plane.at(y, x) = static_cast<T>(acc / c);
        }
    return plane;
}

template <typename T>
CorrelationMap<T> local_correlation_map(const Tensor<T>& residual, int rho, bool per_channel) {
    check_config(rho % 2 == 1, "correlation patch size must be odd");
    check_config(rho >= 3, "correlation patch size must be >= 3");
    const int h = residual.dim(0), w = residual.dim(1);
    check_config(rho <= std::min(h, w), "correlation patch exceeds image extent");
    const int n = rho * rho;

    std::vector<std::vector<double>> planes;
    if (per_channel && residual.rank() == 3) {
        const int c = residual.dim(2);
        planes.resize(static_cast<size_t>(c));
        for (int j = 0; j < c; ++j) {
            planes[static_cast<size_t>(j)].resize(static_cast<size_t>(h) * w);
            for (int y = 0; y < h; ++y)
                for (int x = 0; x < w; ++x)
                    planes[static_cast<size_t>(j)][static_cast<size_t>(y) * w + x] =
                        static_cast<double>(residual.at(y, x, j));
        }
    } else {
        Tensor<T> mean = channel_mean_plane(residual);
        planes.resize(1);
        planes[0].resize(static_cast<size_t>(h) * w);
        for (int64_t i = 0; i < mean.numel(); ++i) planes[0][static_cast<size_t>(i)] = mean[i];
    }

    std::vector<double> acc(static_cast<size_t>(h) * w * n, 0.0);
    std::vector<double> one;
    for (const auto& plane : planes) {
        corr_map_plane(plane, h, w, rho, one);
        for (size_t i = 0; i < acc.size(); ++i) acc[i] += one[i];
    }
    const double inv = 1.0 / static_cast<double>(planes.size());

    CorrelationMap<T> cm;
    cm.rho = rho;
    cm.values = Tensor<T>({h, w, n});
    for (size_t i = 0; i < acc.size(); ++i) cm.values[static_cast<int64_t>(i)] =
        static_cast<T>(acc[i] * inv);
    return cm;
}

template <typename T>
Tensor<T> rowcol_average(const CorrelationMap<T>& cm) {
    const int rho = cm.rho;
    check_contract(rho >= 1 && cm.values.rank() == 3 && cm.values.dim(2) == rho * rho,
                   "rowcol_average: invalid correlation map");
    const int h = cm.values.dim(0), w = cm.values.dim(1);
    Tensor<T> out({h, w, 2 * rho});
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            for (int i = 0; i < rho; ++i) {
                double acc = 0.0;
                for (int j = 0; j < rho; ++j) acc += cm.values.at(y, x, i * rho + j);
                out.at(y, x, i) = static_cast<T>(acc / rho);
            }
            for (int j = 0; j < rho; ++j) {
                double acc = 0.0;
                for (int i = 0; i < rho; ++i) acc += cm.values.at(y, x, i * rho + j);
                out.at(y, x, rho + j) = static_cast<T>(acc / rho);
            }
        }
    return out;
}

template Tensor<float> channel_mean_plane<float>(const Tensor<float>&);
template Tensor<double> channel_mean_plane<double>(const Tensor<double>&);
template CorrelationMap<float> local_correlation_map<float>(const Tensor<float>&, int, bool);
template CorrelationMap<double> local_correlation_map<double>(const Tensor<double>&, int, bool);
template Tensor<float> rowcol_average<float>(const CorrelationMap<float>&);
template Tensor<double> rowcol_average<double>(const CorrelationMap<double>&);

NoiseHistogram make_histogram(const std::vector<const Tensor<float>*>& residuals, int bins,
                              double lo, double hi, double eps) {
    check_contract(!residuals.empty(), "histogram over an empty residual set");
    check_contract(bins >= 1 && hi > lo, "invalid histogram binning");
    NoiseHistogram hist;
    hist.bin_edges.resize(static_cast<size_t>(bins) + 1);
    for (int i = 0; i <= bins; ++i)
        hist.bin_edges[static_cast<size_t>(i)] = lo + (hi - lo) * i / bins;

    std::vector<int64_t> counts(static_cast<size_t>(bins), 0);
    int64_t total = 0;
    const double scale = bins / (hi - lo);
    for (const Tensor<float>* r : residuals) {
        check_contract(r != nullptr && r->numel() > 0, "histogram: empty residual");
        for (int64_t i = 0; i < r->numel(); ++i) {
            int b = static_cast<int>((static_cast<double>((*r)[i]) - lo) * scale);
            b = std::clamp(b, 0, bins - 1);
            counts[static_cast<size_t>(b)]++;
            ++total;
        }
    }
    hist.probs.resize(static_cast<size_t>(bins));
    double denom = 1.0 + bins * eps;
    for (int i = 0; i < bins; ++i)
        hist.probs[static_cast<size_t>(i)] =
            (static_cast<double>(counts[static_cast<size_t>(i)]) / static_cast<double>(total) +
             eps) /
            denom;
    return hist;
}

double kld_between(const NoiseHistogram& p, const NoiseHistogram& q) {
    check_contract(p.probs.size() == q.probs.size(), "kld: histograms differ in binning");
    double acc = 0.0;
    for (size_t i = 0; i < p.probs.size(); ++i) {
        if (p.probs[i] <= 0.0) continue;
        check_contract(q.probs[i] > 0.0, "kld: q has an empty unsmoothed bin");
        acc += p.probs[i] * std::log(p.probs[i] / q.probs[i]);
    }
    return acc;
}

double kld(const std::vector<Tensor<float>>& real, const std::vector<Tensor<float>>& fake,
           int bins) {
    check_contract(!real.empty() && !fake.empty(), "kld over an empty residual set");
    std::vector<const Tensor<float>*> rp, fp;
    for (const auto& t : real) rp.push_back(&t);
    for (const auto& t : fake) fp.push_back(&t);
    return kld_between(make_histogram(rp, bins), make_histogram(fp, bins));
}

double kld(const Tensor<float>& real, const Tensor<float>& fake, int bins) {
    return kld_between(make_histogram({&real}, bins), make_histogram({&fake}, bins));
}

double akld(const Tensor<float>& clean, const Tensor<float>& real_noisy, const Generator& gen,
            int n_samples, int bins) {
    check_contract(n_samples >= 1, "akld needs n_samples >= 1");
    check_same_shape(clean, real_noisy, "akld");
    Tensor<float> real_res(clean.shape);
    for (int64_t i = 0; i < clean.numel(); ++i) real_res[i] = real_noisy[i] - clean[i];
    double acc = 0.0;
    for (int s = 0; s < n_samples; ++s) {
        Tensor<float> g = gen(clean);
        check_same_shape(clean, g, "akld generator output");
        Tensor<float> gen_res(clean.shape);
        for (int64_t i = 0; i < clean.numel(); ++i) gen_res[i] = g[i] - clean[i];
        acc += kld(real_res, gen_res, bins);
    }
    return acc / n_samples;
}

double psnr(const Tensor<float>& a, const Tensor<float>& b) {
    check_same_shape(a, b, "psnr");
    double mse = 0.0;
    for (int64_t i = 0; i < a.numel(); ++i) {
        double d = static_cast<double>(a[i]) - static_cast<double>(b[i]);
        mse += d * d;
    }
    mse /= static_cast<double>(a.numel());
    if (mse == 0.0) return std::numeric_limits<double>::infinity();
    return -10.0 * std::log10(mse);
}

namespace {

std::vector<double> gaussian_window(int size, double sigma) {
    std::vector<double> k(static_cast<size_t>(size));
    double sum = 0.0;
    int half = size / 2;
    for (int i = 0; i < size; ++i) {
        double d = i - half;
        k[static_cast<size_t>(i)] = std::exp(-d * d / (2.0 * sigma * sigma));
        sum += k[static_cast<size_t>(i)];
    }
    for (auto& v : k) v /= sum;
    return k;
}

// Separable valid-mode filtering of an (H,W) double plane.
void filter_valid(const std::vector<double>& src, int h, int w, const std::vector<double>& k,
                  std::vector<double>& out, int& oh, int& ow) {
    const int ks = static_cast<int>(k.size());
    oh = h - ks + 1;
    ow = w - ks + 1;
    std::vector<double> tmp(static_cast<size_t>(h) * ow);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < ow; ++x) {
            double acc = 0.0;
            for (int i = 0; i < ks; ++i) acc += k[static_cast<size_t>(i)] * src[static_cast<size_t>(y) * w + x + i];
            tmp[static_cast<size_t>(y) * ow + x] = acc;
        }
    out.assign(static_cast<size_t>(oh) * ow, 0.0);
    for (int y = 0; y < oh; ++y)
        for (int x = 0; x < ow; ++x) {
            double acc = 0.0;
            for (int i = 0; i < ks; ++i) acc += k[static_cast<size_t>(i)] * tmp[static_cast<size_t>(y + i) * ow + x];
            out[static_cast<size_t>(y) * ow + x] = acc;
        }
}

}  // namespace

double ssim(const Tensor<float>& a, const Tensor<float>& b) {
    check_same_shape(a, b, "ssim");
    const int h = a.dim(0), w = a.dim(1);
    const int c = a.rank() == 3 ? a.dim(2) : 1;
    const int win = 11;
    check_contract(h >= win && w >= win, "ssim: image smaller than the 11x11 window");
    const double k1 = 0.01, k2 = 0.03, range = 1.0;
    const double c1 = (k1 * range) * (k1 * range);
    const double c2 = (k2 * range) * (k2 * range);
    auto kernel = gaussian_window(win, 1.5);

    double total = 0.0;
    for (int ch = 0; ch < c; ++ch) {
        std::vector<double> xa(static_cast<size_t>(h) * w), xb(xa.size()), xaa(xa.size()),
            xbb(xa.size()), xab(xa.size());
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x) {
                double va = c == 1 && a.rank() == 2 ? a.at(y, x) : a.at(y, x, ch);
                double vb = c == 1 && b.rank() == 2 ? b.at(y, x) : b.at(y, x, ch);
                size_t i = static_cast<size_t>(y) * w + x;
                xa[i] = va;
                xb[i] = vb;
                xaa[i] = va * va;
                xbb[i] = vb * vb;
                xab[i] = va * vb;
            }
        std::vector<double> mu_a, mu_b, m_aa, m_bb, m_ab;
        int oh = 0, ow = 0;
        filter_valid(xa, h, w, kernel, mu_a, oh, ow);
        filter_valid(xb, h, w, kernel, mu_b, oh, ow);
        filter_valid(xaa, h, w, kernel, m_aa, oh, ow);
        filter_valid(xbb, h, w, kernel, m_bb, oh, ow);
        filter_valid(xab, h, w, kernel, m_ab, oh, ow);

        double acc = 0.0;
        for (size_t i = 0; i < mu_a.size(); ++i) {
            double va = m_aa[i] - mu_a[i] * mu_a[i];
            double vb = m_bb[i] - mu_b[i] * mu_b[i];
            double cov = m_ab[i] - mu_a[i] * mu_b[i];
            double num = (2.0 * mu_a[i] * mu_b[i] + c1) * (2.0 * cov + c2);
            double den = (mu_a[i] * mu_a[i] + mu_b[i] * mu_b[i] + c1) * (va + vb + c2);
            acc += num / den;
        }
        total += acc / static_cast<double>(mu_a.size());
    }
    return total / c;
}

}  // namespace pngen::noisestats
