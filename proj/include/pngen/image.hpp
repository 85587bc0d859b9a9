#pragma once

#include <filesystem>

#include "pngen/tensor.hpp"

namespace pngen {

// Images are float tensors (H,W,3) in [0,1]; storage on disk is 8-bit PNG.
using Image = Tensor<float>;

Image read_png(const std::filesystem::path& path);
void write_png(const std::filesystem::path& path, const Image& img);

// Raw float sidecar (little-endian), used where 8-bit quantization would
// perturb metrics.
Image read_f32(const std::filesystem::path& path);
void write_f32(const std::filesystem::path& path, const Image& img);

inline Tensor<float> residual_of(const Image& noisy, const Image& clean) {
    check_same_shape(noisy, clean, "residual");
    Tensor<float> r(noisy.shape);
    for (int64_t i = 0; i < r.numel(); ++i) r[i] = noisy[i] - clean[i];
    return r;
}

inline void clamp01(Image& img) {
    for (auto& v : img.data) v = v < 0.0f ? 0.0f : (v > 1.0f ? 1.0f : v);
}

}  // namespace pngen
