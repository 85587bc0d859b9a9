#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "pngen/cmtrain.hpp"
#include "pngen/image.hpp"
#include "pngen/pae.hpp"
#include "pngen/pdit.hpp"

// Inference: paired and unpaired one-step noise generation and
// synthetic-dataset emission. All randomness is keyed by (seed, purpose,
// stream index) so generation is reproducible and parallelizable.
namespace pngen::genpipe {

// Frozen generator stack; the P-DiT carries EMA weights.
struct Generator {
    pae::PAEModel<float> pae_model;
    pdit::PDiTModel<float> pdit_model;
    cmtrain::LatentStats stats;
    schedule::SigmaSchedule sigma;

    Generator(pae::PAEModel<float>&& p, pdit::PDiTModel<float>&& d)
        : pae_model(std::move(p)), pdit_model(std::move(d)) {}

    static Generator load(const std::filesystem::path& pae_ckpt,
                          const std::filesystem::path& pdit_ckpt);
};

struct GenInfo {
    float preclamp_min = 0.0f;
    float preclamp_max = 0.0f;
    double saturation_frac = 0.0;  // fraction of pixels clamped
    std::string prompt_source;
};

// Core one-step generation: prompts from the given residual, latent drawn at
// sigma_max, one consistency evaluation, decode conditioned on clean.
Image generate_from_prompts(Generator& gen, const Image& clean,
                            const Tensor<float>& prompt_residual, uint64_t seed, uint64_t index,
                            GenInfo* info = nullptr);

// Paired mode: the prompt residual is noisy_ref - clean.
Image generate_paired(Generator& gen, const Image& clean, const Image& noisy_ref, uint64_t seed,
                      uint64_t index = 0, GenInfo* info = nullptr);

struct NoiseBank {
    std::vector<Tensor<float>> residuals;
    std::vector<std::string> ids;

    static NoiseBank from_paired_dir(const std::filesystem::path& root);
    bool empty() const { return residuals.empty(); }
};

// Unpaired mode: a bank residual (cropped or reflect-tiled to the clean
// image's size) serves as the prompt source.
Image generate_unpaired(Generator& gen, const Image& clean, const NoiseBank& bank, uint64_t seed,
                        uint64_t index = 0, GenInfo* info = nullptr);

// Center-crop or reflect-tile a residual to (h, w).
Tensor<float> adapt_residual(const Tensor<float>& src, int h, int w);

struct ManifestRow {
    std::string clean_path;
    std::string synth_path;
    uint64_t seed_index = 0;
    std::string prompt_source;
};

struct SynthesisRequest {
    std::filesystem::path clean_dir;
    std::filesystem::path noisy_dir;  // paired mode: aligned noisy references
    std::filesystem::path bank_dir;   // unpaired mode: paired root the bank is built from
    bool paired = true;
    int multiplier = 1;
    std::filesystem::path out_dir;
    uint64_t seed = 0;
    bool float_sidecar = false;
};

// Writes multiplier synthetic noisy images per clean image under
// out_dir/{clean,noisy} plus manifest.csv; rows are sorted by output path.
std::vector<ManifestRow> synthesize_dataset(Generator& gen, const SynthesisRequest& req);

std::vector<ManifestRow> read_manifest(const std::filesystem::path& csv);

}  // namespace pngen::genpipe
