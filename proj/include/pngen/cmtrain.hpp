#pragma once

#include <deque>
#include <filesystem>
#include <map>
#include <optional>

#include "pngen/checkpoint.hpp"
#include "pngen/data.hpp"
#include "pngen/pae.hpp"
#include "pngen/pdit.hpp"
#include "pngen/schedule.hpp"

// Consistency training of the P-DiT in the PAE latent space: latent
// normalization against precomputed statistics, curriculum-driven CT loss
// with a stop-gradient teacher, EMA tracking, checkpointing.
namespace pngen::cmtrain {

struct CMTrainConfig {
    schedule::SigmaSchedule sigma;
    schedule::Curriculum curriculum;  // total_iterations mirrors `iterations`
    schedule::TimestepSampler sampler;
    double sigma_data = 0.5;
    double lr = 2e-4;
    int64_t iterations = 5000;
    int batch = 16;
    double ema_decay = 0.999;
    double grad_clip = 1.0;
    int stats_batches = 100;
    int64_t checkpoint_every = 2000;
    int64_t log_every = 50;
    uint64_t seed = 0;
    pdit::PDiTConfig pdit;

    static CMTrainConfig from_config(const RunConfig& cfg);
    void write(RunConfig& cfg) const;
    void validate() const;
};

struct LatentStats {
    std::vector<float> mean;
    std::vector<float> std;
    float sigma_data = 0.5f;
};

// Streaming channel-wise mean/std over encoded latents of sampled batches.
// Aborts with a diagnostic on a degenerate channel (std < 1e-8).
LatentStats compute_latent_stats(pae::PAEModel<float>& pae_model, const data::PairedDataset& ds,
                                 int n_batches, int batch, double sigma_data);

// z_n = (z - mean) / std * sigma_data, channelwise; denormalize inverts it.
Tensor<float> normalize(const Tensor<float>& z, const LatentStats& stats);
Tensor<float> denormalize(const Tensor<float>& z_n, const LatentStats& stats);

// Prompt features of one encoded batch, as graph constants.
template <typename T>
pae::PromptFeatureVars<T> prompts_to_vars(nn::Graph<T>& g,
                                          const typename pae::PAEModel<T>::Encoded& enc) {
    pae::PromptFeatureVars<T> out;
    for (int l = 0; l < 4; ++l)
        out.global[static_cast<size_t>(l)] = g.constant(enc.f_global[static_cast<size_t>(l)]);
    out.local = g.constant(enc.f_local);
    return out;
}

struct TrainState {
    pdit::PDiTModel<float> model;
    nn::EmaParams<float> ema;
    nn::RAdam<float> opt;
    int64_t k = 0;
    uint64_t seed = 0;

    // frozen-PAE encode cache keyed by (image index, crop origin)
    struct EncodeCache {
        std::map<std::tuple<int, int, int>, pae::PAEModel<float>::Encoded> entries;
        size_t cap = 512;
    };
    EncodeCache cache;

    TrainState(const pdit::PDiTConfig& cfg, uint64_t seed_)
        : model(cfg, seed_), seed(seed_) {
        ema.init_from(model.params);
    }
};

struct StepInfo {
    double loss = 0.0;
    int num_steps = 0;       // N(k) used this step
    double mean_sigma = 0.0;  // batch mean of the drawn sigma_t
    double mean_lambda = 0.0;
    double grad_norm = 0.0;
};

// Internals exposed for verification.
struct StepDebug {
    std::vector<double> sigma_lo, sigma_hi;
    Tensor<float> eps, z0, z_lo, z_hi, teacher;
};

// One consistency-training step over a paired batch. The PAE is frozen;
// z_t and z_{t+1} share the same noise draw; the teacher pass runs without
// gradients (theta^- = theta under stop-gradient).
StepInfo ct_step(const data::Batch& batch, TrainState& state, pae::PAEModel<float>& pae_model,
                 const LatentStats& stats, const CMTrainConfig& cfg, StepDebug* dbg = nullptr);

void ema_update(TrainState& state, double decay);

struct TrainPDiTResult {
    std::filesystem::path checkpoint_dir;
    double final_loss = 0.0;
};

TrainPDiTResult train_pdit(const data::PairedDataset& ds,
                           const std::filesystem::path& pae_ckpt_dir, const RunConfig& raw_config,
                           const std::filesystem::path& out_dir);

// Checkpoint tensor names: student params bare, EMA under "ema.", stats
// under "stats.".
LatentStats stats_from_checkpoint(const Checkpoint& ckpt);
void stats_tensors(const LatentStats& stats, Tensor<float>& mean, Tensor<float>& std);

}  // namespace pngen::cmtrain
