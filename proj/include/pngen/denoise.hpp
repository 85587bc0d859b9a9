#pragma once

#include <filesystem>
#include <vector>

#include "pngen/checkpoint.hpp"
#include "pngen/data.hpp"
#include "pngen/nn.hpp"

// Downstream evaluation: a plain feed-forward residual denoiser trained on
// real, synthetic, or mixed pairs, plus its PSNR/SSIM evaluation harness.
namespace pngen::denoise {

struct DenoiserConfig {
    int depth = 8;   // total conv layers
    int width = 32;
    int patch = 48;
    int batch = 8;
    int64_t iterations = 2000;
    double lr = 1e-3;
    double mix_ratio = 0.0;  // fraction of batches drawn from the synthetic source
    int64_t log_every = 100;
    uint64_t seed = 0;

    static DenoiserConfig from_config(const RunConfig& cfg);
    void write(RunConfig& cfg) const;
    void validate() const;
};

// Residual-predicting stack: conv+relu head, (depth-2) conv+norm+relu middle
// layers, a zero-initialized output conv; the predicted residual is
// subtracted from the input.
template <typename T>
struct DnCNN {
    nn::Conv2d<T> head;
    std::vector<nn::Conv2d<T>> mid;
    nn::Conv2d<T> tail;

    DnCNN() = default;
    DnCNN(nn::ParamStore<T>& ps, const DenoiserConfig& cfg, RandomStream& rs)
        : head(ps, "dn.head", 3, cfg.width, 3, 1, rs),
          tail(ps, "dn.tail", cfg.width, 3, 3, 1, rs, nn::Init::kZero) {
        for (int i = 0; i + 2 < cfg.depth; ++i)
            mid.emplace_back(ps, "dn.mid" + std::to_string(i), cfg.width, cfg.width, 3, 1, rs);
    }

    nn::Var<T> forward(nn::Graph<T>& g, nn::Var<T> noisy) const {
        using namespace nn;
        Var<T> h = relu(head(g, noisy));
        for (const auto& conv : mid) h = relu(layernorm_lastdim(conv(g, h)));
        return sub(noisy, tail(g, h));
    }
};

struct DenoiserModel {
    DenoiserConfig cfg;
    nn::ParamStore<float> params;
    DnCNN<float> net;

    explicit DenoiserModel(const DenoiserConfig& c) : cfg(c) {
        cfg.validate();
        RandomStream rs(cfg.seed, "dn-init");
        net = DnCNN<float>(params, cfg, rs);
    }

    Image denoise_image(const Image& noisy);
};

struct DenoiserTrainResult {
    std::filesystem::path checkpoint_dir;
    double final_loss = 0.0;
    double first_loss = 0.0;
    int64_t synthetic_batches = 0;  // batches drawn from the synthetic source
};

// L1 training with random crops and 8-fold dihedral augmentation; each batch
// comes from the real or synthetic source by a Bernoulli(mix_ratio) draw.
DenoiserTrainResult train_denoiser(const data::PairedDataset* real,
                                   const data::PairedDataset* synth, const RunConfig& raw_config,
                                   const std::filesystem::path& out_dir);

DenoiserModel load_denoiser(const std::filesystem::path& ckpt_dir);

struct EvalRow {
    std::string id;
    double psnr_db = 0.0;
    double ssim = 0.0;
};

struct EvalReport {
    std::vector<EvalRow> rows;
    double mean_psnr = 0.0;
    double mean_ssim = 0.0;
};

// Per-image PSNR/SSIM of the denoised output against clean; optionally
// writes a CSV (image_id, psnr_db, ssim + a final mean row).
EvalReport eval_denoiser(DenoiserModel& model, const data::PairedDataset& test,
                         const std::filesystem::path& csv_out = {});

// Baseline report without a model (identity denoiser).
EvalReport eval_identity(const data::PairedDataset& test);

}  // namespace pngen::denoise
