#include "pngen/pae.hpp"

#include <cinttypes>
#include <cstdio>
#include <fstream>

namespace pngen::pae {

namespace fs = std::filesystem;

PAEConfig PAEConfig::from_config(const RunConfig& cfg) {
    PAEConfig c;
    c.patch = static_cast<int>(cfg.get_int("data.patch", c.patch));
    auto trunk = cfg.get_int_list("pae.trunk", {c.trunk[0], c.trunk[1], c.trunk[2], c.trunk[3]});
    check_config(trunk.size() == 4, "pae.trunk must list 4 channel counts");
    for (int i = 0; i < 4; ++i) c.trunk[static_cast<size_t>(i)] = trunk[static_cast<size_t>(i)];
    c.c_global = static_cast<int>(cfg.get_int("pae.c_global", c.c_global));
    c.c_local = static_cast<int>(cfg.get_int("pae.c_local", c.c_local));
    c.c_z = static_cast<int>(cfg.get_int("pae.c_z", c.c_z));
    c.rho = static_cast<int>(cfg.get_int("pae.rho", c.rho));
    c.lambda_z = cfg.get_real("pae.lambda_z", c.lambda_z);
    c.lpb_downsample = static_cast<int>(cfg.get_int("pae.lpb_downsample", c.lpb_downsample));
    c.per_channel_corr = cfg.get_bool("pae.per_channel_corr", c.per_channel_corr);
    c.lr = cfg.get_real("pae.lr", c.lr);
    c.lr_min = cfg.get_real("pae.lr_min", c.lr_min);
    c.iterations = cfg.get_int("pae.iterations", c.iterations);
    c.batch = static_cast<int>(cfg.get_int("pae.batch", c.batch));
    c.checkpoint_every = cfg.get_int("pae.checkpoint_every", c.checkpoint_every);
    c.log_every = cfg.get_int("pae.log_every", c.log_every);
    c.target_psnr = cfg.get_real("pae.target_psnr", c.target_psnr);
    c.eval_every = cfg.get_int("pae.eval_every", c.eval_every);
    c.seed = static_cast<uint64_t>(cfg.get_int("run.seed", 0));
    c.validate();
    return c;
}

void PAEConfig::write(RunConfig& cfg) const {
    cfg.set("data.patch", std::to_string(patch));
    cfg.set("pae.trunk", std::to_string(trunk[0]) + "," + std::to_string(trunk[1]) + "," +
                             std::to_string(trunk[2]) + "," + std::to_string(trunk[3]));
    cfg.set("pae.c_global", std::to_string(c_global));
    cfg.set("pae.c_local", std::to_string(c_local));
    cfg.set("pae.c_z", std::to_string(c_z));
    cfg.set("pae.rho", std::to_string(rho));
    cfg.set("pae.lambda_z", std::to_string(lambda_z));
    cfg.set("pae.lpb_downsample", std::to_string(lpb_downsample));
    cfg.set("pae.per_channel_corr", per_channel_corr ? "true" : "false");
    cfg.set("pae.lr", std::to_string(lr));
    cfg.set("pae.lr_min", std::to_string(lr_min));
    cfg.set("pae.iterations", std::to_string(iterations));
    cfg.set("pae.batch", std::to_string(batch));
    cfg.set("pae.checkpoint_every", std::to_string(checkpoint_every));
    cfg.set("pae.log_every", std::to_string(log_every));
    cfg.set("pae.target_psnr", std::to_string(target_psnr));
    cfg.set("pae.eval_every", std::to_string(eval_every));
    cfg.set("run.seed", std::to_string(seed));
}

void PAEConfig::validate() const {
    check_config(patch >= 16 && patch % 8 == 0, "pae patch must be >= 16 and divisible by 8");
    for (int c : trunk) check_config(c >= 1, "pae trunk channels must be positive");
    check_config(c_global >= 1 && c_local >= 1 && c_z >= 1, "pae channel plan must be positive");
    check_config(rho % 2 == 1 && rho >= 3, "pae rho must be odd and >= 3");
    check_config(lambda_z >= 0.0, "lambda_z must be non-negative");
    check_config(lpb_downsample == 1 || lpb_downsample == 2 || lpb_downsample == 4,
                 "lpb_downsample must be 1, 2 or 4");
    check_config(iterations >= 1 && batch >= 1, "pae training needs iterations and batch >= 1");
}

TrainResult train_pae(const data::PairedDataset& ds, const RunConfig& raw_config,
                      const fs::path& out_dir) {
    PAEConfig cfg = PAEConfig::from_config(raw_config);
    check_config(ds.size() > 0, "train_pae: empty dataset");
    check_config(ds.patch() == cfg.patch, "dataset patch size disagrees with config");

    RunConfig effective = raw_config;
    cfg.write(effective);

    PAEModel<float> model(cfg);
    nn::Adam<float> opt;
    fs::create_directories(out_dir);
    std::ofstream log(out_dir / "train_log.csv");
    log << "iteration,loss,lr\n";

    std::fprintf(stderr, "[train-pae] params=%" PRId64 " iterations=%" PRId64 " batch=%d\n",
                 model.params.total_values(), cfg.iterations, cfg.batch);

    TrainResult result;
    fs::path ckpt_dir = out_dir / "checkpoint";
    double loss_value = 0.0;
    for (int64_t k = 0; k < cfg.iterations; ++k) {
        data::Batch batch = ds.sample_batch(cfg.batch, k);
        Tensor<float> residual = batch.noisy;
        for (int64_t i = 0; i < residual.numel(); ++i) residual[i] -= batch.clean[i];

        nn::Graph<float> g;
        auto enc = model.encoder.forward(g, residual);
        nn::Var<float> recon = model.decoder.forward(g, enc.z, g.constant(batch.clean));
        nn::Var<float> loss =
            pae_loss(g, recon, g.constant(batch.noisy), enc.z, static_cast<float>(cfg.lambda_z));
        loss_value = loss.val()[0];
        if (!std::isfinite(loss_value))
            throw std::runtime_error("train_pae: non-finite loss at iteration " +
                                     std::to_string(k) + "; aborting");
        if (k == 0) result.first_loss = loss_value;

        model.params.zero_grads();
        g.backward(loss);
        double lr = nn::cosine_lr(k, cfg.iterations, cfg.lr, cfg.lr_min);
        opt.step(model.params, lr);

        log << k << "," << loss_value << "," << lr << "\n";
        if (cfg.log_every > 0 && (k % cfg.log_every == 0 || k + 1 == cfg.iterations))
            std::fprintf(stderr, "[train-pae] k=%" PRId64 " loss=%.6f lr=%.3g\n", k, loss_value,
                         lr);
        if (cfg.checkpoint_every > 0 && k > 0 && k % cfg.checkpoint_every == 0)
            save_checkpoint(ckpt_dir, "pae", collect_params(model.params), effective, k);
        if (cfg.eval_every > 0 && (k + 1) % cfg.eval_every == 0) {
            double psnr = reconstruction_psnr(model, ds);
            std::fprintf(stderr, "[train-pae] k=%" PRId64 " recon_psnr=%.2f dB\n", k, psnr);
            if (cfg.target_psnr > 0.0 && psnr > cfg.target_psnr) {
                std::fprintf(stderr, "[train-pae] target PSNR reached; stopping early\n");
                break;
            }
        }
    }
    result.final_loss = loss_value;
    save_checkpoint(ckpt_dir, "pae", collect_params(model.params), effective, cfg.iterations,
                    {{"final_loss", std::to_string(loss_value)}});
    result.checkpoint_dir = ckpt_dir;
    return result;
}

PAEModel<float> load_pae(const Checkpoint& ckpt) {
    require_checkpoint(ckpt, "pae");
    PAEConfig cfg = PAEConfig::from_config(ckpt.config);
    PAEModel<float> model(cfg);
    load_params(model.params, ckpt);
    return model;
}

PAEModel<float> load_pae(const fs::path& ckpt_dir) {
    return load_pae(load_checkpoint(ckpt_dir));
}

double reconstruction_psnr(PAEModel<float>& model, const data::PairedDataset& ds) {
    check_contract(ds.size() > 0, "reconstruction_psnr: empty dataset");
    double acc = 0.0;
    for (size_t i = 0; i < ds.size(); ++i) {
        const Image& clean = ds.clean(i);
        const Image& noisy = ds.noisy(i);
        Tensor<float> residual = residual_of(noisy, clean);
        const int h = clean.dim(0), w = clean.dim(1);
        Tensor<float> rb = residual.reshaped({1, h, w, 3});
        auto enc = model.encode(rb);
        Tensor<float> recon = model.decode(enc.z, clean.reshaped({1, h, w, 3}), true);
        acc += noisestats::psnr(recon.reshaped({h, w, 3}), noisy);
    }
    return acc / static_cast<double>(ds.size());
}

}  // namespace pngen::pae
