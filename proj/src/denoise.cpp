#include "pngen/denoise.hpp"

#include <cinttypes>
#include <cstdio>
#include <fstream>

#include "pngen/noisestats.hpp"

namespace pngen::denoise {

namespace fs = std::filesystem;

DenoiserConfig DenoiserConfig::from_config(const RunConfig& cfg) {
    DenoiserConfig c;
    c.depth = static_cast<int>(cfg.get_int("denoise.depth", c.depth));
    c.width = static_cast<int>(cfg.get_int("denoise.width", c.width));
    c.patch = static_cast<int>(cfg.get_int("denoise.patch", c.patch));
    c.batch = static_cast<int>(cfg.get_int("denoise.batch", c.batch));
    c.iterations = cfg.get_int("denoise.iterations", c.iterations);
    c.lr = cfg.get_real("denoise.lr", c.lr);
    c.mix_ratio = cfg.get_real("denoise.mix_ratio", c.mix_ratio);
    c.log_every = cfg.get_int("denoise.log_every", c.log_every);
    c.seed = static_cast<uint64_t>(cfg.get_int("run.seed", 0));
    c.validate();
    return c;
}

void DenoiserConfig::write(RunConfig& cfg) const {
    cfg.set("denoise.depth", std::to_string(depth));
    cfg.set("denoise.width", std::to_string(width));
    cfg.set("denoise.patch", std::to_string(patch));
    cfg.set("denoise.batch", std::to_string(batch));
    cfg.set("denoise.iterations", std::to_string(iterations));
    cfg.set("denoise.lr", std::to_string(lr));
    cfg.set("denoise.mix_ratio", std::to_string(mix_ratio));
    cfg.set("denoise.log_every", std::to_string(log_every));
    cfg.set("run.seed", std::to_string(seed));
}

void DenoiserConfig::validate() const {
    check_config(depth >= 3, "denoiser depth must be >= 3");
    check_config(width >= 1 && patch >= 8 && batch >= 1, "invalid denoiser sizes");
    check_config(iterations >= 1, "denoiser iterations must be >= 1");
    check_config(mix_ratio >= 0.0 && mix_ratio <= 1.0, "mix_ratio must be in [0,1]");
}

Image DenoiserModel::denoise_image(const Image& noisy) {
    const int h = noisy.dim(0), w = noisy.dim(1);
    nn::Graph<float> g(false);
    nn::Var<float> out = net.forward(g, g.constant(noisy.reshaped({1, h, w, 3})));
    Image img = out.val().reshaped({h, w, 3});
    clamp01(img);
    return img;
}

namespace {

void augment_batch(data::Batch& batch, uint64_t seed, int64_t iteration) {
    RandomStream rs(seed, "dn-aug", static_cast<uint64_t>(iteration));
    const int b = batch.clean.dim(0), p = batch.clean.dim(1);
    for (int i = 0; i < b; ++i) {
        int k = static_cast<int>(rs.uniform_int(8));
        if (k == 0) continue;
        Tensor<float> c({p, p, 3}), n({p, p, 3});
        int64_t per = c.numel();
        std::copy(batch.clean.ptr() + i * per, batch.clean.ptr() + (i + 1) * per, c.ptr());
        std::copy(batch.noisy.ptr() + i * per, batch.noisy.ptr() + (i + 1) * per, n.ptr());
        data::apply_dihedral(c, k);
        data::apply_dihedral(n, k);
        std::copy(c.ptr(), c.ptr() + per, batch.clean.ptr() + i * per);
        std::copy(n.ptr(), n.ptr() + per, batch.noisy.ptr() + i * per);
    }
}

}  // namespace

DenoiserTrainResult train_denoiser(const data::PairedDataset* real,
                                   const data::PairedDataset* synth, const RunConfig& raw_config,
                                   const fs::path& out_dir) {
    DenoiserConfig cfg = DenoiserConfig::from_config(raw_config);
    check_config((real && real->size() > 0) || (synth && synth->size() > 0),
                 "train_denoiser: both data sources are empty");
    if (!real || real->size() == 0)
        check_config(cfg.mix_ratio == 1.0, "no real pairs available but mix_ratio < 1");
    if (!synth || synth->size() == 0)
        check_config(cfg.mix_ratio == 0.0, "no synthetic pairs available but mix_ratio > 0");

    RunConfig effective = raw_config;
    cfg.write(effective);

    DenoiserModel model(cfg);
    nn::Adam<float> opt;
    fs::create_directories(out_dir);
    std::ofstream log(out_dir / "train_log.csv");
    log << "iteration,loss,source\n";

    std::fprintf(stderr, "[train-denoiser] params=%" PRId64 " iterations=%" PRId64 "\n",
                 model.params.total_values(), cfg.iterations);

    DenoiserTrainResult result;
    double loss_value = 0.0;
    for (int64_t k = 0; k < cfg.iterations; ++k) {
        RandomStream mix(cfg.seed, "dn-mix", static_cast<uint64_t>(k));
        bool use_synth = mix.uniform() < cfg.mix_ratio;
        const data::PairedDataset* src = use_synth ? synth : real;
        if (use_synth) ++result.synthetic_batches;

        data::Batch batch = src->sample_batch(cfg.batch, k, use_synth ? "dn-synth" : "dn-real");
        augment_batch(batch, cfg.seed, k);

        nn::Graph<float> g;
        nn::Var<float> pred = model.net.forward(g, g.constant(batch.noisy));
        nn::Var<float> loss = nn::mean_all(nn::abs_(nn::sub(pred, g.constant(batch.clean))));
        loss_value = loss.val()[0];
        if (!std::isfinite(loss_value))
            throw std::runtime_error("train_denoiser: non-finite loss at iteration " +
                                     std::to_string(k));
        if (k == 0) result.first_loss = loss_value;

        model.params.zero_grads();
        g.backward(loss);
        opt.step(model.params, cfg.lr);
        log << k << "," << loss_value << "," << (use_synth ? "synth" : "real") << "\n";
        if (cfg.log_every > 0 && (k % cfg.log_every == 0 || k + 1 == cfg.iterations))
            std::fprintf(stderr, "[train-denoiser] k=%" PRId64 " loss=%.6f\n", k, loss_value);
    }
    result.final_loss = loss_value;
    fs::path ckpt_dir = out_dir / "checkpoint";
    save_checkpoint(ckpt_dir, "denoiser", collect_params(model.params), effective,
                    cfg.iterations, {{"final_loss", std::to_string(loss_value)}});
    result.checkpoint_dir = ckpt_dir;
    return result;
}

DenoiserModel load_denoiser(const fs::path& ckpt_dir) {
    Checkpoint ckpt = load_checkpoint(ckpt_dir);
    require_checkpoint(ckpt, "denoiser");
    DenoiserModel model(DenoiserConfig::from_config(ckpt.config));
    load_params(model.params, ckpt);
    return model;
}

namespace {

EvalReport finish_report(EvalReport report, const fs::path& csv_out) {
    double psnr_sum = 0.0, ssim_sum = 0.0;
    for (const auto& r : report.rows) {
        psnr_sum += r.psnr_db;
        ssim_sum += r.ssim;
    }
    report.mean_psnr = psnr_sum / static_cast<double>(report.rows.size());
    report.mean_ssim = ssim_sum / static_cast<double>(report.rows.size());
    if (!csv_out.empty()) {
        if (csv_out.has_parent_path()) fs::create_directories(csv_out.parent_path());
        std::ofstream out(csv_out);
        if (!out) throw IoError("cannot write report " + csv_out.string());
        out << "image_id,psnr_db,ssim\n";
        for (const auto& r : report.rows)
            out << r.id << "," << r.psnr_db << "," << r.ssim << "\n";
        out << "mean," << report.mean_psnr << "," << report.mean_ssim << "\n";
    }
    return report;
}

}  // namespace

EvalReport eval_denoiser(DenoiserModel& model, const data::PairedDataset& test,
                         const fs::path& csv_out) {
    check_contract(test.size() > 0, "eval_denoiser: empty test set");
    EvalReport report;
    for (size_t i = 0; i < test.size(); ++i) {
        Image denoised = model.denoise_image(test.noisy(i));
        report.rows.push_back({test.entry(i).id, noisestats::psnr(denoised, test.clean(i)),
                               noisestats::ssim(denoised, test.clean(i))});
    }
    return finish_report(std::move(report), csv_out);
}

EvalReport eval_identity(const data::PairedDataset& test) {
    check_contract(test.size() > 0, "eval_identity: empty test set");
    EvalReport report;
    for (size_t i = 0; i < test.size(); ++i)
        report.rows.push_back({test.entry(i).id, noisestats::psnr(test.noisy(i), test.clean(i)),
                               noisestats::ssim(test.noisy(i), test.clean(i))});
    return finish_report(std::move(report), {});
}

}  // namespace pngen::denoise
