#include "pngen/cmtrain.hpp"

#include <cinttypes>
#include <cstdio>
#include <fstream>

namespace pngen::cmtrain {

namespace fs = std::filesystem;

CMTrainConfig CMTrainConfig::from_config(const RunConfig& cfg) {
    CMTrainConfig c;
    c.sigma.sigma_min = cfg.get_real("schedule.sigma_min", c.sigma.sigma_min);
    c.sigma.sigma_max = cfg.get_real("schedule.sigma_max", c.sigma.sigma_max);
    c.sigma.tau = cfg.get_real("schedule.tau", c.sigma.tau);
    c.curriculum.s0 = static_cast<int>(cfg.get_int("schedule.s0", c.curriculum.s0));
    c.curriculum.s1 = static_cast<int>(cfg.get_int("schedule.s1", c.curriculum.s1));
    c.curriculum.floor_exponent =
        cfg.get_bool("schedule.curriculum_floor", c.curriculum.floor_exponent);
    c.sampler.p_mean = cfg.get_real("schedule.p_mean", c.sampler.p_mean);
    c.sampler.p_std = cfg.get_real("schedule.p_std", c.sampler.p_std);
    c.sigma_data = cfg.get_real("schedule.sigma_data", c.sigma_data);
    c.lr = cfg.get_real("cmtrain.lr", c.lr);
    c.iterations = cfg.get_int("cmtrain.iterations", c.iterations);
    c.batch = static_cast<int>(cfg.get_int("cmtrain.batch", c.batch));
    c.ema_decay = cfg.get_real("cmtrain.ema_decay", c.ema_decay);
    c.grad_clip = cfg.get_real("cmtrain.grad_clip", c.grad_clip);
    c.stats_batches = static_cast<int>(cfg.get_int("cmtrain.stats_batches", c.stats_batches));
    c.checkpoint_every = cfg.get_int("cmtrain.checkpoint_every", c.checkpoint_every);
    c.log_every = cfg.get_int("cmtrain.log_every", c.log_every);
    c.seed = static_cast<uint64_t>(cfg.get_int("run.seed", 0));
    c.curriculum.total_iterations = c.iterations;
    c.pdit = pdit::PDiTConfig::from_config(cfg);
    c.validate();
    return c;
}

void CMTrainConfig::write(RunConfig& cfg) const {
    cfg.set("schedule.sigma_min", std::to_string(sigma.sigma_min));
    cfg.set("schedule.sigma_max", std::to_string(sigma.sigma_max));
    cfg.set("schedule.tau", std::to_string(sigma.tau));
    cfg.set("schedule.s0", std::to_string(curriculum.s0));
    cfg.set("schedule.s1", std::to_string(curriculum.s1));
    cfg.set("schedule.curriculum_floor", curriculum.floor_exponent ? "true" : "false");
    cfg.set("schedule.p_mean", std::to_string(sampler.p_mean));
    cfg.set("schedule.p_std", std::to_string(sampler.p_std));
    cfg.set("schedule.sigma_data", std::to_string(sigma_data));
    cfg.set("cmtrain.lr", std::to_string(lr));
    cfg.set("cmtrain.iterations", std::to_string(iterations));
    cfg.set("cmtrain.batch", std::to_string(batch));
    cfg.set("cmtrain.ema_decay", std::to_string(ema_decay));
    cfg.set("cmtrain.grad_clip", std::to_string(grad_clip));
    cfg.set("cmtrain.stats_batches", std::to_string(stats_batches));
    cfg.set("cmtrain.checkpoint_every", std::to_string(checkpoint_every));
    cfg.set("cmtrain.log_every", std::to_string(log_every));
    cfg.set("run.seed", std::to_string(seed));
    pdit.write(cfg);
}

void CMTrainConfig::validate() const {
    schedule::SigmaSchedule s = sigma;
    s.num_steps = 2;
    s.validate();
    curriculum.validate();
    sampler.validate();
    check_config(sigma_data > 0.0, "sigma_data must be positive");
    check_config(iterations >= 1 && batch >= 1, "cmtrain needs iterations and batch >= 1");
    check_config(ema_decay >= 0.0 && ema_decay < 1.0, "ema_decay must be in [0,1)");
    check_config(grad_clip > 0.0, "grad_clip must be positive");
    check_config(stats_batches >= 1, "stats_batches must be >= 1");
}

LatentStats compute_latent_stats(pae::PAEModel<float>& pae_model, const data::PairedDataset& ds,
                                 int n_batches, int batch, double sigma_data) {
    check_contract(n_batches >= 1, "compute_latent_stats needs n_batches >= 1");
    const int cz = pae_model.cfg.c_z;
    std::vector<double> sum(static_cast<size_t>(cz), 0.0), sumsq(static_cast<size_t>(cz), 0.0);
    int64_t count = 0;
    for (int i = 0; i < n_batches; ++i) {
        data::Batch b = ds.sample_batch(batch, i, "stats");
        Tensor<float> residual = b.noisy;
        for (int64_t j = 0; j < residual.numel(); ++j) residual[j] -= b.clean[j];
        auto enc = pae_model.encode(residual);
        const int64_t spatial = enc.z.numel() / cz;
        for (int64_t s = 0; s < spatial; ++s)
            for (int c = 0; c < cz; ++c) {
                double v = enc.z[s * cz + c];
                sum[static_cast<size_t>(c)] += v;
                sumsq[static_cast<size_t>(c)] += v * v;
            }
        count += spatial;
    }
    LatentStats stats;
    stats.sigma_data = static_cast<float>(sigma_data);
    stats.mean.resize(static_cast<size_t>(cz));
    stats.std.resize(static_cast<size_t>(cz));
    for (int c = 0; c < cz; ++c) {
        double mean = sum[static_cast<size_t>(c)] / static_cast<double>(count);
        double var = sumsq[static_cast<size_t>(c)] / static_cast<double>(count) - mean * mean;
        double sd = std::sqrt(std::max(var, 0.0));
        if (sd < 1e-8)
            throw ConfigError("latent channel " + std::to_string(c) +
                              " is degenerate (std < 1e-8); the encoder collapsed or the "
                              "dataset lacks variation");
        stats.mean[static_cast<size_t>(c)] = static_cast<float>(mean);
        stats.std[static_cast<size_t>(c)] = static_cast<float>(sd);
    }
    return stats;
}

namespace {

void check_stats(const Tensor<float>& z, const LatentStats& stats) {
    check_contract(!stats.mean.empty() && stats.mean.size() == stats.std.size(),
                   "latent stats are empty");
    check_contract(z.last_dim() == static_cast<int>(stats.mean.size()),
                   "latent channel count does not match stats");
}

}  // namespace

Tensor<float> normalize(const Tensor<float>& z, const LatentStats& stats) {
    check_stats(z, stats);
    const int cz = z.last_dim();
    Tensor<float> out = z;
    const int64_t rows = z.numel() / cz;
    for (int64_t s = 0; s < rows; ++s)
        for (int c = 0; c < cz; ++c)
            out[s * cz + c] = (z[s * cz + c] - stats.mean[static_cast<size_t>(c)]) /
                              stats.std[static_cast<size_t>(c)] * stats.sigma_data;
    return out;
}

Tensor<float> denormalize(const Tensor<float>& z_n, const LatentStats& stats) {
    check_stats(z_n, stats);
    const int cz = z_n.last_dim();
    Tensor<float> out = z_n;
    const int64_t rows = z_n.numel() / cz;
    for (int64_t s = 0; s < rows; ++s)
        for (int c = 0; c < cz; ++c)
            out[s * cz + c] = z_n[s * cz + c] / stats.sigma_data *
                                  stats.std[static_cast<size_t>(c)] +
                              stats.mean[static_cast<size_t>(c)];
    return out;
}

StepInfo ct_step(const data::Batch& batch, TrainState& state, pae::PAEModel<float>& pae_model,
                 const LatentStats& stats, const CMTrainConfig& cfg, StepDebug* dbg) {
    using namespace nn;
    const int b = batch.clean.dim(0);
    const int64_t k = state.k;

    // frozen-PAE encode (cached per (image, crop) when indices are known)
    pae::PAEModel<float>::Encoded enc;
    bool cached = false;
    if (!batch.indices.empty()) {
        // per-sample cache lookup; assemble a batch-shaped Encoded
        std::vector<const pae::PAEModel<float>::Encoded*> parts;
        parts.reserve(static_cast<size_t>(b));
        bool all_found = true;
        for (int i = 0; i < b && all_found; ++i) {
            auto key = std::make_tuple(batch.indices[static_cast<size_t>(i)],
                                       batch.origins[static_cast<size_t>(i)].first,
                                       batch.origins[static_cast<size_t>(i)].second);
            auto it = state.cache.entries.find(key);
            if (it == state.cache.entries.end()) {
                all_found = false;
            } else {
                parts.push_back(&it->second);
            }
        }
        if (all_found) {
            auto stack = [&](auto getter) {
                const Tensor<float>& first = getter(*parts[0]);
                std::vector<int> shape = first.shape;
                shape[0] = b;
                Tensor<float> out(shape);
                int64_t per = first.numel();
                for (int i = 0; i < b; ++i)
                    std::copy(getter(*parts[static_cast<size_t>(i)]).ptr(),
                              getter(*parts[static_cast<size_t>(i)]).ptr() + per,
                              out.ptr() + static_cast<int64_t>(i) * per);
                return out;
            };
            enc.z = stack([](const auto& e) -> const Tensor<float>& { return e.z; });
            for (int l = 0; l < 4; ++l)
                enc.f_global[static_cast<size_t>(l)] = stack(
                    [l](const auto& e) -> const Tensor<float>& {
                        return e.f_global[static_cast<size_t>(l)];
                    });
            enc.f_local = stack([](const auto& e) -> const Tensor<float>& { return e.f_local; });
            cached = true;
        }
    }
    if (!cached) {
        Tensor<float> residual = batch.noisy;
        for (int64_t i = 0; i < residual.numel(); ++i) residual[i] -= batch.clean[i];
        enc = pae_model.encode(residual);
        if (!batch.indices.empty() && state.cache.entries.size() < state.cache.cap) {
            // store per-sample slices for reuse
            for (int i = 0; i < b; ++i) {
                auto key = std::make_tuple(batch.indices[static_cast<size_t>(i)],
                                           batch.origins[static_cast<size_t>(i)].first,
                                           batch.origins[static_cast<size_t>(i)].second);
                if (state.cache.entries.count(key)) continue;
                auto slice = [&](const Tensor<float>& t) {
                    std::vector<int> shape = t.shape;
                    shape[0] = 1;
                    Tensor<float> out(shape);
                    int64_t per = out.numel();
                    std::copy(t.ptr() + static_cast<int64_t>(i) * per,
                              t.ptr() + static_cast<int64_t>(i + 1) * per, out.ptr());
                    return out;
                };
                pae::PAEModel<float>::Encoded one;
                one.z = slice(enc.z);
                for (int l = 0; l < 4; ++l)
                    one.f_global[static_cast<size_t>(l)] =
                        slice(enc.f_global[static_cast<size_t>(l)]);
                one.f_local = slice(enc.f_local);
                state.cache.entries.emplace(key, std::move(one));
            }
        }
    }

    Tensor<float> z0 = normalize(enc.z, stats);
    const int64_t latent_per_sample = z0.numel() / b;

    // curriculum, timestep draws, shared noise
    StepInfo info;
    info.num_steps = schedule::curriculum_steps(k, cfg.curriculum);
    auto grid = schedule::sigma_grid(info.num_steps, cfg.sigma);
    auto probs = schedule::timestep_probs(info.num_steps, cfg.sigma, cfg.sampler);

    RandomStream t_rs(state.seed, "ct-t", static_cast<uint64_t>(k));
    RandomStream eps_rs(state.seed, "ct-eps", static_cast<uint64_t>(k));
    RandomStream cn_rs(state.seed, "ct-cond-noise", static_cast<uint64_t>(k));

    std::vector<double> sigma_lo(static_cast<size_t>(b)), sigma_hi(static_cast<size_t>(b));
    std::vector<float> lambda_w(static_cast<size_t>(b));
    for (int i = 0; i < b; ++i) {
        int t = schedule::sample_timestep(probs, t_rs);
        sigma_lo[static_cast<size_t>(i)] = grid[static_cast<size_t>(t - 1)];
        sigma_hi[static_cast<size_t>(i)] = grid[static_cast<size_t>(t)];
        lambda_w[static_cast<size_t>(i)] = static_cast<float>(
            schedule::loss_weight(sigma_lo[static_cast<size_t>(i)], sigma_hi[static_cast<size_t>(i)]));
        info.mean_sigma += sigma_lo[static_cast<size_t>(i)] / b;
        info.mean_lambda += lambda_w[static_cast<size_t>(i)] / b;
    }

    Tensor<float> eps(z0.shape);
    eps_rs.fill_normal(eps);
    Tensor<float> z_lo = z0, z_hi = z0;
    for (int i = 0; i < b; ++i) {
        float slo = static_cast<float>(sigma_lo[static_cast<size_t>(i)]);
        float shi = static_cast<float>(sigma_hi[static_cast<size_t>(i)]);
        for (int64_t j = 0; j < latent_per_sample; ++j) {
            int64_t idx = static_cast<int64_t>(i) * latent_per_sample + j;
            z_lo[idx] += slo * eps[idx];
            z_hi[idx] += shi * eps[idx];
        }
    }

    // conditional clean image: factor-2 downsample plus minor training noise,
    // shared verbatim by the teacher and student passes
    Tensor<float> clean_cond;
    {
        nn::Graph<float> tmp(false);
        nn::Var<float> down = tmp.constant(batch.clean);
        for (int f = cfg.pdit.cond_downsample; f > 1; f /= 2) down = avgpool2(down);
        clean_cond = down.val();
    }
    if (cfg.pdit.cond_noise_std > 0.0)
        for (auto& v : clean_cond.data)
            v += static_cast<float>(cfg.pdit.cond_noise_std * cn_rs.normal());

    const int grid_h = z0.dim(1) / cfg.pdit.token_patch;
    const int grid_w = z0.dim(2) / cfg.pdit.token_patch;
    const double sigma0 = cfg.sigma.sigma_min;

    // teacher: stop-gradient pass at sigma_t (theta^- = theta)
    Tensor<float> target;
    {
        nn::Graph<float> g(false);
        auto prompts = prompts_to_vars(g, enc);
        auto ce = state.model.cond_embedder.forward(g, g.constant(clean_cond), prompts, grid_h,
                                                    grid_w);
        RandomStream drop(state.seed, "ct-dropout", static_cast<uint64_t>(k));
        nn::Var<float> out = state.model.consistency(g, g.constant(z_lo), sigma_lo, sigma0,
                                                     cfg.sigma_data, ce.tokens, ce.pooled, &drop);
        target = out.val();
    }

    // student pass at sigma_{t+1}, identical dropout pattern
    nn::Graph<float> g;
    auto prompts = prompts_to_vars(g, enc);
    auto ce = state.model.cond_embedder.forward(g, g.constant(clean_cond), prompts, grid_h,
                                                grid_w);
    RandomStream drop(state.seed, "ct-dropout", static_cast<uint64_t>(k));
    nn::Var<float> student = state.model.consistency(g, g.constant(z_hi), sigma_hi, sigma0,
                                                     cfg.sigma_data, ce.tokens, ce.pooled, &drop);

    if (dbg) {
        dbg->sigma_lo = sigma_lo;
        dbg->sigma_hi = sigma_hi;
        dbg->eps = eps;
        dbg->z0 = z0;
        dbg->z_lo = z_lo;
        dbg->z_hi = z_hi;
        dbg->teacher = target;
    }

    // lambda-weighted per-sample pseudo-Huber distance to the teacher
    const float c_ph = static_cast<float>(schedule::pseudo_huber_c(latent_per_sample));
    nn::Var<float> diff = nn::sub(student, g.constant(target));
    nn::Var<float> persample =
        nn::sum_lastdim(nn::reshape(nn::square(diff), {b, static_cast<int>(latent_per_sample)}));
    nn::Var<float> dist = nn::offset(nn::sqrt_(nn::offset(persample, c_ph * c_ph)), -c_ph);
    nn::Var<float> loss = nn::mean_all(nn::scale_rows(dist, lambda_w));

    info.loss = loss.val()[0];
    if (!std::isfinite(info.loss))
        throw std::runtime_error("ct_step: non-finite loss at iteration " + std::to_string(k));

    state.model.params.zero_grads();
    g.backward(loss);
    info.grad_norm = nn::clip_gradients(state.model.params, cfg.grad_clip);
    state.opt.step(state.model.params, cfg.lr);
    state.k = k + 1;
    return info;
}

void ema_update(TrainState& state, double decay) {
    state.ema.update(state.model.params, decay);
}

void stats_tensors(const LatentStats& stats, Tensor<float>& mean, Tensor<float>& std) {
    mean = Tensor<float>({static_cast<int>(stats.mean.size())});
    std = Tensor<float>({static_cast<int>(stats.std.size())});
    std::copy(stats.mean.begin(), stats.mean.end(), mean.ptr());
    std::copy(stats.std.begin(), stats.std.end(), std.ptr());
}

LatentStats stats_from_checkpoint(const Checkpoint& ckpt) {
    check_config(ckpt.has_tensor("stats.mean") && ckpt.has_tensor("stats.std"),
                 "checkpoint is missing latent statistics");
    LatentStats stats;
    const auto& mean = ckpt.tensor("stats.mean");
    const auto& sd = ckpt.tensor("stats.std");
    stats.mean.assign(mean.data.begin(), mean.data.end());
    stats.std.assign(sd.data.begin(), sd.data.end());
    auto it = ckpt.attrs.find("sigma_data");
    check_config(it != ckpt.attrs.end(), "checkpoint is missing sigma_data");
    stats.sigma_data = std::stof(it->second);
    return stats;
}

TrainPDiTResult train_pdit(const data::PairedDataset& ds, const fs::path& pae_ckpt_dir,
                           const RunConfig& raw_config, const fs::path& out_dir) {
    CMTrainConfig cfg = CMTrainConfig::from_config(raw_config);
    pae::PAEModel<float> pae_model = pae::load_pae(pae_ckpt_dir);
    check_config(cfg.pdit.c_z == pae_model.cfg.c_z &&
                     cfg.pdit.c_local == pae_model.cfg.c_local &&
                     cfg.pdit.c_global == pae_model.cfg.c_global,
                 "pdit channel plan does not match the PAE checkpoint");

    RunConfig effective = raw_config;
    cfg.write(effective);

    LatentStats stats =
        compute_latent_stats(pae_model, ds, cfg.stats_batches, cfg.batch, cfg.sigma_data);

    TrainState state(cfg.pdit, cfg.seed);
    fs::create_directories(out_dir);
    std::ofstream log(out_dir / "train_log.csv");
    log << "iteration,num_steps,sigma_t,loss,lambda\n";

    std::fprintf(stderr, "[train-pdit] params=%" PRId64 " iterations=%" PRId64 " batch=%d\n",
                 state.model.params.total_values(), cfg.iterations, cfg.batch);

    Tensor<float> mean_t, std_t;
    stats_tensors(stats, mean_t, std_t);
    auto save = [&](const fs::path& dir, int64_t iter) {
        auto tensors = collect_params(state.model.params);
        std::vector<Tensor<float>> ema_copy = state.ema.values();
        size_t idx = 0;
        std::vector<std::pair<std::string, const Tensor<float>*>> with_extra = tensors;
        for (const auto& p : state.model.params.all())
            with_extra.emplace_back("ema." + p->name, &ema_copy[idx++]);
        with_extra.emplace_back("stats.mean", &mean_t);
        with_extra.emplace_back("stats.std", &std_t);
        save_checkpoint(dir, "pdit", with_extra, effective, iter,
                        {{"sigma_data", std::to_string(cfg.sigma_data)},
                         {"pae_fingerprint", load_checkpoint(pae_ckpt_dir).fingerprint}});
    };

    fs::path ckpt_dir = out_dir / "checkpoint";
    double loss = 0.0;
    for (int64_t k = 0; k < cfg.iterations; ++k) {
        data::Batch batch = ds.sample_batch(cfg.batch, k);
        StepInfo info = ct_step(batch, state, pae_model, stats, cfg);
        ema_update(state, cfg.ema_decay);
        loss = info.loss;
        log << k << "," << info.num_steps << "," << info.mean_sigma << "," << info.loss << ","
            << info.mean_lambda << "\n";
        if (cfg.log_every > 0 && (k % cfg.log_every == 0 || k + 1 == cfg.iterations))
            std::fprintf(stderr, "[train-pdit] k=%" PRId64 " N=%d loss=%.5f gnorm=%.3f\n", k,
                         info.num_steps, info.loss, info.grad_norm);
        if (cfg.checkpoint_every > 0 && k > 0 && k % cfg.checkpoint_every == 0)
            save(ckpt_dir, k);
    }
    save(ckpt_dir, cfg.iterations);
    return {ckpt_dir, loss};
}

}  // namespace pngen::cmtrain
