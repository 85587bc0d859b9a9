// pngen: prompt-driven camera-noise synthesis toolkit.
//
// Subcommands: make-toy, train-pae, train-pdit, generate, eval-noise,
// train-denoiser, eval-denoiser, schedule dump.
//
// Option precedence: command-line flags > PNGEN_SEED environment variable
// (seed only) > config file > built-in defaults.

#include <CLI11.hpp>
#include <cinttypes>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "pngen/cmtrain.hpp"
#include "pngen/config.hpp"
#include "pngen/data.hpp"
#include "pngen/denoise.hpp"
#include "pngen/genpipe.hpp"
#include "pngen/noisestats.hpp"
#include "pngen/pae.hpp"
#include "pngen/schedule.hpp"

namespace fs = std::filesystem;
using namespace pngen;

namespace {

struct CommonOpts {
    std::string config_path;
    std::vector<std::string> overrides;  // key=value
    int64_t seed = -1;                   // -1: not set on the command line
};

void add_common(CLI::App* cmd, CommonOpts& opts) {
    cmd->add_option("--config", opts.config_path, "run configuration file");
    cmd->add_option("--set", opts.overrides,
                    "override a config entry as section.key=value (repeatable)");
    cmd->add_option("--seed", opts.seed, "global seed (overrides config and PNGEN_SEED)");
}

// flags > PNGEN_SEED > config file > defaults
RunConfig resolve_config(const CommonOpts& opts) {
    RunConfig cfg;
    if (!opts.config_path.empty()) cfg = RunConfig::from_file(opts.config_path);
    if (const char* env = std::getenv("PNGEN_SEED"); env != nullptr && *env != '\0')
        cfg.set("run.seed", env);
    for (const std::string& kv : opts.overrides) {
        size_t eq = kv.find('=');
        check_config(eq != std::string::npos, "--set expects section.key=value, got: " + kv);
        cfg.set(kv.substr(0, eq), kv.substr(eq + 1));
    }
    if (opts.seed >= 0) cfg.set("run.seed", std::to_string(opts.seed));
    return cfg;
}

uint64_t config_seed(const RunConfig& cfg) {
    return static_cast<uint64_t>(cfg.get_int("run.seed", 0));
}

int cmd_make_toy(int n, int size, const std::string& model, const CommonOpts& opts,
                 const std::string& out) {
    RunConfig cfg = resolve_config(opts);
    data::make_toy_dataset(n, size, data::ToySpec::parse(model), config_seed(cfg), out);
    std::fprintf(stderr, "[make-toy] wrote %d pairs of %dx%d (%s) to %s\n", n, size, size,
                 model.c_str(), out.c_str());
    return 0;
}

int cmd_train_pae(const CommonOpts& opts, const std::string& data_root, const std::string& out) {
    RunConfig cfg = resolve_config(opts);
    std::string root = data_root.empty() ? cfg.get_str("data.root", "") : data_root;
    check_config(!root.empty(), "train-pae needs --data or data.root in the config");
    int patch = static_cast<int>(cfg.get_int("data.patch", 64));
    auto ds = data::PairedDataset::load(root, patch, config_seed(cfg));
    auto result = pae::train_pae(ds, cfg, out);
    std::fprintf(stderr, "[train-pae] final loss %.6f, checkpoint at %s\n", result.final_loss,
                 result.checkpoint_dir.string().c_str());
    return 0;
}

int cmd_train_pdit(const CommonOpts& opts, const std::string& data_root,
                   const std::string& pae_ckpt, const std::string& out) {
    RunConfig cfg = resolve_config(opts);
    std::string root = data_root.empty() ? cfg.get_str("data.root", "") : data_root;
    check_config(!root.empty(), "train-pdit needs --data or data.root in the config");
    int patch = static_cast<int>(cfg.get_int("data.patch", 64));
    auto ds = data::PairedDataset::load(root, patch, config_seed(cfg));
    auto result = cmtrain::train_pdit(ds, pae_ckpt, cfg, out);
    std::fprintf(stderr, "[train-pdit] final loss %.6f, checkpoint at %s\n", result.final_loss,
                 result.checkpoint_dir.string().c_str());
    return 0;
}

int cmd_generate(const CommonOpts& opts, const std::string& mode, const std::string& clean_dir,
                 const std::string& noisy_dir, const std::string& noise_bank,
                 const std::string& pae_ckpt, const std::string& pdit_ckpt, int multiplier,
                 const std::string& out, bool float_sidecar) {
    RunConfig cfg = resolve_config(opts);
    auto gen = genpipe::Generator::load(pae_ckpt, pdit_ckpt);
    genpipe::SynthesisRequest req;
    req.clean_dir = clean_dir;
    req.multiplier = multiplier;
    req.out_dir = out;
    req.seed = config_seed(cfg);
    req.float_sidecar = float_sidecar;
    if (mode == "paired") {
        check_config(!noisy_dir.empty(), "paired mode needs --noisy-dir");
        req.paired = true;
        req.noisy_dir = noisy_dir;
    } else if (mode == "unpaired") {
        check_config(!noise_bank.empty(), "unpaired mode needs --noise-bank");
        req.paired = false;
        req.bank_dir = noise_bank;
    } else {
        throw ConfigError("--mode must be paired or unpaired");
    }
    auto rows = genpipe::synthesize_dataset(gen, req);
    std::fprintf(stderr, "[generate] wrote %zu synthetic images and manifest.csv to %s\n",
                 rows.size(), out.c_str());
    return 0;
}

int cmd_eval_noise(const CommonOpts& opts, const std::string& clean_dir,
                   const std::string& noisy_dir, const std::string& generated_dir, int bins,
                   int akld_cap, const std::string& out) {
    (void)opts;
    auto ds = data::PairedDataset::load_dirs(clean_dir, noisy_dir, 1, 0);

    // collect generated files per stem: exact match or "<stem>_s*" replicas
    std::map<std::string, std::vector<fs::path>> generated;
    for (const auto& e : fs::directory_iterator(generated_dir)) {
        if (e.path().extension() != ".png") continue;
        std::string stem = e.path().stem().string();
        std::string base = stem;
        size_t pos = stem.rfind("_s");
        if (pos != std::string::npos) base = stem.substr(0, pos);
        generated[base].push_back(e.path());
    }
    for (auto& [base, files] : generated) std::sort(files.begin(), files.end());

    std::ofstream csv(out.empty() ? "eval_noise.csv" : out);
    if (!csv) throw IoError("cannot write the eval-noise report");
    csv << "image_id,kld,akld,n_samples\n";
    double kld_sum = 0.0, akld_sum = 0.0;
    int rows = 0;
    for (size_t i = 0; i < ds.size(); ++i) {
        const auto& id = ds.entry(i).id;
        auto it = generated.find(id);
        check_config(it != generated.end() && !it->second.empty(),
                     "no generated images found for id '" + id + "'");
        Tensor<float> real_res = residual_of(ds.noisy(i), ds.clean(i));
        double kld_first = 0.0, akld_acc = 0.0;
        int used = 0;
        for (const auto& path : it->second) {
            if (akld_cap > 0 && used >= akld_cap) break;
            Image g = read_png(path);
            check_contract(g.shape == ds.clean(i).shape,
                           "generated image shape mismatch for id '" + id + "'");
            double v = noisestats::kld(real_res, residual_of(g, ds.clean(i)), bins);
            if (used == 0) kld_first = v;
            akld_acc += v;
            ++used;
        }
        double akld = akld_acc / used;
        csv << id << "," << kld_first << "," << akld << "," << used << "\n";
        kld_sum += kld_first;
        akld_sum += akld;
        ++rows;
    }
    csv << "mean," << kld_sum / rows << "," << akld_sum / rows << "," << rows << "\n";
    std::fprintf(stderr, "[eval-noise] %d images: mean KLD %.5f, mean AKLD %.5f\n", rows,
                 kld_sum / rows, akld_sum / rows);
    return 0;
}

int cmd_train_denoiser(const CommonOpts& opts, const std::string& real_root,
                       const std::string& synth_root, const std::string& out) {
    RunConfig cfg = resolve_config(opts);
    int patch = static_cast<int>(cfg.get_int("denoise.patch", 48));
    std::optional<data::PairedDataset> real, synth;
    if (!real_root.empty()) real = data::PairedDataset::load(real_root, patch, config_seed(cfg));
    if (!synth_root.empty())
        synth = data::PairedDataset::load(synth_root, patch, config_seed(cfg) + 1);
    auto result =
        denoise::train_denoiser(real ? &*real : nullptr, synth ? &*synth : nullptr, cfg, out);
    std::fprintf(stderr, "[train-denoiser] final loss %.6f, checkpoint at %s\n",
                 result.final_loss, result.checkpoint_dir.string().c_str());
    return 0;
}

int cmd_eval_denoiser(const CommonOpts& opts, const std::string& ckpt,
                      const std::string& data_root, const std::string& out) {
    (void)opts;
    auto model = denoise::load_denoiser(ckpt);
    auto ds = data::PairedDataset::load(data_root, 8, 0);
    auto report = denoise::eval_denoiser(model, ds, out.empty() ? "eval_denoiser.csv" : out);
    std::fprintf(stderr, "[eval-denoiser] %zu images: mean PSNR %.3f dB, mean SSIM %.4f\n",
                 report.rows.size(), report.mean_psnr, report.mean_ssim);
    return 0;
}

int cmd_schedule_dump(const CommonOpts& opts, int n, int64_t k) {
    RunConfig cfg = resolve_config(opts);
    cmtrain::CMTrainConfig cm;
    cm.sigma.sigma_min = cfg.get_real("schedule.sigma_min", cm.sigma.sigma_min);
    cm.sigma.sigma_max = cfg.get_real("schedule.sigma_max", cm.sigma.sigma_max);
    cm.sigma.tau = cfg.get_real("schedule.tau", cm.sigma.tau);
    cm.sampler.p_mean = cfg.get_real("schedule.p_mean", cm.sampler.p_mean);
    cm.sampler.p_std = cfg.get_real("schedule.p_std", cm.sampler.p_std);
    cm.curriculum.s0 = static_cast<int>(cfg.get_int("schedule.s0", cm.curriculum.s0));
    cm.curriculum.s1 = static_cast<int>(cfg.get_int("schedule.s1", cm.curriculum.s1));
    if (n <= 0) n = schedule::curriculum_steps(k, cm.curriculum);
    auto grid = schedule::sigma_grid(n, cm.sigma);
    auto probs = schedule::timestep_probs(n, cm.sigma, cm.sampler);
    std::printf("t,sigma,p,lambda\n");
    for (int t = 1; t <= n; ++t) {
        std::printf("%d,%.12g", t, grid[static_cast<size_t>(t - 1)]);
        if (t < n) {
            double lam = schedule::loss_weight(grid[static_cast<size_t>(t - 1)],
                                               grid[static_cast<size_t>(t)]);
            std::printf(",%.12g,%.12g\n", probs[static_cast<size_t>(t - 1)], lam);
        } else {
            std::printf(",,\n");
        }
    }
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"pngen: prompt-driven camera-noise synthesis"};
    app.require_subcommand(1);

    auto* mt = app.add_subcommand("make-toy", "synthesize a toy clean/noisy dataset");
    CommonOpts mt_opts;
    int mt_n = 8, mt_size = 64;
    std::string mt_model = "heteroscedastic:0.01,0.0004", mt_out;
    mt->add_option("--n", mt_n, "number of image pairs");
    mt->add_option("--size", mt_size, "image side length");
    mt->add_option("--model", mt_model,
                   "noise model: gaussian:s | heteroscedastic:a,b | correlated:s[,binomial3|5]");
    mt->add_option("--out", mt_out, "output dataset directory")->required();
    add_common(mt, mt_opts);

    auto* tp = app.add_subcommand("train-pae", "train the prompt autoencoder");
    CommonOpts tp_opts;
    std::string tp_data, tp_out;
    tp->add_option("--data", tp_data, "paired dataset root (clean/ + noisy/)");
    tp->add_option("--out", tp_out, "output directory")->required();
    add_common(tp, tp_opts);

    auto* td = app.add_subcommand("train-pdit", "consistency-train the prompt DiT");
    CommonOpts td_opts;
    std::string td_data, td_pae, td_out;
    td->add_option("--data", td_data, "paired dataset root");
    td->add_option("--pae", td_pae, "trained PAE checkpoint directory")->required();
    td->add_option("--out", td_out, "output directory")->required();
    add_common(td, td_opts);

    auto* ge = app.add_subcommand("generate", "synthesize noisy images");
    CommonOpts ge_opts;
    std::string ge_mode = "paired", ge_clean, ge_noisy, ge_bank, ge_pae, ge_pdit, ge_out;
    int ge_mult = 1;
    bool ge_sidecar = false;
    ge->add_option("--mode", ge_mode, "paired | unpaired");
    ge->add_option("--clean-dir", ge_clean, "directory of clean PNGs")->required();
    ge->add_option("--noisy-dir", ge_noisy, "paired mode: aligned noisy PNGs");
    ge->add_option("--noise-bank", ge_bank, "unpaired mode: paired root supplying residuals");
    ge->add_option("--pae", ge_pae, "PAE checkpoint")->required();
    ge->add_option("--pdit", ge_pdit, "P-DiT checkpoint")->required();
    ge->add_option("--multiplier", ge_mult, "synthetic images per clean image");
    ge->add_option("--out", ge_out, "output dataset directory")->required();
    ge->add_flag("--float-sidecar", ge_sidecar, "also write raw float images");
    add_common(ge, ge_opts);

    auto* en = app.add_subcommand("eval-noise", "KLD/AKLD of generated noise");
    CommonOpts en_opts;
    std::string en_clean, en_noisy, en_gen, en_out;
    int en_bins = noisestats::kDefaultKldBins;
    int en_cap = noisestats::kDefaultAkldSamples;
    en->add_option("--clean-dir", en_clean)->required();
    en->add_option("--noisy-dir", en_noisy, "real noisy references")->required();
    en->add_option("--generated-dir", en_gen, "generated noisy images")->required();
    en->add_option("--bins", en_bins, "histogram bins");
    en->add_option("--samples", en_cap, "max generated samples per image for AKLD (0 = all)");
    en->add_option("--out", en_out, "report CSV path");
    add_common(en, en_opts);

    auto* tn = app.add_subcommand("train-denoiser", "train the downstream denoiser");
    CommonOpts tn_opts;
    std::string tn_real, tn_synth, tn_out;
    tn->add_option("--real", tn_real, "paired root of real pairs");
    tn->add_option("--synth", tn_synth, "paired root of synthetic pairs");
    tn->add_option("--out", tn_out, "output directory")->required();
    add_common(tn, tn_opts);

    auto* ed = app.add_subcommand("eval-denoiser", "PSNR/SSIM report of a denoiser");
    CommonOpts ed_opts;
    std::string ed_ckpt, ed_data, ed_out;
    ed->add_option("--ckpt", ed_ckpt, "denoiser checkpoint")->required();
    ed->add_option("--data", ed_data, "paired test root")->required();
    ed->add_option("--out", ed_out, "report CSV path");
    add_common(ed, ed_opts);

    auto* sc = app.add_subcommand("schedule", "schedule utilities");
    sc->require_subcommand(1);
    auto* sd = sc->add_subcommand("dump", "print the sigma grid, p(t) and lambda as CSV");
    CommonOpts sd_opts;
    int sd_n = 0;
    int64_t sd_k = 0;
    sd->add_option("--n", sd_n, "number of steps N (default: from the curriculum at --k)");
    sd->add_option("--k", sd_k, "training iteration for the curriculum");
    add_common(sd, sd_opts);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        int code = app.exit(e);
        return code == 0 ? 0 : 2;
    }

    try {
        if (mt->parsed()) return cmd_make_toy(mt_n, mt_size, mt_model, mt_opts, mt_out);
        if (tp->parsed()) return cmd_train_pae(tp_opts, tp_data, tp_out);
        if (td->parsed()) return cmd_train_pdit(td_opts, td_data, td_pae, td_out);
        if (ge->parsed())
            return cmd_generate(ge_opts, ge_mode, ge_clean, ge_noisy, ge_bank, ge_pae, ge_pdit,
                                ge_mult, ge_out, ge_sidecar);
        if (en->parsed())
            return cmd_eval_noise(en_opts, en_clean, en_noisy, en_gen, en_bins, en_cap, en_out);
        if (tn->parsed()) return cmd_train_denoiser(tn_opts, tn_real, tn_synth, tn_out);
        if (ed->parsed()) return cmd_eval_denoiser(ed_opts, ed_ckpt, ed_data, ed_out);
        if (sc->parsed() && sd->parsed()) return cmd_schedule_dump(sd_opts, sd_n, sd_k);
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
    return 2;
}
