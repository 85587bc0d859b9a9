#include "pngen/genpipe.hpp"

#include <algorithm>
#include <fstream>

namespace pngen::genpipe {

namespace fs = std::filesystem;

Generator Generator::load(const fs::path& pae_ckpt, const fs::path& pdit_ckpt) {
    Checkpoint pc = load_checkpoint(pae_ckpt);
    require_checkpoint(pc, "pae");
    Checkpoint dc = load_checkpoint(pdit_ckpt);
    require_checkpoint(dc, "pdit");

    pae::PAEModel<float> pae_model = pae::load_pae(pc);
    cmtrain::CMTrainConfig cm = cmtrain::CMTrainConfig::from_config(dc.config);
    pdit::PDiTModel<float> pdit_model(cm.pdit, 0);
    // generation always runs on the EMA weights
    load_params(pdit_model.params, dc, "ema.");

    Generator gen(std::move(pae_model), std::move(pdit_model));
    gen.stats = cmtrain::stats_from_checkpoint(dc);
    gen.sigma = cm.sigma;
    check_config(gen.pae_model.cfg.c_z == cm.pdit.c_z,
                 "generator: PAE and P-DiT disagree on the latent channel count");
    return gen;
}

Image generate_from_prompts(Generator& gen, const Image& clean,
                            const Tensor<float>& prompt_residual, uint64_t seed, uint64_t index,
                            GenInfo* info) {
    const int h = clean.dim(0), w = clean.dim(1);
    check_contract(clean.rank() == 3 && clean.dim(2) == 3, "generate: clean must be (H,W,3)");
    check_contract(h % 8 == 0 && w % 8 == 0, "generate: dims must be divisible by 8");
    check_contract(prompt_residual.dim(0) == h && prompt_residual.dim(1) == w,
                   "generate: prompt residual must match the clean image size");

    // prompts from the residual
    auto enc = gen.pae_model.encode(prompt_residual.reshaped({1, h, w, 3}));

    // one-step consistency generation from sigma_max
    const int lh = h / 8, lw = w / 8, cz = gen.pae_model.cfg.c_z;
    RandomStream zrs(seed, "gen-zT", index);
    Tensor<float> z_t({1, lh, lw, cz});
    zrs.fill_normal(z_t, 0.0, gen.sigma.sigma_max);

    nn::Graph<float> g(false);
    auto prompts = cmtrain::prompts_to_vars(g, enc);
    Tensor<float> clean_batch = clean.reshaped({1, h, w, 3});
    Tensor<float> clean_cond;
    {
        nn::Var<float> down = g.constant(clean_batch);
        for (int f = gen.pdit_model.cfg.cond_downsample; f > 1; f /= 2)
            down = nn::avgpool2(down);
        clean_cond = down.val();
    }
    const int p = gen.pdit_model.cfg.token_patch;
    auto ce = gen.pdit_model.cond_embedder.forward(g, g.constant(clean_cond), prompts, lh / p,
                                                   lw / p);
    nn::Var<float> z0n =
        gen.pdit_model.consistency(g, g.constant(z_t), {gen.sigma.sigma_max}, gen.sigma.sigma_min,
                                   gen.stats.sigma_data, ce.tokens, ce.pooled, nullptr);

    Tensor<float> z0 = cmtrain::denormalize(z0n.val(), gen.stats);
    Tensor<float> out = gen.pae_model.decode(z0, clean_batch, /*clamp_output=*/false);

    if (info) {
        info->preclamp_min = out[0];
        info->preclamp_max = out[0];
        int64_t clipped = 0;
        for (int64_t i = 0; i < out.numel(); ++i) {
            info->preclamp_min = std::min(info->preclamp_min, out[i]);
            info->preclamp_max = std::max(info->preclamp_max, out[i]);
            if (out[i] < 0.0f || out[i] > 1.0f) ++clipped;
        }
        info->saturation_frac = static_cast<double>(clipped) / static_cast<double>(out.numel());
    }
    Image img = out.reshaped({h, w, 3});
    clamp01(img);
    return img;
}

Image generate_paired(Generator& gen, const Image& clean, const Image& noisy_ref, uint64_t seed,
                      uint64_t index, GenInfo* info) {
    check_same_shape(noisy_ref, clean, "generate_paired");
    Tensor<float> residual = residual_of(noisy_ref, clean);
    Image out = generate_from_prompts(gen, clean, residual, seed, index, info);
    if (info) info->prompt_source = "paired";
    return out;
}

NoiseBank NoiseBank::from_paired_dir(const fs::path& root) {
    // patch size is irrelevant for the bank; load with the minimum
    data::PairedDataset ds = data::PairedDataset::load(root, 1, 0);
    NoiseBank bank;
    for (size_t i = 0; i < ds.size(); ++i) {
        bank.residuals.push_back(residual_of(ds.noisy(i), ds.clean(i)));
        bank.ids.push_back(ds.entry(i).id);
    }
    return bank;
}

namespace {

inline int mirror_index(int i, int n) {
    if (n == 1) return 0;
    int period = 2 * n - 2;
    i %= period;
    if (i < 0) i += period;
    return i < n ? i : period - i;
}

}  // namespace

Tensor<float> adapt_residual(const Tensor<float>& src, int h, int w) {
    const int sh = src.dim(0), sw = src.dim(1), c = src.dim(2);
    if (sh == h && sw == w) return src;
    Tensor<float> out({h, w, c});
    if (sh >= h && sw >= w) {
        // center crop
        int oy = (sh - h) / 2, ox = (sw - w) / 2;
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x)
                for (int j = 0; j < c; ++j) out.at(y, x, j) = src.at(oy + y, ox + x, j);
    } else {
        // reflect-tile
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x)
                for (int j = 0; j < c; ++j)
                    out.at(y, x, j) = src.at(mirror_index(y, sh), mirror_index(x, sw), j);
    }
    return out;
}

Image generate_unpaired(Generator& gen, const Image& clean, const NoiseBank& bank, uint64_t seed,
                        uint64_t index, GenInfo* info) {
    check_contract(!bank.empty(), "generate_unpaired: empty noise bank");
    RandomStream pick(seed, "gen-bank", index);
    size_t which = static_cast<size_t>(pick.uniform_int(bank.residuals.size()));
    Tensor<float> prompt = adapt_residual(bank.residuals[which], clean.dim(0), clean.dim(1));
    Image out = generate_from_prompts(gen, clean, prompt, seed, index, info);
    if (info) info->prompt_source = bank.ids[which];
    return out;
}

std::vector<ManifestRow> synthesize_dataset(Generator& gen, const SynthesisRequest& req) {
    check_contract(req.multiplier >= 1, "synthesize: multiplier must be >= 1");
    std::error_code ec;
    fs::create_directories(req.out_dir / "clean", ec);
    fs::create_directories(req.out_dir / "noisy", ec);
    if (!fs::is_directory(req.out_dir / "noisy"))
        throw IoError("cannot create output directory " + req.out_dir.string());

    std::optional<data::PairedDataset> paired;
    std::vector<std::pair<std::string, fs::path>> clean_files;
    NoiseBank bank;
    if (req.paired) {
        paired = data::PairedDataset::load_dirs(req.clean_dir, req.noisy_dir, 1, req.seed);
        for (size_t i = 0; i < paired->size(); ++i)
            clean_files.emplace_back(paired->entry(i).id, paired->entry(i).clean_path);
    } else {
        for (const auto& e : fs::directory_iterator(req.clean_dir))
            if (e.path().extension() == ".png")
                clean_files.emplace_back(e.path().stem().string(), e.path());
        std::sort(clean_files.begin(), clean_files.end());
        check_config(!clean_files.empty(), "no clean PNGs under " + req.clean_dir.string());
        bank = NoiseBank::from_paired_dir(req.bank_dir);
    }

    std::vector<ManifestRow> rows;
    for (size_t i = 0; i < clean_files.size(); ++i) {
        Image clean = req.paired ? paired->clean(i) : read_png(clean_files[i].second);
        for (int r = 0; r < req.multiplier; ++r) {
            uint64_t index = static_cast<uint64_t>(i) * static_cast<uint64_t>(req.multiplier) +
                             static_cast<uint64_t>(r);
            GenInfo info;
            Image synth;
            if (req.paired) {
                synth = generate_paired(gen, clean, paired->noisy(i), req.seed, index, &info);
                info.prompt_source = clean_files[i].first;
            } else {
                synth = generate_unpaired(gen, clean, bank, req.seed, index, &info);
            }
            char suffix[16];
            std::snprintf(suffix, sizeof(suffix), "_s%02d", r);
            std::string name = clean_files[i].first + suffix + ".png";
            write_png(req.out_dir / "clean" / name, clean);
            write_png(req.out_dir / "noisy" / name, synth);
            if (req.float_sidecar)
                write_f32(req.out_dir / "noisy" / (clean_files[i].first + suffix + ".f32"), synth);
            // manifest paths are relative to the manifest itself, so reruns
            // into a different directory produce byte-identical manifests
            rows.push_back({"clean/" + name, "noisy/" + name, index, info.prompt_source});
        }
    }
    std::sort(rows.begin(), rows.end(),
              [](const ManifestRow& a, const ManifestRow& b) { return a.synth_path < b.synth_path; });

    std::ofstream mf(req.out_dir / "manifest.csv");
    if (!mf) throw IoError("cannot write manifest.csv");
    mf << "clean_path,synth_path,seed,prompt_source\n";
    for (const auto& r : rows)
        mf << r.clean_path << "," << r.synth_path << "," << r.seed_index << "," << r.prompt_source
           << "\n";
    return rows;
}

std::vector<ManifestRow> read_manifest(const fs::path& csv) {
    std::ifstream in(csv);
    if (!in) throw IoError("cannot open manifest " + csv.string());
    std::vector<ManifestRow> rows;
    std::string line;
    std::getline(in, line);  // header
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        ManifestRow row;
        size_t a = line.find(','), b = line.find(',', a + 1), c = line.find(',', b + 1);
        check_contract(a != std::string::npos && b != std::string::npos && c != std::string::npos,
                       "malformed manifest row: " + line);
        row.clean_path = (csv.parent_path() / line.substr(0, a)).string();
        row.synth_path = (csv.parent_path() / line.substr(a + 1, b - a - 1)).string();
        row.seed_index = std::stoull(line.substr(b + 1, c - b - 1));
        row.prompt_source = line.substr(c + 1);
        rows.push_back(std::move(row));
    }
    return rows;
}

}  // namespace pngen::genpipe
