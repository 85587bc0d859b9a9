#pragma once

#include <vector>

#include "pngen/config.hpp"
#include "pngen/nn.hpp"
#include "pngen/pae.hpp"
#include "pngen/schedule.hpp"

// Prompt DiT: a transformer over latent tokens with AdaLN conditioning and
// Prompt Attention (condition-derived K/Q/V added to the token projections,
// cosine attention with a learned temperature), wrapped in the EDM
// consistency parameterization.
namespace pngen::pdit {

struct PDiTConfig {
    int blocks = 4;
    int hidden = 128;
    int heads = 4;
    int token_patch = 1;
    double dropout = 0.1;
    double cond_noise_std = 0.05;  // training-only corruption of the conditional clean image
    int cond_downsample = 2;       // pre-downsample factor of the conditional clean image
    int cond_embed = 16;           // channels per conditioning source
    int mlp_ratio = 4;
    int c_z = 16;     // latent channels (matches the PAE)
    int c_local = 8;  // prompt channel plan (matches the PAE)
    int c_global = 8;

    static PDiTConfig from_config(const RunConfig& cfg);
    void write(RunConfig& cfg) const;
    void validate() const;
};

inline constexpr double kMaxLogTemperature = 4.605170185988091;  // ln(100)

// Fixed 2-D sin/cos positional table, (h*w, dim).
template <typename T>
Tensor<T> sincos_pos_embed_2d(int dim, int h, int w) {
    check_contract(dim % 4 == 0, "positional embedding dim must be divisible by 4");
    const int quarter = dim / 4;
    std::vector<double> omega(static_cast<size_t>(quarter));
    for (int i = 0; i < quarter; ++i)
        omega[static_cast<size_t>(i)] =
            1.0 / std::pow(10000.0, static_cast<double>(i) / quarter);
    Tensor<T> out({h * w, dim});
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            T* row = out.ptr() + (static_cast<int64_t>(y) * w + x) * dim;
            for (int i = 0; i < quarter; ++i) {
                row[i] = static_cast<T>(std::sin(y * omega[static_cast<size_t>(i)]));
                row[quarter + i] = static_cast<T>(std::cos(y * omega[static_cast<size_t>(i)]));
                row[2 * quarter + i] = static_cast<T>(std::sin(x * omega[static_cast<size_t>(i)]));
                row[3 * quarter + i] = static_cast<T>(std::cos(x * omega[static_cast<size_t>(i)]));
            }
        }
    return out;
}

// Sinusoidal embedding of ln(sigma) followed by a two-layer MLP.
template <typename T>
struct TimestepEmbedder {
    nn::Linear<T> l1, l2;
    int dim = 0;

    TimestepEmbedder() = default;
    TimestepEmbedder(nn::ParamStore<T>& ps, const std::string& name, int hidden, RandomStream& rs)
        : l1(ps, name + ".l1", hidden, hidden, rs), l2(ps, name + ".l2", hidden, hidden, rs),
          dim(hidden) {}

    static Tensor<T> sinusoid(const std::vector<double>& sigmas, int dim) {
        const int half = dim / 2;
        Tensor<T> emb({static_cast<int>(sigmas.size()), dim});
        for (size_t n = 0; n < sigmas.size(); ++n) {
            check_contract(sigmas[n] > 0.0, "timestep_embed requires sigma > 0");
            double ls = std::log(sigmas[n]);
            for (int i = 0; i < half; ++i) {
                double freq = std::exp(-std::log(10000.0) * static_cast<double>(i) / half);
                emb.at(static_cast<int>(n), i) = static_cast<T>(std::cos(ls * freq));
                emb.at(static_cast<int>(n), half + i) = static_cast<T>(std::sin(ls * freq));
            }
        }
        return emb;
    }

    nn::Var<T> forward(nn::Graph<T>& g, const std::vector<double>& sigmas) const {
        using namespace nn;
        Var<T> e = g.constant(sinusoid(sigmas, dim));
        return l2(g, silu(l1(g, e)));
    }
};

// Embeds (clean, F_Local, F_Global^0..3) into token-aligned conditioning.
// Sources are pixel-downsampled to the token grid, passed through separate
// 3x3 convs and concatenated in that fixed order; the pooled embedding is
// exposed for addition to the timestep embedding.
template <typename T>
struct CondEmbedder {
    nn::Conv2d<T> e_clean, e_local, e_g0, e_g1, e_g2, e_g3;
    nn::Linear<T> pool_proj;
    int cond_embed = 0;

    CondEmbedder() = default;
    CondEmbedder(nn::ParamStore<T>& ps, const std::string& name, const PDiTConfig& cfg,
                 RandomStream& rs)
        : cond_embed(cfg.cond_embed) {
        const int e = cfg.cond_embed;
        // channel counts after pixel downsampling to the token grid; the
        // clean image arrives pre-downsampled by cond_downsample
        const int p = cfg.token_patch;
        const int f_clean = 8 * p / cfg.cond_downsample;
        const int f_full = 8 * p;
        e_clean = nn::Conv2d<T>(ps, name + ".clean", 3 * f_clean * f_clean, e, 3, 1, rs);
        e_local = nn::Conv2d<T>(ps, name + ".local", cfg.c_local * f_full * f_full, e, 3, 1, rs);
        e_g0 = nn::Conv2d<T>(ps, name + ".g0", cfg.c_global * f_full * f_full, e, 3, 1, rs);
        e_g1 = nn::Conv2d<T>(ps, name + ".g1", cfg.c_global * f_full * f_full / 4, e, 3, 1, rs);
        e_g2 = nn::Conv2d<T>(ps, name + ".g2", cfg.c_global * f_full * f_full / 16, e, 3, 1, rs);
        e_g3 = nn::Conv2d<T>(ps, name + ".g3", cfg.c_global * f_full * f_full / 64, e, 3, 1, rs);
        pool_proj = nn::Linear<T>(ps, name + ".pool", 6 * e, cfg.hidden, rs);
    }

    struct Out {
        nn::Var<T> tokens;  // (N, T, 6*cond_embed)
        nn::Var<T> pooled;  // (N, hidden)
        int grid_h = 0, grid_w = 0;
    };

    Out forward(nn::Graph<T>& g, nn::Var<T> clean_ds, const pae::PromptFeatureVars<T>& prompts,
                int grid_h, int grid_w) const {
        using namespace nn;
        auto pd = [&](Var<T> x) {
            const auto& s = x.shape();
            check_contract(s[1] % grid_h == 0 && s[1] / grid_h == s[2] / grid_w,
                           "cond_embed: source not divisible down to the token grid");
            int f = s[1] / grid_h;
            return f == 1 ? x : space_to_depth(x, f);
        };
        Var<T> parts[6] = {e_clean(g, pd(clean_ds)),
                           e_local(g, pd(prompts.local)),
                           e_g0(g, pd(prompts.global[0])),
                           e_g1(g, pd(prompts.global[1])),
                           e_g2(g, pd(prompts.global[2])),
                           e_g3(g, pd(prompts.global[3]))};
        Var<T> cat = concat_lastdim<T>(
            {parts[0], parts[1], parts[2], parts[3], parts[4], parts[5]});
        Out out;
        out.grid_h = grid_h;
        out.grid_w = grid_w;
        out.pooled = pool_proj(g, mean_spatial(cat));
        const int n = cat.shape()[0];
        out.tokens = reshape(cat, {n, grid_h * grid_w, 6 * cond_embed});
        return out;
    }
};

// Debug probe filled by prompt attention when requested.
template <typename T>
struct AttnProbe {
    Tensor<T> attn;    // (N*heads, T, T) softmax weights
    Tensor<T> logits;  // pre-softmax
    double temperature = 0.0;
};

template <typename T>
struct PDiTBlock {
    nn::Linear<T> mod;       // t-emb -> 6*hidden modulation (zero init)
    nn::Linear<T> cond_mod;  // t-emb -> 2*cond-dim modulation (zero init)
    nn::Linear<T> cond_kqv;  // cond tokens -> combined K/Q/V contribution
    nn::Linear<T> qkv;
    nn::Linear<T> proj;
    nn::Linear<T> fc1, fc2;
    nn::Param<T>* log_temp = nullptr;
    int hidden = 0, heads = 0, cond_dim = 0;
    double drop = 0.0;

    PDiTBlock() = default;
    PDiTBlock(nn::ParamStore<T>& ps, const std::string& name, const PDiTConfig& cfg,
              RandomStream& rs)
        : mod(ps, name + ".mod", cfg.hidden, 6 * cfg.hidden, rs, nn::Init::kZero),
          cond_mod(ps, name + ".cond_mod", cfg.hidden, 2 * 6 * cfg.cond_embed, rs,
                   nn::Init::kZero),
          cond_kqv(ps, name + ".cond_kqv", 6 * cfg.cond_embed, 3 * cfg.hidden, rs),
          qkv(ps, name + ".qkv", cfg.hidden, 3 * cfg.hidden, rs),
          proj(ps, name + ".proj", cfg.hidden, cfg.hidden, rs),
          fc1(ps, name + ".fc1", cfg.hidden, cfg.mlp_ratio * cfg.hidden, rs),
          fc2(ps, name + ".fc2", cfg.mlp_ratio * cfg.hidden, cfg.hidden, rs),
          hidden(cfg.hidden),
          heads(cfg.heads),
          cond_dim(6 * cfg.cond_embed),
          drop(cfg.dropout) {
        log_temp = ps.add(name + ".log_temp", Tensor<T>({1}, static_cast<T>(std::log(10.0))));
    }

    nn::Var<T> forward(nn::Graph<T>& g, nn::Var<T> x, nn::Var<T> cond_tokens, nn::Var<T> t_emb,
                       RandomStream* dropout_rng, AttnProbe<T>* probe = nullptr) const {
        using namespace nn;
        const int d = hidden;
        check_contract(x.shape()[1] == cond_tokens.shape()[1],
                       "prompt_attention: condition tokens misaligned with input tokens");
        Var<T> m = silu(t_emb);
        Var<T> mods = mod(g, m);
        Var<T> sh1 = slice_lastdim(mods, 0, d), sc1 = slice_lastdim(mods, d, 2 * d);
        Var<T> g1 = slice_lastdim(mods, 2 * d, 3 * d), sh2 = slice_lastdim(mods, 3 * d, 4 * d);
        Var<T> sc2 = slice_lastdim(mods, 4 * d, 5 * d), g2 = slice_lastdim(mods, 5 * d, 6 * d);

        // conditions are AdaLN-modulated by the timestep embedding, then one
        // linear map produces their K/Q/V contribution
        Var<T> cm = cond_mod(g, m);
        Var<T> c_n = pae::adaln(cond_tokens, slice_lastdim(cm, cond_dim, 2 * cond_dim),
                                slice_lastdim(cm, 0, cond_dim));
        Var<T> ckqv = cond_kqv(g, c_n);

        Var<T> x_n = pae::adaln(x, sc1, sh1);
        Var<T> xkqv = qkv(g, x_n);
        Var<T> q = add(slice_lastdim(xkqv, 0, d), slice_lastdim(ckqv, 0, d));
        Var<T> k = add(slice_lastdim(xkqv, d, 2 * d), slice_lastdim(ckqv, d, 2 * d));
        Var<T> v = add(slice_lastdim(xkqv, 2 * d, 3 * d), slice_lastdim(ckqv, 2 * d, 3 * d));

        // pointwise normalization for stability, then per-head cosine attention
        q = pixnorm_lastdim(q);
        k = pixnorm_lastdim(k);
        Var<T> qh = l2norm_lastdim(split_heads(q, heads));
        Var<T> kh = l2norm_lastdim(split_heads(k, heads));
        Var<T> vh = split_heads(v, heads);
        Var<T> temp = exp_(clamp_(g.leaf(log_temp), T(0), static_cast<T>(kMaxLogTemperature)));
        Var<T> logits = scale_by(bmm_nt(qh, kh), temp);
        Var<T> attn = softmax_lastdim(logits);
        if (probe) {
            probe->attn = attn.val();
            probe->logits = logits.val();
            probe->temperature = static_cast<double>(temp.val()[0]);
        }
        Var<T> out = proj(g, merge_heads(bmm(attn, vh), heads));
        x = add(x, mul_channels(out, g1));

        Var<T> h = pae::adaln(x, sc2, sh2);
        h = fc2(g, dropout(gelu(fc1(g, h)), drop, dropout_rng));
        return add(x, mul_channels(h, g2));
    }
};

template <typename T>
struct PDiTModel {
    PDiTConfig cfg;
    nn::ParamStore<T> params;
    nn::Linear<T> token_embed;
    TimestepEmbedder<T> t_embedder;
    CondEmbedder<T> cond_embedder;
    std::vector<PDiTBlock<T>> blocks;
    nn::Linear<T> final_mod;  // -> 2*hidden (zero init)
    nn::Linear<T> head;       // -> c_z * patch^2 (zero init)

    explicit PDiTModel(const PDiTConfig& c, uint64_t init_seed) : cfg(c) {
        cfg.validate();
        RandomStream rs(init_seed, "pdit-init");
        const int p = cfg.token_patch;
        token_embed = nn::Linear<T>(params, "tok", cfg.c_z * p * p, cfg.hidden, rs);
        t_embedder = TimestepEmbedder<T>(params, "temb", cfg.hidden, rs);
        cond_embedder = CondEmbedder<T>(params, "cond", cfg, rs);
        for (int b = 0; b < cfg.blocks; ++b)
            blocks.emplace_back(params, "blk" + std::to_string(b), cfg, rs);
        final_mod = nn::Linear<T>(params, "final_mod", cfg.hidden, 2 * cfg.hidden, rs,
                                  nn::Init::kZero);
        head = nn::Linear<T>(params, "head", cfg.hidden, cfg.c_z * p * p, rs, nn::Init::kZero);
    }

    // The free-form network F_theta over patch tokens.
    nn::Var<T> f_theta(nn::Graph<T>& g, nn::Var<T> z_in, nn::Var<T> t_emb, nn::Var<T> cond_tokens,
                       RandomStream* dropout_rng,
                       std::vector<AttnProbe<T>>* probes = nullptr) const {
        using namespace nn;
        const auto& s = z_in.shape();
        const int n = s[0], p = cfg.token_patch;
        check_contract(s[1] % p == 0 && s[2] % p == 0, "latent dims must divide by token_patch");
        Var<T> ztok = p > 1 ? space_to_depth(z_in, p) : z_in;
        const int gh = s[1] / p, gw = s[2] / p;
        Var<T> x = token_embed(g, reshape(ztok, {n, gh * gw, cfg.c_z * p * p}));
        x = add_const_bcast0(x, sincos_pos_embed_2d<T>(cfg.hidden, gh, gw));
        for (size_t b = 0; b < blocks.size(); ++b) {
            AttnProbe<T>* probe = nullptr;
            if (probes) {
                probes->emplace_back();
                probe = &probes->back();
            }
            x = blocks[b].forward(g, x, cond_tokens, t_emb, dropout_rng, probe);
        }
        Var<T> fm = final_mod(g, silu(t_emb));
        x = pae::adaln(x, slice_lastdim(fm, cfg.hidden, 2 * cfg.hidden),
                       slice_lastdim(fm, 0, cfg.hidden));
        Var<T> out = reshape(head(g, x), {n, gh, gw, cfg.c_z * p * p});
        return p > 1 ? depth_to_space(out, p) : out;
    }

    // EDM-parameterized consistency function over normalized latents:
    // c_skip(sigma)*z_t + c_out(sigma)*F_theta(c_in(sigma)*z_t, sigma, cond).
    nn::Var<T> consistency(nn::Graph<T>& g, nn::Var<T> z_t, const std::vector<double>& sigma_t,
                           double sigma_0, double sigma_data, nn::Var<T> cond_tokens,
                           nn::Var<T> cond_pooled, RandomStream* dropout_rng,
                           std::vector<AttnProbe<T>>* probes = nullptr) const {
        using namespace nn;
        const int n = z_t.shape()[0];
        check_contract(static_cast<int>(sigma_t.size()) == n,
                       "consistency: one sigma per sample required");
        schedule::EDMCoefficients edm{sigma_data};
        std::vector<T> cin(sigma_t.size()), cskip(sigma_t.size()), cout(sigma_t.size());
        for (size_t i = 0; i < sigma_t.size(); ++i) {
            auto c = schedule::edm_coeffs(sigma_t[i], sigma_0, edm);
            cin[i] = static_cast<T>(c.c_in);
            cskip[i] = static_cast<T>(c.c_skip);
            cout[i] = static_cast<T>(c.c_out);
        }
        Var<T> t_emb = add(t_embedder.forward(g, sigma_t), cond_pooled);
        Var<T> f = f_theta(g, scale_rows(z_t, cin), t_emb, cond_tokens, dropout_rng, probes);
        return add(scale_rows(z_t, cskip), scale_rows(f, cout));
    }
};

}  // namespace pngen::pdit
