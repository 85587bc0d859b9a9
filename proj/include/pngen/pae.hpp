#pragma once

#include <array>
#include <filesystem>

#include "pngen/checkpoint.hpp"
#include "pngen/config.hpp"
#include "pngen/data.hpp"
#include "pngen/nn.hpp"
#include "pngen/noisestats.hpp"

// Prompt Autoencoder: a Prompt Encoder (GPB + LPB over a residual-block
// trunk with three stride-2 stages) mapping noise residuals to latent codes
// and prompt features, and a clean-image-conditioned Decoder mapping latent
// codes back to noisy images.
namespace pngen::pae {

struct PAEConfig {
    int patch = 64;                          // training patch size; prompt components live at this size
    std::array<int, 4> trunk = {16, 32, 64, 64};
    int c_global = 8;
    int c_local = 8;
    int c_z = 16;
    int rho = 7;
    double lambda_z = 1e-4;
    int lpb_downsample = 1;    // compute the correlation map at patch/ds resolution
    bool per_channel_corr = false;

    double lr = 1e-3;
    double lr_min = 1e-6;
    int64_t iterations = 6000;
    int batch = 8;
    int64_t checkpoint_every = 2000;
    int64_t log_every = 50;
    double target_psnr = 0.0;   // early stop once reconstruction PSNR exceeds this (0 = off)
    int64_t eval_every = 0;     // reconstruction-PSNR evaluation interval (0 = off)
    uint64_t seed = 0;

    static PAEConfig from_config(const RunConfig& cfg);
    void write(RunConfig& cfg) const;
    void validate() const;
};

template <typename T>
struct PromptFeatureVars {
    std::array<nn::Var<T>, 4> global;
    nn::Var<T> local;
};

// AdaLN-style modulation used across the project: layer-normalize over the
// channel dim, then scale by (1 + scale) and shift, both per sample.
template <typename T>
nn::Var<T> adaln(nn::Var<T> x, nn::Var<T> scale, nn::Var<T> shift) {
    using namespace nn;
    return add_channels(mul_channels(layernorm_lastdim(x), offset(scale, T(1))), shift);
}

// Global Prompt Block: coefficients from channel-wise mean/std of the input
// feature modulate a learnable component map.
template <typename T>
struct GPB {
    nn::Linear<T> coeff;   // 2*c_in -> c_g (1x1 conv on the pooled stats)
    nn::Conv2d<T> refine;  // 3x3
    nn::Param<T>* components = nullptr;

    GPB() = default;
    GPB(nn::ParamStore<T>& ps, const std::string& name, int c_in, int c_g, int hs, int ws,
        RandomStream& rs)
        : coeff(ps, name + ".coeff", 2 * c_in, c_g, rs),
          refine(ps, name + ".refine", c_g, c_g, 3, 1, rs) {
        components = ps.add(name + ".components",
                            nn::init_tensor<T>({hs, ws, c_g}, 0, nn::Init::kNormal02, rs));
    }

    nn::Var<T> forward(nn::Graph<T>& g, nn::Var<T> f_in, nn::Var<T>* w_out = nullptr) const {
        using namespace nn;
        const int n = f_in.shape()[0], h = f_in.shape()[1], w = f_in.shape()[2];
        Var<T> mu = mean_spatial(f_in);
        Var<T> centered = add_channels(f_in, neg(mu));
        Var<T> sd = sqrt_(offset(mean_spatial(square(centered)), T(1e-12)));
        Var<T> wg = softmax_lastdim(coeff(g, concat_lastdim<T>({mu, sd})));
        if (w_out) *w_out = wg;
        Var<T> comp = resampled_components(g, h, w);
        return refine(g, mul_channels(tile0(comp, n), wg));
    }

    // Components are bilinearly resampled when the input size differs from
    // the training patch size.
    nn::Var<T> resampled_components(nn::Graph<T>& g, int h, int w) const {
        using namespace nn;
        const auto& s = components->value.shape;
        Var<T> comp = g.leaf(components);
        if (s[0] == h && s[1] == w) return comp;
        Var<T> batched = reshape(comp, {1, s[0], s[1], s[2]});
        return reshape(upsample_bilinear(batched, h, w), {h, w, s[2]});
    }
};

// Local Prompt Block: per-pixel Pearson correlation structure of the raw
// residual drives spatial modulation coefficients through CoMB.
template <typename T>
struct LPB {
    nn::Conv2d<T> comb_pre;   // 1x1: 2*rho -> c_l
    nn::Conv2d<T> comb_post;  // 3x3: c_l -> c_l
    nn::Conv2d<T> refine;     // 3x3
    nn::Param<T>* components = nullptr;
    int rho = 7;
    int downsample = 1;
    bool per_channel = false;

    LPB() = default;
    LPB(nn::ParamStore<T>& ps, const std::string& name, int c_l, int rho_, int downsample_,
        bool per_channel_, int hs, int ws, RandomStream& rs)
        : comb_pre(ps, name + ".comb_pre", 2 * rho_, c_l, 1, 1, rs),
          comb_post(ps, name + ".comb_post", c_l, c_l, 3, 1, rs),
          refine(ps, name + ".refine", c_l, c_l, 3, 1, rs),
          rho(rho_),
          downsample(downsample_),
          per_channel(per_channel_) {
        components = ps.add(name + ".components",
                            nn::init_tensor<T>({hs, ws, c_l}, 0, nn::Init::kNormal02, rs));
    }

    // residual: raw (N,H,W,3) noise values; constant w.r.t. the tape.
    nn::Var<T> forward(nn::Graph<T>& g, const Tensor<T>& residual,
                       nn::Var<T>* w_out = nullptr) const {
        using namespace nn;
        const int n = residual.dim(0), h = residual.dim(1), w = residual.dim(2);
        const int hs = h / downsample, ws = w / downsample;
        Tensor<T> features({n, hs, ws, 2 * rho});
        for (int b = 0; b < n; ++b) {
            Tensor<T> one({h, w, residual.dim(3)});
            std::copy(residual.ptr() + static_cast<int64_t>(b) * one.numel(),
                      residual.ptr() + static_cast<int64_t>(b + 1) * one.numel(), one.ptr());
            if (downsample > 1) one = downsample_mean(one, downsample);
            auto cm = noisestats::local_correlation_map(one, rho, per_channel);
            Tensor<T> rc = noisestats::rowcol_average(cm);
            std::copy(rc.ptr(), rc.ptr() + rc.numel(),
                      features.ptr() + static_cast<int64_t>(b) * rc.numel());
        }
        Var<T> fcorr = g.constant(std::move(features));
        Var<T> hmid = comb_pre(g, fcorr);
        if (downsample > 1) hmid = upsample_bilinear(hmid, h, w);
        Var<T> wl = softmax_lastdim(comb_post(g, hmid));
        if (w_out) *w_out = wl;
        const auto& s = components->value.shape;
        Var<T> comp = g.leaf(components);
        if (s[0] != h || s[1] != w)
            comp = reshape(upsample_bilinear(reshape(comp, {1, s[0], s[1], s[2]}), h, w),
                           {h, w, s[2]});
        return refine(g, mul(wl, tile0(comp, n)));
    }

    static Tensor<T> downsample_mean(const Tensor<T>& img, int r) {
        const int h = img.dim(0), w = img.dim(1), c = img.dim(2);
        check_contract(h % r == 0 && w % r == 0, "lpb downsample must divide patch size");
        Tensor<T> out({h / r, w / r, c}, T(0));
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x)
                for (int j = 0; j < c; ++j)
                    out.at(y / r, x / r, j) += img.at(y, x, j) / static_cast<T>(r * r);
        return out;
    }
};

template <typename T>
struct PromptEncoder {
    PAEConfig cfg;
    nn::Conv2d<T> stem;
    nn::ResBlock<T> rb0, rb1, rb2, rb3;
    GPB<T> gpb0, gpb1, gpb2, gpb3;
    LPB<T> lpb;
    nn::Conv2d<T> down0, down1, down2;
    nn::Conv2d<T> fuse3;
    nn::ResBlock<T> rb_head;
    nn::Conv2d<T> head;

    PromptEncoder() = default;
    PromptEncoder(nn::ParamStore<T>& ps, const PAEConfig& c, RandomStream& rs)
        : cfg(c),
          stem(ps, "enc.stem", 3, c.trunk[0], 3, 1, rs),
          rb0(ps, "enc.rb0", c.trunk[0], rs),
          rb1(ps, "enc.rb1", c.trunk[1], rs),
          rb2(ps, "enc.rb2", c.trunk[2], rs),
          rb3(ps, "enc.rb3", c.trunk[3], rs),
          gpb0(ps, "enc.gpb0", c.trunk[0], c.c_global, c.patch, c.patch, rs),
          gpb1(ps, "enc.gpb1", c.trunk[1], c.c_global, c.patch / 2, c.patch / 2, rs),
          gpb2(ps, "enc.gpb2", c.trunk[2], c.c_global, c.patch / 4, c.patch / 4, rs),
          gpb3(ps, "enc.gpb3", c.trunk[3], c.c_global, c.patch / 8, c.patch / 8, rs),
          lpb(ps, "enc.lpb", c.c_local, c.rho, c.lpb_downsample, c.per_channel_corr, c.patch,
              c.patch, rs),
          down0(ps, "enc.down0", c.trunk[0] + c.c_global + c.c_local, c.trunk[1], 3, 2, rs),
          down1(ps, "enc.down1", c.trunk[1] + c.c_global, c.trunk[2], 3, 2, rs),
          down2(ps, "enc.down2", c.trunk[2] + c.c_global, c.trunk[3], 3, 2, rs),
          fuse3(ps, "enc.fuse3", c.trunk[3] + c.c_global, c.trunk[3], 3, 1, rs),
          rb_head(ps, "enc.rb_head", c.trunk[3], rs),
          head(ps, "enc.head", c.trunk[3], c.c_z, 3, 1, rs) {}

    struct Out {
        nn::Var<T> z;
        PromptFeatureVars<T> prompts;
    };

    Out forward(nn::Graph<T>& g, const Tensor<T>& residual) const {
        using namespace nn;
        check_config(residual.rank() == 4 && residual.dim(1) % 8 == 0 && residual.dim(2) % 8 == 0,
                     "encoder input dims must be divisible by 8");
        Out out;
        Var<T> n_in = g.constant(residual);
        Var<T> x = rb0(g, stem(g, n_in));
        out.prompts.global[0] = gpb0.forward(g, x);
        out.prompts.local = lpb.forward(g, residual);
        x = down0(g, concat_lastdim<T>({x, out.prompts.global[0], out.prompts.local}));
        x = rb1(g, x);
        out.prompts.global[1] = gpb1.forward(g, x);
        x = down1(g, concat_lastdim<T>({x, out.prompts.global[1]}));
        x = rb2(g, x);
        out.prompts.global[2] = gpb2.forward(g, x);
        x = down2(g, concat_lastdim<T>({x, out.prompts.global[2]}));
        x = rb3(g, x);
        out.prompts.global[3] = gpb3.forward(g, x);
        x = fuse3(g, concat_lastdim<T>({x, out.prompts.global[3]}));
        out.z = head(g, rb_head(g, x));
        return out;
    }
};

template <typename T>
struct Decoder {
    nn::Conv2d<T> conv_in;
    nn::Conv2d<T> fuse3, fuse2, fuse1, fuse0;
    nn::ResBlock<T> rb3, rb2, rb1, rb0;
    nn::Conv2d<T> conv_out;

    Decoder() = default;
    Decoder(nn::ParamStore<T>& ps, const PAEConfig& c, RandomStream& rs)
        : conv_in(ps, "dec.conv_in", c.c_z, c.trunk[3], 3, 1, rs),
          fuse3(ps, "dec.fuse3", c.trunk[3] + 3 * 64, c.trunk[3], 3, 1, rs),
          fuse2(ps, "dec.fuse2", c.trunk[3] + 3 * 16, c.trunk[2], 3, 1, rs),
          fuse1(ps, "dec.fuse1", c.trunk[2] + 3 * 4, c.trunk[1], 3, 1, rs),
          fuse0(ps, "dec.fuse0", c.trunk[1] + 3, c.trunk[0], 3, 1, rs),
          rb3(ps, "dec.rb3", c.trunk[3], rs),
          rb2(ps, "dec.rb2", c.trunk[2], rs),
          rb1(ps, "dec.rb1", c.trunk[1], rs),
          rb0(ps, "dec.rb0", c.trunk[0], rs),
          // zero-init output head: reconstruction starts at the clean image
          conv_out(ps, "dec.conv_out", c.trunk[0], 3, 3, 1, rs, nn::Init::kZero) {}

    // clean conditions every scale through pixel downsampling; the output is
    // clean plus a synthesized residual (affine output, clamped only at eval).
    nn::Var<T> forward(nn::Graph<T>& g, nn::Var<T> z, nn::Var<T> clean) const {
        using namespace nn;
        check_contract(clean.shape()[1] == z.shape()[1] * 8 && clean.shape()[2] == z.shape()[2] * 8,
                       "decoder: clean dims must be 8x the latent dims");
        Var<T> y = conv_in(g, z);
        y = rb3(g, fuse3(g, concat_lastdim<T>({y, space_to_depth(clean, 8)})));
        y = upsample_nearest2(y);
        y = rb2(g, fuse2(g, concat_lastdim<T>({y, space_to_depth(clean, 4)})));
        y = upsample_nearest2(y);
        y = rb1(g, fuse1(g, concat_lastdim<T>({y, space_to_depth(clean, 2)})));
        y = upsample_nearest2(y);
        y = rb0(g, fuse0(g, concat_lastdim<T>({y, clean})));
        return add(clean, conv_out(g, y));
    }
};

template <typename T>
struct PAEModel {
    PAEConfig cfg;
    nn::ParamStore<T> params;
    PromptEncoder<T> encoder;
    Decoder<T> decoder;

    explicit PAEModel(const PAEConfig& c, uint64_t init_seed = 0) : cfg(c) {
        cfg.validate();
        RandomStream rs(init_seed != 0 ? init_seed : c.seed, "pae-init");
        encoder = PromptEncoder<T>(params, cfg, rs);
        decoder = Decoder<T>(params, cfg, rs);
    }

    struct Encoded {
        Tensor<T> z;                        // (N, H/8, W/8, c_z)
        std::array<Tensor<T>, 4> f_global;  // per-scale prompt features
        Tensor<T> f_local;                  // (N, H, W, c_local)
    };

    // Inference-mode encode; deterministic, no gradients.
    Encoded encode(const Tensor<T>& residual) {
        nn::Graph<T> g(false);
        auto out = encoder.forward(g, residual);
        Encoded e;
        e.z = out.z.val();
        for (int l = 0; l < 4; ++l) e.f_global[static_cast<size_t>(l)] = out.prompts.global[static_cast<size_t>(l)].val();
        e.f_local = out.prompts.local.val();
        return e;
    }

    Tensor<T> decode(const Tensor<T>& z, const Tensor<T>& clean, bool clamp_output = true) {
        nn::Graph<T> g(false);
        nn::Var<T> out = decoder.forward(g, g.constant(z), g.constant(clean));
        Tensor<T> img = out.val();
        if (clamp_output)
            for (auto& v : img.data) v = v < T(0) ? T(0) : (v > T(1) ? T(1) : v);
        return img;
    }
};

// L1 reconstruction plus L2 latent regularization.
template <typename T>
nn::Var<T> pae_loss(nn::Graph<T>& g, nn::Var<T> recon, nn::Var<T> noisy, nn::Var<T> z,
                    T lambda_z) {
    using namespace nn;
    check_contract(recon.shape() == noisy.shape(), "pae_loss: shape mismatch");
    (void)g;
    Var<T> l1 = mean_all(abs_(sub(recon, noisy)));
    Var<T> reg = mean_all(square(z));
    return add(l1, scale(reg, lambda_z));
}

struct TrainResult {
    std::filesystem::path checkpoint_dir;
    double final_loss = 0.0;
    double first_loss = 0.0;
};

TrainResult train_pae(const data::PairedDataset& ds, const RunConfig& raw_config,
                      const std::filesystem::path& out_dir);

// Rebuilds a float PAE from a checkpoint directory.
PAEModel<float> load_pae(const Checkpoint& ckpt);
PAEModel<float> load_pae(const std::filesystem::path& ckpt_dir);

// Mean reconstruction PSNR of decode(encode(residual)) against the noisy
// images, over whole images.
double reconstruction_psnr(PAEModel<float>& model, const data::PairedDataset& ds);

}  // namespace pngen::pae
