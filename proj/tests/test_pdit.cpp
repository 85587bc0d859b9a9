#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "gradcheck.hpp"
#include "pngen/pdit.hpp"

using namespace pngen;
using namespace pngen::pdit;
using nn::Graph;
using nn::Var;

namespace {

PDiTConfig tiny_config() {
    PDiTConfig c;
    c.blocks = 2;
    c.hidden = 16;
    c.heads = 2;
    c.token_patch = 1;
    c.dropout = 0.1;
    c.cond_downsample = 2;
    c.cond_embed = 4;
    c.mlp_ratio = 2;
    c.c_z = 2;
    c.c_local = 2;
    c.c_global = 2;
    return c;
}

template <typename T>
struct CondInputs {
    Tensor<T> clean_ds;  // (N, H/2, W/2, 3)
    pae::PromptFeatureVars<T> prompts;
};

// Random conditioning sources for a latent grid (n, 8h, 8w image).
template <typename T>
CondInputs<T> make_cond(Graph<T>& g, const PDiTConfig& cfg, int n, int h, int w, uint64_t seed,
                        double scale = 1.0) {
    CondInputs<T> out;
    RandomStream rs(seed, "cond-inputs");
    const int ih = 8 * h * cfg.token_patch, iw = 8 * w * cfg.token_patch;
    out.clean_ds = Tensor<T>({n, ih / cfg.cond_downsample, iw / cfg.cond_downsample, 3});
    rs.fill_uniform(out.clean_ds, 0.0, scale);
    auto mk = [&](int hh, int ww, int c) {
        Tensor<T> t({n, hh, ww, c});
        rs.fill_normal(t, 0.0, scale);
        return g.constant(std::move(t));
    };
    out.prompts.local = mk(ih, iw, cfg.c_local);
    for (int l = 0; l < 4; ++l)
        out.prompts.global[static_cast<size_t>(l)] = mk(ih >> l, iw >> l, cfg.c_global);
    return out;
}

template <typename T>
void randomize_params(nn::ParamStore<T>& ps, uint64_t seed, double scale = 0.3) {
    RandomStream rs(seed, "randomize");
    for (const auto& p : ps.all())
        for (auto& v : p->value.data) v += static_cast<T>(rs.normal() * scale);
}

}  // namespace

TEST_CASE("timestep embedding: determinism, dimension, distinguishability") {
    RandomStream rs(1, "temb");
    nn::ParamStore<double> ps;
    TimestepEmbedder<double> emb(ps, "t", 32, rs);

    Graph<double> g;
    Var<double> a = emb.forward(g, {0.002, 80.0, 0.002});
    REQUIRE(a.shape() == std::vector<int>{3, 32});
    for (int i = 0; i < 32; ++i) CHECK(a.val().at(0, i) == a.val().at(2, i));

    double dot = 0, na = 0, nb = 0;
    for (int i = 0; i < 32; ++i) {
        dot += a.val().at(0, i) * a.val().at(1, i);
        na += a.val().at(0, i) * a.val().at(0, i);
        nb += a.val().at(1, i) * a.val().at(1, i);
    }
    CHECK(dot / std::sqrt(na * nb) < 0.99);

    CHECK_THROWS_AS(emb.forward(g, {0.0}), ContractError);
    CHECK_THROWS_AS(emb.forward(g, {-1.0}), ContractError);
}

TEST_CASE("conditional embedding: shape, bias replication, source order") {
    PDiTConfig cfg = tiny_config();
    RandomStream rs(2, "cemb");
    nn::ParamStore<double> ps;
    CondEmbedder<double> ce(ps, "cond", cfg, rs);

    Graph<double> g;
    auto cond = make_cond(g, cfg, 2, 4, 4, 77);
    auto out = ce.forward(g, g.constant(cond.clean_ds), cond.prompts, 4, 4);
    REQUIRE(out.tokens.shape() == std::vector<int>{2, 16, 6 * cfg.cond_embed});
    REQUIRE(out.pooled.shape() == std::vector<int>{2, cfg.hidden});

    // zero inputs -> every token equals the concatenated conv biases
    Graph<double> g2;
    auto zc = make_cond(g2, cfg, 1, 4, 4, 78, 0.0);
    for (auto& v : zc.clean_ds.data) v = 0.0;
    auto zout = ce.forward(g2, g2.constant(zc.clean_ds), zc.prompts, 4, 4);
    for (int t = 0; t < 16; ++t)
        for (int c = 0; c < 6 * cfg.cond_embed; ++c)
            CHECK(zout.tokens.val().at(0, t, c) ==
                  doctest::Approx(zout.tokens.val().at(0, 0, c)).epsilon(1e-12));

    // order contract: with zero biases, a nonzero clean image touches only
    // the first cond_embed channels
    for (auto& p : {ce.e_clean.b, ce.e_local.b, ce.e_g0.b, ce.e_g1.b, ce.e_g2.b, ce.e_g3.b})
        std::fill(p->value.data.begin(), p->value.data.end(), 0.0);
    Graph<double> g3;
    auto oc = make_cond(g3, cfg, 1, 4, 4, 79, 0.0);
    RandomStream rs2(3, "clean-only");
    rs2.fill_uniform(oc.clean_ds, 0.1, 0.9);
    auto oout = ce.forward(g3, g3.constant(oc.clean_ds), oc.prompts, 4, 4);
    double first = 0.0, rest = 0.0;
    for (int t = 0; t < 16; ++t)
        for (int c = 0; c < 6 * cfg.cond_embed; ++c) {
            double v = std::abs(oout.tokens.val().at(0, t, c));
            if (c < cfg.cond_embed)
                first += v;
            else
                rest += v;
        }
    CHECK(first > 0.0);
    CHECK(rest == 0.0);
}

TEST_CASE("adaln: zero params give plain layer norm; moments; affine invariance") {
    RandomStream rs(4, "adaln");
    Tensor<double> x({3, 5, 8});
    rs.fill_normal(x, 0.4, 1.3);

    Graph<double> g;
    Tensor<double> zeros({3, 8}, 0.0);
    Var<double> plain = pae::adaln(g.constant(x), g.constant(zeros), g.constant(zeros));
    Var<double> ln = nn::layernorm_lastdim(g.constant(x));
    for (int64_t i = 0; i < plain.val().numel(); ++i) CHECK(plain.val()[i] == ln.val()[i]);

    // output channel mean ~ shift, std ~ |1+scale|
    Tensor<double> sc({3, 8}), sh({3, 8});
    rs.fill_normal(sc, 0.0, 0.5);
    rs.fill_normal(sh, 0.0, 0.5);
    Var<double> mod = pae::adaln(g.constant(x), g.constant(sc), g.constant(sh));
    for (int n = 0; n < 3; ++n)
        for (int t = 0; t < 5; ++t) {
            double mean = 0, var = 0;
            for (int c = 0; c < 8; ++c) mean += mod.val().at(n, t, c);
            mean /= 8;
            for (int c = 0; c < 8; ++c) {
                double d = mod.val().at(n, t, c) - mean;
                var += d * d;
            }
            // per-token layer norm has exact zero mean/unit std over channels,
            // so the modulated moments follow the per-channel affine averages
            (void)var;
        }
    // stronger: reconstruct expected values directly
    for (int n = 0; n < 3; ++n)
        for (int t = 0; t < 5; ++t)
            for (int c = 0; c < 8; ++c) {
                double expect = ln.val().at(n, t, c) * (1.0 + sc.at(n, c)) + sh.at(n, c);
                CHECK(mod.val().at(n, t, c) == doctest::Approx(expect).epsilon(1e-12));
            }

    // invariance to per-token affine rescaling of the input
    Tensor<double> x2 = x;
    for (int n = 0; n < 3; ++n)
        for (int t = 0; t < 5; ++t)
            for (int c = 0; c < 8; ++c) x2.at(n, t, c) = 3.7 * x.at(n, t, c) + 0.9;
    // exact only up to the normalization epsilon
    Var<double> mod2 = pae::adaln(g.constant(x2), g.constant(sc), g.constant(sh));
    for (int64_t i = 0; i < mod.val().numel(); ++i)
        CHECK(mod2.val()[i] == doctest::Approx(mod.val()[i]).epsilon(1e-4));
}

TEST_CASE("adaln gradient check") {
    RandomStream rs(5, "adaln-grad");
    nn::ParamStore<double> ps;
    Tensor<double> xv({2, 4, 6}), scv({2, 6}), shv({2, 6});
    rs.fill_normal(xv);
    rs.fill_normal(scv, 0.0, 0.4);
    rs.fill_normal(shv, 0.0, 0.4);
    auto* x = ps.add("x", xv);
    auto* sc = ps.add("sc", scv);
    auto* sh = ps.add("sh", shv);
    Tensor<double> co({2, 4, 6});
    rs.fill_normal(co);

    auto forward = [&]() {
        Graph<double> g(false);
        Var<double> y = pae::adaln(g.constant(x->value), g.constant(sc->value),
                                   g.constant(sh->value));
        double acc = 0;
        for (int64_t i = 0; i < y.val().numel(); ++i) acc += y.val()[i] * co[i];
        return acc;
    };
    auto grads = [&]() {
        Graph<double> g;
        Var<double> y = pae::adaln(g.leaf(x), g.leaf(sc), g.leaf(sh));
        g.backward(nn::sum_all(nn::mul(y, g.constant(co))));
    };
    auto res = gradcheck::run(ps, forward, grads, 60, 55);
    INFO("worst: ", res.worst);
    CHECK(res.max_rel < 1e-3);
}

TEST_CASE("prompt attention: zero condition reduces to self-attention") {
    PDiTConfig cfg = tiny_config();
    RandomStream rs(6, "pattn");
    nn::ParamStore<double> ps;
    PDiTBlock<double> blk(ps, "blk", cfg, rs);
    // freshly built blocks start at identity (zero gates); randomize all
    // params so the comparison is non-vacuous, then remove the cond bias
    // paths: with zero condition input the block must act as self-attention
    randomize_params(ps, 606, 0.3);
    std::fill(blk.cond_mod.w->value.data.begin(), blk.cond_mod.w->value.data.end(), 0.0);
    std::fill(blk.cond_mod.b->value.data.begin(), blk.cond_mod.b->value.data.end(), 0.0);
    std::fill(blk.cond_kqv.b->value.data.begin(), blk.cond_kqv.b->value.data.end(), 0.0);

    const int n = 2, t = 9, d = cfg.hidden;
    Tensor<double> xv({n, t, d});
    rs.fill_normal(xv);
    Tensor<double> temb({n, d});
    rs.fill_normal(temb, 0.0, 0.5);
    Tensor<double> zero_cond({n, t, 6 * cfg.cond_embed}, 0.0);

    Graph<double> g;
    AttnProbe<double> probe;
    Var<double> out =
        blk.forward(g, g.constant(xv), g.constant(zero_cond), g.constant(temb), nullptr, &probe);
    REQUIRE(out.shape() == std::vector<int>{n, t, d});

    // independent plain self-attention recomposition from the block params
    {
        using namespace nn;
        Graph<double> g2;
        Var<double> m = silu(g2.constant(temb));
        Var<double> mods = add_bias_lastdim(
            matmul(reshape(m, {n, d}), g2.constant(blk.mod.w->value)),
            g2.constant(blk.mod.b->value));
        Var<double> sh1 = slice_lastdim(mods, 0, d), sc1 = slice_lastdim(mods, d, 2 * d);
        Var<double> g1 = slice_lastdim(mods, 2 * d, 3 * d);
        Var<double> x_n = pae::adaln(g2.constant(xv), sc1, sh1);
        Var<double> qkv = add_bias_lastdim(
            matmul(reshape(x_n, {n * t, d}), g2.constant(blk.qkv.w->value)),
            g2.constant(blk.qkv.b->value));
        qkv = reshape(qkv, {n, t, 3 * d});
        Var<double> q = pixnorm_lastdim(slice_lastdim(qkv, 0, d));
        Var<double> k = pixnorm_lastdim(slice_lastdim(qkv, d, 2 * d));
        Var<double> v = slice_lastdim(qkv, 2 * d, 3 * d);
        Var<double> qh = l2norm_lastdim(split_heads(q, cfg.heads));
        Var<double> kh = l2norm_lastdim(split_heads(k, cfg.heads));
        double temp = std::exp(std::clamp(blk.log_temp->value[0], 0.0, kMaxLogTemperature));
        Var<double> attn = softmax_lastdim(scale(bmm_nt(qh, kh), temp));
        Var<double> o = merge_heads(bmm(attn, split_heads(v, cfg.heads)), cfg.heads);
        o = add_bias_lastdim(matmul(reshape(o, {n * t, d}), g2.constant(blk.proj.w->value)),
                             g2.constant(blk.proj.b->value));
        o = reshape(o, {n, t, d});
        Var<double> x1 = add(g2.constant(xv), mul_channels(o, g1));
        Var<double> sh2 = slice_lastdim(mods, 3 * d, 4 * d), sc2 = slice_lastdim(mods, 4 * d, 5 * d);
        Var<double> g2v = slice_lastdim(mods, 5 * d, 6 * d);
        Var<double> h = pae::adaln(x1, sc2, sh2);
        Var<double> f1 = add_bias_lastdim(
            matmul(reshape(h, {n * t, d}), g2.constant(blk.fc1.w->value)),
            g2.constant(blk.fc1.b->value));
        Var<double> f2 = add_bias_lastdim(matmul(gelu(f1), g2.constant(blk.fc2.w->value)),
                                          g2.constant(blk.fc2.b->value));
        Var<double> ref = add(x1, mul_channels(reshape(f2, {n, t, d}), g2v));
        for (int64_t i = 0; i < out.val().numel(); ++i)
            CHECK(out.val()[i] == doctest::Approx(ref.val()[i]).epsilon(1e-9));
    }

    // attention rows are a distribution; logits bounded by the temperature
    REQUIRE(probe.attn.shape == std::vector<int>{n * cfg.heads, t, t});
    for (int b = 0; b < n * cfg.heads; ++b)
        for (int i = 0; i < t; ++i) {
            double sum = 0;
            for (int j = 0; j < t; ++j) sum += probe.attn.at(b, i, j);
            CHECK(sum == doctest::Approx(1.0).epsilon(1e-5));
        }
    for (int64_t i = 0; i < probe.logits.numel(); ++i)
        CHECK(std::abs(probe.logits[i]) <= probe.temperature + 1e-9);
    CHECK(probe.temperature ==
          doctest::Approx(std::exp(std::clamp(blk.log_temp->value[0], 0.0, kMaxLogTemperature)))
              .epsilon(1e-12));
    CHECK(probe.temperature <= 100.0 + 1e-9);

    // nonzero condition changes the output
    Graph<double> g4;
    Tensor<double> live_cond({n, t, 6 * cfg.cond_embed});
    rs.fill_normal(live_cond);
    Var<double> out2 =
        blk.forward(g4, g4.constant(xv), g4.constant(live_cond), g4.constant(temb), nullptr);
    double diff = 0;
    for (int64_t i = 0; i < out.val().numel(); ++i)
        diff += std::abs(out2.val()[i] - out.val()[i]);
    CHECK(diff > 1e-6);
}

TEST_CASE("prompt attention gradient check") {
    PDiTConfig cfg = tiny_config();
    RandomStream rs(7, "pattn-grad");
    nn::ParamStore<double> ps;
    PDiTBlock<double> blk(ps, "blk", cfg, rs);
    randomize_params(ps, 1000, 0.2);

    const int n = 1, t = 4, d = cfg.hidden;
    Tensor<double> xv({n, t, d}), temb({n, d}), cond({n, t, 6 * cfg.cond_embed});
    rs.fill_normal(xv);
    rs.fill_normal(temb, 0.0, 0.5);
    rs.fill_normal(cond, 0.0, 0.5);
    Tensor<double> co({n, t, d});
    rs.fill_normal(co);

    auto forward = [&]() {
        Graph<double> g(false);
        Var<double> y = blk.forward(g, g.constant(xv), g.constant(cond), g.constant(temb), nullptr);
        double acc = 0;
        for (int64_t i = 0; i < y.val().numel(); ++i) acc += y.val()[i] * co[i];
        return acc;
    };
    auto grads = [&]() {
        Graph<double> g;
        Var<double> y = blk.forward(g, g.constant(xv), g.constant(cond), g.constant(temb), nullptr);
        g.backward(nn::sum_all(nn::mul(y, g.constant(co))));
    };
    auto res = gradcheck::run(ps, forward, grads, 70, 77);
    INFO("worst: ", res.worst);
    CHECK(res.max_rel < 1e-3);
    CHECK(res.checked >= 50);
}

TEST_CASE("consistency boundary: sigma_t = sigma_0 returns the input") {
    PDiTConfig cfg = tiny_config();
    for (uint64_t init = 0; init < 10; ++init) {
        PDiTModel<float> model(cfg, 100 + init);
        randomize_params(model.params, 500 + init, 0.3f);

        Graph<float> g(false);
        auto cond = make_cond<float>(g, cfg, 2, 8, 8, 900 + init);
        auto ce = model.cond_embedder.forward(g, g.constant(cond.clean_ds), cond.prompts, 8, 8);
        RandomStream rs(init, "boundary-z");
        Tensor<float> z({2, 8, 8, cfg.c_z});
        rs.fill_normal(z);
        const double s0 = 0.002;
        Var<float> out = model.consistency(g, g.constant(z), {s0, s0}, s0, 0.5, ce.tokens,
                                           ce.pooled, nullptr);
        REQUIRE(out.shape() == z.shape);
        float max_dev = 0.0f;
        for (int64_t i = 0; i < z.numel(); ++i)
            max_dev = std::max(max_dev, std::abs(out.val()[i] - z[i]));
        CHECK(max_dev < 1e-5f);
    }
}

TEST_CASE("consistency: shape, determinism, dropout effect, token patch 2") {
    PDiTConfig cfg = tiny_config();
    cfg.token_patch = 2;
    PDiTModel<float> model(cfg, 3);
    randomize_params(model.params, 4, 0.2f);

    Graph<float> g(false);
    auto cond = make_cond<float>(g, cfg, 1, 4, 4, 5);  // latent 8x8, token grid 4x4
    auto ce = model.cond_embedder.forward(g, g.constant(cond.clean_ds), cond.prompts, 4, 4);
    RandomStream rs(6, "tz");
    Tensor<float> z({1, 8, 8, cfg.c_z});
    rs.fill_normal(z);
    Var<float> a = model.consistency(g, g.constant(z), {1.3}, 0.002, 0.5, ce.tokens, ce.pooled,
                                     nullptr);
    CHECK(a.shape() == z.shape);

    Graph<float> g2(false);
    auto cond2 = make_cond<float>(g2, cfg, 1, 4, 4, 5);
    auto ce2 = model.cond_embedder.forward(g2, g2.constant(cond2.clean_ds), cond2.prompts, 4, 4);
    Var<float> b = model.consistency(g2, g2.constant(z), {1.3}, 0.002, 0.5, ce2.tokens,
                                     ce2.pooled, nullptr);
    for (int64_t i = 0; i < a.val().numel(); ++i) CHECK(a.val()[i] == b.val()[i]);

    // dropout changes training-mode outputs
    Graph<float> g3(false);
    auto cond3 = make_cond<float>(g3, cfg, 1, 4, 4, 5);
    auto ce3 = model.cond_embedder.forward(g3, g3.constant(cond3.clean_ds), cond3.prompts, 4, 4);
    RandomStream drop(9, "drop");
    Var<float> c = model.consistency(g3, g3.constant(z), {1.3}, 0.002, 0.5, ce3.tokens,
                                     ce3.pooled, &drop);
    double diff = 0;
    for (int64_t i = 0; i < a.val().numel(); ++i) diff += std::abs(a.val()[i] - c.val()[i]);
    CHECK(diff > 0.0);
}

TEST_CASE("space/depth round trip is the identity") {
    RandomStream rs(10, "sd");
    Tensor<double> x({2, 6, 6, 3});
    rs.fill_normal(x);
    Graph<double> g;
    Var<double> rt = nn::depth_to_space(nn::space_to_depth(g.constant(x), 2), 2);
    for (int64_t i = 0; i < x.numel(); ++i) CHECK(rt.val()[i] == x[i]);

    Tensor<double> co({2, 6, 6, 3});
    rs.fill_normal(co);
    nn::ParamStore<double> ps;
    auto* p = ps.add("x", x);
    auto forward = [&]() {
        Graph<double> gg(false);
        Var<double> y = nn::depth_to_space(nn::space_to_depth(gg.constant(p->value), 3), 3);
        double acc = 0;
        for (int64_t i = 0; i < y.val().numel(); ++i) acc += y.val()[i] * co[i];
        return acc;
    };
    auto grads = [&]() {
        Graph<double> gg;
        Var<double> y = nn::depth_to_space(nn::space_to_depth(gg.leaf(p), 3), 3);
        gg.backward(nn::sum_all(nn::mul(y, gg.constant(co))));
    };
    auto res = gradcheck::run(ps, forward, grads, 40, 11);
    CHECK(res.max_rel < 1e-6);
}

TEST_CASE("full consistency function gradient check") {
    PDiTConfig cfg = tiny_config();
    PDiTModel<double> model(cfg, 12);
    randomize_params(model.params, 13, 0.2);

    RandomStream rs(14, "cgrad");
    Tensor<double> z({1, 8, 8, cfg.c_z});
    rs.fill_normal(z);
    Tensor<double> co({1, 8, 8, cfg.c_z});
    rs.fill_normal(co);

    auto build = [&](Graph<double>& g) {
        auto cond = make_cond<double>(g, cfg, 1, 8, 8, 15);
        auto ce = model.cond_embedder.forward(g, g.constant(cond.clean_ds), cond.prompts, 8, 8);
        return model.consistency(g, g.constant(z), {1.7}, 0.002, 0.5, ce.tokens, ce.pooled,
                                 nullptr);
    };
    auto forward = [&]() {
        Graph<double> g(false);
        Var<double> y = build(g);
        double acc = 0;
        for (int64_t i = 0; i < y.val().numel(); ++i) acc += y.val()[i] * co[i];
        return acc;
    };
    auto grads = [&]() {
        Graph<double> g;
        g.backward(nn::sum_all(nn::mul(build(g), g.constant(co))));
    };
    auto res = gradcheck::run(model.params, forward, grads, 60, 16);
    INFO("worst: ", res.worst);
    CHECK(res.max_rel < 1e-3);
    CHECK(res.checked >= 50);
}
