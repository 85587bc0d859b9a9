#include "pngen/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <json.hpp>
#include <map>

#include "pngen/errors.hpp"

namespace pngen::data {

namespace fs = std::filesystem;

PairedDataset PairedDataset::load(const fs::path& root, int patch, uint64_t seed) {
    check_config(fs::is_directory(root / "clean") && fs::is_directory(root / "noisy"),
                 "dataset root must contain clean/ and noisy/: " + root.string());
    return load_dirs(root / "clean", root / "noisy", patch, seed);
}

PairedDataset PairedDataset::load_dirs(const fs::path& clean_dir, const fs::path& noisy_dir,
                                       int patch, uint64_t seed) {
    check_config(fs::is_directory(clean_dir), "not a directory: " + clean_dir.string());
    check_config(fs::is_directory(noisy_dir), "not a directory: " + noisy_dir.string());

    std::map<std::string, fs::path> clean_files, noisy_files;
    for (const auto& e : fs::directory_iterator(clean_dir))
        if (e.path().extension() == ".png") clean_files[e.path().stem().string()] = e.path();
    for (const auto& e : fs::directory_iterator(noisy_dir))
        if (e.path().extension() == ".png") noisy_files[e.path().stem().string()] = e.path();

    check_config(!clean_files.empty(), "empty dataset: no clean PNGs under " + clean_dir.string());
    for (const auto& [id, p] : clean_files)
        check_config(noisy_files.count(id) != 0, "unmatched clean file (no noisy twin): " + p.string());
    for (const auto& [id, p] : noisy_files)
        check_config(clean_files.count(id) != 0, "unmatched noisy file (no clean twin): " + p.string());

    PairedDataset ds;
    ds.patch_ = patch;
    ds.seed_ = seed;
    for (const auto& [id, cp] : clean_files) {
        PairEntry e{id, cp, noisy_files[id]};
        Image c = read_png(e.clean_path);
        Image n = read_png(e.noisy_path);
        check_config(c.shape == n.shape, "pair shape mismatch for id '" + id + "': " +
                                             shape_str(c.shape) + " vs " + shape_str(n.shape));
        check_config(patch <= c.dim(0) && patch <= c.dim(1),
                     "patch size exceeds image dims for id '" + id + "'");
        ds.entries_.push_back(std::move(e));
        ds.clean_.push_back(std::move(c));
        ds.noisy_.push_back(std::move(n));
    }
    return ds;
}

Batch PairedDataset::sample_batch(int batch, int64_t iteration, const char* purpose) const {
    check_contract(batch >= 1, "batch must be >= 1");
    check_contract(!entries_.empty(), "sampling from an empty dataset");
    RandomStream rs(seed_, purpose, static_cast<uint64_t>(iteration));
    Batch out;
    out.clean = Tensor<float>({batch, patch_, patch_, 3});
    out.noisy = Tensor<float>({batch, patch_, patch_, 3});
    for (int b = 0; b < batch; ++b) {
        size_t idx = static_cast<size_t>(rs.uniform_int(entries_.size()));
        const Image& c = clean_[idx];
        const Image& n = noisy_[idx];
        int oy = static_cast<int>(rs.uniform_int(static_cast<uint64_t>(c.dim(0) - patch_ + 1)));
        int ox = static_cast<int>(rs.uniform_int(static_cast<uint64_t>(c.dim(1) - patch_ + 1)));
        out.indices.push_back(static_cast<int>(idx));
        out.origins.emplace_back(oy, ox);
        for (int y = 0; y < patch_; ++y)
            for (int x = 0; x < patch_; ++x)
                for (int ch = 0; ch < 3; ++ch) {
                    out.clean.at(b, y, x, ch) = c.at(oy + y, ox + x, ch);
                    out.noisy.at(b, y, x, ch) = n.at(oy + y, ox + x, ch);
                }
    }
    return out;
}

ToySpec ToySpec::parse(const std::string& text) {
    ToySpec spec;
    size_t colon = text.find(':');
    std::string name = colon == std::string::npos ? text : text.substr(0, colon);
    std::string args = colon == std::string::npos ? "" : text.substr(colon + 1);
    std::vector<std::string> parts;
    {
        std::string cur;
        for (char ch : args) {
            if (ch == ',') {
                parts.push_back(cur);
                cur.clear();
            } else {
                cur += ch;
            }
        }
        if (!cur.empty()) parts.push_back(cur);
    }
    auto num = [&](size_t i, double fallback) {
        if (i >= parts.size() || parts[i].empty()) return fallback;
        try {
            return std::stod(parts[i]);
        } catch (...) {
            throw ConfigError("bad toy noise parameter: " + parts[i]);
        }
    };
    if (name == "gaussian") {
        spec.model = Model::kGaussian;
        spec.sigma = num(0, 0.05);
        check_config(spec.sigma > 0.0, "gaussian sigma must be positive");
    } else if (name == "heteroscedastic") {
        spec.model = Model::kHeteroscedastic;
        spec.a = num(0, 0.01);
        spec.b = num(1, 0.0004);
        check_config(spec.a >= 0.0 && spec.b > 0.0, "heteroscedastic needs a >= 0, b > 0");
    } else if (name == "correlated") {
        spec.model = Model::kCorrelated;
        spec.sigma = num(0, 0.05);
        check_config(spec.sigma > 0.0, "correlated sigma must be positive");
        std::string kname = parts.size() > 1 ? parts[1] : "binomial3";
        if (kname == "binomial3")
            spec.kernel_size = 3;
        else if (kname == "binomial5")
            spec.kernel_size = 5;
        else
            throw ConfigError("unknown correlation kernel: " + kname);
    } else {
        throw ConfigError("unknown toy noise model: " + name);
    }
    if (spec.model == Model::kCorrelated) {
        // separable binomial kernel, normalized to sum 1
        std::vector<double> row;
        if (spec.kernel_size == 3)
            row = {1, 2, 1};
        else
            row = {1, 4, 6, 4, 1};
        double sum = 0;
        for (double v : row) sum += v;
        spec.kernel.resize(static_cast<size_t>(spec.kernel_size) * spec.kernel_size);
        for (int i = 0; i < spec.kernel_size; ++i)
            for (int j = 0; j < spec.kernel_size; ++j)
                spec.kernel[static_cast<size_t>(i) * spec.kernel_size + j] =
                    row[static_cast<size_t>(i)] * row[static_cast<size_t>(j)] / (sum * sum);
    }
    return spec;
}

std::string ToySpec::describe() const {
    switch (model) {
        case Model::kGaussian:
            return "gaussian:" + std::to_string(sigma);
        case Model::kHeteroscedastic:
            return "heteroscedastic:" + std::to_string(a) + "," + std::to_string(b);
        case Model::kCorrelated:
            return "correlated:" + std::to_string(sigma) + ",binomial" +
                   std::to_string(kernel_size);
    }
    return "?";
}

namespace {

inline double smoothstep(double e0, double e1, double x) {
    double t = std::clamp((x - e0) / (e1 - e0), 0.0, 1.0);
    return t * t * (3.0 - 2.0 * t);
}

Image synth_clean(int size, RandomStream& rs) {
    Image img({size, size, 3});
    // per-channel affine gradient base
    double base[3], gx[3], gy[3];
    for (int c = 0; c < 3; ++c) {
        base[c] = rs.uniform(0.3, 0.7);
        gx[c] = rs.uniform(-0.3, 0.3);
        gy[c] = rs.uniform(-0.3, 0.3);
    }
    // two shared low-frequency sinusoids
    double fx1 = rs.uniform(0.5, 2.0), fy1 = rs.uniform(0.5, 2.0), ph1 = rs.uniform(0.0, 6.28);
    double fx2 = rs.uniform(1.0, 3.0), fy2 = rs.uniform(1.0, 3.0), ph2 = rs.uniform(0.0, 6.28);
    double amp1[3], amp2[3];
    for (int c = 0; c < 3; ++c) {
        amp1[c] = rs.uniform(0.02, 0.12);
        amp2[c] = rs.uniform(0.01, 0.08);
    }
    for (int y = 0; y < size; ++y)
        for (int x = 0; x < size; ++x) {
            double u = static_cast<double>(x) / size, v = static_cast<double>(y) / size;
            double s1 = std::sin(6.28318 * (fx1 * u + fy1 * v) + ph1);
            double s2 = std::sin(6.28318 * (fx2 * u - fy2 * v) + ph2);
            for (int c = 0; c < 3; ++c)
                img.at(y, x, c) =
                    static_cast<float>(base[c] + gx[c] * (u - 0.5) + gy[c] * (v - 0.5) +
                                       amp1[c] * s1 + amp2[c] * s2);
        }
    // soft rectangles and ellipses
    int n_shapes = 3 + static_cast<int>(rs.uniform_int(3));
    for (int s = 0; s < n_shapes; ++s) {
        bool ellipse = rs.uniform() < 0.5;
        double cx = rs.uniform(0.15, 0.85) * size, cy = rs.uniform(0.15, 0.85) * size;
        double rx = rs.uniform(0.08, 0.3) * size, ry = rs.uniform(0.08, 0.3) * size;
        double edge = rs.uniform(1.0, 4.0);
        double delta[3];
        for (int c = 0; c < 3; ++c) delta[c] = rs.uniform(-0.25, 0.25);
        for (int y = 0; y < size; ++y)
            for (int x = 0; x < size; ++x) {
                double w;
                if (ellipse) {
                    double d = std::sqrt((x - cx) * (x - cx) / (rx * rx) +
                                         (y - cy) * (y - cy) / (ry * ry));
                    w = 1.0 - smoothstep(1.0 - edge / rx, 1.0 + edge / rx, d);
                } else {
                    double wx = 1.0 - smoothstep(rx - edge, rx + edge, std::abs(x - cx));
                    double wy = 1.0 - smoothstep(ry - edge, ry + edge, std::abs(y - cy));
                    w = wx * wy;
                }
                if (w <= 0.0) continue;
                for (int c = 0; c < 3; ++c)
                    img.at(y, x, c) += static_cast<float>(w * delta[c]);
            }
    }
    // mild texture: bilinearly upsampled coarse random grid
    const int grid = 8;
    std::vector<double> coarse(static_cast<size_t>(grid) * grid * 3);
    for (auto& vv : coarse) vv = rs.uniform(-1.0, 1.0);
    for (int y = 0; y < size; ++y)
        for (int x = 0; x < size; ++x) {
            double gy2 = (y + 0.5) * grid / size - 0.5, gx2 = (x + 0.5) * grid / size - 0.5;
            int y0 = std::clamp(static_cast<int>(std::floor(gy2)), 0, grid - 1);
            int x0 = std::clamp(static_cast<int>(std::floor(gx2)), 0, grid - 1);
            int y1 = std::min(y0 + 1, grid - 1), x1 = std::min(x0 + 1, grid - 1);
            double fy = std::clamp(gy2 - y0, 0.0, 1.0), fx = std::clamp(gx2 - x0, 0.0, 1.0);
            for (int c = 0; c < 3; ++c) {
                double v00 = coarse[(static_cast<size_t>(y0) * grid + x0) * 3 + c];
                double v01 = coarse[(static_cast<size_t>(y0) * grid + x1) * 3 + c];
                double v10 = coarse[(static_cast<size_t>(y1) * grid + x0) * 3 + c];
                double v11 = coarse[(static_cast<size_t>(y1) * grid + x1) * 3 + c];
                double t = (1 - fy) * ((1 - fx) * v00 + fx * v01) + fy * ((1 - fx) * v10 + fx * v11);
                img.at(y, x, c) += static_cast<float>(0.04 * t);
            }
        }
    // keep headroom so added noise rarely clips
    for (auto& v : img.data) v = std::clamp(v, 0.15f, 0.85f);
    return img;
}

inline int reflect_idx(int i, int n) {
    if (i < 0) i = -i;
    if (i >= n) i = 2 * n - 2 - i;
    return i;
}

Tensor<float> synth_noise(const Image& clean, const ToySpec& spec, RandomStream& rs) {
    const int h = clean.dim(0), w = clean.dim(1);
    Tensor<float> noise({h, w, 3});
    switch (spec.model) {
        case ToySpec::Model::kGaussian:
            for (auto& v : noise.data) v = static_cast<float>(spec.sigma * rs.normal());
            break;
        case ToySpec::Model::kHeteroscedastic:
            for (int y = 0; y < h; ++y)
                for (int x = 0; x < w; ++x)
                    for (int c = 0; c < 3; ++c) {
                        double var = spec.a * clean.at(y, x, c) + spec.b;
                        noise.at(y, x, c) = static_cast<float>(std::sqrt(var) * rs.normal());
                    }
            break;
        case ToySpec::Model::kCorrelated: {
            // white noise filtered with the kernel, rescaled to std = sigma
            Tensor<float> white({h, w, 3});
            rs.fill_normal(white);
            double knorm2 = 0.0;
            for (double v : spec.kernel) knorm2 += v * v;
            double gain = spec.sigma / std::sqrt(knorm2);
            int half = spec.kernel_size / 2;
            for (int y = 0; y < h; ++y)
                for (int x = 0; x < w; ++x)
                    for (int c = 0; c < 3; ++c) {
                        double acc = 0.0;
                        for (int i = 0; i < spec.kernel_size; ++i)
                            for (int j = 0; j < spec.kernel_size; ++j)
                                acc += spec.kernel[static_cast<size_t>(i) * spec.kernel_size + j] *
                                       white.at(reflect_idx(y + i - half, h),
                                                reflect_idx(x + j - half, w), c);
                        noise.at(y, x, c) = static_cast<float>(gain * acc);
                    }
            break;
        }
    }
    return noise;
}

}  // namespace

void make_toy_dataset(int n_images, int size, const ToySpec& spec, uint64_t seed,
                      const fs::path& out) {
    check_config(n_images >= 1 && size >= 16, "toy dataset needs n >= 1 and size >= 16");
    fs::create_directories(out / "clean");
    fs::create_directories(out / "noisy");
    for (int i = 0; i < n_images; ++i) {
        RandomStream rc(seed, "toy-clean", static_cast<uint64_t>(i));
        RandomStream rn(seed, "toy-noise", static_cast<uint64_t>(i));
        Image clean = synth_clean(size, rc);
        Tensor<float> noise = synth_noise(clean, spec, rn);
        Image noisy = clean;
        for (int64_t j = 0; j < noisy.numel(); ++j) noisy[j] += noise[j];
        clamp01(noisy);
        char name[32];
        std::snprintf(name, sizeof(name), "img%03d.png", i);
        write_png(out / "clean" / name, clean);
        write_png(out / "noisy" / name, noisy);
    }
    nlohmann::json meta;
    meta["model"] = spec.describe();
    meta["sigma"] = spec.sigma;
    meta["a"] = spec.a;
    meta["b"] = spec.b;
    meta["kernel"] = spec.kernel;
    meta["kernel_size"] = spec.kernel_size;
    meta["n_images"] = n_images;
    meta["size"] = size;
    meta["seed"] = seed;
    std::ofstream mf(out / "toy_meta.json");
    if (!mf) throw IoError("cannot write toy_meta.json");
    mf << meta.dump(2) << "\n";
}

void apply_dihedral(Tensor<float>& img, int k) {
    check_contract(k >= 0 && k < 8, "dihedral index in [0,8)");
    check_contract(img.rank() == 3 && img.dim(0) == img.dim(1), "dihedral needs square (H,W,C)");
    if (k == 0) return;
    const int n = img.dim(0), c = img.dim(2);
    Tensor<float> out(img.shape);
    bool flip = k >= 4;
    int rot = k % 4;
    for (int y = 0; y < n; ++y)
        for (int x = 0; x < n; ++x) {
            int sy = y, sx = flip ? n - 1 - x : x;
            // rotate by 90 degrees `rot` times
            for (int r = 0; r < rot; ++r) {
                int ty = n - 1 - sx;
                sx = sy;
                sy = ty;
            }
            for (int ch = 0; ch < c; ++ch) out.at(y, x, ch) = img.at(sy, sx, ch);
        }
    img = std::move(out);
}

}  // namespace pngen::data
