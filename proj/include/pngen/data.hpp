#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "pngen/image.hpp"
#include "pngen/rng.hpp"

namespace pngen::data {

struct PairEntry {
    std::string id;  // shared file stem
    std::filesystem::path clean_path;
    std::filesystem::path noisy_path;
};

struct Batch {
    Tensor<float> clean;  // (B, p, p, 3)
    Tensor<float> noisy;
    std::vector<int> indices;                   // source image per sample
    std::vector<std::pair<int, int>> origins;   // crop origin per sample
};

// Paired dataset rooted at <dir>/clean and <dir>/noisy with matching
// filenames. Pairing is deterministic (sorted by id); images are loaded
// eagerly and validated for shape equality.
class PairedDataset {
public:
    static PairedDataset load(const std::filesystem::path& root, int patch, uint64_t seed);
    static PairedDataset load_dirs(const std::filesystem::path& clean_dir,
                                   const std::filesystem::path& noisy_dir, int patch,
                                   uint64_t seed);

    size_t size() const { return entries_.size(); }
    const PairEntry& entry(size_t i) const { return entries_[i]; }
    const Image& clean(size_t i) const { return clean_[i]; }
    const Image& noisy(size_t i) const { return noisy_[i]; }
    int patch() const { return patch_; }
    uint64_t seed() const { return seed_; }

    // Counter-based sampling: the same (seed, purpose, iteration) always
    // yields the same batch, regardless of call order.
    Batch sample_batch(int batch, int64_t iteration, const char* purpose = "patch") const;

private:
    std::vector<PairEntry> entries_;
    std::vector<Image> clean_, noisy_;
    int patch_ = 0;
    uint64_t seed_ = 0;
};

// Toy-data noise models.
struct ToySpec {
    enum class Model { kGaussian, kHeteroscedastic, kCorrelated };
    Model model = Model::kGaussian;
    double sigma = 0.05;  // gaussian / correlated amplitude
    double a = 0.01;      // heteroscedastic variance slope: var = a*x + b
    double b = 0.0004;
    int kernel_size = 3;              // correlated: binomial kernel extent
    std::vector<double> kernel;       // normalized 2-D kernel weights (row-major)

    // "gaussian:0.05" | "heteroscedastic:0.01,0.0004" |
    // "correlated:0.06" | "correlated:0.06,binomial5"
    static ToySpec parse(const std::string& text);
    std::string describe() const;
};

// Synthesizes n_images clean/noisy pairs (smooth gradients + soft shapes +
// texture; noise per spec) under <out>/clean and <out>/noisy, plus a
// toy_meta.json sidecar with the ground-truth model parameters.
void make_toy_dataset(int n_images, int size, const ToySpec& spec, uint64_t seed,
                      const std::filesystem::path& out);

// Applies one of the 8 dihedral transforms (flips/rotations) in place; k in
// [0, 8). Square images only.
void apply_dihedral(Tensor<float>& img, int k);

}  // namespace pngen::data
