#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "pngen/config.hpp"
#include "pngen/graph.hpp"
#include "pngen/tensor.hpp"

namespace pngen {

inline constexpr int kCheckpointFormatVersion = 1;

// A checkpoint is a directory with a versioned manifest.json, raw
// little-endian float blobs in params.bin (per-tensor shape/offset headers in
// the manifest), and the archived config document.
struct Checkpoint {
    std::string kind;  // "pae", "pdit", "denoiser"
    int64_t iteration = 0;
    std::string fingerprint;
    std::map<std::string, Tensor<float>> tensors;
    std::map<std::string, std::string> attrs;  // free-form string metadata
    RunConfig config;

    const Tensor<float>& tensor(const std::string& name) const;
    bool has_tensor(const std::string& name) const { return tensors.count(name) != 0; }
};

void save_checkpoint(const std::filesystem::path& dir, const std::string& kind,
                     const std::vector<std::pair<std::string, const Tensor<float>*>>& tensors,
                     const RunConfig& config, int64_t iteration,
                     const std::map<std::string, std::string>& attrs = {});

Checkpoint load_checkpoint(const std::filesystem::path& dir);

// Rejects kind/version/fingerprint mismatches unless explicitly overridden.
void require_checkpoint(const Checkpoint& ckpt, const std::string& kind,
                        const std::string& expected_fingerprint = "",
                        bool allow_mismatch = false);

// Copies tensors named `prefix + param.name` into the store; every parameter
// must be present with a matching shape.
void load_params(nn::ParamStore<float>& ps, const Checkpoint& ckpt,
                 const std::string& prefix = "");

// Gathers (prefix + name, &value) pairs for saving.
std::vector<std::pair<std::string, const Tensor<float>*>> collect_params(
    const nn::ParamStore<float>& ps, const std::string& prefix = "");

}  // namespace pngen
