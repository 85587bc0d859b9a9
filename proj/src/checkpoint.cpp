#include "pngen/checkpoint.hpp"

#include <fstream>
#include <json.hpp>

#include "pngen/errors.hpp"

namespace pngen {

using nlohmann::json;

const Tensor<float>& Checkpoint::tensor(const std::string& name) const {
    auto it = tensors.find(name);
    check_contract(it != tensors.end(), "checkpoint tensor missing: " + name);
    return it->second;
}

void save_checkpoint(const std::filesystem::path& dir, const std::string& kind,
                     const std::vector<std::pair<std::string, const Tensor<float>*>>& tensors,
                     const RunConfig& config, int64_t iteration,
                     const std::map<std::string, std::string>& attrs) {
    std::filesystem::create_directories(dir);

    json manifest;
    manifest["format_version"] = kCheckpointFormatVersion;
    manifest["kind"] = kind;
    manifest["iteration"] = iteration;
    manifest["config_fingerprint"] = config.fingerprint();
    manifest["attrs"] = attrs;

    std::ofstream blob(dir / "params.bin", std::ios::binary);
    if (!blob) throw IoError("cannot write " + (dir / "params.bin").string());
    uint64_t offset = 0;
    json tlist = json::array();
    for (const auto& [name, tensor] : tensors) {
        json entry;
        entry["name"] = name;
        entry["dtype"] = "f32";
        entry["shape"] = tensor->shape;
        entry["offset"] = offset;
        uint64_t nbytes = static_cast<uint64_t>(tensor->numel()) * 4;
        entry["nbytes"] = nbytes;
        tlist.push_back(entry);
        blob.write(reinterpret_cast<const char*>(tensor->ptr()),
                   static_cast<std::streamsize>(nbytes));
        offset += nbytes;
    }
    if (!blob) throw IoError("failed writing parameter blob");
    blob.close();
    manifest["tensors"] = tlist;

    std::ofstream mf(dir / "manifest.json");
    if (!mf) throw IoError("cannot write " + (dir / "manifest.json").string());
    mf << manifest.dump(2) << "\n";
    config.save(dir / "config.cfg");
}

Checkpoint load_checkpoint(const std::filesystem::path& dir) {
    std::ifstream mf(dir / "manifest.json");
    if (!mf) throw IoError("cannot open checkpoint manifest in " + dir.string());
    json manifest = json::parse(mf);

    Checkpoint ckpt;
    int version = manifest.at("format_version").get<int>();
    check_config(version == kCheckpointFormatVersion,
                 "checkpoint format version " + std::to_string(version) + " unsupported");
    ckpt.kind = manifest.at("kind").get<std::string>();
    ckpt.iteration = manifest.at("iteration").get<int64_t>();
    ckpt.fingerprint = manifest.at("config_fingerprint").get<std::string>();
    if (manifest.contains("attrs"))
        ckpt.attrs = manifest["attrs"].get<std::map<std::string, std::string>>();
    ckpt.config = RunConfig::from_file(dir / "config.cfg");

    std::ifstream blob(dir / "params.bin", std::ios::binary);
    if (!blob) throw IoError("cannot open " + (dir / "params.bin").string());
    for (const auto& entry : manifest.at("tensors")) {
        std::string name = entry.at("name").get<std::string>();
        check_config(entry.at("dtype").get<std::string>() == "f32",
                     "unsupported tensor dtype in checkpoint");
        std::vector<int> shape = entry.at("shape").get<std::vector<int>>();
        uint64_t offset = entry.at("offset").get<uint64_t>();
        Tensor<float> t(shape);
        blob.seekg(static_cast<std::streamoff>(offset));
        blob.read(reinterpret_cast<char*>(t.ptr()), static_cast<std::streamsize>(t.numel() * 4));
        if (!blob) throw IoError("truncated checkpoint blob reading " + name);
        ckpt.tensors.emplace(std::move(name), std::move(t));
    }
    return ckpt;
}

void require_checkpoint(const Checkpoint& ckpt, const std::string& kind,
                        const std::string& expected_fingerprint, bool allow_mismatch) {
    if (ckpt.kind != kind) {
        std::string msg = "checkpoint kind '" + ckpt.kind + "', expected '" + kind + "'";
        if (!allow_mismatch) throw ConfigError(msg);
        std::fprintf(stderr, "warning: %s (override in effect)\n", msg.c_str());
    }
    if (!expected_fingerprint.empty() && ckpt.fingerprint != expected_fingerprint) {
        std::string msg = "checkpoint fingerprint " + ckpt.fingerprint +
                          " does not match expected " + expected_fingerprint;
        if (!allow_mismatch) throw ConfigError(msg);
        std::fprintf(stderr, "warning: %s (override in effect)\n", msg.c_str());
    }
}

void load_params(nn::ParamStore<float>& ps, const Checkpoint& ckpt, const std::string& prefix) {
    for (const auto& p : ps.all()) {
        const Tensor<float>& src = ckpt.tensor(prefix + p->name);
        check_contract(src.shape == p->value.shape,
                       "checkpoint tensor shape mismatch for " + prefix + p->name);
        p->value = src;
    }
}

std::vector<std::pair<std::string, const Tensor<float>*>> collect_params(
    const nn::ParamStore<float>& ps, const std::string& prefix) {
    std::vector<std::pair<std::string, const Tensor<float>*>> out;
    for (const auto& p : ps.all()) out.emplace_back(prefix + p->name, &p->value);
    return out;
}

}  // namespace pngen
