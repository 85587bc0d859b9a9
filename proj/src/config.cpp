#include "pngen/config.hpp"

#include <algorithm>
#include <fstream>
#include <sstream>

#include "pngen/errors.hpp"
#include "pngen/rng.hpp"

namespace pngen {

namespace {

std::string trim(const std::string& s) {
    size_t a = s.find_first_not_of(" \t\r\n");
    if (a == std::string::npos) return "";
    size_t b = s.find_last_not_of(" \t\r\n");
    return s.substr(a, b - a + 1);
}

}  // namespace

const std::set<std::string>& RunConfig::known_keys() {
    static const std::set<std::string> keys = {
        "run.seed", "run.out",
        "data.root", "data.patch",
        "pae.trunk", "pae.c_global", "pae.c_local", "pae.c_z", "pae.rho", "pae.lambda_z",
        "pae.lpb_downsample", "pae.per_channel_corr", "pae.lr", "pae.lr_min", "pae.iterations",
        "pae.batch", "pae.checkpoint_every", "pae.log_every", "pae.target_psnr",
        "pae.eval_every",
        "schedule.sigma_min", "schedule.sigma_max", "schedule.tau", "schedule.sigma_data",
        "schedule.s0", "schedule.s1", "schedule.p_mean", "schedule.p_std",
        "schedule.curriculum_floor",
        "pdit.blocks", "pdit.hidden", "pdit.heads", "pdit.token_patch", "pdit.dropout",
        "pdit.cond_noise_std", "pdit.cond_downsample", "pdit.cond_embed", "pdit.mlp_ratio",
        "cmtrain.lr", "cmtrain.iterations", "cmtrain.batch", "cmtrain.ema_decay",
        "cmtrain.grad_clip", "cmtrain.stats_batches", "cmtrain.checkpoint_every",
        "cmtrain.log_every",
        "denoise.depth", "denoise.width", "denoise.patch", "denoise.batch", "denoise.iterations",
        "denoise.lr", "denoise.mix_ratio", "denoise.log_every",
    };
    return keys;
}

RunConfig RunConfig::from_file(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open config " + path.string());
    std::stringstream buf;
    buf << in.rdbuf();
    return from_string(buf.str());
}

RunConfig RunConfig::from_string(const std::string& text) {
    RunConfig cfg;
    std::istringstream in(text);
    std::string line, section;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        size_t hash = line.find('#');
        if (hash != std::string::npos) line = line.substr(0, hash);
        line = trim(line);
        if (line.empty()) continue;
        if (line.front() == '[') {
            check_config(line.back() == ']', "config line " + std::to_string(lineno) +
                                                 ": unterminated section header");
            section = trim(line.substr(1, line.size() - 2));
            check_config(!section.empty(), "config line " + std::to_string(lineno) +
                                               ": empty section name");
            continue;
        }
        size_t eq = line.find('=');
        check_config(eq != std::string::npos,
                     "config line " + std::to_string(lineno) + ": expected key = value");
        std::string key = trim(line.substr(0, eq));
        std::string value = trim(line.substr(eq + 1));
        check_config(!key.empty(), "config line " + std::to_string(lineno) + ": empty key");
        check_config(!section.empty(),
                     "config line " + std::to_string(lineno) + ": key outside any section");
        cfg.set(section + "." + key, value);
    }
    return cfg;
}

void RunConfig::set(const std::string& key, const std::string& value) {
    check_config(known_keys().count(key) != 0, "unknown config key: " + key);
    kv_[key] = value;
}

std::string RunConfig::get_str(const std::string& key, const std::string& fallback) const {
    auto it = kv_.find(key);
    return it == kv_.end() ? fallback : it->second;
}

int64_t RunConfig::get_int(const std::string& key, int64_t fallback) const {
    auto it = kv_.find(key);
    if (it == kv_.end()) return fallback;
    try {
        size_t pos = 0;
        int64_t v = std::stoll(it->second, &pos);
        check_config(pos == it->second.size(), "");
        return v;
    } catch (...) {
        throw ConfigError("config key " + key + " is not an integer: " + it->second);
    }
}

double RunConfig::get_real(const std::string& key, double fallback) const {
    auto it = kv_.find(key);
    if (it == kv_.end()) return fallback;
    try {
        size_t pos = 0;
        double v = std::stod(it->second, &pos);
        check_config(pos == it->second.size(), "");
        return v;
    } catch (...) {
        throw ConfigError("config key " + key + " is not a number: " + it->second);
    }
}

bool RunConfig::get_bool(const std::string& key, bool fallback) const {
    auto it = kv_.find(key);
    if (it == kv_.end()) return fallback;
    if (it->second == "true" || it->second == "1") return true;
    if (it->second == "false" || it->second == "0") return false;
    throw ConfigError("config key " + key + " is not a boolean: " + it->second);
}

std::vector<int> RunConfig::get_int_list(const std::string& key, std::vector<int> fallback) const {
    auto it = kv_.find(key);
    if (it == kv_.end()) return fallback;
    std::vector<int> out;
    std::istringstream ss(it->second);
    std::string item;
    while (std::getline(ss, item, ',')) {
        item = trim(item);
        try {
            out.push_back(std::stoi(item));
        } catch (...) {
            throw ConfigError("config key " + key + " is not an integer list: " + it->second);
        }
    }
    check_config(!out.empty(), "config key " + key + " is an empty list");
    return out;
}

std::string RunConfig::canonical() const {
    // std::map iterates in sorted key order already.
    std::string cur_section;
    std::string out;
    for (const auto& [key, value] : kv_) {
        size_t dot = key.find('.');
        std::string section = key.substr(0, dot);
        if (section != cur_section) {
            if (!out.empty()) out += "\n";
            out += "[" + section + "]\n";
            cur_section = section;
        }
        out += key.substr(dot + 1) + " = " + value + "\n";
    }
    return out;
}

std::string RunConfig::fingerprint() const {
    uint64_t h = fnv1a64(canonical());
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
    return std::string(buf);
}

void RunConfig::save(const std::filesystem::path& path) const {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path);
    if (!out) throw IoError("cannot write config " + path.string());
    out << canonical();
}

}  // namespace pngen
