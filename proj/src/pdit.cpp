#include "pngen/pdit.hpp"

namespace pngen::pdit {

PDiTConfig PDiTConfig::from_config(const RunConfig& cfg) {
    PDiTConfig c;
    c.blocks = static_cast<int>(cfg.get_int("pdit.blocks", c.blocks));
    c.hidden = static_cast<int>(cfg.get_int("pdit.hidden", c.hidden));
    c.heads = static_cast<int>(cfg.get_int("pdit.heads", c.heads));
    c.token_patch = static_cast<int>(cfg.get_int("pdit.token_patch", c.token_patch));
    c.dropout = cfg.get_real("pdit.dropout", c.dropout);
    c.cond_noise_std = cfg.get_real("pdit.cond_noise_std", c.cond_noise_std);
    c.cond_downsample = static_cast<int>(cfg.get_int("pdit.cond_downsample", c.cond_downsample));
    c.cond_embed = static_cast<int>(cfg.get_int("pdit.cond_embed", c.cond_embed));
    c.mlp_ratio = static_cast<int>(cfg.get_int("pdit.mlp_ratio", c.mlp_ratio));
    c.c_z = static_cast<int>(cfg.get_int("pae.c_z", c.c_z));
    c.c_local = static_cast<int>(cfg.get_int("pae.c_local", c.c_local));
    c.c_global = static_cast<int>(cfg.get_int("pae.c_global", c.c_global));
    c.validate();
    return c;
}

void PDiTConfig::write(RunConfig& cfg) const {
    cfg.set("pdit.blocks", std::to_string(blocks));
    cfg.set("pdit.hidden", std::to_string(hidden));
    cfg.set("pdit.heads", std::to_string(heads));
    cfg.set("pdit.token_patch", std::to_string(token_patch));
    cfg.set("pdit.dropout", std::to_string(dropout));
    cfg.set("pdit.cond_noise_std", std::to_string(cond_noise_std));
    cfg.set("pdit.cond_downsample", std::to_string(cond_downsample));
    cfg.set("pdit.cond_embed", std::to_string(cond_embed));
    cfg.set("pdit.mlp_ratio", std::to_string(mlp_ratio));
}

void PDiTConfig::validate() const {
    check_config(blocks >= 1, "pdit.blocks must be >= 1");
    check_config(hidden >= 4 && hidden % heads == 0, "pdit.hidden must divide by heads");
    check_config(hidden % 4 == 0, "pdit.hidden must be divisible by 4");
    check_config(token_patch >= 1, "pdit.token_patch must be >= 1");
    check_config(dropout >= 0.0 && dropout < 1.0, "pdit.dropout must be in [0,1)");
    check_config(cond_noise_std >= 0.0, "pdit.cond_noise_std must be >= 0");
    check_config(cond_downsample == 1 || cond_downsample == 2 || cond_downsample == 4,
                 "pdit.cond_downsample must be 1, 2 or 4");
    check_config(8 * token_patch % cond_downsample == 0,
                 "cond_downsample incompatible with the token grid");
    check_config(cond_embed >= 1 && mlp_ratio >= 1, "pdit embed/mlp sizes must be positive");
    check_config(c_z >= 1 && c_local >= 1 && c_global >= 1, "pdit channel plan must be positive");
}

}  // namespace pngen::pdit
