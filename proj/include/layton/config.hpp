#pragma once

// Flat "key = value" run configuration with a typed known-key registry.
// Unknown keys are rejected with the offending line; environment variables
// prefixed LAYTON_ override file values; the resolved config hashes to a
// stable id recorded in checkpoints and reports.

#include <cstdlib>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "layton/errors.hpp"

namespace layton {

enum class CfgKind { Int, Real, Bool, Str, IntList, RealList };

struct CfgEntry {
    CfgKind kind;
    std::string value;  // canonical text form
};

class RunConfig {
public:
    RunConfig() { defaults(); }

    static const std::map<std::string, CfgEntry>& registry() {
        static const std::map<std::string, CfgEntry> reg = {
            {"seed", {CfgKind::Int, "1"}},
            {"resolution", {CfgKind::Int, "32"}},
            {"hires_resolution", {CfgKind::Int, "64"}},
            {"cond_sizes", {CfgKind::IntList, "28,32,36"}},

            {"data_count", {CfgKind::Int, "256"}},
            {"data_holdout", {CfgKind::Int, "32"}},
            {"data_filter_threshold", {CfgKind::Real, "0.005"}},

            {"vq_code_dim", {CfgKind::Int, "32"}},
            {"vq_codes", {CfgKind::Int, "512"}},
            {"vq_base_ch", {CfgKind::Int, "16"}},
            {"vq_beta_commit", {CfgKind::Real, "0.25"}},
            {"vq_iters", {CfgKind::Int, "1200"}},
            {"vq_batch", {CfgKind::Int, "8"}},
            {"vq_lr", {CfgKind::Real, "0.002"}},
            {"vq_target_psnr", {CfgKind::Real, "20.0"}},

            {"vae_base_ch", {CfgKind::Int, "16"}},
            {"vae_lat_ch", {CfgKind::Int, "4"}},
            {"vae_kl_weight", {CfgKind::Real, "0.000001"}},
            {"vae_iters", {CfgKind::Int, "1200"}},
            {"vae_batch", {CfgKind::Int, "8"}},
            {"vae_lr", {CfgKind::Real, "0.002"}},
            {"vae_target_psnr", {CfgKind::Real, "24.0"}},

            {"unet_base", {CfgKind::Int, "24"}},
            {"unet_tdim", {CfgKind::Int, "64"}},
            {"t_max", {CfgKind::Int, "1000"}},
            {"schedule_kind", {CfgKind::Str, "cosine"}},
            {"ldm_iters", {CfgKind::Int, "1500"}},
            {"ldm_batch", {CfgKind::Int, "8"}},
            {"ldm_lr", {CfgKind::Real, "0.0015"}},

            {"ladd_iters_lowres", {CfgKind::Int, "1200"}},
            {"ladd_iters_highres", {CfgKind::Int, "400"}},
            {"ladd_batch", {CfgKind::Int, "4"}},
            {"ladd_lr", {CfgKind::Real, "0.0015"}},

            {"cm_boundary_t", {CfgKind::Int, "0"}},
            {"cm_ema_decay", {CfgKind::Real, "0.995"}},
            {"cm_ode_substeps", {CfgKind::Int, "32"}},
            {"cm_t_mid_div", {CfgKind::Int, "2"}},
            {"distill_iters", {CfgKind::Int, "800"}},
            {"distill_batch", {CfgKind::Int, "4"}},
            {"distill_lr", {CfgKind::Real, "0.001"}},

            {"stage2_iters", {CfgKind::Int, "600"}},
            {"stage2_batch", {CfgKind::Int, "2"}},
            {"stage2_lr", {CfgKind::Real, "0.0003"}},
            {"stage2_mode", {CfgKind::Str, "one_step"}},
            {"stage2_w_perceptual", {CfgKind::Real, "1.0"}},
            {"stage2_w_mse", {CfgKind::Real, "0.5"}},
            {"stage2_keep_diffusion_loss", {CfgKind::Bool, "false"}},
            {"stage2_diffusion_loss_weight", {CfgKind::Real, "0.1"}},

            {"ar_width", {CfgKind::Int, "128"}},
            {"ar_heads", {CfgKind::Int, "4"}},
            {"ar_blocks", {CfgKind::Int, "4"}},
            {"ar_cond_dim", {CfgKind::Int, "64"}},
            {"ar_drop_prob", {CfgKind::Real, "0.1"}},
            {"ar_iters", {CfgKind::Int, "1500"}},
            {"ar_batch", {CfgKind::Int, "8"}},
            {"ar_lr", {CfgKind::Real, "0.001"}},
            {"ar_top_k", {CfgKind::Int, "64"}},
            {"ar_temperature", {CfgKind::Real, "1.0"}},

            {"eval_count", {CfgKind::Int, "32"}},
            {"eval_seeds", {CfgKind::IntList, "1,2,3"}},
            {"eval_cond_size", {CfgKind::Int, "32"}},
            {"eval_cfg_scales", {CfgKind::RealList, "1.5,2,3,7"}},
            {"eval_recon_mode", {CfgKind::Str, "decoder"}},
            {"eval_ddim_steps", {CfgKind::Int, "25"}},
            {"proxy_seed", {CfgKind::Int, "1234"}},
        };
        return reg;
    }

    void load_file(const std::string& path) {
        std::ifstream f(path);
        if (!f) throw ConfigError("cannot open config file " + path);
        std::string line;
        int lineno = 0;
        while (std::getline(f, line)) {
            ++lineno;
            std::string s = strip(line);
            if (s.empty() || s[0] == '#') continue;
            size_t eq = s.find('=');
            if (eq == std::string::npos)
                throw ConfigError("malformed line " + std::to_string(lineno) + " in " + path + ": " + line);
            std::string key = strip(s.substr(0, eq));
            std::string value = strip(s.substr(eq + 1));
            set(key, value, path + ":" + std::to_string(lineno));
        }
    }

    // LAYTON_<KEY-upper-cased> overrides
    void apply_env_overrides() {
        for (const auto& [key, entry] : registry()) {
            std::string env_name = "LAYTON_";
            for (char c : key) env_name += char(std::toupper(c));
            if (const char* v = std::getenv(env_name.c_str())) set(key, v, "env " + env_name);
        }
    }

    void set(const std::string& key, const std::string& value, const std::string& where = "set()") {
        auto it = registry().find(key);
        if (it == registry().end()) throw ConfigError("unknown config key '" + key + "' at " + where);
        validate(key, it->second.kind, value, where);
        values_[key] = value;
    }

    int get_int(const std::string& key) const { return int(std::stoll(raw(key))); }
    double get_real(const std::string& key) const { return std::stod(raw(key)); }
    bool get_bool(const std::string& key) const { return raw(key) == "true" || raw(key) == "1"; }
    std::string get_str(const std::string& key) const { return raw(key); }

    std::vector<int> get_int_list(const std::string& key) const {
        std::vector<int> out;
        for (const auto& tok : split_list(raw(key))) out.push_back(int(std::stoll(tok)));
        return out;
    }
    std::vector<double> get_real_list(const std::string& key) const {
        std::vector<double> out;
        for (const auto& tok : split_list(raw(key))) out.push_back(std::stod(tok));
        return out;
    }

    // canonical resolved text (sorted keys), the basis of the config hash
    std::string resolved_text() const {
        std::string out;
        for (const auto& [key, value] : values_) out += key + " = " + value + "\n";
        return out;
    }

    std::string hash() const {
        uint64_t h = 1469598103934665603ULL;
        for (unsigned char c : resolved_text()) h = (h ^ c) * 1099511628211ULL;
        char buf[20];
        std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
        return buf;
    }

private:
    void defaults() {
        for (const auto& [key, entry] : registry()) values_[key] = entry.value;
    }

    const std::string& raw(const std::string& key) const {
        auto it = values_.find(key);
        if (it == values_.end()) throw ConfigError("unknown config key '" + key + "'");
        return it->second;
    }

    static std::string strip(const std::string& s) {
        size_t a = s.find_first_not_of(" \t\r");
        if (a == std::string::npos) return "";
        size_t b = s.find_last_not_of(" \t\r");
        return s.substr(a, b - a + 1);
    }

    static std::vector<std::string> split_list(const std::string& s) {
        std::vector<std::string> out;
        std::string item;
        std::istringstream ss(s);
        while (std::getline(ss, item, ',')) {
            std::string t = strip(item);
            if (!t.empty()) out.push_back(t);
        }
        return out;
    }

    static void validate(const std::string& key, CfgKind kind, const std::string& value,
                         const std::string& where) {
        auto fail = [&]() {
            throw ConfigError("bad value '" + value + "' for key '" + key + "' at " + where);
        };
        try {
            switch (kind) {
                case CfgKind::Int: (void)std::stoll(value); break;
                case CfgKind::Real: (void)std::stod(value); break;
                case CfgKind::Bool:
                    if (value != "true" && value != "false" && value != "0" && value != "1") fail();
                    break;
                case CfgKind::Str: break;
                case CfgKind::IntList:
                    for (const auto& t : split_list(value)) (void)std::stoll(t);
                    break;
                case CfgKind::RealList:
                    for (const auto& t : split_list(value)) (void)std::stod(t);
                    break;
            }
        } catch (const ConfigError&) {
            throw;
        } catch (...) {
            fail();
        }
    }

    std::map<std::string, std::string> values_;
};

}  // namespace layton
