#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "milab/serialize.hpp"

namespace milab {

/// Thrown on schema violations; the message carries the dotted field path.
struct ConfigError : std::runtime_error {
    explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

namespace cfgdetail {

inline const nlohmann::json* find_path(const nlohmann::json& root, const std::string& path) {
    const nlohmann::json* cur = &root;
    std::size_t start = 0;
    while (start <= path.size()) {
        std::size_t dot = path.find('.', start);
        std::string key = path.substr(start, dot == std::string::npos ? dot : dot - start);
        if (!cur->is_object() || !cur->contains(key)) return nullptr;
        cur = &(*cur)[key];
        if (dot == std::string::npos) break;
        start = dot + 1;
    }
    return cur;
}

template <class T>
const char* type_name();
template <>
inline const char* type_name<std::string>() { return "string"; }
template <>
inline const char* type_name<double>() { return "number"; }
template <>
inline const char* type_name<int>() { return "integer"; }
template <>
inline const char* type_name<bool>() { return "boolean"; }
template <>
inline const char* type_name<std::uint64_t>() { return "unsigned integer"; }
template <>
inline const char* type_name<std::vector<int>>() { return "array of integers"; }
template <>
inline const char* type_name<std::vector<std::string>>() { return "array of strings"; }

template <class T>
T convert(const nlohmann::json& j, const std::string& path) {
    try {
        if constexpr (std::is_same_v<T, int> || std::is_same_v<T, std::uint64_t>) {
            if (!j.is_number_integer() && !j.is_number_unsigned()) throw nlohmann::json::type_error::create(302, "not integral", &j);
        } else if constexpr (std::is_same_v<T, double>) {
            if (!j.is_number()) throw nlohmann::json::type_error::create(302, "not a number", &j);
        } else if constexpr (std::is_same_v<T, bool>) {
            if (!j.is_boolean()) throw nlohmann::json::type_error::create(302, "not a boolean", &j);
        } else if constexpr (std::is_same_v<T, std::string>) {
            if (!j.is_string()) throw nlohmann::json::type_error::create(302, "not a string", &j);
        }
        return j.get<T>();
    } catch (const nlohmann::json::exception&) {
        throw ConfigError("config field " + path + ": expected " + type_name<T>() + ", got " +
                          j.dump());
    }
}

template <class T>
T require(const nlohmann::json& root, const std::string& path) {
    const nlohmann::json* j = find_path(root, path);
    if (!j) throw ConfigError("config field " + path + ": missing required field");
    return convert<T>(*j, path);
}

template <class T>
T get_or(const nlohmann::json& root, const std::string& path, T fallback) {
    const nlohmann::json* j = find_path(root, path);
    if (!j) return fallback;
    return convert<T>(*j, path);
}

/// Sets root[dotted path] = value, creating intermediate objects.
inline void set_path(nlohmann::json& root, const std::string& path, nlohmann::json value) {
    nlohmann::json* cur = &root;
    std::size_t start = 0;
    while (true) {
        std::size_t dot = path.find('.', start);
        std::string key = path.substr(start, dot == std::string::npos ? dot : dot - start);
        if (key.empty()) throw ConfigError("config override path has an empty segment: " + path);
        if (dot == std::string::npos) {
            (*cur)[key] = std::move(value);
            return;
        }
        if (!cur->contains(key) || !(*cur)[key].is_object()) (*cur)[key] = nlohmann::json::object();
        cur = &(*cur)[key];
        start = dot + 1;
    }
}

}  // namespace cfgdetail

struct DatasetConfig {
    std::string source = "idx";  // idx | blobs
    std::string images_path, labels_path;
    int blobs_classes = 10, blobs_per_class = 60, blobs_image_size = 28;
    std::vector<int> private_classes{0, 1, 2, 3, 4};
    std::vector<int> public_classes{5, 6, 7, 8, 9};
    int max_private = 0;  // 0 = keep all; otherwise seeded subsample
    int max_public = 0;
};

struct ModelStageConfig {
    std::string arch = "Conv3";
    int epochs = 5;
    int batch = 64;
    double lr = 1e-3;
};

struct AugConfig {
    std::vector<std::string> archs{"Conv2", "Conv4"};
    int epochs = 5;
    int batch = 64;
    double lr = 1e-3;
    double temperature = 1.0;
};

struct GanConfig {
    int n_z = 64;
    int base = 8;
    int iterations = 1000;
    int batch = 64;
    int critic_steps = 5;
    double gp_coeff = 10.0;
    double lr = 2e-4;
};

struct AttackConfig {
    std::string mode = "kedmi";     // gmi | kedmi
    std::string variant = "lomma";  // baseline | lom | ma | lomma
    int iterations = 2400;
    double lr = 0.02;
    double momentum = 0.9;
    double lambda_prior = 100.0;
    double lambda_reg = 1.0;
    double loss_scale = 1.0;
    bool clip_z = true;
    int restarts = 5;
    int n_candidates = 5;
    int gaussian_samples = 5;
    int preg_n = 5000;               // clamped to the public set size
    std::string preg_mode = "sampled";  // sampled | fixed
    std::vector<int> classes;        // empty = all private classes
};

struct ExperimentConfig {
    DatasetConfig dataset;
    ModelStageConfig target{"Conv3"};
    ModelStageConfig eval{"Conv5"};
    AugConfig aug;
    GanConfig gan;
    AttackConfig attack;
    std::optional<double> overfit_tau_low;
    std::optional<double> overfit_tau_high;
    std::string out_dir = "out";
    std::uint64_t seed = 0;

    nlohmann::json raw;  // the validated document, for hashing

    static ExperimentConfig from_json(const nlohmann::json& j);
    static ExperimentConfig load(const std::filesystem::path& path,
                                 const std::vector<std::string>& overrides);

    /// Hash of a canonical dump of a config subtree. The empty path hashes the
    /// whole document minus out_dir, so runs into different directories with
    /// identical settings fingerprint identically.
    std::uint64_t subtree_hash(const std::string& dotted) const {
        if (dotted.empty()) {
            nlohmann::json copy = raw;
            copy.erase("out_dir");
            return fnv1a64(copy.dump());
        }
        const nlohmann::json* sub = cfgdetail::find_path(raw, dotted);
        return fnv1a64(sub ? sub->dump() : "null");
    }
};

inline ExperimentConfig ExperimentConfig::from_json(const nlohmann::json& j) {
    using namespace cfgdetail;
    ExperimentConfig c;
    c.raw = j;

    c.dataset.source = get_or<std::string>(j, "dataset.source", c.dataset.source);
    if (c.dataset.source != "idx" && c.dataset.source != "blobs") {
        throw ConfigError("config field dataset.source: must be \"idx\" or \"blobs\"");
    }
    if (c.dataset.source == "idx") {
        c.dataset.images_path = require<std::string>(j, "dataset.images");
        c.dataset.labels_path = require<std::string>(j, "dataset.labels");
    } else {
        c.dataset.blobs_classes = get_or<int>(j, "dataset.blobs.n_classes", c.dataset.blobs_classes);
        c.dataset.blobs_per_class =
            get_or<int>(j, "dataset.blobs.n_per_class", c.dataset.blobs_per_class);
        c.dataset.blobs_image_size =
            get_or<int>(j, "dataset.blobs.image_size", c.dataset.blobs_image_size);
    }
    c.dataset.private_classes =
        get_or<std::vector<int>>(j, "dataset.private_classes", c.dataset.private_classes);
    c.dataset.public_classes =
        get_or<std::vector<int>>(j, "dataset.public_classes", c.dataset.public_classes);
    c.dataset.max_private = get_or<int>(j, "dataset.max_private", 0);
    c.dataset.max_public = get_or<int>(j, "dataset.max_public", 0);

    auto model_stage = [&](const char* key, ModelStageConfig def) {
        ModelStageConfig m = def;
        std::string base(key);
        m.arch = get_or<std::string>(j, base + ".arch", m.arch);
        m.epochs = get_or<int>(j, base + ".epochs", m.epochs);
        m.batch = get_or<int>(j, base + ".batch", m.batch);
        m.lr = get_or<double>(j, base + ".lr", m.lr);
        if (m.epochs < 0) throw ConfigError("config field " + base + ".epochs: must be >= 0");
        if (m.batch < 1) throw ConfigError("config field " + base + ".batch: must be >= 1");
        return m;
    };
    c.target = model_stage("target", ModelStageConfig{"Conv3"});
    c.eval = model_stage("eval", ModelStageConfig{"Conv5"});

    c.aug.archs = get_or<std::vector<std::string>>(j, "aug.archs", c.aug.archs);
    c.aug.epochs = get_or<int>(j, "aug.epochs", c.aug.epochs);
    c.aug.batch = get_or<int>(j, "aug.batch", c.aug.batch);
    c.aug.lr = get_or<double>(j, "aug.lr", c.aug.lr);
    c.aug.temperature = get_or<double>(j, "aug.temperature", c.aug.temperature);
    if (c.aug.temperature <= 0.0) throw ConfigError("config field aug.temperature: must be > 0");

    c.gan.n_z = get_or<int>(j, "gan.n_z", c.gan.n_z);
    c.gan.base = get_or<int>(j, "gan.base", c.gan.base);
    c.gan.iterations = get_or<int>(j, "gan.iterations", c.gan.iterations);
    c.gan.batch = get_or<int>(j, "gan.batch", c.gan.batch);
    c.gan.critic_steps = get_or<int>(j, "gan.critic_steps", c.gan.critic_steps);
    c.gan.gp_coeff = get_or<double>(j, "gan.gp_coeff", c.gan.gp_coeff);
    c.gan.lr = get_or<double>(j, "gan.lr", c.gan.lr);
    if (c.gan.iterations < 0) throw ConfigError("config field gan.iterations: must be >= 0");

    c.attack.mode = get_or<std::string>(j, "attack.mode", c.attack.mode);
    if (c.attack.mode != "gmi" && c.attack.mode != "kedmi") {
        throw ConfigError("config field attack.mode: must be \"gmi\" or \"kedmi\"");
    }
    c.attack.variant = get_or<std::string>(j, "attack.variant", c.attack.variant);
    if (c.attack.variant != "baseline" && c.attack.variant != "lom" && c.attack.variant != "ma" &&
        c.attack.variant != "lomma") {
        throw ConfigError(
            "config field attack.variant: must be one of baseline, lom, ma, lomma");
    }
    c.attack.iterations = get_or<int>(j, "attack.iterations", c.attack.iterations);
    if (c.attack.iterations <= 0) throw ConfigError("config field attack.iterations: must be > 0");
    c.attack.lr = get_or<double>(j, "attack.lr", c.attack.lr);
    c.attack.momentum = get_or<double>(j, "attack.momentum", c.attack.momentum);
    c.attack.lambda_prior = get_or<double>(j, "attack.lambda_prior", c.attack.lambda_prior);
    if (c.attack.lambda_prior < 0.0) {
        throw ConfigError("config field attack.lambda_prior: must be >= 0");
    }
    c.attack.lambda_reg = get_or<double>(j, "attack.lambda_reg", c.attack.lambda_reg);
    if (c.attack.lambda_reg < 0.0) throw ConfigError("config field attack.lambda_reg: must be >= 0");
    c.attack.loss_scale = get_or<double>(j, "attack.loss_scale", c.attack.loss_scale);
    c.attack.clip_z = get_or<bool>(j, "attack.clip_z", c.attack.clip_z);
    c.attack.restarts = get_or<int>(j, "attack.restarts", c.attack.restarts);
    c.attack.n_candidates = get_or<int>(j, "attack.n_candidates", c.attack.n_candidates);
    c.attack.gaussian_samples = get_or<int>(j, "attack.gaussian_samples", c.attack.gaussian_samples);
    if (c.attack.restarts < 1 || c.attack.n_candidates < 1 || c.attack.gaussian_samples < 1) {
        throw ConfigError("config field attack: restarts/n_candidates/gaussian_samples must be >= 1");
    }
    c.attack.preg_n = get_or<int>(j, "attack.preg_n", c.attack.preg_n);
    c.attack.preg_mode = get_or<std::string>(j, "attack.preg_mode", c.attack.preg_mode);
    if (c.attack.preg_mode != "sampled" && c.attack.preg_mode != "fixed") {
        throw ConfigError("config field attack.preg_mode: must be \"sampled\" or \"fixed\"");
    }
    c.attack.classes = get_or<std::vector<int>>(j, "attack.classes", {});

    if (const auto* t = cfgdetail::find_path(j, "overfit.tau_low"); t && !t->is_null()) {
        c.overfit_tau_low = cfgdetail::convert<double>(*t, "overfit.tau_low");
    }
    if (const auto* t = cfgdetail::find_path(j, "overfit.tau_high"); t && !t->is_null()) {
        c.overfit_tau_high = cfgdetail::convert<double>(*t, "overfit.tau_high");
    }

    c.out_dir = get_or<std::string>(j, "out_dir", c.out_dir);
    c.seed = get_or<std::uint64_t>(j, "seed", c.seed);

    // target and evaluation model must be distinct objects
    if (c.target.arch == c.eval.arch) {
        throw ConfigError("config: target.arch and eval.arch must differ (the evaluation model "
                          "must not be the target model)");
    }
    return c;
}

inline ExperimentConfig ExperimentConfig::load(const std::filesystem::path& path,
                                               const std::vector<std::string>& overrides) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(read_file_bytes(path));
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError("config file " + path.string() + ": " + e.what());
    }
    for (const std::string& ov : overrides) {
        std::size_t eq = ov.find('=');
        if (eq == std::string::npos) {
            throw ConfigError("config override must look like path=value, got: " + ov);
        }
        std::string key = ov.substr(0, eq);
        std::string val = ov.substr(eq + 1);
        nlohmann::json parsed;
        try {
            parsed = nlohmann::json::parse(val);
        } catch (const nlohmann::json::exception&) {
            parsed = val;  // plain string
        }
        cfgdetail::set_path(j, key, std::move(parsed));
    }
    return from_json(j);
}

}  // namespace milab
