#pragma once

#include <algorithm>
#include <chrono>
#include <cstdint>
#include <filesystem>
#include <iostream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "milab/config.hpp"
#include "milab/dataset.hpp"
#include "milab/evaluation.hpp"
#include "milab/gan.hpp"
#include "milab/inversion.hpp"
#include "milab/models.hpp"
#include "milab/serialize.hpp"

namespace milab {

namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// Run manifest: every artifact in the output directory is referenced by
// exactly one entry carrying its content hash, the producing stage, the
// derived seed and the hashes of its inputs. Wall times go to logs/ (outside
// the manifest) so reruns with a fixed master seed yield bitwise-identical
// manifests.
// ---------------------------------------------------------------------------

class Manifest {
  public:
    struct Entry {
        std::string hash;
        std::string stage;
        std::string config_hash;
        std::uint64_t seed = 0;
        std::map<std::string, std::string> inputs;  // relpath -> hash
    };

    static Manifest load(const fs::path& out_dir) {
        Manifest m;
        m.dir_ = out_dir;
        fs::path file = out_dir / "manifest.json";
        if (fs::exists(file)) {
            auto j = nlohmann::json::parse(read_file_bytes(file));
            for (auto& [path, e] : j.at("entries").items()) {
                Entry entry;
                entry.hash = e.at("hash").get<std::string>();
                entry.stage = e.at("stage").get<std::string>();
                entry.config_hash = e.at("config_hash").get<std::string>();
                entry.seed = e.at("seed").get<std::uint64_t>();
                if (e.contains("inputs")) {
                    for (auto& [k, v] : e.at("inputs").items())
                        entry.inputs[k] = v.get<std::string>();
                }
                m.entries_[path] = std::move(entry);
            }
        }
        return m;
    }

    void save() const {
        nlohmann::json j;
        nlohmann::json entries = nlohmann::json::object();
        for (const auto& [path, e] : entries_) {
            nlohmann::json je;
            je["hash"] = e.hash;
            je["stage"] = e.stage;
            je["config_hash"] = e.config_hash;
            je["seed"] = e.seed;
            je["inputs"] = e.inputs;
            entries[path] = std::move(je);
        }
        j["entries"] = std::move(entries);
        write_file_atomic(dir_ / "manifest.json", j.dump(2) + "\n");
    }

    void record(const std::string& relpath, Entry entry) { entries_[relpath] = std::move(entry); }

    const Entry* find(const std::string& relpath) const {
        auto it = entries_.find(relpath);
        return it == entries_.end() ? nullptr : &it->second;
    }

    /// True when the entry exists with this config hash and inputs, and the
    /// file on disk still matches the recorded content hash.
    bool fresh(const std::string& relpath, const std::string& config_hash,
               const std::map<std::string, std::string>& inputs) const {
        const Entry* e = find(relpath);
        if (!e || e->config_hash != config_hash || e->inputs != inputs) return false;
        fs::path file = dir_ / relpath;
        if (!fs::exists(file)) return false;
        return hash_hex(fnv1a64(read_file_bytes(file))) == e->hash;
    }

    std::string file_hash(const std::string& relpath) const {
        const Entry* e = find(relpath);
        if (!e) throw std::runtime_error("manifest has no entry for " + relpath);
        return e->hash;
    }

    const std::map<std::string, Entry>& entries() const { return entries_; }
    const fs::path& dir() const { return dir_; }

  private:
    fs::path dir_;
    std::map<std::string, Entry> entries_;  // sorted for deterministic dumps
};

// ---------------------------------------------------------------------------
// Reconstruction cache (one per attack variant).
// ---------------------------------------------------------------------------

struct ReconArtifact {
    ReconBatch batch;           // all restart groups
    Tensor best;                // best-restart reconstructions, stacked per class
    std::vector<int> best_targets;
};

inline void save_recons(const ReconArtifact& art, const fs::path& bin_path) {
    std::vector<double> flat = art.batch.images.data;
    flat.insert(flat.end(), art.best.data.begin(), art.best.data.end());
    auto bytes = doubles_to_bytes(flat);
    write_file_atomic(bin_path, bytes);
    nlohmann::json side;
    side["shape"] = art.batch.images.shape;
    side["targets"] = art.batch.targets;
    side["groups"] = art.batch.groups;
    side["best_shape"] = art.best.shape;
    side["best_targets"] = art.best_targets;
    side["content_hash"] = hash_hex(fnv1a64(bytes));
    write_file_atomic(bin_path.string() + ".json", side.dump(2) + "\n");
}

inline ReconArtifact load_recons(const fs::path& bin_path) {
    auto bytes = read_file_bytes(bin_path);
    auto side = nlohmann::json::parse(read_file_bytes(bin_path.string() + ".json"));
    if (hash_hex(fnv1a64(bytes)) != side.at("content_hash").get<std::string>()) {
        throw std::runtime_error("reconstruction cache hash mismatch: " + bin_path.string());
    }
    auto flat = doubles_from_bytes(bytes);
    ReconArtifact art;
    Shape shape = side.at("shape").get<Shape>();
    Shape best_shape = side.at("best_shape").get<Shape>();
    std::int64_t n_all = numel(shape);
    art.batch.images = Tensor(shape, std::vector<double>(flat.begin(), flat.begin() + n_all));
    art.best = Tensor(best_shape, std::vector<double>(flat.begin() + n_all, flat.end()));
    art.batch.targets = side.at("targets").get<std::vector<int>>();
    art.batch.groups = side.at("groups").get<std::vector<int>>();
    art.best_targets = side.at("best_targets").get<std::vector<int>>();
    art.batch.validate();
    return art;
}

// ---------------------------------------------------------------------------
// Comparison table emitted by full-experiment.
// ---------------------------------------------------------------------------

struct ComparisonRow {
    std::string variant;
    double top1_mean = 0.0, top1_std = 0.0;
    double top5_mean = 0.0, top5_std = 0.0;
    double improvement = 0.0;  // vs baseline top-1; meaningless for baseline
    double knn = 0.0;
};

struct ComparisonTable {
    std::vector<ComparisonRow> rows;  // baseline, lom, ma, lomma
    double overfit_tau_low = 0.0, overfit_tau_high = 0.0;
    double overfit_fraction_baseline = 0.0;
    double overfit_fraction_lomma = 0.0;

    std::string to_csv() const {
        std::string out = "variant,top1_mean,top1_std,top5_mean,top5_std,improvement,knn_dist\n";
        char buf[160];
        for (const auto& r : rows) {
            if (r.variant == "baseline") {
                std::snprintf(buf, sizeof buf, "%s,%.2f,%.2f,%.2f,%.2f,,%.4f\n", r.variant.c_str(),
                              r.top1_mean, r.top1_std, r.top5_mean, r.top5_std, r.knn);
            } else {
                std::snprintf(buf, sizeof buf, "%s,%.2f,%.2f,%.2f,%.2f,%.2f,%.4f\n",
                              r.variant.c_str(), r.top1_mean, r.top1_std, r.top5_mean, r.top5_std,
                              r.improvement, r.knn);
            }
            out += buf;
        }
        return out;
    }

    std::string to_text() const {
        std::string out;
        char buf[160];
        std::snprintf(buf, sizeof buf, "%-10s %-20s %-8s %-10s\n", "variant", "attack acc (top-1)",
                      "imp.", "knn dist");
        out += buf;
        for (const auto& r : rows) {
            std::string acc;
            char accbuf[64];
            std::snprintf(accbuf, sizeof accbuf, "%.2f +/- %.2f", r.top1_mean, r.top1_std);
            acc = accbuf;
            if (r.variant == "baseline") {
                std::snprintf(buf, sizeof buf, "%-10s %-20s %-8s %-10.4f\n", r.variant.c_str(),
                              acc.c_str(), "-", r.knn);
            } else {
                char imp[32];
                std::snprintf(imp, sizeof imp, "%.2f", r.improvement);
                std::snprintf(buf, sizeof buf, "%-10s %-20s %-8s %-10.4f\n", r.variant.c_str(),
                              acc.c_str(), imp, r.knn);
            }
            out += buf;
        }
        return out;
    }
};

// ---------------------------------------------------------------------------
// The staged pipeline.
// ---------------------------------------------------------------------------

class Pipeline {
  public:
    explicit Pipeline(ExperimentConfig cfg)
        : cfg_(std::move(cfg)), out_(cfg_.out_dir), manifest_(Manifest::load(out_)) {
        fs::create_directories(out_);
        fs::create_directories(out_ / "logs");
    }

    const ExperimentConfig& config() const { return cfg_; }
    const Manifest& manifest() const { return manifest_; }

    std::uint64_t stage_seed(const std::string& tag) const {
        return Rng(cfg_.seed).split(fnv1a64(tag)).next_u64();
    }

    /// GAN and attack artifacts are scoped by attack mode so one output
    /// directory can serve both pipelines while sharing the model stages.
    std::string gan_rel(const std::string& name) const {
        return "gan/" + cfg_.attack.mode + "/" + name;
    }
    std::string attack_rel(const std::string& variant, const std::string& name) const {
        return "attack/" + cfg_.attack.mode + "/" + variant + "/" + name;
    }

    void run_stage(const std::string& stage) {
        auto t0 = std::chrono::steady_clock::now();
        if (stage == "train-target") train_model_stage("target", cfg_.target);
        else if (stage == "train-eval") train_model_stage("eval", cfg_.eval);
        else if (stage == "distill") distill_stage();
        else if (stage == "train-gan") gan_stage();
        else if (stage == "invert") invert_stage(cfg_.attack.variant);
        else if (stage == "evaluate") evaluate_stage(cfg_.attack.variant);
        else if (stage == "analyze-overfit") overfit_stage(cfg_.attack.variant);
        else throw std::runtime_error("unknown stage: " + stage);
        record_timing(stage, t0);
        manifest_.save();
    }

    ComparisonTable full_experiment() {
        auto t0 = std::chrono::steady_clock::now();
        train_model_stage("target", cfg_.target);
        train_model_stage("eval", cfg_.eval);
        distill_stage();
        gan_stage();

        const std::vector<std::string> variants{"baseline", "lom", "ma", "lomma"};
        std::vector<AttackReport> reports;
        for (const std::string& v : variants) {
            invert_stage(v);
            reports.push_back(evaluate_stage(v));
            overfit_stage(v);
        }

        ComparisonTable table;
        double baseline_top1 = reports.front().top1.mean;
        for (const auto& rep : reports) {
            ComparisonRow row;
            row.variant = rep.variant;
            row.top1_mean = rep.top1.mean;
            row.top1_std = rep.top1.stddev;
            row.top5_mean = rep.top5.mean;
            row.top5_std = rep.top5.stddev;
            row.improvement = rep.top1.mean - baseline_top1;
            row.knn = rep.knn_dist_mean;
            table.rows.push_back(row);
        }

        // inversion-overfitting contrast at the baseline's thresholds
        auto base_recons = load_recons(out_ / attack_rel("baseline", "recons.bin"));
        auto lomma_recons = load_recons(out_ / attack_rel("lomma", "recons.bin"));
        Classifier target = load_classifier(out_ / "models" / "target.ckpt");
        Classifier eval_model = load_classifier(out_ / "models" / "eval.ckpt");
        auto base_overfit =
            overfit_analysis(base_recons.batch.images, base_recons.batch.targets, target,
                             eval_model, cfg_.overfit_tau_low, cfg_.overfit_tau_high);
        auto lomma_overfit =
            overfit_analysis(lomma_recons.batch.images, lomma_recons.batch.targets, target,
                             eval_model, base_overfit.tau_low, base_overfit.tau_high);
        table.overfit_tau_low = base_overfit.tau_low;
        table.overfit_tau_high = base_overfit.tau_high;
        table.overfit_fraction_baseline = base_overfit.fraction_low_high;
        table.overfit_fraction_lomma = lomma_overfit.fraction_low_high;

        std::string csv = table.to_csv();
        write_artifact("reports/" + cfg_.attack.mode + "/comparison.csv", csv,
                       "full-experiment", cfg_.subtree_hash(""), {});
        write_artifact("reports/" + cfg_.attack.mode + "/comparison.txt", table.to_text(),
                       "full-experiment", cfg_.subtree_hash(""), {});
        nlohmann::json oj;
        oj["tau_low"] = table.overfit_tau_low;
        oj["tau_high"] = table.overfit_tau_high;
        oj["fraction_baseline"] = table.overfit_fraction_baseline;
        oj["fraction_lomma"] = table.overfit_fraction_lomma;
        write_artifact("reports/" + cfg_.attack.mode + "/overfit_comparison.json",
                       oj.dump(2) + "\n", "full-experiment", cfg_.subtree_hash(""), {});
        record_timing("full-experiment", t0);
        manifest_.save();
        return table;
    }

    // ---- data ------------------------------------------------------------

    /// Loads (building and caching if stale) the class-disjoint split.
    std::pair<Dataset, Dataset> ensure_data() {
        std::string cfg_hash = hash_hex(cfg_.subtree_hash("dataset") ^ stage_seed("data"));
        std::map<std::string, std::string> inputs;
        if (cfg_.dataset.source == "idx") {
            inputs["<images>"] = hash_hex(fnv1a64(read_file_bytes(cfg_.dataset.images_path)));
            inputs["<labels>"] = hash_hex(fnv1a64(read_file_bytes(cfg_.dataset.labels_path)));
        }
        if (manifest_.fresh("data/private.bin", cfg_hash, inputs) &&
            manifest_.fresh("data/public.bin", cfg_hash, inputs)) {
            return {load_dataset(out_ / "data" / "private.bin"),
                    load_dataset(out_ / "data" / "public.bin")};
        }

        Dataset all;
        if (cfg_.dataset.source == "idx") {
            all = load_idx(cfg_.dataset.images_path, cfg_.dataset.labels_path);
        } else {
            all = synth_blobs(cfg_.dataset.blobs_classes, cfg_.dataset.blobs_per_class,
                              cfg_.dataset.blobs_image_size, stage_seed("blobs"));
        }
        SplitSpec spec{cfg_.dataset.private_classes, cfg_.dataset.public_classes};
        SplitResult split = split_disjoint(all, spec);
        Rng sub_rng(stage_seed("data"));
        Dataset priv = subsample(split.private_set, cfg_.dataset.max_private, sub_rng);
        Dataset pub = subsample(split.public_set, cfg_.dataset.max_public, sub_rng);

        save_dataset(priv, out_ / "data" / "private.bin");
        save_dataset(pub, out_ / "data" / "public.bin");
        for (const char* name : {"private", "public"}) {
            for (const char* suffix : {".bin", ".bin.json"}) {
                std::string rel = std::string("data/") + name + suffix;
                record_file(rel, "data", cfg_hash, stage_seed("data"), inputs);
            }
        }
        return {priv, pub};
    }

  private:
    static Dataset subsample(const Dataset& ds, int cap, Rng& rng) {
        if (cap <= 0 || cap >= ds.n()) return ds;
        auto perm = rng.permutation(ds.n());
        perm.resize(static_cast<std::size_t>(cap));
        std::sort(perm.begin(), perm.end());
        Dataset out;
        out.images = ds.batch(perm);
        for (auto i : perm) out.labels.push_back(ds.labels[static_cast<std::size_t>(i)]);
        out.class_set = detail::sorted_unique(out.labels);
        return out;
    }

    void record_timing(const std::string& stage, std::chrono::steady_clock::time_point t0) {
        double ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0)
                        .count();
        fs::path file = out_ / "logs" / "timings.json";
        nlohmann::json j = nlohmann::json::object();
        if (fs::exists(file)) j = nlohmann::json::parse(read_file_bytes(file));
        j[stage] = ms;
        write_file_atomic(file, j.dump(2) + "\n");
        std::cout << "[stage] " << stage << " finished in " << ms / 1000.0 << " s\n";
    }

    void record_file(const std::string& relpath, const std::string& stage,
                     const std::string& config_hash, std::uint64_t seed,
                     const std::map<std::string, std::string>& inputs) {
        Manifest::Entry e;
        e.hash = hash_hex(fnv1a64(read_file_bytes(out_ / relpath)));
        e.stage = stage;
        e.config_hash = config_hash;
        e.seed = seed;
        e.inputs = inputs;
        manifest_.record(relpath, std::move(e));
    }

    void write_artifact(const std::string& relpath, const std::string& text,
                        const std::string& stage, std::uint64_t config_hash,
                        const std::map<std::string, std::string>& inputs) {
        write_file_atomic(out_ / relpath, text);
        record_file(relpath, stage, hash_hex(config_hash), stage_seed(stage), inputs);
    }

    void require_artifact(const std::string& stage, const std::string& relpath) const {
        if (!fs::exists(out_ / relpath)) {
            throw std::runtime_error("stage " + stage + ": missing upstream artifact " +
                                     (out_ / relpath).string() + " (run its producing stage first)");
        }
    }

    // ---- model stages ------------------------------------------------------

    void train_model_stage(const std::string& which, const ModelStageConfig& mc) {
        std::string stage = "train-" + which;
        std::string ckpt_rel = "models/" + which + ".ckpt";
        std::uint64_t seed = stage_seed(stage);
        std::string cfg_hash =
            hash_hex(cfg_.subtree_hash(which) ^ cfg_.subtree_hash("dataset") ^ seed);

        auto [priv, pub] = ensure_data();
        std::map<std::string, std::string> inputs{
            {"data/private.bin", manifest_.file_hash("data/private.bin")}};
        if (manifest_.fresh(ckpt_rel, cfg_hash, inputs)) {
            std::cout << "[cached] " << stage << "\n";
            return;
        }

        TrainHyper hyper;
        hyper.epochs = mc.epochs;
        hyper.batch = mc.batch;
        hyper.optim.learning_rate = mc.lr;
        TrainResult res = train_classifier(priv, mc.arch, hyper, seed);

        save_classifier(res.model, out_ / ckpt_rel, seed);
        nlohmann::json trace;
        trace["train_acc"] = res.train_acc;
        trace["holdout_acc"] = res.holdout_acc;
        trace["final_holdout_acc"] = res.final_holdout_acc;
        write_file_atomic(out_ / ("models/" + which + "_train.json"), trace.dump(2) + "\n");

        for (const std::string& rel :
             {ckpt_rel, ckpt_rel + ".json", "models/" + which + "_train.json"}) {
            record_file(rel, stage, cfg_hash, seed, inputs);
        }
        std::cout << "[stage] " << stage << ": holdout accuracy "
                  << res.final_holdout_acc * 100.0 << "%\n";
    }

    void distill_stage() {
        const std::string stage = "distill";
        require_artifact(stage, "models/target.ckpt");
        std::uint64_t seed = stage_seed(stage);
        std::string cfg_hash =
            hash_hex(cfg_.subtree_hash("aug") ^ cfg_.subtree_hash("dataset") ^ seed);

        auto [priv, pub] = ensure_data();
        std::map<std::string, std::string> inputs{
            {"models/target.ckpt", manifest_.file_hash("models/target.ckpt")},
            {"data/public.bin", manifest_.file_hash("data/public.bin")}};

        bool all_fresh = manifest_.fresh("models/distill_stats.json", cfg_hash, inputs);
        for (std::size_t i = 0; all_fresh && i < cfg_.aug.archs.size(); ++i) {
            all_fresh = manifest_.fresh("models/aug" + std::to_string(i) + ".ckpt", cfg_hash, inputs);
        }
        if (all_fresh) {
            std::cout << "[cached] " << stage << "\n";
            return;
        }

        Classifier teacher = load_classifier(out_ / "models" / "target.ckpt");
        nlohmann::json stats = nlohmann::json::array();
        for (std::size_t i = 0; i < cfg_.aug.archs.size(); ++i) {
            DistillConfig dc;
            dc.temperature = cfg_.aug.temperature;
            dc.epochs = cfg_.aug.epochs;
            dc.batch = cfg_.aug.batch;
            dc.optim.learning_rate = cfg_.aug.lr;
            std::uint64_t s = Rng(seed).split(i).next_u64();
            DistillResult res = distill(teacher, pub, cfg_.aug.archs[i], dc, s);
            std::string rel = "models/aug" + std::to_string(i) + ".ckpt";
            save_classifier(res.student, out_ / rel, s);
            record_file(rel, stage, cfg_hash, seed, inputs);
            record_file(rel + ".json", stage, cfg_hash, seed, inputs);
            nlohmann::json e;
            e["arch"] = cfg_.aug.archs[i];
            e["initial_kl"] = res.initial_kl;
            e["final_kl"] = res.final_kl;
            e["epoch_kl"] = res.epoch_kl;
            stats.push_back(std::move(e));
            std::cout << "[stage] distill " << cfg_.aug.archs[i] << ": holdout KL "
                      << res.initial_kl << " -> " << res.final_kl << "\n";
        }
        write_file_atomic(out_ / "models/distill_stats.json", stats.dump(2) + "\n");
        record_file("models/distill_stats.json", stage, cfg_hash, seed, inputs);
    }

    void gan_stage() {
        const std::string stage = "train-gan";
        std::uint64_t seed = stage_seed(stage);
        // the attack mode picks the prior family, hence the training objective
        DiscMode mode = cfg_.attack.mode == "gmi" ? DiscMode::kCritic : DiscMode::kProbabilistic;
        std::string cfg_hash = hash_hex(cfg_.subtree_hash("gan") ^ cfg_.subtree_hash("dataset") ^
                                        fnv1a64(disc_mode_name(mode)) ^ seed);

        auto [priv, pub] = ensure_data();
        std::map<std::string, std::string> inputs{
            {"data/public.bin", manifest_.file_hash("data/public.bin")}};
        if (manifest_.fresh(gan_rel("generator.ckpt"), cfg_hash, inputs) &&
            manifest_.fresh(gan_rel("discriminator.ckpt"), cfg_hash, inputs)) {
            std::cout << "[cached] " << stage << "\n";
            return;
        }

        GanHyper hyper;
        hyper.iterations = cfg_.gan.iterations;
        hyper.batch = cfg_.gan.batch;
        hyper.base = cfg_.gan.base;
        hyper.critic_steps = cfg_.gan.critic_steps;
        hyper.gp_coeff = cfg_.gan.gp_coeff;
        hyper.g_optim.learning_rate = cfg_.gan.lr;
        hyper.d_optim.learning_rate = cfg_.gan.lr;
        if (mode == DiscMode::kCritic) hyper.d_optim.beta2 = 0.9;
        GanResult res = train_gan(pub, cfg_.gan.n_z, mode, hyper, seed);

        save_generator(res.gen, out_ / gan_rel("generator.ckpt"), seed);
        save_discriminator(res.disc, out_ / gan_rel("discriminator.ckpt"), seed);
        std::string csv = "iteration,d_loss,g_loss,fake_score\n";
        char buf[120];
        for (const auto& row : res.trace) {
            std::snprintf(buf, sizeof buf, "%d,%.8g,%.8g,%.8g\n", row.iteration, row.d_loss,
                          row.g_loss, row.fake_score);
            csv += buf;
        }
        write_file_atomic(out_ / gan_rel("gan_trace.csv"), csv);
        for (const char* name : {"generator.ckpt", "generator.ckpt.json",
                                 "discriminator.ckpt", "discriminator.ckpt.json",
                                 "gan_trace.csv"}) {
            record_file(gan_rel(name), stage, cfg_hash, seed, inputs);
        }
        std::cout << "[stage] " << stage << " (" << disc_mode_name(mode) << ") done\n";
    }

    // ---- attack stages -----------------------------------------------------

    IdentityLossSpec build_loss_spec(const std::string& variant, const Classifier& target,
                                     const Dataset& pub,
                                     const std::vector<Classifier>& aug_models,
                                     std::vector<const Classifier*>& aug_ptrs) {
        aug_ptrs.clear();
        for (const auto& m : aug_models) aug_ptrs.push_back(&m);
        int preg_n = std::min(cfg_.attack.preg_n, pub.n());
        auto preg_mode = cfg_.attack.preg_mode == "fixed" ? PenultimateStats::Mode::kFixed
                                                          : PenultimateStats::Mode::kSampled;
        if (variant == "baseline") return IdentityLossSpec::ce();
        if (variant == "lom") {
            auto stats = estimate_preg(target, pub, preg_n, stage_seed("preg"), preg_mode);
            auto spec = IdentityLossSpec::logit(cfg_.attack.lambda_reg, std::move(stats));
            spec.loss_scale = cfg_.attack.loss_scale;
            return spec;
        }
        if (variant == "ma") {
            auto spec = IdentityLossSpec::aug(IdentityLossSpec::Kind::kCe, aug_ptrs);
            spec.loss_scale = cfg_.attack.loss_scale;
            return spec;
        }
        if (variant == "lomma") {
            auto stats = estimate_preg(target, pub, preg_n, stage_seed("preg"), preg_mode);
            auto spec = IdentityLossSpec::lomma(cfg_.attack.lambda_reg, std::move(stats), aug_ptrs);
            spec.loss_scale = cfg_.attack.loss_scale;
            return spec;
        }
        throw std::runtime_error("unknown attack variant: " + variant);
    }

    void invert_stage(const std::string& variant) {
        const std::string stage = "invert";
        require_artifact(stage, "models/target.ckpt");
        require_artifact(stage, gan_rel("generator.ckpt"));
        require_artifact(stage, gan_rel("discriminator.ckpt"));
        bool needs_aug = variant == "ma" || variant == "lomma";
        if (needs_aug) {
            for (std::size_t i = 0; i < cfg_.aug.archs.size(); ++i) {
                require_artifact(stage, "models/aug" + std::to_string(i) + ".ckpt");
            }
        }

        std::uint64_t seed = stage_seed("invert." + variant);
        std::string cfg_hash =
            hash_hex(cfg_.subtree_hash("attack") ^ fnv1a64(variant) ^ seed);
        std::map<std::string, std::string> inputs{
            {"models/target.ckpt", manifest_.file_hash("models/target.ckpt")},
            {gan_rel("generator.ckpt"), manifest_.file_hash(gan_rel("generator.ckpt"))},
            {gan_rel("discriminator.ckpt"), manifest_.file_hash(gan_rel("discriminator.ckpt"))}};
        if (needs_aug) {
            for (std::size_t i = 0; i < cfg_.aug.archs.size(); ++i) {
                std::string rel = "models/aug" + std::to_string(i) + ".ckpt";
                inputs[rel] = manifest_.file_hash(rel);
            }
        }
        std::string recons_rel = attack_rel(variant, "recons.bin");
        if (manifest_.fresh(recons_rel, cfg_hash, inputs)) {
            std::cout << "[cached] " << stage << " " << variant << "\n";
            return;
        }

        auto [priv, pub] = ensure_data();
        Classifier target = load_classifier(out_ / "models" / "target.ckpt");
        Generator gen = load_generator(out_ / gan_rel("generator.ckpt"));
        Discriminator disc = load_discriminator(out_ / gan_rel("discriminator.ckpt"));
        std::vector<Classifier> aug_models;
        if (needs_aug) {
            for (std::size_t i = 0; i < cfg_.aug.archs.size(); ++i) {
                aug_models.push_back(
                    load_classifier(out_ / "models" / ("aug" + std::to_string(i) + ".ckpt")));
            }
        }
        std::vector<const Classifier*> aug_ptrs;
        IdentityLossSpec spec = build_loss_spec(variant, target, pub, aug_models, aug_ptrs);

        std::vector<int> classes = cfg_.attack.classes;
        if (classes.empty()) {
            classes.resize(static_cast<std::size_t>(target.n_classes));
            for (int k = 0; k < target.n_classes; ++k) classes[static_cast<std::size_t>(k)] = k;
        }

        InversionConfig icfg;
        icfg.iterations = cfg_.attack.iterations;
        icfg.optim = OptimConfig{OptimKind::kSgdMomentum, cfg_.attack.lr, cfg_.attack.momentum};
        icfg.lambda_prior = cfg_.attack.lambda_prior;
        icfg.clip_z = cfg_.attack.clip_z;
        icfg.restarts = cfg_.attack.restarts;
        icfg.n_candidates = cfg_.attack.n_candidates;
        icfg.gaussian_samples = cfg_.attack.gaussian_samples;

        bool gmi = cfg_.attack.mode == "gmi";
        std::vector<InversionResult> results(classes.size());
        for (std::size_t ci = 0; ci < classes.size(); ++ci) {
            int k = classes[ci];
            icfg.seed = Rng(seed).split(static_cast<std::uint64_t>(k)).next_u64();
            Rng init_rng(icfg.seed);
            LatentDistribution dist0 =
                gmi ? LatentDistribution::point([&] {
                          Tensor z = init_rng.normal_tensor({icfg.n_candidates, gen.n_z});
                          if (icfg.clip_z)
                              for (auto& v : z.data) v = std::clamp(v, -1.0, 1.0);
                          return z;
                      }())
                    : LatentDistribution::gaussian(Tensor({gen.n_z}), Tensor({gen.n_z}));
            results[ci] = invert(target, gen, disc, spec, dist0, icfg, k);
            std::cout << "[stage] invert " << variant << " class " << k << ": identity loss "
                      << results[ci].final_identity_loss << "\n";
        }

        // assemble the artifact: all restart groups for evaluation, best
        // restart for representative reconstructions
        ReconArtifact art;
        int per = icfg.n_candidates;
        int total = static_cast<int>(classes.size()) * icfg.restarts * per;
        const Shape img_shape{total, priv.channels(), priv.height(), priv.width()};
        art.batch.images = Tensor(img_shape);
        std::int64_t img_sz = priv.image_size();
        std::int64_t cursor = 0;
        for (std::size_t ci = 0; ci < classes.size(); ++ci) {
            for (int r = 0; r < icfg.restarts; ++r) {
                const Tensor& recs = results[ci].restart_reconstructions[static_cast<std::size_t>(r)];
                for (int i = 0; i < per; ++i) {
                    for (std::int64_t p = 0; p < img_sz; ++p) {
                        art.batch.images[cursor * img_sz + p] =
                            recs[static_cast<std::int64_t>(i) * img_sz + p];
                    }
                    art.batch.targets.push_back(classes[ci]);
                    art.batch.groups.push_back(r);
                    ++cursor;
                }
            }
        }
        art.best = Tensor({static_cast<int>(classes.size()) * per, priv.channels(), priv.height(),
                           priv.width()});
        cursor = 0;
        for (std::size_t ci = 0; ci < classes.size(); ++ci) {
            const Tensor& recs = results[ci].reconstructions;
            for (int i = 0; i < per; ++i) {
                for (std::int64_t p = 0; p < img_sz; ++p)
                    art.best[cursor * img_sz + p] = recs[static_cast<std::int64_t>(i) * img_sz + p];
                art.best_targets.push_back(classes[ci]);
                ++cursor;
            }
        }

        fs::create_directories(out_ / "attack" / cfg_.attack.mode / variant / "pgm");
        save_recons(art, out_ / recons_rel);
        record_file(recons_rel, stage, cfg_hash, seed, inputs);
        record_file(recons_rel + ".json", stage, cfg_hash, seed, inputs);
        for (std::size_t ci = 0; ci < classes.size(); ++ci) {
            std::string trace_rel =
                attack_rel(variant, "trace_class" + std::to_string(classes[ci]) + ".csv");
            write_trace_csv(out_ / trace_rel, results[ci].trace,
                            1 + (needs_aug ? aug_models.size() : 0));
            record_file(trace_rel, stage, cfg_hash, seed, inputs);
        }
        for (int i = 0; i < art.best.shape[0]; ++i) {
            Tensor img({priv.channels(), priv.height(), priv.width()});
            for (std::int64_t p = 0; p < img_sz; ++p) img[p] = art.best[i * img_sz + p];
            std::string rel = attack_rel(variant, "pgm/class" +
                              std::to_string(art.best_targets[static_cast<std::size_t>(i)]) + "_" +
                              std::to_string(i % per) + ".pgm");
            write_pgm(out_ / rel, img);
            record_file(rel, stage, cfg_hash, seed, inputs);
        }
    }

    AttackReport evaluate_stage(const std::string& variant) {
        const std::string stage = "evaluate";
        std::string recons_rel = attack_rel(variant, "recons.bin");
        require_artifact(stage, recons_rel);
        require_artifact(stage, "models/eval.ckpt");

        auto [priv, pub] = ensure_data();
        ReconArtifact art = load_recons(out_ / recons_rel);
        Classifier eval_model = load_classifier(out_ / "models" / "eval.ckpt");

        AttackReport rep;
        rep.variant = variant;
        rep.mode = cfg_.attack.mode;
        rep.top1 = attack_accuracy(art.batch, eval_model, 1);
        rep.top5 = attack_accuracy(art.batch, eval_model, std::min(5, eval_model.n_classes));

        std::map<int, std::vector<std::int64_t>> by_class;
        for (std::size_t i = 0; i < art.batch.targets.size(); ++i)
            by_class[art.batch.targets[i]].push_back(static_cast<std::int64_t>(i));
        double knn_total = 0.0;
        Tensor logits = detail::eval_logits(eval_model, art.batch.images);
        for (const auto& [cls, idx] : by_class) {
            int hits = 0;
            Tensor imgs({static_cast<int>(idx.size()), priv.channels(), priv.height(), priv.width()});
            std::int64_t img_sz = priv.image_size();
            for (std::size_t i = 0; i < idx.size(); ++i) {
                hits += detail::in_topk(logits, static_cast<int>(idx[i]), cls, 1);
                for (std::int64_t p = 0; p < img_sz; ++p)
                    imgs[static_cast<std::int64_t>(i) * img_sz + p] =
                        art.batch.images[idx[i] * img_sz + p];
            }
            rep.per_class_top1[cls] = 100.0 * hits / static_cast<double>(idx.size());
            double kd = knn_dist(imgs, priv, eval_model, cls);
            rep.knn_dist_per_class[cls] = kd;
            knn_total += kd;
        }
        rep.knn_dist_mean = knn_total / static_cast<double>(by_class.size());
        rep.config_hash = hash_hex(cfg_.subtree_hash(""));
        rep.seeds = {cfg_.seed, stage_seed("invert." + variant)};
        rep.check();

        std::string rel = "reports/report_" + cfg_.attack.mode + "_" + variant + ".json";
        std::string cfg_hash = hash_hex(cfg_.subtree_hash("attack") ^ fnv1a64(variant));
        std::map<std::string, std::string> inputs{
            {recons_rel, manifest_.file_hash(recons_rel)},
            {"models/eval.ckpt", manifest_.file_hash("models/eval.ckpt")}};
        write_file_atomic(out_ / rel, rep.to_json().dump(2) + "\n");
        record_file(rel, stage, cfg_hash, stage_seed(stage), inputs);
        std::cout << "[stage] evaluate " << variant << ": top-1 " << rep.top1.mean << " +/- "
                  << rep.top1.stddev << ", knn " << rep.knn_dist_mean << "\n";
        return rep;
    }

    OverfitResult overfit_stage(const std::string& variant) {
        const std::string stage = "analyze-overfit";
        std::string recons_rel = attack_rel(variant, "recons.bin");
        require_artifact(stage, recons_rel);
        require_artifact(stage, "models/target.ckpt");
        require_artifact(stage, "models/eval.ckpt");

        ReconArtifact art = load_recons(out_ / recons_rel);
        Classifier target = load_classifier(out_ / "models" / "target.ckpt");
        Classifier eval_model = load_classifier(out_ / "models" / "eval.ckpt");
        OverfitResult res = overfit_analysis(art.batch.images, art.batch.targets, target,
                                             eval_model, cfg_.overfit_tau_low, cfg_.overfit_tau_high);

        std::string csv_rel = "overfit/" + cfg_.attack.mode + "/" + variant + ".csv";
        std::string json_rel = "overfit/" + cfg_.attack.mode + "/" + variant + ".json";
        write_overfit_csv(out_ / csv_rel, res);
        nlohmann::json j;
        j["tau_low"] = res.tau_low;
        j["tau_high"] = res.tau_high;
        j["fraction_low_high"] = res.fraction_low_high;
        write_file_atomic(out_ / json_rel, j.dump(2) + "\n");

        std::string cfg_hash = hash_hex(cfg_.subtree_hash("overfit") ^ fnv1a64(variant));
        std::map<std::string, std::string> inputs{
            {recons_rel, manifest_.file_hash(recons_rel)},
            {"models/target.ckpt", manifest_.file_hash("models/target.ckpt")},
            {"models/eval.ckpt", manifest_.file_hash("models/eval.ckpt")}};
        record_file(csv_rel, stage, cfg_hash, stage_seed(stage), inputs);
        record_file(json_rel, stage, cfg_hash, stage_seed(stage), inputs);
        std::cout << "[stage] analyze-overfit " << variant << ": fraction "
                  << res.fraction_low_high << "\n";
        return res;
    }

    ExperimentConfig cfg_;
    fs::path out_;
    Manifest manifest_;
};

}  // namespace milab
