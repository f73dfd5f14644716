#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "milab/dataset.hpp"
#include "milab/models.hpp"
#include "milab/nn.hpp"
#include "milab/serialize.hpp"
#include "milab/tape.hpp"

namespace milab {

/// Reconstructions under evaluation: images plus, per image, the attacked
/// class and the restart group it came from.
struct ReconBatch {
    Tensor images;             // [N, C, H, W]
    std::vector<int> targets;  // attacked class per image
    std::vector<int> groups;   // restart group per image

    int n() const { return images.shape.empty() ? 0 : images.shape[0]; }

    void validate() const {
        if (images.shape.size() != 4 || targets.size() != static_cast<std::size_t>(n()) ||
            groups.size() != static_cast<std::size_t>(n())) {
            throw std::runtime_error("ReconBatch: inconsistent images/targets/groups");
        }
    }
};

struct AccuracyStat {
    double mean = 0.0;  // percent
    double stddev = 0.0;
    std::vector<double> per_group;  // percent per restart group
};

namespace detail {

inline Tensor eval_logits(const Classifier& model, const Tensor& images) {
    return model.eval_logits(images);
}

inline Tensor eval_features(const Classifier& model, const Tensor& images) {
    return model.eval_features(images);
}

inline bool in_topk(const Tensor& logits, int row, int target, int topk) {
    int k = logits.shape[1];
    double lt = logits[static_cast<std::int64_t>(row) * k + target];
    int greater = 0;
    for (int j = 0; j < k; ++j) {
        if (logits[static_cast<std::int64_t>(row) * k + j] > lt) ++greater;
    }
    return greater < topk;
}

}  // namespace detail

/// Fraction (percent) of reconstructions whose attacked class is within the
/// evaluation model's top-k prediction; the spread is the population std over
/// restart groups.
inline AccuracyStat attack_accuracy(const ReconBatch& recons, const Classifier& eval_model,
                                    int topk) {
    recons.validate();
    if (recons.n() == 0) throw std::runtime_error("attack_accuracy: empty input");
    Tensor logits = detail::eval_logits(eval_model, recons.images);

    std::map<int, std::pair<int, int>> by_group;  // group -> (hits, total)
    for (int i = 0; i < recons.n(); ++i) {
        auto& slot = by_group[recons.groups[static_cast<std::size_t>(i)]];
        slot.first += detail::in_topk(logits, i, recons.targets[static_cast<std::size_t>(i)], topk);
        slot.second += 1;
    }
    AccuracyStat stat;
    for (const auto& [group, hits] : by_group) {
        stat.per_group.push_back(100.0 * hits.first / hits.second);
    }
    for (double g : stat.per_group) stat.mean += g;
    stat.mean /= static_cast<double>(stat.per_group.size());
    double var = 0.0;
    for (double g : stat.per_group) var += (g - stat.mean) * (g - stat.mean);
    stat.stddev = std::sqrt(var / static_cast<double>(stat.per_group.size()));
    return stat;
}

/// Mean over reconstructions of the shortest L2 distance, in the evaluation
/// model's penultimate feature space, to the private samples of class k.
inline double knn_dist(const Tensor& recon_images, const Dataset& private_set,
                       const Classifier& eval_model, int k) {
    auto idx = private_set.indices_of_class(k);
    if (idx.empty()) {
        throw std::runtime_error("knn_dist: class " + std::to_string(k) +
                                 " absent from private set");
    }
    if (recon_images.shape.empty() || recon_images.shape[0] == 0) {
        throw std::runtime_error("knn_dist: empty reconstruction batch");
    }
    Tensor rf = detail::eval_features(eval_model, recon_images);
    Tensor pf = detail::eval_features(eval_model, private_set.batch(idx));
    int d = rf.shape[1];
    double total = 0.0;
    for (int i = 0; i < rf.shape[0]; ++i) {
        double best = std::numeric_limits<double>::infinity();
        for (int j = 0; j < pf.shape[0]; ++j) {
            double acc = 0.0;
            for (int c = 0; c < d; ++c) {
                double diff = rf[static_cast<std::int64_t>(i) * d + c] -
                              pf[static_cast<std::int64_t>(j) * d + c];
                acc += diff * diff;
            }
            best = std::min(best, acc);
        }
        total += std::sqrt(best);
    }
    return total / static_cast<double>(rf.shape[0]);
}

// ---------------------------------------------------------------------------
// Inversion-overfitting analysis: per-sample identity loss (cross-entropy
// form) under two models; samples cheap under one and expensive under the
// other indicate reconstructions that latched onto model noise.
// ---------------------------------------------------------------------------

struct OverfitResult {
    std::vector<std::pair<double, double>> pairs;  // (loss_a, loss_b) per sample
    double tau_low = 0.0;
    double tau_high = 0.0;
    double fraction_low_high = 0.0;
};

namespace detail {

inline std::vector<double> per_sample_ce(const Classifier& model, const Tensor& images,
                                         const std::vector<int>& targets) {
    Tensor logits = eval_logits(model, images);
    int n = logits.shape[0], k = logits.shape[1];
    std::vector<double> out(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) {
        const double* row = logits.data.data() + static_cast<std::int64_t>(i) * k;
        double mx = row[0];
        for (int j = 1; j < k; ++j) mx = std::max(mx, row[j]);
        double z = 0.0;
        for (int j = 0; j < k; ++j) z += std::exp(row[j] - mx);
        out[static_cast<std::size_t>(i)] =
            -(row[targets[static_cast<std::size_t>(i)]] - mx - std::log(z));
    }
    return out;
}

/// Nearest-rank percentile of a copy of v (q in [0,1]).
inline double percentile(std::vector<double> v, double q) {
    std::sort(v.begin(), v.end());
    std::size_t rank = static_cast<std::size_t>(std::ceil(q * static_cast<double>(v.size())));
    rank = std::max<std::size_t>(rank, 1);
    return v[std::min(rank - 1, v.size() - 1)];
}

}  // namespace detail

/// Thresholds default to the median of loss_a and the 90th percentile of
/// loss_b; the raw pairs are always emitted so any thresholding can be
/// re-derived.
inline OverfitResult overfit_analysis(const Tensor& recon_images, const std::vector<int>& targets,
                                      const Classifier& model_a, const Classifier& model_b,
                                      std::optional<double> tau_low = std::nullopt,
                                      std::optional<double> tau_high = std::nullopt) {
    if (model_a.n_classes != model_b.n_classes) {
        throw std::runtime_error("overfit_analysis: models disagree on class count");
    }
    auto la = detail::per_sample_ce(model_a, recon_images, targets);
    auto lb = detail::per_sample_ce(model_b, recon_images, targets);
    OverfitResult res;
    res.pairs.reserve(la.size());
    for (std::size_t i = 0; i < la.size(); ++i) res.pairs.emplace_back(la[i], lb[i]);
    res.tau_low = tau_low ? *tau_low : detail::percentile(la, 0.5);
    res.tau_high = tau_high ? *tau_high : detail::percentile(lb, 0.9);
    int n_low_high = 0;
    for (const auto& [a, b] : res.pairs) n_low_high += (a <= res.tau_low && b >= res.tau_high);
    res.fraction_low_high = static_cast<double>(n_low_high) / static_cast<double>(res.pairs.size());
    return res;
}

inline void write_overfit_csv(const std::filesystem::path& path, const OverfitResult& res) {
    std::string out = "loss_target_model,loss_other_model\n";
    char buf[80];
    for (const auto& [a, b] : res.pairs) {
        std::snprintf(buf, sizeof buf, "%.17g,%.17g\n", a, b);
        out += buf;
    }
    write_file_atomic(path, out);
}

// ---------------------------------------------------------------------------
// Report record.
// ---------------------------------------------------------------------------

struct AttackReport {
    std::string variant;  // baseline | lom | ma | lomma
    std::string mode;     // gmi | kedmi
    AccuracyStat top1;
    AccuracyStat top5;
    std::map<int, double> per_class_top1;  // percent
    double knn_dist_mean = 0.0;
    std::map<int, double> knn_dist_per_class;
    double overfit_fraction = -1.0;  // -1 when the analysis was not run
    double tau_low = 0.0, tau_high = 0.0;
    std::string config_hash;
    std::vector<std::uint64_t> seeds;

    void check() const {
        auto pct = [](double v) { return v >= 0.0 && v <= 100.0; };
        if (!pct(top1.mean) || !pct(top5.mean)) {
            throw std::runtime_error("AttackReport: accuracy outside [0,100]");
        }
        if (top5.mean + 1e-9 < top1.mean) {
            throw std::runtime_error("AttackReport: top-5 below top-1");
        }
        if (knn_dist_mean < 0.0) throw std::runtime_error("AttackReport: negative KNN distance");
    }

    nlohmann::json to_json() const {
        nlohmann::json j;
        j["variant"] = variant;
        j["mode"] = mode;
        j["top1"] = {{"mean", top1.mean}, {"std", top1.stddev}, {"per_group", top1.per_group}};
        j["top5"] = {{"mean", top5.mean}, {"std", top5.stddev}, {"per_group", top5.per_group}};
        nlohmann::json pc;
        for (const auto& [cls, acc] : per_class_top1) pc[std::to_string(cls)] = acc;
        j["per_class_top1"] = pc;
        j["knn_dist"] = knn_dist_mean;
        nlohmann::json kc;
        for (const auto& [cls, v] : knn_dist_per_class) kc[std::to_string(cls)] = v;
        j["knn_dist_per_class"] = kc;
        j["overfit"] = {{"fraction_low_high", overfit_fraction},
                        {"tau_low", tau_low},
                        {"tau_high", tau_high}};
        j["config_hash"] = config_hash;
        j["seeds"] = seeds;
        return j;
    }
};

// ---------------------------------------------------------------------------
// PGM dump for visual inspection (binary P5, [-1,1] -> [0,255]).
// ---------------------------------------------------------------------------

inline void write_pgm(const std::filesystem::path& path, const Tensor& image) {
    if (image.shape.size() != 3 || image.shape[0] != 1) {
        throw std::runtime_error("write_pgm: expected [1,H,W], got " + shape_str(image.shape));
    }
    int h = image.shape[1], w = image.shape[2];
    std::string header = "P5\n" + std::to_string(w) + " " + std::to_string(h) + "\n255\n";
    std::vector<unsigned char> bytes(header.begin(), header.end());
    for (std::int64_t i = 0; i < static_cast<std::int64_t>(h) * w; ++i) {
        double v = (image[i] + 1.0) / 2.0 * 255.0;
        bytes.push_back(static_cast<unsigned char>(std::clamp(std::lround(v), 0L, 255L)));
    }
    write_file_atomic(path, bytes);
}

}  // namespace milab
