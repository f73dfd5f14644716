#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "milab/dataset.hpp"
#include "milab/nn.hpp"
#include "milab/optim.hpp"
#include "milab/serialize.hpp"
#include "milab/tape.hpp"

namespace milab {

/// Conv-depth classifier family. "ConvK" is K blocks of 3x3 conv + relu, with
/// 2x2 max pooling after a block while the spatial size is still >= 4, channel
/// widths 16*2^i capped at 128, then one linear layer to the penultimate
/// feature vector p (dim 128, relu) and a final head whose weight matrix
/// carries the bias folded in as its last column, so logits == W . [p; 1]
/// holds exactly.
struct Classifier {
    std::string arch_tag;
    int n_classes = 0;
    int in_ch = 0, in_h = 0, in_w = 0;
    int feat_dim = 128;

    std::vector<Conv2d> blocks;
    std::vector<int> pool_after;  // 1 if a 2x2 pool follows block i
    Linear feat;
    Tensor head;  // [n_classes, feat_dim + 1]

    static int conv_depth(const std::string& arch_tag) {
        if (arch_tag.rfind("Conv", 0) != 0 || arch_tag.size() < 5) {
            throw std::runtime_error("unknown classifier architecture: " + arch_tag);
        }
        int k = std::stoi(arch_tag.substr(4));
        if (k < 1 || k > 8) {
            throw std::runtime_error("classifier depth out of range: " + arch_tag);
        }
        return k;
    }

    static Classifier make(const std::string& arch_tag, int n_classes, int in_ch, int in_h,
                           int in_w, std::uint64_t seed) {
        int depth = conv_depth(arch_tag);
        Classifier c;
        c.arch_tag = arch_tag;
        c.n_classes = n_classes;
        c.in_ch = in_ch;
        c.in_h = in_h;
        c.in_w = in_w;
        Rng rng = Rng(seed).split(0x10de1);
        int ch = in_ch, h = in_h, w = in_w;
        for (int i = 0; i < depth; ++i) {
            int out_ch = std::min(16 << i, 128);
            c.blocks.emplace_back(ch, out_ch, 3, 1, 1, rng);
            ch = out_ch;
            bool pool = h >= 4 && w >= 4;
            c.pool_after.push_back(pool ? 1 : 0);
            if (pool) {
                h /= 2;
                w /= 2;
            }
        }
        c.feat = Linear(ch * h * w, c.feat_dim, rng);
        double std = std::sqrt(2.0 / static_cast<double>(c.feat_dim + 1));
        c.head = rng.normal_tensor({n_classes, c.feat_dim + 1}, 0.0, std);
        c.head.requires_grad = true;
        return c;
    }

    Var features(TapeCtx& ctx, Var x) const {
        Tape& t = ctx.tape();
        const Shape in = t.shape(x);
        if (in.size() != 4 || in[1] != in_ch || in[2] != in_h || in[3] != in_w) {
            throw std::runtime_error("Classifier: input " + shape_str(in) + " does not match [N," +
                                     std::to_string(in_ch) + "," + std::to_string(in_h) + "," +
                                     std::to_string(in_w) + "]");
        }
        Var h = x;
        for (std::size_t i = 0; i < blocks.size(); ++i) {
            h = t.relu(blocks[i].forward(ctx, h));
            if (pool_after[i]) h = t.maxpool2d(h, 2);
        }
        const Shape hs = t.shape(h);
        Var flat = t.reshape(h, {hs[0], hs[1] * hs[2] * hs[3]});
        return t.relu(feat.forward(ctx, flat));
    }

    /// p with a constant 1 appended: the bias-augmented penultimate vector.
    Var penultimate(TapeCtx& ctx, Var x) const {
        return ctx.tape().append_one_col(features(ctx, x));
    }

    Var logits_from_penultimate(TapeCtx& ctx, Var ptilde) const {
        Tape& t = ctx.tape();
        return t.matmul(ptilde, t.transpose(ctx.var(head)));
    }

    Var logits(TapeCtx& ctx, Var x) const {
        return logits_from_penultimate(ctx, penultimate(ctx, x));
    }

    std::vector<Tensor*> parameters() {
        std::vector<Tensor*> out;
        for (auto& blk : blocks) blk.params(out);
        feat.params(out);
        out.push_back(&head);
        return out;
    }

    std::vector<const Tensor*> parameters() const {
        std::vector<const Tensor*> out;
        for (const auto& blk : blocks) {
            out.push_back(&blk.w);
            out.push_back(&blk.b);
        }
        out.push_back(&feat.w);
        out.push_back(&feat.b);
        out.push_back(&head);
        return out;
    }

    /// Plain (tape-free) logits, computed in bounded chunks so evaluation over
    /// a whole dataset does not materialize hundreds of megabytes at once.
    Tensor eval_logits(const Tensor& images, int chunk = 256) const {
        int n = images.shape[0];
        Tensor out({n, n_classes});
        std::int64_t img_sz = static_cast<std::int64_t>(in_ch) * in_h * in_w;
        for (int start = 0; start < n; start += chunk) {
            int stop = std::min(n, start + chunk);
            Tensor part({stop - start, in_ch, in_h, in_w});
            std::copy(images.data.begin() + start * img_sz, images.data.begin() + stop * img_sz,
                      part.data.begin());
            Tape t;
            TapeCtx ctx(t);
            const Tensor& v = t.val(logits(ctx, t.constant(part)));
            std::copy(v.data.begin(), v.data.end(),
                      out.data.begin() + static_cast<std::int64_t>(start) * n_classes);
        }
        return out;
    }

    /// Penultimate features p (without the bias slot), chunked like eval_logits.
    Tensor eval_features(const Tensor& images, int chunk = 256) const {
        int n = images.shape[0];
        Tensor out({n, feat_dim});
        std::int64_t img_sz = static_cast<std::int64_t>(in_ch) * in_h * in_w;
        for (int start = 0; start < n; start += chunk) {
            int stop = std::min(n, start + chunk);
            Tensor part({stop - start, in_ch, in_h, in_w});
            std::copy(images.data.begin() + start * img_sz, images.data.begin() + stop * img_sz,
                      part.data.begin());
            Tape t;
            TapeCtx ctx(t);
            const Tensor& v = t.val(features(ctx, t.constant(part)));
            std::copy(v.data.begin(), v.data.end(),
                      out.data.begin() + static_cast<std::int64_t>(start) * feat_dim);
        }
        return out;
    }

    /// Plain class predictions for evaluation passes.
    std::vector<int> predict(const Tensor& images) const {
        Tensor v = eval_logits(images);
        std::vector<int> out(static_cast<std::size_t>(v.shape[0]));
        for (int i = 0; i < v.shape[0]; ++i) {
            int best = 0;
            for (int k = 1; k < v.shape[1]; ++k) {
                if (v[static_cast<std::int64_t>(i) * v.shape[1] + k] >
                    v[static_cast<std::int64_t>(i) * v.shape[1] + best])
                    best = k;
            }
            out[static_cast<std::size_t>(i)] = best;
        }
        return out;
    }
};

inline double accuracy_on(const Classifier& model, const Dataset& ds,
                          const std::vector<std::int64_t>& idx) {
    if (idx.empty()) return 0.0;
    auto preds = model.predict(ds.batch(idx));
    int correct = 0;
    for (std::size_t i = 0; i < idx.size(); ++i)
        correct += preds[i] == ds.labels[static_cast<std::size_t>(idx[i])];
    return static_cast<double>(correct) / static_cast<double>(idx.size());
}

// ---------------------------------------------------------------------------
// Supervised training.
// ---------------------------------------------------------------------------

struct TrainHyper {
    int epochs = 5;
    int batch = 64;
    OptimConfig optim{OptimKind::kAdam, 1e-3};
    double holdout_frac = 0.1;
};

struct TrainResult {
    Classifier model;
    std::vector<double> train_acc;    // per epoch
    std::vector<double> holdout_acc;  // per epoch
    double final_holdout_acc = 0.0;
};

inline TrainResult train_classifier(const Dataset& ds, const std::string& arch_tag,
                                    const TrainHyper& hyper, std::uint64_t seed) {
    int k = static_cast<int>(ds.class_set.size());
    for (std::size_t i = 0; i < ds.class_set.size(); ++i) {
        if (ds.class_set[i] != static_cast<int>(i)) {
            throw std::runtime_error("train_classifier: labels must be dense 0.." +
                                     std::to_string(k - 1));
        }
    }
    TrainResult res;
    res.model = Classifier::make(arch_tag, k, ds.channels(), ds.height(), ds.width(), seed);

    Rng rng = Rng(seed).split(0x7121);
    auto perm = rng.permutation(ds.n());
    std::int64_t n_hold = std::max<std::int64_t>(1, static_cast<std::int64_t>(hyper.holdout_frac * ds.n()));
    std::vector<std::int64_t> hold(perm.end() - n_hold, perm.end());
    std::vector<std::int64_t> train(perm.begin(), perm.end() - n_hold);

    Optimizer opt(hyper.optim);
    auto params = res.model.parameters();
    long iter = 0;
    for (int epoch = 0; epoch < hyper.epochs; ++epoch) {
        auto order = rng.permutation(static_cast<std::int64_t>(train.size()));
        for (std::size_t start = 0; start < train.size(); start += static_cast<std::size_t>(hyper.batch)) {
            std::size_t stop = std::min(train.size(), start + static_cast<std::size_t>(hyper.batch));
            std::vector<std::int64_t> idx;
            std::vector<int> labels;
            for (std::size_t i = start; i < stop; ++i) {
                idx.push_back(train[static_cast<std::size_t>(order[i])]);
                labels.push_back(ds.labels[static_cast<std::size_t>(idx.back())]);
            }
            Tape t;
            TapeCtx ctx(t);
            Var logits = res.model.logits(ctx, t.constant(ds.batch(idx)));
            Var loss = cross_entropy(t, logits, labels);
            double lv = t.val(loss).item();
            if (!std::isfinite(lv)) {
                throw std::runtime_error("train_classifier: loss diverged at iteration " +
                                         std::to_string(iter));
            }
            auto grads = ctx.grad_tensors(loss, params);
            opt.step(params, grads);
            ++iter;
        }
        res.train_acc.push_back(accuracy_on(res.model, ds, train));
        res.holdout_acc.push_back(accuracy_on(res.model, ds, hold));
    }
    res.final_holdout_acc = res.holdout_acc.empty() ? 0.0 : res.holdout_acc.back();
    return res;
}

// ---------------------------------------------------------------------------
// Knowledge distillation of augmented models on public data. The student
// matches the teacher's output distribution; no ground-truth-label term exists
// because the public classes are disjoint from the teacher's label space.
// ---------------------------------------------------------------------------

struct DistillConfig {
    double temperature = 1.0;
    int epochs = 5;
    int batch = 64;
    OptimConfig optim{OptimKind::kAdam, 1e-3};
    double holdout_frac = 0.1;
};

struct DistillResult {
    Classifier student;
    double initial_kl = 0.0;  // on the public holdout, at seeded initialization
    double final_kl = 0.0;
    std::vector<double> epoch_kl;
};

namespace detail {

inline Tensor teacher_probs(const Classifier& teacher, const Tensor& images, double temperature) {
    Tape t;
    TapeCtx ctx(t);
    Var lg = teacher.logits(ctx, t.constant(images));
    Var probs = t.softmax_rows(t.mul_scalar(lg, 1.0 / temperature));
    return t.val(probs);
}

inline double mean_kl(const Classifier& teacher, const Classifier& student, const Tensor& images,
                      double temperature) {
    Tensor tl = teacher.eval_logits(images);
    Tensor sl = student.eval_logits(images);
    int n = tl.shape[0], k = tl.shape[1];
    auto log_softmax_row = [&](const Tensor& m, int i, std::vector<double>& out) {
        double mx = -1e300;
        for (int j = 0; j < k; ++j)
            mx = std::max(mx, m[static_cast<std::int64_t>(i) * k + j] / temperature);
        double z = 0.0;
        for (int j = 0; j < k; ++j)
            z += std::exp(m[static_cast<std::int64_t>(i) * k + j] / temperature - mx);
        double lz = mx + std::log(z);
        for (int j = 0; j < k; ++j)
            out[static_cast<std::size_t>(j)] = m[static_cast<std::int64_t>(i) * k + j] / temperature - lz;
    };
    std::vector<double> lt(static_cast<std::size_t>(k)), ls(static_cast<std::size_t>(k));
    double total = 0.0;
    for (int i = 0; i < n; ++i) {
        log_softmax_row(tl, i, lt);
        log_softmax_row(sl, i, ls);
        for (int j = 0; j < k; ++j)
            total += std::exp(lt[static_cast<std::size_t>(j)]) *
                     (lt[static_cast<std::size_t>(j)] - ls[static_cast<std::size_t>(j)]);
    }
    return total / n;
}

}  // namespace detail

inline DistillResult distill(const Classifier& teacher, const Dataset& public_set,
                             const std::string& student_arch, const DistillConfig& cfg,
                             std::uint64_t seed) {
    if (cfg.temperature <= 0.0) throw std::runtime_error("distill: temperature must be positive");
    if (public_set.n() == 0) throw std::runtime_error("distill: public dataset is empty");

    DistillResult res;
    res.student = Classifier::make(student_arch, teacher.n_classes, public_set.channels(),
                                   public_set.height(), public_set.width(), seed);
    if (res.student.n_classes != teacher.n_classes) {
        throw std::runtime_error("distill: student/teacher output dimensions differ");
    }

    Rng rng = Rng(seed).split(0xd157);
    auto perm = rng.permutation(public_set.n());
    std::int64_t n_hold = std::max<std::int64_t>(1, static_cast<std::int64_t>(cfg.holdout_frac * public_set.n()));
    std::vector<std::int64_t> hold(perm.end() - n_hold, perm.end());
    std::vector<std::int64_t> train(perm.begin(), perm.end() - n_hold);
    Tensor hold_images = public_set.batch(hold);

    res.initial_kl = detail::mean_kl(teacher, res.student, hold_images, cfg.temperature);

    Optimizer opt(cfg.optim);
    auto params = res.student.parameters();
    long iter = 0;
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        auto order = rng.permutation(static_cast<std::int64_t>(train.size()));
        for (std::size_t start = 0; start < train.size(); start += static_cast<std::size_t>(cfg.batch)) {
            std::size_t stop = std::min(train.size(), start + static_cast<std::size_t>(cfg.batch));
            std::vector<std::int64_t> idx;
            for (std::size_t i = start; i < stop; ++i) idx.push_back(train[static_cast<std::size_t>(order[i])]);
            Tensor images = public_set.batch(idx);
            Tensor tp = detail::teacher_probs(teacher, images, cfg.temperature);
            Tape t;
            TapeCtx ctx(t);
            Var sl = t.mul_scalar(res.student.logits(ctx, t.constant(images)), 1.0 / cfg.temperature);
            Var loss = kl_to_teacher(t, tp, sl);
            double lv = t.val(loss).item();
            if (!std::isfinite(lv)) {
                throw std::runtime_error("distill: loss diverged at iteration " + std::to_string(iter));
            }
            auto grads = ctx.grad_tensors(loss, params);
            opt.step(params, grads);
            ++iter;
        }
        res.epoch_kl.push_back(detail::mean_kl(teacher, res.student, hold_images, cfg.temperature));
    }
    res.final_kl = res.epoch_kl.empty() ? res.initial_kl : res.epoch_kl.back();
    return res;
}

// ---------------------------------------------------------------------------
// Checkpoints: JSON header + flat little-endian f64 parameter blob.
// ---------------------------------------------------------------------------

namespace detail {

inline std::vector<unsigned char> params_blob(const std::vector<const Tensor*>& params) {
    std::vector<double> flat;
    for (const Tensor* p : params) flat.insert(flat.end(), p->data.begin(), p->data.end());
    return doubles_to_bytes(flat);
}

inline void load_params_blob(const std::vector<unsigned char>& blob, std::vector<Tensor*> params) {
    auto flat = doubles_from_bytes(blob);
    std::size_t off = 0;
    for (Tensor* p : params) {
        if (off + p->data.size() > flat.size()) {
            throw std::runtime_error("checkpoint blob too short");
        }
        std::copy(flat.begin() + static_cast<std::ptrdiff_t>(off),
                  flat.begin() + static_cast<std::ptrdiff_t>(off + p->data.size()), p->data.begin());
        off += p->data.size();
    }
    if (off != flat.size()) throw std::runtime_error("checkpoint blob has trailing data");
}

}  // namespace detail

inline void save_classifier(const Classifier& model, const std::filesystem::path& path,
                            std::uint64_t seed) {
    auto blob = detail::params_blob(model.parameters());
    nlohmann::json hdr;
    hdr["kind"] = "classifier";
    hdr["arch_tag"] = model.arch_tag;
    hdr["n_classes"] = model.n_classes;
    hdr["input"] = {model.in_ch, model.in_h, model.in_w};
    hdr["feat_dim"] = model.feat_dim;
    hdr["seed"] = seed;
    hdr["content_hash"] = hash_hex(fnv1a64(blob));
    write_file_atomic(path, blob);
    write_file_atomic(path.string() + ".json", hdr.dump(2) + "\n");
}

inline Classifier load_classifier(const std::filesystem::path& path) {
    auto blob = read_file_bytes(path);
    auto hdr = nlohmann::json::parse(read_file_bytes(path.string() + ".json"));
    if (hdr.at("kind").get<std::string>() != "classifier") {
        throw std::runtime_error("checkpoint at " + path.string() + " is not a classifier");
    }
    std::string want = hdr.at("content_hash").get<std::string>();
    std::string got = hash_hex(fnv1a64(blob));
    if (want != got) {
        throw std::runtime_error("checkpoint hash mismatch for " + path.string() + ": " + got +
                                 " vs recorded " + want);
    }
    auto input = hdr.at("input").get<std::vector<int>>();
    Classifier model = Classifier::make(hdr.at("arch_tag").get<std::string>(),
                                        hdr.at("n_classes").get<int>(), input[0], input[1],
                                        input[2], hdr.at("seed").get<std::uint64_t>());
    detail::load_params_blob(blob, model.parameters());
    return model;
}

}  // namespace milab
