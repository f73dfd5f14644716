#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <limits>
#include <string>
#include <vector>

#include "milab/gan.hpp"
#include "milab/models.hpp"
#include "milab/nn.hpp"
#include "milab/optim.hpp"
#include "milab/tape.hpp"

namespace milab {

// ---------------------------------------------------------------------------
// Latent distributions over generator codes.
// ---------------------------------------------------------------------------

struct LatentDistribution {
    enum class Kind { kPointEstimate, kDiagonalGaussian };

    Kind kind = Kind::kPointEstimate;
    Tensor z0;         // [n_candidates, n_z] for the point estimate
    Tensor mu;         // [n_z] for the diagonal Gaussian
    Tensor log_sigma;  // [n_z]

    static LatentDistribution point(Tensor rows) {
        if (rows.shape.size() != 2) {
            throw std::runtime_error("LatentDistribution::point: rows must be [n,n_z], got " +
                                     shape_str(rows.shape));
        }
        if (!rows.all_finite()) {
            throw std::runtime_error("LatentDistribution::point: rows must be finite");
        }
        LatentDistribution d;
        d.kind = Kind::kPointEstimate;
        d.z0 = std::move(rows);
        return d;
    }

    static LatentDistribution gaussian(Tensor mu, Tensor log_sigma) {
        if (mu.shape != log_sigma.shape || mu.shape.size() != 1) {
            throw std::runtime_error("LatentDistribution::gaussian: mu/log_sigma must be equal rank-1");
        }
        LatentDistribution d;
        d.kind = Kind::kDiagonalGaussian;
        d.mu = std::move(mu);
        d.log_sigma = std::move(log_sigma);
        return d;
    }

    int latent_dim() const {
        return kind == Kind::kPointEstimate ? z0.shape[1] : mu.shape[0];
    }
};

/// Draws [n, n_z] latent codes. Point estimates return their rows (cycled);
/// the Gaussian samples by reparameterization. clip clamps every element to
/// [-1, 1] after sampling.
inline Tensor sample_latent(const LatentDistribution& dist, int n, bool clip, Rng& rng) {
    if (n <= 0) throw std::runtime_error("sample_latent: n must be positive");
    int n_z = dist.latent_dim();
    Tensor out({n, n_z});
    if (dist.kind == LatentDistribution::Kind::kPointEstimate) {
        int rows = dist.z0.shape[0];
        for (int i = 0; i < n; ++i)
            for (int j = 0; j < n_z; ++j)
                out[static_cast<std::int64_t>(i) * n_z + j] =
                    dist.z0[static_cast<std::int64_t>(i % rows) * n_z + j];
    } else {
        for (int i = 0; i < n; ++i)
            for (int j = 0; j < n_z; ++j)
                out[static_cast<std::int64_t>(i) * n_z + j] =
                    dist.mu[j] + std::exp(dist.log_sigma[j]) * rng.normal();
    }
    if (clip) {
        for (auto& v : out.data) v = std::clamp(v, -1.0, 1.0);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Feature anchor statistics (the regularization target of the logit loss),
// estimated from public data through the attacked model.
// ---------------------------------------------------------------------------

struct PenultimateStats {
    enum class Mode { kFixed, kSampled };

    Tensor mu;     // [d+1], bias slot is exactly 1
    Tensor sigma;  // [d+1] componentwise std, population convention; bias slot 0
    Mode mode = Mode::kSampled;
    int n_public_used = 0;

    /// The anchor realization for one inversion run.
    Tensor draw(Rng& rng) const {
        if (mode == Mode::kFixed) return mu;
        Tensor out(mu.shape);
        for (std::int64_t j = 0; j < mu.size(); ++j)
            out[j] = sigma[j] == 0.0 ? mu[j] : mu[j] + sigma[j] * rng.normal();
        return out;
    }
};

/// Mean and population variance of the bias-augmented penultimate vector over
/// N public images chosen by seeded permutation.
inline PenultimateStats estimate_preg(const Classifier& model, const Dataset& public_set, int n,
                                      std::uint64_t seed,
                                      PenultimateStats::Mode mode = PenultimateStats::Mode::kSampled) {
    if (n < 2) throw std::runtime_error("estimate_preg: need at least 2 samples");
    if (n > public_set.n()) {
        throw std::runtime_error("estimate_preg: requested " + std::to_string(n) +
                                 " samples but public set has " + std::to_string(public_set.n()));
    }
    Rng rng = Rng(seed).split(0x9e6);
    auto perm = rng.permutation(public_set.n());
    perm.resize(static_cast<std::size_t>(n));

    int d1 = model.feat_dim + 1;
    Tensor sum({d1});
    Tensor sumsq({d1});
    const int chunk = 256;
    for (int start = 0; start < n; start += chunk) {
        int stop = std::min(n, start + chunk);
        std::vector<std::int64_t> idx(perm.begin() + start, perm.begin() + stop);
        Tape t;
        TapeCtx ctx(t);
        Var pt = model.penultimate(ctx, t.constant(public_set.batch(idx)));
        const Tensor& v = t.val(pt);
        for (int i = 0; i < stop - start; ++i) {
            for (int j = 0; j < d1; ++j) {
                double x = v[static_cast<std::int64_t>(i) * d1 + j];
                sum[j] += x;
                sumsq[j] += x * x;
            }
        }
    }
    PenultimateStats stats;
    stats.mode = mode;
    stats.n_public_used = n;
    stats.mu = Tensor({d1});
    stats.sigma = Tensor({d1});
    for (int j = 0; j < d1; ++j) {
        double m = sum[j] / n;
        double var = sumsq[j] / n - m * m;
        stats.mu[j] = m;
        stats.sigma[j] = std::sqrt(std::max(var, 0.0));
    }
    // bias slot is constant by construction; pin it against roundoff
    stats.mu[d1 - 1] = 1.0;
    stats.sigma[d1 - 1] = 0.0;
    return stats;
}

// ---------------------------------------------------------------------------
// Identity losses.
// ---------------------------------------------------------------------------

struct IdentityLossSpec {
    enum class Kind { kCe, kLogit, kAug, kLomma };

    Kind kind = Kind::kCe;

    // logit / lomma
    double lambda_reg = 1.0;
    PenultimateStats preg;  // anchor for the target model

    // aug / lomma
    Kind aug_base = Kind::kCe;  // base loss for kAug (kCe or kLogit)
    double gamma_t = 1.0;
    double gamma_aug = 0.0;
    std::vector<const Classifier*> aug_models;
    std::vector<PenultimateStats> aug_pregs;  // per-model anchors when aug_base == kLogit

    /// Global objective scale; the published 100x coefficient convention is
    /// this same objective scaled by loss_scale = 100.
    double loss_scale = 1.0;

    static IdentityLossSpec ce() { return IdentityLossSpec{}; }

    static IdentityLossSpec logit(double lambda_reg, PenultimateStats preg) {
        IdentityLossSpec s;
        s.kind = Kind::kLogit;
        s.lambda_reg = lambda_reg;
        s.preg = std::move(preg);
        return s;
    }

    static IdentityLossSpec aug(Kind base, std::vector<const Classifier*> models) {
        IdentityLossSpec s;
        s.kind = Kind::kAug;
        s.aug_base = base;
        s.aug_models = std::move(models);
        double n1 = static_cast<double>(s.aug_models.size()) + 1.0;
        s.gamma_t = 1.0 / n1;
        s.gamma_aug = s.aug_models.empty() ? 0.0 : 1.0 / n1;
        return s;
    }

    static IdentityLossSpec lomma(double lambda_reg, PenultimateStats preg,
                                  std::vector<const Classifier*> models) {
        IdentityLossSpec s;
        s.kind = Kind::kLomma;
        s.lambda_reg = lambda_reg;
        s.preg = std::move(preg);
        s.aug_models = std::move(models);
        double n1 = static_cast<double>(s.aug_models.size()) + 1.0;
        s.gamma_t = 1.0 / n1;
        s.gamma_aug = s.aug_models.empty() ? 0.0 : 1.0 / n1;
        return s;
    }

    void validate() const {
        if (lambda_reg < 0.0) throw std::runtime_error("IdentityLossSpec: lambda_reg must be >= 0");
        if (gamma_t <= 0.0) throw std::runtime_error("IdentityLossSpec: gamma_t must be > 0");
        if (gamma_aug < 0.0) throw std::runtime_error("IdentityLossSpec: gamma_aug must be >= 0");
        if ((kind == Kind::kAug || kind == Kind::kLomma) && aug_models.empty() && gamma_aug > 0.0) {
            throw std::runtime_error("IdentityLossSpec: no augmented models but gamma_aug > 0");
        }
        if (kind == Kind::kAug && aug_base == Kind::kLogit &&
            aug_pregs.size() != aug_models.size()) {
            throw std::runtime_error("IdentityLossSpec: logit-base augmentation needs one anchor "
                                     "per augmented model");
        }
    }
};

/// Per-run anchor realizations; drawn once per inversion run so the objective
/// stays stationary within a run.
struct AnchorDraws {
    Tensor target;               // [d+1]
    std::vector<Tensor> aug;     // per augmented model, logit-base augmentation only

    static AnchorDraws from(const IdentityLossSpec& spec, Rng& rng) {
        AnchorDraws a;
        bool target_needs = spec.kind == IdentityLossSpec::Kind::kLogit ||
                            spec.kind == IdentityLossSpec::Kind::kLomma ||
                            (spec.kind == IdentityLossSpec::Kind::kAug &&
                             spec.aug_base == IdentityLossSpec::Kind::kLogit);
        if (target_needs) a.target = spec.preg.draw(rng);
        if (spec.kind == IdentityLossSpec::Kind::kAug &&
            spec.aug_base == IdentityLossSpec::Kind::kLogit) {
            for (const auto& p : spec.aug_pregs) a.aug.push_back(p.draw(rng));
        }
        return a;
    }
};

namespace detail {

/// Batch-mean cross-entropy toward class k: -log softmax_k(W . ptilde).
inline Var ce_identity_term(TapeCtx& ctx, const Classifier& model, Var images, int k) {
    Tape& t = ctx.tape();
    Var logits = model.logits(ctx, images);
    int n = t.shape(logits)[0];
    std::vector<int> labels(static_cast<std::size_t>(n), k);
    return cross_entropy(t, logits, labels);
}

/// Batch-mean of -ptilde^T w_k.
inline Var logit_dot_term(TapeCtx& ctx, const Classifier& model, Var ptilde, int k) {
    Tape& t = ctx.tape();
    int n = t.shape(ptilde)[0];
    Var wk = t.select_row(ctx.var(model.head), k);
    Var dots = t.rowsum(t.mul(ptilde, t.rowbroadcast(wk, n)));
    return t.mul_scalar(t.mean(dots), -1.0);
}

/// Batch-mean of ||ptilde - anchor||^2.
inline Var anchor_reg_term(TapeCtx& ctx, Var ptilde, const Tensor& anchor) {
    Tape& t = ctx.tape();
    int n = t.shape(ptilde)[0];
    if (t.shape(ptilde)[1] != anchor.shape[0]) {
        throw std::runtime_error("identity loss: anchor dim " + shape_str(anchor.shape) +
                                 " does not match penultimate dim " +
                                 std::to_string(t.shape(ptilde)[1]));
    }
    Var diff = t.sub(ptilde, t.rowbroadcast(t.constant(anchor), n));
    return t.mean(t.rowsum(t.mul(diff, diff)));
}

/// Full logit loss for one model: -ptilde^T w_k + lambda ||ptilde - anchor||^2.
inline Var logit_identity_term(TapeCtx& ctx, const Classifier& model, Var images, int k,
                               double lambda_reg, const Tensor& anchor) {
    Var pt = model.penultimate(ctx, images);
    Var loss = logit_dot_term(ctx, model, pt, k);
    if (lambda_reg != 0.0) {
        loss = ctx.tape().add(loss, ctx.tape().mul_scalar(anchor_reg_term(ctx, pt, anchor), lambda_reg));
    }
    return loss;
}

}  // namespace detail

/// Batch-mean identity loss for the chosen variant. `breakdown`, when given,
/// receives the unweighted per-model base terms, target first.
inline Var identity_loss(TapeCtx& ctx, const IdentityLossSpec& spec, const Classifier& target,
                         Var images, int k, const AnchorDraws& anchors,
                         std::vector<double>* breakdown = nullptr) {
    spec.validate();
    if (k < 0 || k >= target.n_classes) {
        throw std::runtime_error("identity_loss: class " + std::to_string(k) + " out of range");
    }
    for (const Classifier* m : spec.aug_models) {
        if (m->n_classes != target.n_classes) {
            throw std::runtime_error("identity_loss: augmented model has " +
                                     std::to_string(m->n_classes) + " classes, target has " +
                                     std::to_string(target.n_classes));
        }
    }
    Tape& t = ctx.tape();
    if (breakdown) breakdown->clear();

    auto note = [&](Var v) {
        if (breakdown) breakdown->push_back(t.val(v).item());
        return v;
    };

    Var total{};
    switch (spec.kind) {
        case IdentityLossSpec::Kind::kCe: {
            total = note(detail::ce_identity_term(ctx, target, images, k));
            break;
        }
        case IdentityLossSpec::Kind::kLogit: {
            total = note(
                detail::logit_identity_term(ctx, target, images, k, spec.lambda_reg, anchors.target));
            break;
        }
        case IdentityLossSpec::Kind::kAug: {
            auto base = [&](const Classifier& m, const Tensor& anchor) {
                if (spec.aug_base == IdentityLossSpec::Kind::kCe)
                    return detail::ce_identity_term(ctx, m, images, k);
                return detail::logit_identity_term(ctx, m, images, k, spec.lambda_reg, anchor);
            };
            total = t.mul_scalar(note(base(target, anchors.target)), spec.gamma_t);
            for (std::size_t i = 0; i < spec.aug_models.size(); ++i) {
                const Tensor& anchor =
                    spec.aug_base == IdentityLossSpec::Kind::kLogit ? anchors.aug[i] : anchors.target;
                total = t.add(total, t.mul_scalar(note(base(*spec.aug_models[i], anchor)),
                                                  spec.gamma_aug));
            }
            break;
        }
        case IdentityLossSpec::Kind::kLomma: {
            // logit terms from every model, one regularizer on target features
            Var pt = target.penultimate(ctx, images);
            total = t.mul_scalar(note(detail::logit_dot_term(ctx, target, pt, k)), spec.gamma_t);
            for (const Classifier* m : spec.aug_models) {
                Var pa = m->penultimate(ctx, images);
                total = t.add(total,
                              t.mul_scalar(note(detail::logit_dot_term(ctx, *m, pa, k)), spec.gamma_aug));
            }
            if (spec.lambda_reg != 0.0) {
                total = t.add(total, t.mul_scalar(detail::anchor_reg_term(ctx, pt, anchors.target),
                                                  spec.lambda_reg));
            }
            break;
        }
    }
    if (spec.loss_scale != 1.0) total = t.mul_scalar(total, spec.loss_scale);
    return total;
}

// ---------------------------------------------------------------------------
// The inversion optimization over latent distributions.
// ---------------------------------------------------------------------------

struct InversionConfig {
    int iterations = 2400;
    OptimConfig optim{OptimKind::kSgdMomentum, 0.02, 0.9};
    double lambda_prior = 100.0;
    bool clip_z = true;
    int restarts = 5;
    int n_candidates = 5;      // point-estimate rows and final sample count
    int gaussian_samples = 5;  // reparameterized draws per iteration
    std::uint64_t seed = 0;

    void validate() const {
        if (iterations < 0) throw std::runtime_error("InversionConfig: iterations must be >= 0");
        if (lambda_prior < 0.0) throw std::runtime_error("InversionConfig: lambda_prior must be >= 0");
        if (restarts < 1 || n_candidates < 1 || gaussian_samples < 1) {
            throw std::runtime_error("InversionConfig: counts must be positive");
        }
    }
};

struct InversionTraceRow {
    int iteration = 0;
    double identity_loss = 0.0;
    double prior_loss = 0.0;
    std::vector<double> per_model;  // unweighted base terms, target first
};

struct InversionResult {
    Tensor reconstructions;  // [n_candidates, C, H, W], best restart
    Tensor final_latents;    // [n_candidates, n_z]
    std::vector<InversionTraceRow> trace;  // best restart
    std::vector<Tensor> restart_reconstructions;  // all restarts, for grouped evaluation
    std::vector<double> restart_final_losses;
    int best_restart = 0;
    double final_identity_loss = 0.0;
};

inline void write_trace_csv(const std::filesystem::path& path,
                            const std::vector<InversionTraceRow>& trace, std::size_t n_models) {
    std::string out = "iteration,identity_loss,prior_loss";
    for (std::size_t m = 0; m < n_models; ++m) out += ",model" + std::to_string(m) + "_loss";
    out += "\n";
    char buf[64];
    for (const auto& row : trace) {
        out += std::to_string(row.iteration);
        auto put = [&](double v) {
            std::snprintf(buf, sizeof buf, ",%.17g", v);
            out += buf;
        };
        put(row.identity_loss);
        put(row.prior_loss);
        for (double v : row.per_model) put(v);
        out += "\n";
    }
    write_file_atomic(path, out);
}

namespace detail {

struct RestartOutcome {
    Tensor recons;
    Tensor latents;
    std::vector<InversionTraceRow> trace;
    double final_identity_loss = 0.0;
};

inline RestartOutcome run_one_restart(const Classifier& target, const Generator& gen,
                                      const Discriminator& disc, const IdentityLossSpec& spec,
                                      const LatentDistribution& dist0, const InversionConfig& cfg,
                                      int k, int restart, Rng rng) {
    const int n_z = dist0.latent_dim();
    AnchorDraws anchors = AnchorDraws::from(spec, rng);

    bool point = dist0.kind == LatentDistribution::Kind::kPointEstimate;
    Tensor z0, mu, log_sigma;
    int n_final = cfg.n_candidates;
    if (point) {
        // restart 0 starts from the given rows; later restarts re-draw
        n_final = dist0.z0.shape[0];
        if (restart == 0) {
            z0 = dist0.z0;
        } else {
            z0 = rng.normal_tensor({n_final, n_z});
            if (cfg.clip_z)
                for (auto& v : z0.data) v = std::clamp(v, -1.0, 1.0);
        }
        z0.requires_grad = true;
    } else {
        mu = dist0.mu;
        log_sigma = dist0.log_sigma;
        mu.requires_grad = log_sigma.requires_grad = true;
    }

    std::vector<Tensor*> opt_params =
        point ? std::vector<Tensor*>{&z0} : std::vector<Tensor*>{&mu, &log_sigma};
    Optimizer opt(cfg.optim);

    auto gen_params = const_cast<Generator&>(gen).parameters();
    auto disc_params = const_cast<Discriminator&>(disc).parameters();
    auto freeze_models = [&](TapeCtx& ctx) {
        ctx.freeze(gen_params);
        ctx.freeze(disc_params);
        ctx.freeze(const_cast<Classifier&>(target).parameters());
        for (const Classifier* m : spec.aug_models) ctx.freeze(const_cast<Classifier*>(m)->parameters());
    };

    RestartOutcome out;
    int n_batch = point ? n_final : cfg.gaussian_samples;
    for (int iter = 0; iter < cfg.iterations; ++iter) {
        Tape t;
        TapeCtx ctx(t);
        freeze_models(ctx);

        Var z{};
        if (point) {
            z = ctx.var(z0);
        } else {
            Tensor eps = rng.normal_tensor({n_batch, n_z});
            Var sig = t.exp(ctx.var(log_sigma));
            z = t.add(t.rowbroadcast(ctx.var(mu), n_batch),
                      t.mul(t.rowbroadcast(sig, n_batch), t.constant(eps)));
        }
        Var images = gen.forward(ctx, z);
        std::vector<double> breakdown;
        Var id = identity_loss(ctx, spec, target, images, k, anchors, &breakdown);
        Var prior = t.mean(prior_loss(ctx, disc, images));
        Var total = t.add(id, t.mul_scalar(prior, cfg.lambda_prior));

        double id_v = t.val(id).item();
        double prior_v = t.val(prior).item();
        if (!std::isfinite(t.val(total).item())) {
            std::string parts;
            for (double b : breakdown) parts += " " + std::to_string(b);
            throw std::runtime_error("invert: non-finite loss at iteration " +
                                     std::to_string(iter) + " (identity " + std::to_string(id_v) +
                                     ", prior " + std::to_string(prior_v) + ", per-model" + parts +
                                     ")");
        }
        out.trace.push_back({iter, id_v, prior_v, breakdown});

        auto grads = ctx.grad_tensors(total, opt_params);
        opt.step(opt_params, grads);
    }

    // final reconstructions; the learned-distribution draw is clipped here
    LatentDistribution learned =
        point ? LatentDistribution::point(z0) : LatentDistribution::gaussian(mu, log_sigma);
    out.latents = sample_latent(learned, n_final, cfg.clip_z, rng);
    out.recons = gen.generate(out.latents);

    Tape t;
    TapeCtx ctx(t);
    freeze_models(ctx);
    Var id = identity_loss(ctx, spec, target, t.constant(out.recons), k, anchors, nullptr);
    out.final_identity_loss = t.val(id).item();
    return out;
}

}  // namespace detail

/// Gradient descent on the latent distribution minimizing
/// E[identity + lambda_prior * prior]; with several restarts the one with the
/// lowest final identity loss under the attack objective wins (the attacker
/// never sees the evaluation model).
inline InversionResult invert(const Classifier& target, const Generator& gen,
                              const Discriminator& disc, const IdentityLossSpec& spec,
                              const LatentDistribution& dist0, const InversionConfig& cfg, int k) {
    cfg.validate();
    spec.validate();
    if (dist0.latent_dim() != gen.n_z) {
        throw std::runtime_error("invert: latent dim " + std::to_string(dist0.latent_dim()) +
                                 " does not match generator n_z " + std::to_string(gen.n_z));
    }

    Rng base(cfg.seed);
    InversionResult res;
    res.final_identity_loss = std::numeric_limits<double>::infinity();
    for (int r = 0; r < cfg.restarts; ++r) {
        auto outcome = detail::run_one_restart(target, gen, disc, spec, dist0, cfg, k, r,
                                               base.split(static_cast<std::uint64_t>(r) + 1));
        res.restart_final_losses.push_back(outcome.final_identity_loss);
        res.restart_reconstructions.push_back(outcome.recons);
        if (outcome.final_identity_loss < res.final_identity_loss) {
            res.final_identity_loss = outcome.final_identity_loss;
            res.best_restart = r;
            res.reconstructions = std::move(outcome.recons);
            res.final_latents = std::move(outcome.latents);
            res.trace = std::move(outcome.trace);
        }
    }
    return res;
}

}  // namespace milab
