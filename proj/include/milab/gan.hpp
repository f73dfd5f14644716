#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "milab/dataset.hpp"
#include "milab/models.hpp"
#include "milab/nn.hpp"
#include "milab/optim.hpp"
#include "milab/tape.hpp"

namespace milab {

/// Deconvolutional generator: z -> fc -> two stride-2 upsampling stages -> 3x3
/// conv -> tanh. Output pixels are in [-1,1] by construction; spatial dims
/// must be divisible by 4.
struct Generator {
    int n_z = 64;
    int out_ch = 1, out_h = 28, out_w = 28;
    int base = 8;

    Linear fc;
    ConvTranspose2d up1, up2;
    Conv2d to_image;

    static Generator make(int n_z, int out_ch, int out_h, int out_w, int base, std::uint64_t seed) {
        if (out_h % 4 != 0 || out_w % 4 != 0) {
            throw std::runtime_error("Generator: image dims must be divisible by 4, got " +
                                     std::to_string(out_h) + "x" + std::to_string(out_w));
        }
        Generator g;
        g.n_z = n_z;
        g.out_ch = out_ch;
        g.out_h = out_h;
        g.out_w = out_w;
        g.base = base;
        Rng rng = Rng(seed).split(0x6e9);
        g.fc = Linear(n_z, 4 * base * (out_h / 4) * (out_w / 4), rng);
        g.up1 = ConvTranspose2d(4 * base, 2 * base, 4, 2, 1, rng);
        g.up2 = ConvTranspose2d(2 * base, base, 4, 2, 1, rng);
        g.to_image = Conv2d(base, out_ch, 3, 1, 1, rng);
        return g;
    }

    Var forward(TapeCtx& ctx, Var z) const {
        Tape& t = ctx.tape();
        const Shape zs = t.shape(z);
        if (zs.size() != 2 || zs[1] != n_z) {
            throw std::runtime_error("Generator: latent batch must be [N," + std::to_string(n_z) +
                                     "], got " + shape_str(zs));
        }
        Var h = t.relu(fc.forward(ctx, z));
        h = t.reshape(h, {zs[0], 4 * base, out_h / 4, out_w / 4});
        h = t.relu(up1.forward(ctx, h));
        h = t.relu(up2.forward(ctx, h));
        return t.tanh(to_image.forward(ctx, h));
    }

    /// Tape-free convenience for producing final images.
    Tensor generate(const Tensor& z) const {
        Tape t;
        TapeCtx ctx(t);
        return t.val(forward(ctx, t.constant(z)));
    }

    std::vector<Tensor*> parameters() {
        std::vector<Tensor*> out;
        fc.params(out);
        up1.params(out);
        up2.params(out);
        to_image.params(out);
        return out;
    }

    std::vector<const Tensor*> parameters() const {
        auto& self = const_cast<Generator&>(*this);
        std::vector<const Tensor*> out;
        for (Tensor* p : self.parameters()) out.push_back(p);
        return out;
    }
};

enum class DiscMode { kCritic, kProbabilistic };

inline const char* disc_mode_name(DiscMode m) {
    return m == DiscMode::kCritic ? "critic" : "probabilistic";
}

inline DiscMode disc_mode_from(const std::string& s) {
    if (s == "critic") return DiscMode::kCritic;
    if (s == "probabilistic") return DiscMode::kProbabilistic;
    throw std::runtime_error("unknown discriminator mode: " + s);
}

/// Strided-conv discriminator producing one raw score per image. In critic
/// mode the score is used as-is; in probabilistic mode it passes through a
/// sigmoid clamped to [eps, 1-eps].
struct Discriminator {
    static constexpr double kProbEps = 1e-6;

    DiscMode mode = DiscMode::kProbabilistic;
    int in_ch = 1, in_h = 28, in_w = 28;
    int base = 8;

    Conv2d c1, c2;
    Linear out;

    static Discriminator make(DiscMode mode, int in_ch, int in_h, int in_w, int base,
                              std::uint64_t seed) {
        if (in_h % 4 != 0 || in_w % 4 != 0) {
            throw std::runtime_error("Discriminator: image dims must be divisible by 4");
        }
        Discriminator d;
        d.mode = mode;
        d.in_ch = in_ch;
        d.in_h = in_h;
        d.in_w = in_w;
        d.base = base;
        Rng rng = Rng(seed).split(0xd15c);
        d.c1 = Conv2d(in_ch, 2 * base, 4, 2, 1, rng);
        d.c2 = Conv2d(2 * base, 4 * base, 4, 2, 1, rng);
        d.out = Linear(4 * base * (in_h / 4) * (in_w / 4), 1, rng);
        return d;
    }

    /// Raw scores, one per image: [N].
    Var score(TapeCtx& ctx, Var images) const {
        Tape& t = ctx.tape();
        const Shape xs = t.shape(images);
        if (xs.size() != 4 || xs[1] != in_ch || xs[2] != in_h || xs[3] != in_w) {
            throw std::runtime_error("Discriminator: input " + shape_str(xs) +
                                     " does not match [N," + std::to_string(in_ch) + "," +
                                     std::to_string(in_h) + "," + std::to_string(in_w) + "]");
        }
        Var h = t.leaky_relu(c1.forward(ctx, images), 0.2);
        h = t.leaky_relu(c2.forward(ctx, h), 0.2);
        const Shape hs = t.shape(h);
        Var flat = t.reshape(h, {hs[0], hs[1] * hs[2] * hs[3]});
        Var s = out.forward(ctx, flat);       // [N,1]
        return t.reshape(s, {hs[0]});
    }

    /// Clamped probability that an image is real; probabilistic mode only.
    Var prob(TapeCtx& ctx, Var images) const {
        Tape& t = ctx.tape();
        return t.clamp(t.sigmoid(score(ctx, images)), kProbEps, 1.0 - kProbEps);
    }

    std::vector<Tensor*> parameters() {
        std::vector<Tensor*> out_p;
        c1.params(out_p);
        c2.params(out_p);
        out.params(out_p);
        return out_p;
    }

    std::vector<const Tensor*> parameters() const {
        auto& self = const_cast<Discriminator&>(*this);
        std::vector<const Tensor*> out_p;
        for (Tensor* p : self.parameters()) out_p.push_back(p);
        return out_p;
    }
};

/// Per-image realism loss of Table-style priors: -D(x) for a critic,
/// -log D(x) for a probabilistic discriminator. Returns [N].
inline Var prior_loss(TapeCtx& ctx, const Discriminator& disc, Var images) {
    Tape& t = ctx.tape();
    if (disc.mode == DiscMode::kCritic) {
        return t.neg(disc.score(ctx, images));
    }
    return t.neg(t.log(disc.prob(ctx, images)));
}

/// Scalar convenience for a single image (or for the batch mean).
inline double prior_loss_value(const Discriminator& disc, const Tensor& images) {
    Tape t;
    TapeCtx ctx(t);
    Var per = prior_loss(ctx, disc, t.constant(images));
    return t.val(t.mean(per)).item();
}

// ---------------------------------------------------------------------------
// GAN training.
// ---------------------------------------------------------------------------

struct GanHyper {
    int iterations = 1000;   // generator steps
    int batch = 64;
    int base = 8;            // channel width scale for G and D
    int critic_steps = 5;    // critic mode only
    double gp_coeff = 10.0;  // critic mode only
    OptimConfig g_optim{OptimKind::kAdam, 2e-4, 0.9, 0.5, 0.999};
    OptimConfig d_optim{OptimKind::kAdam, 2e-4, 0.9, 0.5, 0.999};
};

struct GanTraceRow {
    int iteration = 0;
    double d_loss = 0.0;
    double g_loss = 0.0;
    double fake_score = 0.0;  // mean raw score (critic) or mean prob (probabilistic)
};

struct GanResult {
    Generator gen;
    Discriminator disc;
    std::vector<GanTraceRow> trace;
};

namespace detail {

inline Tensor sample_batch(const Dataset& ds, int batch, Rng& rng) {
    std::vector<std::int64_t> idx(static_cast<std::size_t>(batch));
    for (auto& i : idx) i = rng.uniform_int(ds.n());
    return ds.batch(idx);
}

inline Tensor latent_batch(int batch, int n_z, Rng& rng) {
    return rng.normal_tensor({batch, n_z});
}

/// Mean squared-norm penalty (||grad|| - 1)^2 over per-sample input gradients.
inline Var gradient_penalty(TapeCtx& ctx, const Discriminator& disc, Var xhat) {
    Tape& t = ctx.tape();
    const Shape xs = t.shape(xhat);
    Var score_sum = t.sum(disc.score(ctx, xhat));
    auto grads = t.gradients(score_sum, std::vector<Var>{xhat});
    Var g2 = t.mul(grads[0], grads[0]);
    Var per_sample = t.rowsum(t.reshape(g2, {xs[0], xs[1] * xs[2] * xs[3]}));
    Var norm = t.sqrt(per_sample);
    Var dev = t.add_scalar(norm, -1.0);
    return t.mean(t.mul(dev, dev));
}

}  // namespace detail

/// Trains the generator/discriminator pair on public images. Critic mode uses
/// the Wasserstein objective with gradient penalty; probabilistic mode the
/// standard non-saturating loss.
inline GanResult train_gan(const Dataset& public_set, int n_z, DiscMode mode,
                           const GanHyper& hyper, std::uint64_t seed) {
    if (public_set.n() == 0) throw std::runtime_error("train_gan: public dataset is empty");
    GanResult res;
    res.gen = Generator::make(n_z, public_set.channels(), public_set.height(), public_set.width(),
                              hyper.base, seed);
    res.disc = Discriminator::make(mode, public_set.channels(), public_set.height(),
                                   public_set.width(), hyper.base, seed + 1);
    for (Tensor* p : res.gen.parameters()) p->requires_grad = true;
    for (Tensor* p : res.disc.parameters()) p->requires_grad = true;

    Rng rng = Rng(seed).split(0x9a0);
    Optimizer g_opt(hyper.g_optim);
    Optimizer d_opt(hyper.d_optim);
    auto g_params = res.gen.parameters();
    auto d_params = res.disc.parameters();

    int d_steps = mode == DiscMode::kCritic ? hyper.critic_steps : 1;
    for (int iter = 0; iter < hyper.iterations; ++iter) {
        double d_loss_val = 0.0;
        for (int s = 0; s < d_steps; ++s) {
            Tensor real = detail::sample_batch(public_set, hyper.batch, rng);
            Tensor fake = res.gen.generate(detail::latent_batch(hyper.batch, n_z, rng));

            Tape t;
            TapeCtx ctx(t);
            Var real_v = t.constant(real);
            Var fake_v = t.constant(fake);
            Var loss{};
            if (mode == DiscMode::kCritic) {
                Var w_gap = t.sub(t.mean(res.disc.score(ctx, fake_v)),
                                  t.mean(res.disc.score(ctx, real_v)));
                Tensor xhat(real.shape);
                for (int i = 0; i < hyper.batch; ++i) {
                    double e = rng.uniform();
                    std::int64_t sz = public_set.image_size();
                    for (std::int64_t j = 0; j < sz; ++j) {
                        std::int64_t off = static_cast<std::int64_t>(i) * sz + j;
                        xhat[off] = e * real[off] + (1.0 - e) * fake[off];
                    }
                }
                xhat.requires_grad = true;
                Var xhat_v = t.leaf(xhat);
                Var gp = detail::gradient_penalty(ctx, res.disc, xhat_v);
                loss = t.add(w_gap, t.mul_scalar(gp, hyper.gp_coeff));
            } else {
                Var s_real = res.disc.score(ctx, real_v);
                Var s_fake = res.disc.score(ctx, fake_v);
                loss = t.add(t.mean(t.softplus(t.neg(s_real))), t.mean(t.softplus(s_fake)));
            }
            d_loss_val = t.val(loss).item();
            if (!std::isfinite(d_loss_val)) {
                throw std::runtime_error("train_gan: discriminator loss diverged at iteration " +
                                         std::to_string(iter));
            }
            auto grads = ctx.grad_tensors(loss, d_params);
            d_opt.step(d_params, grads);
        }

        // generator step; the discriminator is frozen so its weights take no grads
        Tensor z = detail::latent_batch(hyper.batch, n_z, rng);
        Tape t;
        TapeCtx ctx(t);
        ctx.freeze(d_params);
        Var fake = res.gen.forward(ctx, t.constant(z));
        Var s_fake = res.disc.score(ctx, fake);
        Var g_loss = mode == DiscMode::kCritic ? t.neg(t.mean(s_fake))
                                               : t.mean(t.softplus(t.neg(s_fake)));
        double g_loss_val = t.val(g_loss).item();
        if (!std::isfinite(g_loss_val)) {
            throw std::runtime_error("train_gan: generator loss diverged at iteration " +
                                     std::to_string(iter));
        }
        // only the generator updates here; discriminator grads are not applied
        auto grads = ctx.grad_tensors(g_loss, g_params);
        g_opt.step(g_params, grads);

        double fake_stat = t.val(t.mean(s_fake)).item();
        if (mode == DiscMode::kProbabilistic) {
            fake_stat = 1.0 / (1.0 + std::exp(-fake_stat));
        }
        res.trace.push_back({iter, d_loss_val, g_loss_val, fake_stat});
    }
    return res;
}

// ---------------------------------------------------------------------------
// Checkpoints, same format as the model zoo.
// ---------------------------------------------------------------------------

inline void save_generator(const Generator& g, const std::filesystem::path& path,
                           std::uint64_t seed) {
    auto blob = detail::params_blob(g.parameters());
    nlohmann::json hdr;
    hdr["kind"] = "generator";
    hdr["n_z"] = g.n_z;
    hdr["output"] = {g.out_ch, g.out_h, g.out_w};
    hdr["base"] = g.base;
    hdr["seed"] = seed;
    hdr["content_hash"] = hash_hex(fnv1a64(blob));
    write_file_atomic(path, blob);
    write_file_atomic(path.string() + ".json", hdr.dump(2) + "\n");
}

inline Generator load_generator(const std::filesystem::path& path) {
    auto blob = read_file_bytes(path);
    auto hdr = nlohmann::json::parse(read_file_bytes(path.string() + ".json"));
    if (hdr.at("kind").get<std::string>() != "generator") {
        throw std::runtime_error("checkpoint at " + path.string() + " is not a generator");
    }
    if (hash_hex(fnv1a64(blob)) != hdr.at("content_hash").get<std::string>()) {
        throw std::runtime_error("checkpoint hash mismatch for " + path.string());
    }
    auto out = hdr.at("output").get<std::vector<int>>();
    Generator g = Generator::make(hdr.at("n_z").get<int>(), out[0], out[1], out[2],
                                  hdr.at("base").get<int>(), hdr.at("seed").get<std::uint64_t>());
    detail::load_params_blob(blob, g.parameters());
    return g;
}

inline void save_discriminator(const Discriminator& d, const std::filesystem::path& path,
                               std::uint64_t seed) {
    auto blob = detail::params_blob(d.parameters());
    nlohmann::json hdr;
    hdr["kind"] = "discriminator";
    hdr["mode"] = disc_mode_name(d.mode);
    hdr["input"] = {d.in_ch, d.in_h, d.in_w};
    hdr["base"] = d.base;
    hdr["seed"] = seed;
    hdr["content_hash"] = hash_hex(fnv1a64(blob));
    write_file_atomic(path, blob);
    write_file_atomic(path.string() + ".json", hdr.dump(2) + "\n");
}

inline Discriminator load_discriminator(const std::filesystem::path& path) {
    auto blob = read_file_bytes(path);
    auto hdr = nlohmann::json::parse(read_file_bytes(path.string() + ".json"));
    if (hdr.at("kind").get<std::string>() != "discriminator") {
        throw std::runtime_error("checkpoint at " + path.string() + " is not a discriminator");
    }
    if (hash_hex(fnv1a64(blob)) != hdr.at("content_hash").get<std::string>()) {
        throw std::runtime_error("checkpoint hash mismatch for " + path.string());
    }
    auto in = hdr.at("input").get<std::vector<int>>();
    Discriminator d = Discriminator::make(disc_mode_from(hdr.at("mode").get<std::string>()), in[0],
                                          in[1], in[2], hdr.at("base").get<int>(),
                                          hdr.at("seed").get<std::uint64_t>());
    detail::load_params_blob(blob, d.parameters());
    return d;
}

}  // namespace milab
