#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "milab/tape.hpp"
#include "milab/tensor.hpp"

namespace milab {

/// Binds externally owned parameter tensors onto one tape, once each, so a net
/// can be applied several times per tape (e.g. a discriminator on real and
/// fake batches) while its parameters stay a single leaf.
class TapeCtx {
  public:
    explicit TapeCtx(Tape& tape) : tape_(&tape) {}

    Tape& tape() { return *tape_; }

    /// Parameters bound after freezing are constants on this tape, so the
    /// backward sweep never descends into them.
    void freeze(std::span<Tensor* const> params) {
        for (const Tensor* p : params) frozen_.insert(p);
    }
    void freeze(const Tensor& param) { frozen_.insert(&param); }

    Var var(const Tensor& param) {
        auto it = bound_.find(&param);
        if (it != bound_.end()) return it->second;
        Var v;
        if (frozen_.count(&param)) {
            v = tape_->constant(param);
        } else {
            v = tape_->leaf(param);
        }
        bound_.emplace(&param, v);
        return v;
    }

    std::vector<Var> vars(std::span<Tensor* const> params) {
        std::vector<Var> out;
        out.reserve(params.size());
        for (Tensor* p : params) out.push_back(var(*p));
        return out;
    }

    /// Gradient tensors for a parameter list, zeros where untouched by loss.
    std::vector<Tensor> grad_tensors(Var loss, std::span<Tensor* const> params) {
        auto ws = vars(params);
        auto gs = tape_->gradients(loss, ws);
        std::vector<Tensor> out;
        out.reserve(gs.size());
        for (Var g : gs) out.push_back(tape_->val(g));
        return out;
    }

  private:
    Tape* tape_;
    std::unordered_map<const Tensor*, Var> bound_;
    std::unordered_set<const Tensor*> frozen_;
};

// ---------------------------------------------------------------------------
// Layers. Parameters are plain tensors with requires_grad set; forward takes a
// TapeCtx so several calls share one binding.
// ---------------------------------------------------------------------------

struct Conv2d {
    Tensor w;  // [co, ci, kh, kw]
    Tensor b;  // [co]
    int stride = 1;
    int pad = 0;

    Conv2d() = default;
    Conv2d(int ci, int co, int k, int stride_, int pad_, Rng& rng) : stride(stride_), pad(pad_) {
        double std = std::sqrt(2.0 / (static_cast<double>(ci) * k * k));
        w = rng.normal_tensor({co, ci, k, k}, 0.0, std);
        b = Tensor({co});
        w.requires_grad = b.requires_grad = true;
    }

    Var forward(TapeCtx& ctx, Var x) const {
        Tape& t = ctx.tape();
        return t.add_chan(t.conv2d(x, ctx.var(w), stride, pad), ctx.var(b));
    }

    void params(std::vector<Tensor*>& out) {
        out.push_back(&w);
        out.push_back(&b);
    }
};

/// Transposed convolution (fractionally strided); weight layout [ci, co, k, k]
/// mirrors the adjoint relationship with Conv2d.
struct ConvTranspose2d {
    Tensor w;  // [ci, co, kh, kw]
    Tensor b;  // [co]
    int stride = 1;
    int pad = 0;

    ConvTranspose2d() = default;
    ConvTranspose2d(int ci, int co, int k, int stride_, int pad_, Rng& rng)
        : stride(stride_), pad(pad_) {
        double std = std::sqrt(2.0 / (static_cast<double>(ci) * k * k));
        w = rng.normal_tensor({ci, co, k, k}, 0.0, std);
        b = Tensor({co});
        w.requires_grad = b.requires_grad = true;
    }

    Var forward(TapeCtx& ctx, Var x) const {
        Tape& t = ctx.tape();
        const Shape& xs = t.shape(x);
        if (xs.size() != 4) throw std::runtime_error("ConvTranspose2d: expected 4-d input");
        int ho = (xs[2] - 1) * stride - 2 * pad + w.shape[2];
        int wo = (xs[3] - 1) * stride - 2 * pad + w.shape[3];
        Shape out_shape{xs[0], w.shape[1], ho, wo};
        Var y = t.conv2d_input_grad(x, ctx.var(w), out_shape, stride, pad);
        return t.add_chan(y, ctx.var(b));
    }

    void params(std::vector<Tensor*>& out) {
        out.push_back(&w);
        out.push_back(&b);
    }
};

struct Linear {
    Tensor w;  // [out, in]
    Tensor b;  // [out]

    Linear() = default;
    Linear(int in, int out, Rng& rng) {
        double std = std::sqrt(2.0 / static_cast<double>(in));
        w = rng.normal_tensor({out, in}, 0.0, std);
        b = Tensor({out});
        w.requires_grad = b.requires_grad = true;
    }

    Var forward(TapeCtx& ctx, Var x) const {
        Tape& t = ctx.tape();
        return t.add_rowvec(t.matmul(x, t.transpose(ctx.var(w))), ctx.var(b));
    }

    void params(std::vector<Tensor*>& out) {
        out.push_back(&w);
        out.push_back(&b);
    }
};

// ---------------------------------------------------------------------------
// Loss builders.
// ---------------------------------------------------------------------------

/// Mean negative log-likelihood of the labelled class: softmax cross-entropy.
inline Var cross_entropy(Tape& t, Var logits, const std::vector<int>& labels) {
    const Shape s = t.shape(logits);
    if (s.size() != 2 || static_cast<std::size_t>(s[0]) != labels.size()) {
        throw std::runtime_error("cross_entropy: logits " + shape_str(s) + " vs " +
                                 std::to_string(labels.size()) + " labels");
    }
    int k = s[1];
    std::vector<std::int64_t> idx(labels.size());
    for (std::size_t i = 0; i < labels.size(); ++i) {
        if (labels[i] < 0 || labels[i] >= k) {
            throw std::runtime_error("cross_entropy: label " + std::to_string(labels[i]) +
                                     " out of range for " + std::to_string(k) + " classes");
        }
        idx[i] = static_cast<std::int64_t>(i) * k + labels[i];
    }
    Var picked = t.take(t.log_softmax_rows(logits), std::move(idx), {s[0]});
    return t.mul_scalar(t.sum(picked), -1.0 / static_cast<double>(s[0]));
}

/// Mean KL(teacher || student) between row-wise distributions given teacher
/// probabilities (constant) and student logits.
inline Var kl_to_teacher(Tape& t, const Tensor& teacher_probs, Var student_logits) {
    const Shape& s = t.shape(student_logits);
    if (teacher_probs.shape != s) {
        throw std::runtime_error("kl_to_teacher: teacher " + shape_str(teacher_probs.shape) +
                                 " vs student " + shape_str(s));
    }
    Tensor teacher_log(teacher_probs.shape);
    for (std::int64_t i = 0; i < teacher_probs.size(); ++i)
        teacher_log[i] = std::log(std::max(teacher_probs[i], 1e-300));
    Var tp = t.constant(teacher_probs);
    Var tl = t.constant(std::move(teacher_log));
    Var sl = t.log_softmax_rows(student_logits);
    Var per_elem = t.mul(tp, t.sub(tl, sl));
    return t.mul_scalar(t.sum(per_elem), 1.0 / static_cast<double>(s[0]));
}

/// Squared L2 distance between two equal-shape vars, summed over all elements.
inline Var squared_distance(Tape& t, Var a, Var b) {
    Var d = t.sub(a, b);
    return t.sum(t.mul(d, d));
}

}  // namespace milab
