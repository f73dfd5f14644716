#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <deque>
#include <functional>
#include <span>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "milab/kernels.hpp"
#include "milab/tensor.hpp"

namespace milab {

class Tape;

/// Handle to a node on a Tape. Cheap to copy; valid for the tape's lifetime.
struct Var {
    Tape* tape = nullptr;
    int idx = -1;
    bool valid() const { return tape != nullptr && idx >= 0; }
};

/// Append-only record of primitive operations. Every operation computes its
/// value eagerly and registers a backward builder that expresses the parent
/// adjoints through tape primitives, so gradients of gradients come out of the
/// same machinery (the tape simply keeps growing during a backward sweep).
/// References returned by val()/shape() remain valid for the tape's lifetime.
class Tape {
  public:
    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    const Tensor& val(Var v) const { return node(v).value; }
    const Shape& shape(Var v) const { return node(v).value.shape; }
    bool needs_grad(Var v) const { return node(v).needs_grad; }
    std::size_t size() const { return nodes_.size(); }

    // ---- leaves ----------------------------------------------------------

    Var leaf(const Tensor& t) {
        Var v = push(t, "leaf", {}, t.requires_grad);
        if (t.requires_grad) leaves_.push_back(v.idx);
        return v;
    }

    Var constant(Tensor t) {
        t.requires_grad = false;
        return push(std::move(t), "constant", {}, false);
    }

    Var constant_scalar(double x) { return constant(Tensor::scalar(x)); }

    // ---- elementwise -----------------------------------------------------

    Var add(Var a, Var b) {
        require_same_shape("add", a, b);
        Tensor out(shape(a));
        const auto& ta = val(a);
        const auto& tb = val(b);
        for (std::int64_t i = 0; i < out.size(); ++i) out[i] = ta[i] + tb[i];
        Var y = push(std::move(out), "add", {a, b});
        set_backward(y, [a, b](Tape&, Var gy, std::array<Var, 3>& g) {
            g[0] = gy;
            g[1] = gy;
        });
        return y;
    }

    Var sub(Var a, Var b) {
        require_same_shape("sub", a, b);
        Tensor out(shape(a));
        const auto& ta = val(a);
        const auto& tb = val(b);
        for (std::int64_t i = 0; i < out.size(); ++i) out[i] = ta[i] - tb[i];
        Var y = push(std::move(out), "sub", {a, b});
        set_backward(y, [](Tape& t, Var gy, std::array<Var, 3>& g) {
            g[0] = gy;
            g[1] = t.mul_scalar(gy, -1.0);
        });
        return y;
    }

    Var mul(Var a, Var b) {
        require_same_shape("mul", a, b);
        Tensor out(shape(a));
        const auto& ta = val(a);
        const auto& tb = val(b);
        for (std::int64_t i = 0; i < out.size(); ++i) out[i] = ta[i] * tb[i];
        Var y = push(std::move(out), "mul", {a, b});
        set_backward(y, [a, b](Tape& t, Var gy, std::array<Var, 3>& g) {
            g[0] = t.mul(gy, b);
            g[1] = t.mul(gy, a);
        });
        return y;
    }

    Var divide(Var a, Var b) {
        require_same_shape("divide", a, b);
        Tensor out(shape(a));
        const auto& ta = val(a);
        const auto& tb = val(b);
        for (std::int64_t i = 0; i < out.size(); ++i) out[i] = ta[i] / tb[i];
        Var y = push(std::move(out), "divide", {a, b});
        Var self = y;
        set_backward(y, [b, self](Tape& t, Var gy, std::array<Var, 3>& g) {
            g[0] = t.divide(gy, b);
            g[1] = t.mul_scalar(t.divide(t.mul(gy, self), b), -1.0);
        });
        return y;
    }

    Var add_scalar(Var a, double c) {
        Tensor out(shape(a));
        const auto& ta = val(a);
        for (std::int64_t i = 0; i < out.size(); ++i) out[i] = ta[i] + c;
        Var y = push(std::move(out), "add_scalar", {a});
        set_backward(y, [](Tape&, Var gy, std::array<Var, 3>& g) { g[0] = gy; });
        return y;
    }

    Var mul_scalar(Var a, double c) {
        Tensor out(shape(a));
        const auto& ta = val(a);
        for (std::int64_t i = 0; i < out.size(); ++i) out[i] = ta[i] * c;
        Var y = push(std::move(out), "mul_scalar", {a});
        set_backward(y, [c](Tape& t, Var gy, std::array<Var, 3>& g) { g[0] = t.mul_scalar(gy, c); });
        return y;
    }

    Var neg(Var a) { return mul_scalar(a, -1.0); }

    Var exp(Var a) {
        Tensor out(shape(a));
        const auto& ta = val(a);
        for (std::int64_t i = 0; i < out.size(); ++i) out[i] = std::exp(ta[i]);
        Var y = push(std::move(out), "exp", {a});
        Var self = y;
        set_backward(y, [self](Tape& t, Var gy, std::array<Var, 3>& g) { g[0] = t.mul(gy, self); });
        return y;
    }

    Var log(Var a) {
        Tensor out(shape(a));
        const auto& ta = val(a);
        for (std::int64_t i = 0; i < out.size(); ++i) out[i] = std::log(ta[i]);
        Var y = push(std::move(out), "log", {a});
        set_backward(y, [a](Tape& t, Var gy, std::array<Var, 3>& g) { g[0] = t.divide(gy, a); });
        return y;
    }

    Var sqrt(Var a) {
        Tensor out(shape(a));
        const auto& ta = val(a);
        for (std::int64_t i = 0; i < out.size(); ++i) out[i] = std::sqrt(ta[i]);
        Var y = push(std::move(out), "sqrt", {a});
        Var self = y;
        set_backward(y, [self](Tape& t, Var gy, std::array<Var, 3>& g) {
            g[0] = t.divide(t.mul_scalar(gy, 0.5), self);
        });
        return y;
    }

    Var tanh(Var a) {
        Tensor out(shape(a));
        const auto& ta = val(a);
        for (std::int64_t i = 0; i < out.size(); ++i) out[i] = std::tanh(ta[i]);
        Var y = push(std::move(out), "tanh", {a});
        Var self = y;
        set_backward(y, [self](Tape& t, Var gy, std::array<Var, 3>& g) {
            g[0] = t.mul(gy, t.add_scalar(t.neg(t.mul(self, self)), 1.0));
        });
        return y;
    }

    Var sigmoid(Var a) {
        Tensor out(shape(a));
        const auto& ta = val(a);
        for (std::int64_t i = 0; i < out.size(); ++i) out[i] = 1.0 / (1.0 + std::exp(-ta[i]));
        Var y = push(std::move(out), "sigmoid", {a});
        Var self = y;
        set_backward(y, [self](Tape& t, Var gy, std::array<Var, 3>& g) {
            g[0] = t.mul(gy, t.mul(self, t.add_scalar(t.neg(self), 1.0)));
        });
        return y;
    }

    /// log(1 + exp(x)) computed stably; gradient is sigmoid(x).
    Var softplus(Var a) {
        Tensor out(shape(a));
        const auto& ta = val(a);
        for (std::int64_t i = 0; i < out.size(); ++i) {
            double x = ta[i];
            out[i] = std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x)));
        }
        Var y = push(std::move(out), "softplus", {a});
        set_backward(y, [a](Tape& t, Var gy, std::array<Var, 3>& g) {
            g[0] = t.mul(gy, t.sigmoid(a));
        });
        return y;
    }

    Var relu(Var a) { return leaky_relu(a, 0.0); }

    Var leaky_relu(Var a, double slope) {
        Tensor out(shape(a));
        Tensor mask(shape(a));
        const auto& ta = val(a);
        for (std::int64_t i = 0; i < out.size(); ++i) {
            bool pos = ta[i] > 0.0;
            out[i] = pos ? ta[i] : slope * ta[i];
            mask[i] = pos ? 1.0 : slope;
        }
        Var y = push(std::move(out), "leaky_relu", {a});
        set_backward(y, [mask = std::move(mask)](Tape& t, Var gy, std::array<Var, 3>& g) {
            g[0] = t.mul(gy, t.constant(mask));
        });
        return y;
    }

    Var clamp(Var a, double lo, double hi) {
        Tensor out(shape(a));
        Tensor mask(shape(a));
        const auto& ta = val(a);
        for (std::int64_t i = 0; i < out.size(); ++i) {
            double v = ta[i];
            bool inside = v > lo && v < hi;
            out[i] = v < lo ? lo : (v > hi ? hi : v);
            mask[i] = inside ? 1.0 : 0.0;
        }
        Var y = push(std::move(out), "clamp", {a});
        set_backward(y, [mask = std::move(mask)](Tape& t, Var gy, std::array<Var, 3>& g) {
            g[0] = t.mul(gy, t.constant(mask));
        });
        return y;
    }

    // ---- structure -------------------------------------------------------

    Var reshape(Var a, Shape s) {
        if (numel(s) != numel(shape(a))) {
            throw std::runtime_error("reshape: cannot reshape " + shape_str(shape(a)) + " to " +
                                     shape_str(s));
        }
        Shape orig = shape(a);
        Tensor out(std::move(s), val(a).data);
        Var y = push(std::move(out), "reshape", {a});
        set_backward(y, [orig](Tape& t, Var gy, std::array<Var, 3>& g) {
            g[0] = t.reshape(gy, orig);
        });
        return y;
    }

    Var transpose(Var a) {
        require_rank("transpose", a, 2);
        int n = shape(a)[0], m = shape(a)[1];
        Tensor out({m, n});
        const auto& ta = val(a);
        for (int i = 0; i < n; ++i)
            for (int j = 0; j < m; ++j) out[static_cast<std::int64_t>(j) * n + i] = ta[static_cast<std::int64_t>(i) * m + j];
        Var y = push(std::move(out), "transpose", {a});
        set_backward(y, [](Tape& t, Var gy, std::array<Var, 3>& g) { g[0] = t.transpose(gy); });
        return y;
    }

    Var matmul(Var a, Var b) {
        require_rank("matmul", a, 2);
        require_rank("matmul", b, 2);
        int n = shape(a)[0], k = shape(a)[1], k2 = shape(b)[0], m = shape(b)[1];
        if (k != k2) {
            throw std::runtime_error("matmul: inner dimensions differ: " + shape_str(shape(a)) +
                                     " x " + shape_str(shape(b)));
        }
        Tensor out({n, m});
        detail::gemm_nn(n, m, k, val(a).data.data(), val(b).data.data(), out.data.data());
        Var y = push(std::move(out), "matmul", {a, b});
        set_backward(y, [a, b](Tape& t, Var gy, std::array<Var, 3>& g) {
            if (t.needs_grad(a)) g[0] = t.matmul(gy, t.transpose(b));
            if (t.needs_grad(b)) g[1] = t.matmul(t.transpose(a), gy);
        });
        return y;
    }

    /// [N,D] + [D], the bias pattern of a linear layer.
    Var add_rowvec(Var m, Var v) {
        require_rank("add_rowvec", m, 2);
        require_rank("add_rowvec", v, 1);
        int n = shape(m)[0], d = shape(m)[1];
        if (shape(v)[0] != d) {
            throw std::runtime_error("add_rowvec: matrix " + shape_str(shape(m)) + " vs vector " +
                                     shape_str(shape(v)));
        }
        Tensor out(shape(m));
        const auto& tm = val(m);
        const auto& tv = val(v);
        for (int i = 0; i < n; ++i)
            for (int j = 0; j < d; ++j)
                out[static_cast<std::int64_t>(i) * d + j] = tm[static_cast<std::int64_t>(i) * d + j] + tv[j];
        Var y = push(std::move(out), "add_rowvec", {m, v});
        set_backward(y, [](Tape& t, Var gy, std::array<Var, 3>& g) {
            g[0] = gy;
            g[1] = t.colsum(gy);
        });
        return y;
    }

    /// [N,C,H,W] + [C], the bias pattern of a convolution.
    Var add_chan(Var x, Var b) {
        require_rank("add_chan", x, 4);
        require_rank("add_chan", b, 1);
        const Shape& xs = shape(x);
        if (shape(b)[0] != xs[1]) {
            throw std::runtime_error("add_chan: input " + shape_str(xs) + " vs bias " +
                                     shape_str(shape(b)));
        }
        Tensor out(xs);
        const auto& tx = val(x);
        const auto& tb = val(b);
        std::int64_t hw = static_cast<std::int64_t>(xs[2]) * xs[3];
        std::int64_t i = 0;
        for (int n = 0; n < xs[0]; ++n)
            for (int c = 0; c < xs[1]; ++c)
                for (std::int64_t p = 0; p < hw; ++p, ++i) out[i] = tx[i] + tb[c];
        Var y = push(std::move(out), "add_chan", {x, b});
        set_backward(y, [](Tape& t, Var gy, std::array<Var, 3>& g) {
            g[0] = gy;
            g[1] = t.chansum(gy);
        });
        return y;
    }

    Var rowsum(Var m) {
        require_rank("rowsum", m, 2);
        int n = shape(m)[0], k = shape(m)[1];
        Tensor out({n});
        const auto& tm = val(m);
        for (int i = 0; i < n; ++i) {
            double acc = 0.0;
            for (int j = 0; j < k; ++j) acc += tm[static_cast<std::int64_t>(i) * k + j];
            out[i] = acc;
        }
        Var y = push(std::move(out), "rowsum", {m});
        set_backward(y, [k](Tape& t, Var gy, std::array<Var, 3>& g) { g[0] = t.colbroadcast(gy, k); });
        return y;
    }

    Var colsum(Var m) {
        require_rank("colsum", m, 2);
        int n = shape(m)[0], k = shape(m)[1];
        Tensor out({k});
        const auto& tm = val(m);
        for (int i = 0; i < n; ++i)
            for (int j = 0; j < k; ++j) out[j] += tm[static_cast<std::int64_t>(i) * k + j];
        Var y = push(std::move(out), "colsum", {m});
        set_backward(y, [n](Tape& t, Var gy, std::array<Var, 3>& g) { g[0] = t.rowbroadcast(gy, n); });
        return y;
    }

    /// [K] -> [N,K]: replicate the vector as every row.
    Var rowbroadcast(Var v, int n) {
        require_rank("rowbroadcast", v, 1);
        int k = shape(v)[0];
        Tensor out({n, k});
        const auto& tv = val(v);
        for (int i = 0; i < n; ++i)
            for (int j = 0; j < k; ++j) out[static_cast<std::int64_t>(i) * k + j] = tv[j];
        Var y = push(std::move(out), "rowbroadcast", {v});
        set_backward(y, [](Tape& t, Var gy, std::array<Var, 3>& g) { g[0] = t.colsum(gy); });
        return y;
    }

    /// [N] -> [N,K]: each row is the constant v[i].
    Var colbroadcast(Var v, int k) {
        require_rank("colbroadcast", v, 1);
        int n = shape(v)[0];
        Tensor out({n, k});
        const auto& tv = val(v);
        for (int i = 0; i < n; ++i)
            for (int j = 0; j < k; ++j) out[static_cast<std::int64_t>(i) * k + j] = tv[i];
        Var y = push(std::move(out), "colbroadcast", {v});
        set_backward(y, [](Tape& t, Var gy, std::array<Var, 3>& g) { g[0] = t.rowsum(gy); });
        return y;
    }

    Var chansum(Var x) {
        require_rank("chansum", x, 4);
        const Shape& xs = shape(x);
        Tensor out({xs[1]});
        const auto& tx = val(x);
        std::int64_t hw = static_cast<std::int64_t>(xs[2]) * xs[3];
        std::int64_t i = 0;
        for (int n = 0; n < xs[0]; ++n)
            for (int c = 0; c < xs[1]; ++c)
                for (std::int64_t p = 0; p < hw; ++p, ++i) out[c] += tx[i];
        Var y = push(std::move(out), "chansum", {x});
        Shape orig = xs;
        set_backward(y, [orig](Tape& t, Var gy, std::array<Var, 3>& g) {
            g[0] = t.chanbroadcast(gy, orig);
        });
        return y;
    }

    /// [C] -> [N,C,H,W].
    Var chanbroadcast(Var b, Shape target) {
        require_rank("chanbroadcast", b, 1);
        if (target.size() != 4 || target[1] != shape(b)[0]) {
            throw std::runtime_error("chanbroadcast: bias " + shape_str(shape(b)) +
                                     " to target " + shape_str(target));
        }
        Tensor out(target);
        const auto& tb = val(b);
        std::int64_t hw = static_cast<std::int64_t>(target[2]) * target[3];
        std::int64_t i = 0;
        for (int n = 0; n < target[0]; ++n)
            for (int c = 0; c < target[1]; ++c)
                for (std::int64_t p = 0; p < hw; ++p, ++i) out[i] = tb[c];
        Var y = push(std::move(out), "chanbroadcast", {b});
        set_backward(y, [](Tape& t, Var gy, std::array<Var, 3>& g) { g[0] = t.chansum(gy); });
        return y;
    }

    Var sum(Var a) {
        double acc = 0.0;
        for (double v : val(a).data) acc += v;
        Var y = push(Tensor::scalar(acc), "sum", {a});
        Shape orig = shape(a);
        set_backward(y, [orig](Tape& t, Var gy, std::array<Var, 3>& g) {
            g[0] = t.broadcast_scalar(gy, orig);
        });
        return y;
    }

    Var mean(Var a) { return mul_scalar(sum(a), 1.0 / static_cast<double>(numel(shape(a)))); }

    Var broadcast_scalar(Var s, Shape target) {
        if (numel(shape(s)) != 1) {
            throw std::runtime_error("broadcast_scalar: source has shape " + shape_str(shape(s)));
        }
        Tensor out(target, val(s)[0]);
        Var y = push(std::move(out), "broadcast_scalar", {s});
        set_backward(y, [](Tape& t, Var gy, std::array<Var, 3>& g) { g[0] = t.sum(gy); });
        return y;
    }

    /// Gather by flat indices: y[i] = x[idx[i]].
    Var take(Var x, std::vector<std::int64_t> idx, Shape out_shape) {
        if (static_cast<std::int64_t>(idx.size()) != numel(out_shape)) {
            throw std::runtime_error("take: " + std::to_string(idx.size()) +
                                     " indices vs output shape " + shape_str(out_shape));
        }
        const auto& tx = val(x);
        Tensor out(out_shape);
        for (std::size_t i = 0; i < idx.size(); ++i) {
            if (idx[i] < 0 || idx[i] >= tx.size()) {
                throw std::runtime_error("take: index " + std::to_string(idx[i]) +
                                         " out of range for " + shape_str(tx.shape));
            }
            out[static_cast<std::int64_t>(i)] = tx[idx[i]];
        }
        Var y = push(std::move(out), "take", {x});
        Shape xshape = shape(x);
        set_backward(y, [idx = std::move(idx), xshape](Tape& t, Var gy, std::array<Var, 3>& g) {
            g[0] = t.scatter_add(gy, idx, xshape);
        });
        return y;
    }

    /// Scatter-add by flat indices: y[idx[i]] += g[i] into zeros(out_shape).
    Var scatter_add(Var src, std::vector<std::int64_t> idx, Shape out_shape) {
        const auto& ts = val(src);
        if (static_cast<std::int64_t>(idx.size()) != ts.size()) {
            throw std::runtime_error("scatter_add: " + std::to_string(idx.size()) +
                                     " indices vs source shape " + shape_str(ts.shape));
        }
        Tensor out(out_shape);
        for (std::size_t i = 0; i < idx.size(); ++i) out[idx[i]] += ts[static_cast<std::int64_t>(i)];
        Var y = push(std::move(out), "scatter_add", {src});
        Shape sshape = shape(src);
        set_backward(y, [idx = std::move(idx), sshape](Tape& t, Var gy, std::array<Var, 3>& g) {
            g[0] = t.take(gy, idx, sshape);
        });
        return y;
    }

    /// [N,D] -> [N,D+1] with a constant 1 appended to each row.
    Var append_one_col(Var m) {
        require_rank("append_one_col", m, 2);
        int n = shape(m)[0], d = shape(m)[1];
        Tensor out({n, d + 1});
        const auto& tm = val(m);
        for (int i = 0; i < n; ++i) {
            for (int j = 0; j < d; ++j)
                out[static_cast<std::int64_t>(i) * (d + 1) + j] = tm[static_cast<std::int64_t>(i) * d + j];
            out[static_cast<std::int64_t>(i) * (d + 1) + d] = 1.0;
        }
        Var y = push(std::move(out), "append_one_col", {m});
        set_backward(y, [n, d](Tape& t, Var gy, std::array<Var, 3>& g) {
            std::vector<std::int64_t> idx(static_cast<std::size_t>(n) * d);
            for (int i = 0; i < n; ++i)
                for (int j = 0; j < d; ++j)
                    idx[static_cast<std::size_t>(i) * d + j] = static_cast<std::int64_t>(i) * (d + 1) + j;
            g[0] = t.take(gy, std::move(idx), {n, d});
        });
        return y;
    }

    /// Row r of a matrix as a vector, differentiable into the matrix.
    Var select_row(Var m, int r) {
        require_rank("select_row", m, 2);
        int n = shape(m)[0], d = shape(m)[1];
        if (r < 0 || r >= n) {
            throw std::runtime_error("select_row: row " + std::to_string(r) + " out of range for " +
                                     shape_str(shape(m)));
        }
        std::vector<std::int64_t> idx(static_cast<std::size_t>(d));
        for (int j = 0; j < d; ++j) idx[static_cast<std::size_t>(j)] = static_cast<std::int64_t>(r) * d + j;
        return take(m, std::move(idx), {d});
    }

    Var softmax_rows(Var a) {
        require_rank("softmax_rows", a, 2);
        int n = shape(a)[0], k = shape(a)[1];
        Tensor out(shape(a));
        const auto& ta = val(a);
        for (int i = 0; i < n; ++i) {
            const double* row = ta.data.data() + static_cast<std::int64_t>(i) * k;
            double mx = row[0];
            for (int j = 1; j < k; ++j) mx = std::max(mx, row[j]);
            double z = 0.0;
            for (int j = 0; j < k; ++j) z += std::exp(row[j] - mx);
            for (int j = 0; j < k; ++j) out[static_cast<std::int64_t>(i) * k + j] = std::exp(row[j] - mx) / z;
        }
        Var y = push(std::move(out), "softmax_rows", {a});
        Var self = y;
        set_backward(y, [self, k](Tape& t, Var gy, std::array<Var, 3>& g) {
            Var dot = t.rowsum(t.mul(gy, self));
            g[0] = t.mul(self, t.sub(gy, t.colbroadcast(dot, k)));
        });
        return y;
    }

    Var log_softmax_rows(Var a) {
        require_rank("log_softmax_rows", a, 2);
        int n = shape(a)[0], k = shape(a)[1];
        Tensor out(shape(a));
        const auto& ta = val(a);
        for (int i = 0; i < n; ++i) {
            const double* row = ta.data.data() + static_cast<std::int64_t>(i) * k;
            double mx = row[0];
            for (int j = 1; j < k; ++j) mx = std::max(mx, row[j]);
            double z = 0.0;
            for (int j = 0; j < k; ++j) z += std::exp(row[j] - mx);
            double lz = mx + std::log(z);
            for (int j = 0; j < k; ++j) out[static_cast<std::int64_t>(i) * k + j] = row[j] - lz;
        }
        Var y = push(std::move(out), "log_softmax_rows", {a});
        Var self = y;
        set_backward(y, [self, k](Tape& t, Var gy, std::array<Var, 3>& g) {
            Var probs = t.exp(self);
            g[0] = t.sub(gy, t.mul(probs, t.colbroadcast(t.rowsum(gy), k)));
        });
        return y;
    }

    // ---- convolution family ------------------------------------------------

    Var conv2d(Var x, Var w, int stride, int pad) {
        auto d = conv_dims("conv2d", shape(x), shape(w), stride, pad);
        int batch = shape(x)[0];
        Tensor out({batch, d.co, d.ho, d.wo});
        detail::conv2d_forward(val(x).data.data(), val(w).data.data(), out.data.data(), batch, d);
        Var y = push(std::move(out), "conv2d", {x, w});
        Shape xs = shape(x), ws = shape(w);
        set_backward(y, [x, w, xs, ws, stride, pad](Tape& t, Var gy, std::array<Var, 3>& g) {
            if (t.needs_grad(x)) g[0] = t.conv2d_input_grad(gy, w, xs, stride, pad);
            if (t.needs_grad(w)) g[1] = t.conv2d_weight_grad(x, gy, ws, stride, pad);
        });
        return y;
    }

    /// Adjoint of conv2d with respect to its input; doubles as the transposed
    /// convolution used by the generator's upsampling layers.
    Var conv2d_input_grad(Var gy, Var w, Shape x_shape, int stride, int pad) {
        auto d = conv_dims("conv2d_input_grad", x_shape, shape(w), stride, pad);
        const Shape& gys = shape(gy);
        if (gys.size() != 4 || gys[1] != d.co || gys[2] != d.ho || gys[3] != d.wo) {
            throw std::runtime_error("conv2d_input_grad: output grad " + shape_str(gys) +
                                     " does not match conv output [" + std::to_string(gys[0]) + "," +
                                     std::to_string(d.co) + "," + std::to_string(d.ho) + "," +
                                     std::to_string(d.wo) + "]");
        }
        int batch = gys[0];
        Tensor out({batch, x_shape[1], x_shape[2], x_shape[3]});
        detail::conv2d_input_grad(val(gy).data.data(), val(w).data.data(), out.data.data(), batch, d);
        Var y = push(std::move(out), "conv2d_input_grad", {gy, w});
        Shape ws = shape(w);
        set_backward(y, [gy, w, ws, stride, pad](Tape& t, Var gu, std::array<Var, 3>& g) {
            if (t.needs_grad(gy)) g[0] = t.conv2d(gu, w, stride, pad);
            if (t.needs_grad(w)) g[1] = t.conv2d_weight_grad(gu, gy, ws, stride, pad);
        });
        return y;
    }

    /// Adjoint of conv2d with respect to its weights.
    Var conv2d_weight_grad(Var x, Var gy, Shape w_shape, int stride, int pad) {
        auto d = conv_dims("conv2d_weight_grad", shape(x), w_shape, stride, pad);
        const Shape& gys = shape(gy);
        if (gys.size() != 4 || gys[0] != shape(x)[0] || gys[1] != d.co || gys[2] != d.ho ||
            gys[3] != d.wo) {
            throw std::runtime_error("conv2d_weight_grad: output grad " + shape_str(gys) +
                                     " inconsistent with input " + shape_str(shape(x)));
        }
        Tensor out(w_shape);
        detail::conv2d_weight_grad(val(x).data.data(), val(gy).data.data(), out.data.data(),
                                   shape(x)[0], d);
        Var y = push(std::move(out), "conv2d_weight_grad", {x, gy});
        Shape xs = shape(x);
        set_backward(y, [x, gy, xs, stride, pad](Tape& t, Var gv, std::array<Var, 3>& g) {
            if (t.needs_grad(x)) g[0] = t.conv2d_input_grad(gy, gv, xs, stride, pad);
            if (t.needs_grad(gy)) g[1] = t.conv2d(x, gv, stride, pad);
        });
        return y;
    }

    /// Max pooling, kernel k == stride k, floor semantics (trailing rows or
    /// columns that do not fill a window are dropped).
    Var maxpool2d(Var x, int k) {
        require_rank("maxpool2d", x, 4);
        const Shape& xs = shape(x);
        if (xs[2] < k || xs[3] < k) {
            throw std::runtime_error("maxpool2d: input " + shape_str(xs) +
                                     " smaller than kernel " + std::to_string(k));
        }
        Shape os{xs[0], xs[1], xs[2] / k, xs[3] / k};
        Tensor out(os);
        std::vector<std::int64_t> argmax(static_cast<std::size_t>(numel(os)));
        detail::maxpool_forward(val(x).data.data(), out.data.data(), argmax.data(), xs[0], xs[1],
                                xs[2], xs[3], k);
        Var y = push(std::move(out), "maxpool2d", {x});
        set_backward(y, [argmax = std::move(argmax), xs](Tape& t, Var gy, std::array<Var, 3>& g) {
            g[0] = t.scatter_add(gy, argmax, xs);
        });
        return y;
    }

    // ---- autodiff ----------------------------------------------------------

    /// Builds gradient nodes of a scalar loss with respect to `wrt`. Entries
    /// the loss does not depend on come back as zero constants.
    std::vector<Var> gradients(Var loss, std::span<const Var> wrt) {
        if (loss.tape != this) throw std::runtime_error("gradients: loss from another tape");
        if (numel(shape(loss)) != 1) {
            throw std::runtime_error("gradients: loss must be scalar, got shape " +
                                     shape_str(shape(loss)));
        }
        int limit = loss.idx;
        std::vector<Var> adj(static_cast<std::size_t>(limit) + 1);
        adj[static_cast<std::size_t>(limit)] = constant(Tensor(shape(loss), 1.0));
        for (int i = limit; i >= 0; --i) {
            Node& nd = nodes_[static_cast<std::size_t>(i)];
            Var gy = adj[static_cast<std::size_t>(i)];
            if (!gy.valid() || !nd.needs_grad || !nd.backward) continue;
            std::array<Var, 3> pg{};
            nd.backward(*this, gy, pg);
            for (int j = 0; j < nd.n_parents; ++j) {
                int p = nd.parents[static_cast<std::size_t>(j)];
                if (!pg[static_cast<std::size_t>(j)].valid() ||
                    !nodes_[static_cast<std::size_t>(p)].needs_grad)
                    continue;
                Var& slot = adj[static_cast<std::size_t>(p)];
                slot = slot.valid() ? add(slot, pg[static_cast<std::size_t>(j)])
                                    : pg[static_cast<std::size_t>(j)];
            }
        }
        std::vector<Var> out;
        out.reserve(wrt.size());
        for (Var w : wrt) {
            if (w.tape != this) throw std::runtime_error("gradients: wrt var from another tape");
            if (w.idx <= limit && adj[static_cast<std::size_t>(w.idx)].valid()) {
                out.push_back(adj[static_cast<std::size_t>(w.idx)]);
            } else {
                out.push_back(constant(Tensor(shape(w), 0.0)));
            }
        }
        return out;
    }

    /// Runs the reverse sweep from a scalar loss and stores gradients for all
    /// requires_grad leaves, retrievable via grad().
    void backward(Var loss) {
        std::vector<Var> wrt;
        wrt.reserve(leaves_.size());
        for (int i : leaves_) wrt.push_back(Var{this, i});
        auto gs = gradients(loss, wrt);
        grad_map_.clear();
        for (std::size_t i = 0; i < wrt.size(); ++i) grad_map_[wrt[i].idx] = val(gs[i]);
    }

    const Tensor& grad(Var leaf) const {
        auto it = grad_map_.find(leaf.idx);
        if (it == grad_map_.end()) {
            throw std::runtime_error("grad: no gradient recorded for node " + std::to_string(leaf.idx));
        }
        return it->second;
    }

  private:
    struct Node {
        Tensor value;
        const char* op = "";
        std::array<int, 3> parents{-1, -1, -1};
        int n_parents = 0;
        bool needs_grad = false;
        std::function<void(Tape&, Var, std::array<Var, 3>&)> backward;
    };

    const Node& node(Var v) const {
        if (v.tape != this || v.idx < 0 || v.idx >= static_cast<int>(nodes_.size())) {
            throw std::runtime_error("Tape: invalid var handle");
        }
        return nodes_[static_cast<std::size_t>(v.idx)];
    }

    int next_idx() const { return static_cast<int>(nodes_.size()); }

    Var push(Tensor value, const char* op, std::initializer_list<Var> parents,
             bool force_needs_grad = false) {
        Node nd;
        nd.value = std::move(value);
        nd.op = op;
        bool ng = force_needs_grad;
        for (Var p : parents) {
            if (p.tape != this) throw std::runtime_error(std::string(op) + ": input from another tape");
            nd.parents[static_cast<std::size_t>(nd.n_parents++)] = p.idx;
            ng = ng || nodes_[static_cast<std::size_t>(p.idx)].needs_grad;
        }
        nd.needs_grad = ng;
        nodes_.push_back(std::move(nd));
        return Var{this, static_cast<int>(nodes_.size()) - 1};
    }

    template <class F>
    void set_backward(Var v, F&& fn) {
        Node& nd = nodes_[static_cast<std::size_t>(v.idx)];
        if (nd.needs_grad) nd.backward = std::forward<F>(fn);
    }

    void require_same_shape(const char* op, Var a, Var b) const {
        if (shape(a) != shape(b)) {
            throw std::runtime_error(std::string(op) + ": shape mismatch " + shape_str(shape(a)) +
                                     " vs " + shape_str(shape(b)));
        }
    }

    void require_rank(const char* op, Var a, std::size_t rank) const {
        if (shape(a).size() != rank) {
            throw std::runtime_error(std::string(op) + ": expected rank " + std::to_string(rank) +
                                     ", got shape " + shape_str(shape(a)));
        }
    }

    static detail::ConvDims conv_dims(const char* op, const Shape& xs, const Shape& ws, int stride,
                                      int pad) {
        if (xs.size() != 4 || ws.size() != 4) {
            throw std::runtime_error(std::string(op) + ": expected 4-d input and weight, got " +
                                     shape_str(xs) + " and " + shape_str(ws));
        }
        if (xs[1] != ws[1]) {
            throw std::runtime_error(std::string(op) + ": input channels " + std::to_string(xs[1]) +
                                     " != weight channels " + std::to_string(ws[1]) + " (input " +
                                     shape_str(xs) + ", weight " + shape_str(ws) + ")");
        }
        if (stride < 1 || pad < 0) {
            throw std::runtime_error(std::string(op) + ": bad stride/pad");
        }
        auto d = detail::ConvDims::make(xs[1], xs[2], xs[3], ws[0], ws[2], ws[3], stride, pad);
        if (d.ho < 1 || d.wo < 1) {
            throw std::runtime_error(std::string(op) + ": empty output for input " + shape_str(xs) +
                                     ", weight " + shape_str(ws) + ", stride " +
                                     std::to_string(stride) + ", pad " + std::to_string(pad));
        }
        return d;
    }

    // deque: references returned by val()/shape() stay valid as nodes append
    std::deque<Node> nodes_;
    std::vector<int> leaves_;
    std::unordered_map<int, Tensor> grad_map_;
};

// ---------------------------------------------------------------------------
// Numerical gradient checking: central differences against the tape.
// ---------------------------------------------------------------------------

using GraphFn = std::function<Var(Tape&, const std::vector<Var>&)>;

/// Max over all input elements of the relative error between tape gradients
/// and central finite differences with the given step.
inline double grad_check(const GraphFn& f, const std::vector<Tensor>& inputs, double step) {
    if (step <= 0.0) throw std::runtime_error("grad_check: step must be positive");
    auto eval = [&](const std::vector<Tensor>& xs) {
        Tape t;
        std::vector<Var> vars;
        vars.reserve(xs.size());
        for (const auto& x : xs) {
            Tensor c = x;
            c.requires_grad = false;
            vars.push_back(t.constant(std::move(c)));
        }
        Var y = f(t, vars);
        return t.val(y).item();
    };

    Tape t;
    std::vector<Var> vars;
    vars.reserve(inputs.size());
    for (const auto& x : inputs) {
        Tensor c = x;
        c.requires_grad = true;
        vars.push_back(t.leaf(c));
    }
    Var y = f(t, vars);
    auto grads = t.gradients(y, vars);

    double max_rel = 0.0;
    std::vector<Tensor> probe = inputs;
    for (std::size_t i = 0; i < inputs.size(); ++i) {
        const Tensor& analytic = t.val(grads[i]);
        for (std::int64_t j = 0; j < inputs[i].size(); ++j) {
            double orig = probe[i][j];
            probe[i][j] = orig + step;
            double up = eval(probe);
            probe[i][j] = orig - step;
            double down = eval(probe);
            probe[i][j] = orig;
            double numeric = (up - down) / (2.0 * step);
            double a = analytic[j];
            double denom = std::max({std::abs(a), std::abs(numeric), 1e-12});
            max_rel = std::max(max_rel, std::abs(a - numeric) / denom);
        }
    }
    return max_rel;
}

}  // namespace milab
