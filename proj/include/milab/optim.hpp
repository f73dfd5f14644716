#pragma once

#include <cmath>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "milab/tensor.hpp"

namespace milab {

enum class OptimKind { kSgdMomentum, kAdam };

inline const char* optim_kind_name(OptimKind k) {
    return k == OptimKind::kSgdMomentum ? "sgd" : "adam";
}

inline OptimKind optim_kind_from(const std::string& s) {
    if (s == "sgd") return OptimKind::kSgdMomentum;
    if (s == "adam") return OptimKind::kAdam;
    throw std::runtime_error("unknown optimizer kind: " + s);
}

struct OptimConfig {
    OptimKind kind = OptimKind::kAdam;
    double learning_rate = 1e-3;
    double momentum = 0.9;   // sgd
    double beta1 = 0.9;      // adam
    double beta2 = 0.999;
    double eps = 1e-8;
};

/// First-order optimizer over an externally owned parameter list. State slots
/// are allocated on first step and shapes are pinned from then on.
class Optimizer {
  public:
    explicit Optimizer(OptimConfig cfg) : cfg_(cfg) {
        if (cfg_.learning_rate < 0.0) throw std::runtime_error("Optimizer: negative learning rate");
    }

    const OptimConfig& config() const { return cfg_; }

    void step(std::span<Tensor* const> params, std::span<const Tensor> grads) {
        if (params.size() != grads.size()) {
            throw std::runtime_error("Optimizer::step: " + std::to_string(params.size()) +
                                     " params vs " + std::to_string(grads.size()) + " grads");
        }
        if (slots_.empty()) {
            for (const Tensor* p : params) slots_.emplace_back(Slot{Tensor(p->shape), Tensor(p->shape)});
        }
        if (slots_.size() != params.size()) {
            throw std::runtime_error("Optimizer::step: parameter list changed size");
        }
        // lr == 0 must leave parameters bitwise untouched
        if (cfg_.learning_rate == 0.0) {
            ++t_;
            return;
        }
        ++t_;
        for (std::size_t i = 0; i < params.size(); ++i) {
            Tensor& p = *params[i];
            const Tensor& g = grads[i];
            if (p.shape != g.shape) {
                throw std::runtime_error("Optimizer::step: grad shape " + shape_str(g.shape) +
                                         " does not match param shape " + shape_str(p.shape));
            }
            Slot& s = slots_[i];
            if (cfg_.kind == OptimKind::kSgdMomentum) {
                for (std::int64_t j = 0; j < p.size(); ++j) {
                    s.m[j] = cfg_.momentum * s.m[j] + g[j];
                    p[j] -= cfg_.learning_rate * s.m[j];
                }
            } else {
                double bc1 = 1.0 - std::pow(cfg_.beta1, t_);
                double bc2 = 1.0 - std::pow(cfg_.beta2, t_);
                for (std::int64_t j = 0; j < p.size(); ++j) {
                    s.m[j] = cfg_.beta1 * s.m[j] + (1.0 - cfg_.beta1) * g[j];
                    s.v[j] = cfg_.beta2 * s.v[j] + (1.0 - cfg_.beta2) * g[j] * g[j];
                    double mhat = s.m[j] / bc1;
                    double vhat = s.v[j] / bc2;
                    p[j] -= cfg_.learning_rate * mhat / (std::sqrt(vhat) + cfg_.eps);
                }
            }
        }
    }

  private:
    struct Slot {
        Tensor m;  // momentum / first moment
        Tensor v;  // second moment (adam only)
    };

    OptimConfig cfg_;
    std::vector<Slot> slots_;
    long t_ = 0;
};

}  // namespace milab
