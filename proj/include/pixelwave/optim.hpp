#pragma once

#include <map>

#include "pixelwave/tape.hpp"

namespace pixelwave {

enum class OptimizerKind { Lion, AdamW };

enum class LrSchedule { Constant, Cosine };

struct OptimConfig {
    OptimizerKind kind = OptimizerKind::Lion;
    double lr = 5e-5;
    double weight_decay = 0.4;
    double beta1 = 0.9;
    double beta2 = 0.99;   // Lion default; AdamW uses 0.999
    double eps = 1e-8;
    int64_t warmup_steps = 0;
    int64_t total_steps = 0;  // 0 disables cosine decay
    LrSchedule schedule = LrSchedule::Cosine;

    static OptimConfig lion(double lr, double wd) {
        OptimConfig c;
        c.kind = OptimizerKind::Lion;
        c.lr = lr;
        c.weight_decay = wd;
        c.beta1 = 0.9;
        c.beta2 = 0.99;
        return c;
    }

    static OptimConfig adamw(double lr, double wd) {
        OptimConfig c;
        c.kind = OptimizerKind::AdamW;
        c.lr = lr;
        c.weight_decay = wd;
        c.beta1 = 0.9;
        c.beta2 = 0.999;
        return c;
    }
};

// Decoupled-weight-decay optimizer over a parameter registry. State slots
// are keyed by parameter name so checkpoints can restore them exactly.
template <typename T>
class Optimizer {
public:
    OptimConfig cfg;
    std::map<std::string, Tensor<T>> m, v;
    int64_t step_count = 0;

    explicit Optimizer(const OptimConfig& c) : cfg(c) {
        if (c.lr <= 0) throw config_error("learning rate must be positive");
        if (c.warmup_steps < 0 || (c.total_steps > 0 && c.warmup_steps > c.total_steps))
            throw config_error("warmup must be non-negative and <= total steps");
    }

    double lr_at(int64_t step) const {
        double lr = cfg.lr;
        if (cfg.warmup_steps > 0 && step < cfg.warmup_steps)
            return lr * static_cast<double>(step + 1) / static_cast<double>(cfg.warmup_steps);
        if (cfg.schedule == LrSchedule::Cosine && cfg.total_steps > cfg.warmup_steps) {
            double t = static_cast<double>(step - cfg.warmup_steps) /
                       static_cast<double>(cfg.total_steps - cfg.warmup_steps);
            t = std::min(1.0, std::max(0.0, t));
            return lr * 0.5 * (1.0 + std::cos(3.141592653589793 * t));
        }
        return lr;
    }

    // Applies one update to every trainable parameter. Throws
    // numeric_error (before touching any state) if a gradient is not
    // finite; callers skip and log the step.
    void step(ParamRegistry<T>& reg) {
        for (auto& [name, p] : reg.params) {
            if (!p->requires_grad) continue;
            for (int64_t i = 0; i < p->grad.numel(); ++i)
                if (!std::isfinite(static_cast<double>(p->grad[i])))
                    throw numeric_error("non-finite gradient in " + name);
        }
        double lr = lr_at(step_count);
        ++step_count;
        for (auto& [name, p] : reg.params) {
            if (!p->requires_grad) continue;
            auto& slot_m = m[name];
            if (slot_m.numel() != p->value.numel()) slot_m = Tensor<T>::zeros(p->value.shape);
            if (cfg.kind == OptimizerKind::Lion) {
                for (int64_t i = 0; i < p->value.numel(); ++i) {
                    double g = p->grad[i];
                    double interp = cfg.beta1 * static_cast<double>(slot_m[i]) + (1 - cfg.beta1) * g;
                    double dir = interp > 0 ? 1.0 : (interp < 0 ? -1.0 : 0.0);
                    p->value[i] = static_cast<T>(p->value[i] - lr * (dir + cfg.weight_decay * p->value[i]));
                    slot_m[i] = static_cast<T>(cfg.beta2 * slot_m[i] + (1 - cfg.beta2) * g);
                }
            } else {
                auto& slot_v = v[name];
                if (slot_v.numel() != p->value.numel()) slot_v = Tensor<T>::zeros(p->value.shape);
                double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(step_count));
                double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(step_count));
                for (int64_t i = 0; i < p->value.numel(); ++i) {
                    double g = p->grad[i];
                    slot_m[i] = static_cast<T>(cfg.beta1 * slot_m[i] + (1 - cfg.beta1) * g);
                    slot_v[i] = static_cast<T>(cfg.beta2 * slot_v[i] + (1 - cfg.beta2) * g * g);
                    double mhat = static_cast<double>(slot_m[i]) / bc1;
                    double vhat = static_cast<double>(slot_v[i]) / bc2;
                    p->value[i] = static_cast<T>(
                        p->value[i] - lr * (mhat / (std::sqrt(vhat) + cfg.eps) + cfg.weight_decay * p->value[i]));
                }
            }
        }
    }
};

struct SemaConfig {
    double decay = 0.9;
    int64_t every = 5;
    int64_t swap_every = 1000;
    double coeff = 0.9;
};

// Switch EMA: keeps a shadow copy of the parameters, refreshed every
// `every` steps, and periodically blends the shadow back into the online
// parameters with weight `coeff`.
template <typename T>
class Sema {
public:
    SemaConfig cfg;
    std::map<std::string, Tensor<T>> shadow;

    explicit Sema(const SemaConfig& c = {}) : cfg(c) {}

    void init(const ParamRegistry<T>& reg) {
        for (auto& [name, p] : reg.params) shadow[name] = p->value;
    }

    // step is 1-based (call after the optimizer update for that step).
    void update(ParamRegistry<T>& reg, int64_t step) {
        if (shadow.empty()) init(reg);
        if (cfg.every > 0 && step % cfg.every == 0) {
            for (auto& [name, p] : reg.params) {
                auto& s = shadow[name];
                for (int64_t i = 0; i < p->value.numel(); ++i)
                    s[i] = static_cast<T>(cfg.decay * s[i] + (1 - cfg.decay) * p->value[i]);
            }
        }
        if (cfg.swap_every > 0 && step % cfg.swap_every == 0) {
            for (auto& [name, p] : reg.params) {
                auto& s = shadow[name];
                for (int64_t i = 0; i < p->value.numel(); ++i)
                    p->value[i] = static_cast<T>(cfg.coeff * s[i] + (1 - cfg.coeff) * p->value[i]);
            }
        }
    }
};

}  // namespace pixelwave
