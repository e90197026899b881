#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "seqlab/ops.hpp"
#include "seqlab/tensor.hpp"

namespace seqlab {

struct AdamWConfig {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.0;
};

// Decoupled-weight-decay Adam with bias correction. step() consumes the
// gradients and zeroes them afterwards.
class AdamWState {
public:
    AdamWState(std::vector<Tensor> params, AdamWConfig cfg)
        : params_(std::move(params)), cfg_(cfg) {
        m_.reserve(params_.size());
        v_.reserve(params_.size());
        for (const Tensor& p : params_) {
            m_.emplace_back(std::vector<double>(p.numel(), 0.0));
            v_.emplace_back(std::vector<double>(p.numel(), 0.0));
        }
    }

    void set_lr(double lr) { cfg_.lr = lr; }
    double lr() const { return cfg_.lr; }
    int64_t step_count() const { return step_; }
    const std::vector<Tensor>& params() const { return params_; }
    AdamWConfig& config() { return cfg_; }

    void step() {
        ++step_;
        double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(step_));
        double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(step_));
        for (std::size_t i = 0; i < params_.size(); ++i) {
            Tensor& p = params_[i];
            if (!p.has_grad())
                throw std::runtime_error("adamw: parameter " + std::to_string(i) + " has no gradient");
            std::size_t n = p.numel();
            MapA m(m_[i].data(), n);
            MapA v(v_[i].data(), n);
            MapA g(p.grad(), n);
            MapA w(p.data(), n);
            m = cfg_.beta1 * m + (1.0 - cfg_.beta1) * g;
            v = cfg_.beta2 * v + (1.0 - cfg_.beta2) * g.square();
            w -= cfg_.lr * ((m / bc1) / ((v / bc2).sqrt() + cfg_.eps) + cfg_.weight_decay * w);
            g.setZero();
        }
    }

    // Serialized alongside parameters in checkpoints.
    std::vector<std::vector<double>>& moment1() { return m_; }
    std::vector<std::vector<double>>& moment2() { return v_; }
    void set_step_count(int64_t s) { step_ = s; }

private:
    std::vector<Tensor> params_;
    AdamWConfig cfg_;
    std::vector<std::vector<double>> m_, v_;
    int64_t step_ = 0;
};

inline double global_grad_norm(const std::vector<Tensor>& params) {
    double sq = 0.0;
    for (const Tensor& p : params) {
        if (!p.has_grad()) continue;
        CMapA g(p.grad_values().data(), p.grad_values().size());
        sq += g.square().sum();
    }
    return std::sqrt(sq);
}

// Returns the pre-clip norm.
inline double clip_global_norm(std::vector<Tensor>& params, double max_norm) {
    double norm = global_grad_norm(params);
    if (norm > max_norm && norm > 0.0) {
        double s = max_norm / norm;
        for (Tensor& p : params)
            if (p.has_grad()) MapA(p.grad(), p.numel()) *= s;
    }
    return norm;
}

// Linear warmup over warmup_frac*total steps, cosine decay to zero after.
inline double lr_schedule(int64_t step, int64_t total, double base_lr, double warmup_frac) {
    if (step < 0 || step > total) throw std::invalid_argument("lr_schedule: step outside [0,total]");
    double warm = warmup_frac * static_cast<double>(total);
    if (warm > 0.0 && static_cast<double>(step) < warm)
        return base_lr * static_cast<double>(step) / warm;
    if (total == 0) return base_lr;
    double progress = (static_cast<double>(step) - warm) / (static_cast<double>(total) - warm);
    return base_lr * 0.5 * (1.0 + std::cos(3.14159265358979323846 * progress));
}

}  // namespace seqlab
