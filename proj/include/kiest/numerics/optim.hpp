#pragma once

#include <cmath>
#include <limits>
#include <vector>

#include "kiest/numerics/tensor.hpp"

namespace kiest {

struct AdamWConfig {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.01;
    double clip_norm = 1.0;  // infinity disables clipping
};

struct StepStats {
    double grad_norm = 0.0;     // before clipping
    double clipped_norm = 0.0;  // after clipping
};

// Global L2 norm over all gradient buffers.
inline double global_grad_norm(const std::vector<Tensor>& params) {
    double s = 0.0;
    for (const auto& p : params) {
        if (!p.has_grad()) continue;
        for (double g : p.grad()) s += g * g;
    }
    return std::sqrt(s);
}

// Decoupled weight decay Adam. step() clips the global gradient norm to
// clip_norm, applies the update and zeroes the gradients.
class AdamW {
public:
    AdamW() = default;
    AdamW(std::vector<Tensor> params, AdamWConfig cfg) : params_(std::move(params)), cfg_(cfg) {
        m_.reserve(params_.size());
        v_.reserve(params_.size());
        for (const auto& p : params_) {
            m_.emplace_back(p.size(), 0.0);
            v_.emplace_back(p.size(), 0.0);
        }
    }

    StepStats step() {
        StepStats stats;
        stats.grad_norm = global_grad_norm(params_);
        double factor = 1.0;
        if (std::isfinite(cfg_.clip_norm) && stats.grad_norm > cfg_.clip_norm) factor = cfg_.clip_norm / stats.grad_norm;
        ++step_;
        const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(step_));
        const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(step_));
        double clipped = 0.0;
        for (std::size_t k = 0; k < params_.size(); ++k) {
            Tensor& p = params_[k];
            auto data = p.mutable_data();
            auto grad = p.mutable_grad();
            auto& m = m_[k];
            auto& v = v_[k];
            for (std::size_t i = 0; i < data.size(); ++i) {
                const double g = grad[i] * factor;
                clipped += g * g;
                m[i] = cfg_.beta1 * m[i] + (1.0 - cfg_.beta1) * g;
                v[i] = cfg_.beta2 * v[i] + (1.0 - cfg_.beta2) * g * g;
                const double mhat = m[i] / bc1;
                const double vhat = v[i] / bc2;
                data[i] -= cfg_.lr * cfg_.weight_decay * data[i];
                data[i] -= cfg_.lr * mhat / (std::sqrt(vhat) + cfg_.eps);
                grad[i] = 0.0;
            }
        }
        stats.clipped_norm = std::sqrt(clipped);
        return stats;
    }

    void zero_grad() {
        for (auto& p : params_) p.zero_grad();
    }

    const AdamWConfig& config() const { return cfg_; }
    AdamWConfig& config() { return cfg_; }
    long step_count() const { return step_; }
    void set_step_count(long s) { step_ = s; }
    std::vector<std::vector<double>>& first_moments() { return m_; }
    std::vector<std::vector<double>>& second_moments() { return v_; }
    const std::vector<std::vector<double>>& first_moments() const { return m_; }
    const std::vector<std::vector<double>>& second_moments() const { return v_; }

private:
    std::vector<Tensor> params_;
    AdamWConfig cfg_;
    std::vector<std::vector<double>> m_, v_;
    long step_ = 0;
};

}  // namespace kiest
