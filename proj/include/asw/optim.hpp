#pragma once

#include <cmath>
#include <vector>

#include "asw/nn.hpp"

namespace asw {

struct AdamConfig {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

class Adam {
public:
    Adam(ParamList params, AdamConfig cfg) : params_(std::move(params)), cfg_(cfg) {
        for (const auto& p : params_) {
            m_.emplace_back(p.tensor.numel(), 0.0);
            v_.emplace_back(p.tensor.numel(), 0.0);
        }
    }

    void zero_grad() { zero_grads(params_); }

    // Parameters whose gradient buffer was never touched are left unchanged.
    void step() {
        ++t_;
        const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
        const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
        for (std::size_t i = 0; i < params_.size(); ++i) {
            Tensor& p = params_[i].tensor;
            if (!p.has_grad()) continue;
            auto g = p.grad();
            auto w = p.mutable_data();
            for (std::size_t j = 0; j < w.size(); ++j) {
                m_[i][j] = cfg_.beta1 * m_[i][j] + (1.0 - cfg_.beta1) * g[j];
                v_[i][j] = cfg_.beta2 * v_[i][j] + (1.0 - cfg_.beta2) * g[j] * g[j];
                w[j] -= cfg_.lr * (m_[i][j] / bc1) / (std::sqrt(v_[i][j] / bc2) + cfg_.eps);
            }
        }
    }

    std::size_t steps() const { return t_; }
    const ParamList& params() const { return params_; }

private:
    ParamList params_;
    AdamConfig cfg_;
    std::vector<std::vector<double>> m_, v_;
    std::size_t t_ = 0;
};

}  // namespace asw
