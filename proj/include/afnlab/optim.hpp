#pragma once

#include <functional>

#include "afnlab/nn.hpp"

namespace afnlab {

// Post-step constraint hooks (BIN clip) run after every parameter update.
class Optimizer {
public:
    virtual ~Optimizer() = default;
    double lr = 0.0;

    void add_hook(std::function<void()> hook) {
        hooks_.push_back(std::move(hook));
    }

    void step(const std::vector<ParamRef>& params) {
        apply(params);
        for (auto& h : hooks_) h();
    }

protected:
    virtual void apply(const std::vector<ParamRef>& params) = 0;

    // Buffers keyed by position; the parameter list must stay aligned
    // across steps.
    void ensure_buffers(std::vector<std::vector<double>>& bufs,
                        const std::vector<ParamRef>& params) {
        if (bufs.empty()) {
            for (auto& p : params) bufs.emplace_back(p.value->size(), 0.0);
        }
        if (bufs.size() != params.size())
            throw UsageError("optimizer: parameter list changed size");
        for (std::size_t i = 0; i < params.size(); ++i)
            if (bufs[i].size() != params[i].value->size())
                throw UsageError("optimizer: parameter shape changed");
    }

    std::vector<std::function<void()>> hooks_;
};

class SgdNesterov : public Optimizer {
public:
    double momentum;

    SgdNesterov(double lr_, double momentum_ = 0.9) : momentum(momentum_) {
        lr = lr_;
    }

protected:
    void apply(const std::vector<ParamRef>& params) override {
        ensure_buffers(velocity_, params);
        for (std::size_t i = 0; i < params.size(); ++i) {
            auto& v = velocity_[i];
            auto& p = params[i].value->data;
            auto& g = params[i].grad->data;
            for (std::size_t j = 0; j < p.size(); ++j) {
                v[j] = momentum * v[j] - lr * g[j];
                p[j] += momentum * v[j] - lr * g[j];
            }
        }
    }

private:
    std::vector<std::vector<double>> velocity_;
};

class Adam : public Optimizer {
public:
    double beta1, beta2, eps_opt;

    explicit Adam(double lr_, double beta1_ = 0.9, double beta2_ = 0.999,
                  double eps_ = 1e-8)
        : beta1(beta1_), beta2(beta2_), eps_opt(eps_) {
        lr = lr_;
    }

protected:
    void apply(const std::vector<ParamRef>& params) override {
        ensure_buffers(m_, params);
        ensure_buffers(v_, params);
        ++t_;
        const double bc1 = 1.0 - std::pow(beta1, double(t_));
        const double bc2 = 1.0 - std::pow(beta2, double(t_));
        for (std::size_t i = 0; i < params.size(); ++i) {
            auto& m = m_[i];
            auto& v = v_[i];
            auto& p = params[i].value->data;
            auto& g = params[i].grad->data;
            for (std::size_t j = 0; j < p.size(); ++j) {
                m[j] = beta1 * m[j] + (1.0 - beta1) * g[j];
                v[j] = beta2 * v[j] + (1.0 - beta2) * g[j] * g[j];
                p[j] -= lr * (m[j] / bc1) /
                        (std::sqrt(v[j] / bc2) + eps_opt);
            }
        }
    }

private:
    std::vector<std::vector<double>> m_, v_;
    std::size_t t_ = 0;
};

// Step decay: lr0 * 0.1^floor(epoch / decay_every).
struct StepDecay {
    double lr0;
    std::size_t decay_every;

    double lr_at(std::size_t epoch) const {
        return lr0 * std::pow(0.1, double(epoch / decay_every));
    }
};

}  // namespace afnlab
