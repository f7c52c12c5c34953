#pragma once

#include "afnlab/nn.hpp"

namespace afnlab {

// Which tensor positions pool into one (mu, sigma) pair.
struct StatScope {
    enum class Kind { Batch, Layer, Instance, Group };
    Kind kind = Kind::Batch;
    std::size_t group_count = 1;  // Group only

    static StatScope batch() { return {Kind::Batch, 1}; }
    static StatScope layer() { return {Kind::Layer, 1}; }
    static StatScope instance() { return {Kind::Instance, 1}; }
    static StatScope group(std::size_t g) { return {Kind::Group, g}; }

    void validate(std::size_t C) const {
        if (kind == Kind::Group) {
            if (group_count < 1 || C % group_count != 0)
                throw ShapeError("group norm: G must divide C");
        }
    }

    std::size_t num_groups(std::size_t N, std::size_t C) const {
        switch (kind) {
            case Kind::Batch: return C;
            case Kind::Layer: return N;
            case Kind::Instance: return N * C;
            case Kind::Group: return N * group_count;
        }
        return 0;
    }

    std::size_t group_index(std::size_t n, std::size_t c, std::size_t,
                            std::size_t C) const {
        switch (kind) {
            case Kind::Batch: return c;
            case Kind::Layer: return n;
            case Kind::Instance: return n * C + c;
            case Kind::Group: return n * group_count + c / (C / group_count);
        }
        return 0;
    }

    std::size_t group_size(std::size_t N, std::size_t C, std::size_t H,
                           std::size_t W) const {
        switch (kind) {
            case Kind::Batch: return N * H * W;
            case Kind::Layer: return C * H * W;
            case Kind::Instance: return H * W;
            case Kind::Group: return (C / group_count) * H * W;
        }
        return 0;
    }
};

// Per-group mean and population standard deviation (divisor = group size).
inline void reduce_stats(const Tensor& x, const StatScope& scope, Tensor& mu,
                         Tensor& sigma) {
    if (x.rank() != 4) throw ShapeError("reduce_stats: rank-4 input required");
    const std::size_t N = x.shape[0], C = x.shape[1], H = x.shape[2],
                      W = x.shape[3];
    scope.validate(C);
    const std::size_t G = scope.num_groups(N, C);
    const double m = double(scope.group_size(N, C, H, W));
    mu = zeros({G});
    sigma = zeros({G});
    for (std::size_t n = 0; n < N; ++n)
        for (std::size_t c = 0; c < C; ++c) {
            const std::size_t g = scope.group_index(n, c, N, C);
            const double* p = &x.data[(n * C + c) * H * W];
            double s = 0.0;
            for (std::size_t i = 0; i < H * W; ++i) s += p[i];
            mu[g] += s;
        }
    for (std::size_t g = 0; g < G; ++g) mu[g] /= m;
    for (std::size_t n = 0; n < N; ++n)
        for (std::size_t c = 0; c < C; ++c) {
            const std::size_t g = scope.group_index(n, c, N, C);
            const double* p = &x.data[(n * C + c) * H * W];
            double s = 0.0;
            for (std::size_t i = 0; i < H * W; ++i) {
                const double d = p[i] - mu[g];
                s += d * d;
            }
            sigma[g] += s;
        }
    for (std::size_t g = 0; g < G; ++g) sigma[g] = std::sqrt(sigma[g] / m);
}

namespace detail {

// Standardize x by per-group stats: xhat = (x - mu_g)/(sigma_g + eps).
inline Tensor standardize(const Tensor& x, const StatScope& scope,
                          const Tensor& mu, const Tensor& sigma, double eps) {
    const std::size_t N = x.shape[0], C = x.shape[1], HW = x.shape[2] * x.shape[3];
    Tensor xhat(x.shape);
    for (std::size_t n = 0; n < N; ++n)
        for (std::size_t c = 0; c < C; ++c) {
            const std::size_t g = scope.group_index(n, c, N, C);
            const double inv = 1.0 / (sigma[g] + eps);
            const double* src = &x.data[(n * C + c) * HW];
            double* dst = &xhat.data[(n * C + c) * HW];
            for (std::size_t i = 0; i < HW; ++i)
                dst[i] = (src[i] - mu[g]) * inv;
        }
    return xhat;
}

// Backward of standardization. dxhat flows both directly and through the
// stats mu(x), sigma(x) when stats_from_x is set (train-mode batch stats;
// always for per-sample scopes).
inline Tensor standardize_backward(const Tensor& x, const Tensor& dxhat,
                                   const StatScope& scope, const Tensor& mu,
                                   const Tensor& sigma, double eps,
                                   bool stats_from_x) {
    const std::size_t N = x.shape[0], C = x.shape[1], HW = x.shape[2] * x.shape[3];
    const std::size_t G = scope.num_groups(N, C);
    const double m = double(scope.group_size(N, C, x.shape[2], x.shape[3]));
    Tensor dx(x.shape);
    std::vector<double> dmu(G, 0.0), dsigma(G, 0.0);
    for (std::size_t n = 0; n < N; ++n)
        for (std::size_t c = 0; c < C; ++c) {
            const std::size_t g = scope.group_index(n, c, N, C);
            const double inv = 1.0 / (sigma[g] + eps);
            const double* xs = &x.data[(n * C + c) * HW];
            const double* gs = &dxhat.data[(n * C + c) * HW];
            double* ds = &dx.data[(n * C + c) * HW];
            for (std::size_t i = 0; i < HW; ++i) {
                ds[i] += gs[i] * inv;
                dmu[g] -= gs[i] * inv;
                dsigma[g] -= gs[i] * (xs[i] - mu[g]) * inv * inv;
            }
        }
    if (stats_from_x) {
        for (std::size_t n = 0; n < N; ++n)
            for (std::size_t c = 0; c < C; ++c) {
                const std::size_t g = scope.group_index(n, c, N, C);
                const double* xs = &x.data[(n * C + c) * HW];
                double* ds = &dx.data[(n * C + c) * HW];
                const double dmu_per = dmu[g] / m;
                const double dsg = sigma[g] > 0.0
                                       ? dsigma[g] / (m * sigma[g])
                                       : 0.0;
                for (std::size_t i = 0; i < HW; ++i)
                    ds[i] += dmu_per + dsg * (xs[i] - mu[g]);
            }
    }
    return dx;
}

}  // namespace detail

// y = gamma * (x - mu)/(sigma + eps) + beta with per-channel gamma/beta and
// scope-grouped statistics. Shared body of LN/IN/GN and train-mode BN.
class ScopeNorm : public Layer {
public:
    Tensor gamma, beta, dgamma, dbeta;
    StatScope scope;
    double eps;

    ScopeNorm(std::size_t C, StatScope scope_, double eps_ = 1e-5)
        : gamma(ones({C})), beta(zeros({C})), dgamma(zeros({C})),
          dbeta(zeros({C})), scope(scope_), eps(eps_) {
        scope.validate(C);
    }

    std::string name() const override {
        switch (scope.kind) {
            case StatScope::Kind::Batch: return "batchnorm";
            case StatScope::Kind::Layer: return "layernorm";
            case StatScope::Kind::Instance: return "instancenorm";
            case StatScope::Kind::Group: return "groupnorm";
        }
        return "norm";
    }

    Tensor forward(const Tensor& x, Mode mode) override {
        if (x.rank() != 4 || x.shape[1] != gamma.size())
            throw ShapeError("norm: channel mismatch");
        reduce_stats(x, scope, mu_, sigma_);
        x_ = x;
        return affine_from_stats(x, mu_, sigma_, /*stats_from_x=*/true, mode);
    }

    Tensor backward(const Tensor& dy) override {
        return backward_impl(dy, mu_, sigma_, stats_from_x_);
    }

    std::vector<ParamRef> params() override {
        return {{"gamma", &gamma, &dgamma}, {"beta", &beta, &dbeta}};
    }

protected:
    // Shared by BatchNorm2d (which may feed running stats).
    Tensor affine_from_stats(const Tensor& x, const Tensor& mu,
                             const Tensor& sigma, bool stats_from_x, Mode) {
        x_ = x;
        stats_from_x_ = stats_from_x;
        xhat_ = detail::standardize(x, scope, mu, sigma, eps);
        const std::size_t N = x.shape[0], C = x.shape[1],
                          HW = x.shape[2] * x.shape[3];
        Tensor y(x.shape);
        for (std::size_t n = 0; n < N; ++n)
            for (std::size_t c = 0; c < C; ++c) {
                const double* xh = &xhat_.data[(n * C + c) * HW];
                double* dst = &y.data[(n * C + c) * HW];
                for (std::size_t i = 0; i < HW; ++i)
                    dst[i] = gamma[c] * xh[i] + beta[c];
            }
        return y;
    }

    Tensor backward_impl(const Tensor& dy, const Tensor& mu,
                         const Tensor& sigma, bool stats_from_x) {
        if (!dy.same_shape(x_)) throw ShapeError("norm backward: dy mismatch");
        const std::size_t N = x_.shape[0], C = x_.shape[1],
                          HW = x_.shape[2] * x_.shape[3];
        Tensor dxhat(x_.shape);
        for (std::size_t n = 0; n < N; ++n)
            for (std::size_t c = 0; c < C; ++c) {
                const double* g = &dy.data[(n * C + c) * HW];
                const double* xh = &xhat_.data[(n * C + c) * HW];
                double* dst = &dxhat.data[(n * C + c) * HW];
                double sg = 0.0, sb = 0.0;
                for (std::size_t i = 0; i < HW; ++i) {
                    dst[i] = g[i] * gamma[c];
                    sg += g[i] * xh[i];
                    sb += g[i];
                }
                dgamma[c] += sg;
                dbeta[c] += sb;
            }
        return detail::standardize_backward(x_, dxhat, scope, mu, sigma, eps,
                                            stats_from_x);
    }

    Tensor x_, xhat_, mu_, sigma_;
    bool stats_from_x_ = true;
};

// BN with running statistics. Train mode uses batch stats and updates the
// EMA (population variance stored, no Bessel correction); eval mode feeds
// running stats through the same affine path with no mutation.
class BatchNorm2d : public ScopeNorm {
public:
    Tensor running_mean, running_var;
    double momentum;

    explicit BatchNorm2d(std::size_t C, double momentum_ = 0.1,
                         double eps_ = 1e-5)
        : ScopeNorm(C, StatScope::batch(), eps_),
          running_mean(zeros({C})),
          running_var(ones({C})),
          momentum(momentum_) {}

    std::string name() const override { return "batchnorm"; }

    std::vector<std::pair<std::string, Tensor*>> state() override {
        return {{"running_mean", &running_mean}, {"running_var", &running_var}};
    }

    Tensor forward(const Tensor& x, Mode mode) override {
        if (x.rank() != 4 || x.shape[1] != gamma.size())
            throw ShapeError("batchnorm: channel mismatch");
        if (mode == Mode::Train) {
            reduce_stats(x, scope, mu_, sigma_);
            const std::size_t C = gamma.size();
            for (std::size_t c = 0; c < C; ++c) {
                running_mean[c] =
                    (1.0 - momentum) * running_mean[c] + momentum * mu_[c];
                running_var[c] = (1.0 - momentum) * running_var[c] +
                                 momentum * sigma_[c] * sigma_[c];
            }
            return affine_from_stats(x, mu_, sigma_, true, mode);
        }
        mu_ = running_mean;
        sigma_ = running_var;
        for (auto& v : sigma_.data) v = std::sqrt(v);
        return affine_from_stats(x, mu_, sigma_, false, mode);
    }
};

// BIN: per-channel gate between the batch-normalized and the
// instance-normalized response, y = (rho*xhat_B + (1-rho)*xhat_I)*gamma + beta.
// The optimizer's post_step hook clips rho back into [0,1].
class BinLayer : public Layer {
public:
    Tensor rho, gamma, beta;
    Tensor drho, dgamma, dbeta;
    Tensor running_mean, running_var;
    double momentum, eps;

    explicit BinLayer(std::size_t C, double momentum_ = 0.1,
                      double eps_ = 1e-5)
        : rho(constant({C}, 0.5)), gamma(ones({C})), beta(zeros({C})),
          drho(zeros({C})), dgamma(zeros({C})), dbeta(zeros({C})),
          running_mean(zeros({C})), running_var(ones({C})),
          momentum(momentum_), eps(eps_) {}

    std::string name() const override { return "bin"; }

    std::vector<std::pair<std::string, Tensor*>> state() override {
        return {{"running_mean", &running_mean}, {"running_var", &running_var}};
    }

    Tensor forward(const Tensor& x, Mode mode) override {
        if (x.rank() != 4 || x.shape[1] != gamma.size())
            throw ShapeError("bin: channel mismatch");
        x_ = x;
        const std::size_t N = x.shape[0], C = x.shape[1],
                          HW = x.shape[2] * x.shape[3];
        batch_from_x_ = mode == Mode::Train;
        if (batch_from_x_) {
            reduce_stats(x, StatScope::batch(), bmu_, bsigma_);
            for (std::size_t c = 0; c < C; ++c) {
                running_mean[c] =
                    (1.0 - momentum) * running_mean[c] + momentum * bmu_[c];
                running_var[c] = (1.0 - momentum) * running_var[c] +
                                 momentum * bsigma_[c] * bsigma_[c];
            }
        } else {
            bmu_ = running_mean;
            bsigma_ = running_var;
            for (auto& v : bsigma_.data) v = std::sqrt(v);
        }
        reduce_stats(x, StatScope::instance(), imu_, isigma_);
        xb_ = detail::standardize(x, StatScope::batch(), bmu_, bsigma_, eps);
        xi_ = detail::standardize(x, StatScope::instance(), imu_, isigma_, eps);
        Tensor y(x.shape);
        for (std::size_t n = 0; n < N; ++n)
            for (std::size_t c = 0; c < C; ++c) {
                const double r = rho[c];
                const double* pb = &xb_.data[(n * C + c) * HW];
                const double* pi = &xi_.data[(n * C + c) * HW];
                double* dst = &y.data[(n * C + c) * HW];
                for (std::size_t i = 0; i < HW; ++i)
                    dst[i] = (r * pb[i] + (1.0 - r) * pi[i]) * gamma[c] +
                             beta[c];
            }
        return y;
    }

    Tensor backward(const Tensor& dy) override {
        if (!dy.same_shape(x_)) throw ShapeError("bin backward: dy mismatch");
        const std::size_t N = x_.shape[0], C = x_.shape[1],
                          HW = x_.shape[2] * x_.shape[3];
        Tensor dxb(x_.shape), dxi(x_.shape);
        for (std::size_t n = 0; n < N; ++n)
            for (std::size_t c = 0; c < C; ++c) {
                const double r = rho[c];
                const double* g = &dy.data[(n * C + c) * HW];
                const double* pb = &xb_.data[(n * C + c) * HW];
                const double* pi = &xi_.data[(n * C + c) * HW];
                double* db = &dxb.data[(n * C + c) * HW];
                double* di = &dxi.data[(n * C + c) * HW];
                double sr = 0.0, sg = 0.0, sb = 0.0;
                for (std::size_t i = 0; i < HW; ++i) {
                    const double blend = r * pb[i] + (1.0 - r) * pi[i];
                    sr += g[i] * gamma[c] * (pb[i] - pi[i]);
                    sg += g[i] * blend;
                    sb += g[i];
                    db[i] = g[i] * gamma[c] * r;
                    di[i] = g[i] * gamma[c] * (1.0 - r);
                }
                drho[c] += sr;
                dgamma[c] += sg;
                dbeta[c] += sb;
            }
        Tensor dx = detail::standardize_backward(x_, dxb, StatScope::batch(),
                                                 bmu_, bsigma_, eps,
                                                 batch_from_x_);
        Tensor dx2 = detail::standardize_backward(
            x_, dxi, StatScope::instance(), imu_, isigma_, eps, true);
        for (std::size_t i = 0; i < dx.size(); ++i) dx.data[i] += dx2.data[i];
        return dx;
    }

    std::vector<ParamRef> params() override {
        return {{"rho", &rho, &drho},
                {"gamma", &gamma, &dgamma},
                {"beta", &beta, &dbeta}};
    }

    void post_step() override { clip(); }

    void clip() {
        for (auto& v : rho.data) v = std::clamp(v, 0.0, 1.0);
    }

private:
    Tensor x_, xb_, xi_, bmu_, bsigma_, imu_, isigma_;
    bool batch_from_x_ = true;
};

}  // namespace afnlab
