#pragma once

#include <algorithm>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "afnlab/tensor.hpp"

namespace afnlab {

struct ParamRef {
    std::string name;
    Tensor* value;
    Tensor* grad;
};

// Uniform layer contract: forward caches whatever backward needs; backward
// consumes the cache of the most recent forward and accumulates parameter
// gradients in place.
class Layer {
public:
    virtual ~Layer() = default;
    virtual std::string name() const = 0;
    virtual Tensor forward(const Tensor& x, Mode mode) = 0;
    virtual Tensor backward(const Tensor& dy) = 0;
    virtual std::vector<ParamRef> params() { return {}; }
    // Non-trainable persistent state (running statistics) for checkpoints.
    virtual std::vector<std::pair<std::string, Tensor*>> state() { return {}; }
    // Constraint hook run by the optimizer after each step (BIN clip).
    virtual void post_step() {}

    void zero_grad() {
        for (auto& p : params())
            std::fill(p.grad->data.begin(), p.grad->data.end(), 0.0);
    }
};

class Linear : public Layer {
public:
    Tensor weight, bias;        // [out,in], [out]
    Tensor dweight, dbias;

    Linear(std::size_t in, std::size_t out, Prng& prng)
        : weight(gaussian({out, in}, prng, 0.0, 1.0 / std::sqrt(double(in)))),
          bias(zeros({out})),
          dweight(zeros({out, in})),
          dbias(zeros({out})) {}

    Linear(Tensor w, Tensor b)
        : weight(std::move(w)), bias(std::move(b)),
          dweight(zeros(weight.shape)), dbias(zeros(bias.shape)) {}

    std::string name() const override { return "linear"; }

    Tensor forward(const Tensor& x, Mode) override {
        if (x.rank() != 2 || x.shape[1] != weight.shape[1])
            throw ShapeError("linear: input width mismatch");
        x_ = x;
        const std::size_t B = x.shape[0], in = weight.shape[1],
                          out = weight.shape[0];
        Tensor y({B, out});
        for (std::size_t b = 0; b < B; ++b)
            for (std::size_t o = 0; o < out; ++o) {
                double acc = bias[o];
                const double* xr = &x.data[b * in];
                const double* wr = &weight.data[o * in];
                for (std::size_t i = 0; i < in; ++i) acc += xr[i] * wr[i];
                y.at2(b, o) = acc;
            }
        return y;
    }

    Tensor backward(const Tensor& dy) override {
        const std::size_t B = x_.shape[0], in = weight.shape[1],
                          out = weight.shape[0];
        if (dy.rank() != 2 || dy.shape[0] != B || dy.shape[1] != out)
            throw ShapeError("linear backward: dy shape mismatch");
        Tensor dx({B, in});
        for (std::size_t b = 0; b < B; ++b)
            for (std::size_t o = 0; o < out; ++o) {
                const double g = dy.at2(b, o);
                dbias[o] += g;
                const double* xr = &x_.data[b * in];
                double* wgr = &dweight.data[o * in];
                double* dxr = &dx.data[b * in];
                const double* wr = &weight.data[o * in];
                for (std::size_t i = 0; i < in; ++i) {
                    wgr[i] += g * xr[i];
                    dxr[i] += g * wr[i];
                }
            }
        return dx;
    }

    std::vector<ParamRef> params() override {
        return {{"weight", &weight, &dweight}, {"bias", &bias, &dbias}};
    }

private:
    Tensor x_;
};

// Direct cross-correlation; desk-scale shapes keep the loop nest affordable.
class Conv2d : public Layer {
public:
    Tensor weight, bias;        // [Cout,Cin,kh,kw], [Cout]
    Tensor dweight, dbias;
    std::size_t padding, stride;

    Conv2d(std::size_t cin, std::size_t cout, std::size_t k, std::size_t pad,
           std::size_t stride_, Prng& prng)
        : weight(gaussian({cout, cin, k, k}, prng, 0.0,
                          1.0 / std::sqrt(double(cin * k * k)))),
          bias(zeros({cout})),
          dweight(zeros({cout, cin, k, k})),
          dbias(zeros({cout})),
          padding(pad),
          stride(stride_) {
        if (k < 1 || stride_ < 1) throw ShapeError("conv2d: bad kernel/stride");
    }

    std::string name() const override { return "conv2d"; }

    Tensor forward(const Tensor& x, Mode) override {
        if (x.rank() != 4 || x.shape[1] != weight.shape[1])
            throw ShapeError("conv2d: input shape mismatch");
        const std::size_t kh = weight.shape[2], kw = weight.shape[3];
        if (x.shape[2] + 2 * padding < kh || x.shape[3] + 2 * padding < kw)
            throw ShapeError("conv2d: input smaller than kernel");
        x_ = x;
        const std::size_t N = x.shape[0], Cin = x.shape[1], H = x.shape[2],
                          W = x.shape[3], Cout = weight.shape[0];
        const std::size_t Ho = (H + 2 * padding - kh) / stride + 1;
        const std::size_t Wo = (W + 2 * padding - kw) / stride + 1;
        const std::size_t K = Cin * kh * kw, M = Ho * Wo;
        Tensor y({N, Cout, Ho, Wo});
        std::vector<double> col(K * M);
        for (std::size_t n = 0; n < N; ++n) {
            im2col(n, col, kh, kw, Ho, Wo);
            for (std::size_t co = 0; co < Cout; ++co) {
                double* yrow = &y.data[(n * Cout + co) * M];
                std::fill(yrow, yrow + M, bias[co]);
                const double* wrow = &weight.data[co * K];
                for (std::size_t k = 0; k < K; ++k) {
                    const double wv = wrow[k];
                    const double* crow = &col[k * M];
                    for (std::size_t m = 0; m < M; ++m)
                        yrow[m] += wv * crow[m];
                }
            }
        }
        return y;
    }

    Tensor backward(const Tensor& dy) override {
        const std::size_t N = x_.shape[0], Cin = x_.shape[1], H = x_.shape[2],
                          W = x_.shape[3], Cout = weight.shape[0],
                          kh = weight.shape[2], kw = weight.shape[3];
        if (dy.rank() != 4 || dy.shape[0] != N || dy.shape[1] != Cout)
            throw ShapeError("conv2d backward: dy shape mismatch");
        const std::size_t Ho = dy.shape[2], Wo = dy.shape[3];
        const std::size_t K = Cin * kh * kw, M = Ho * Wo;
        Tensor dx({N, Cin, H, W});
        std::vector<double> col(K * M), dcol(K * M);
        for (std::size_t n = 0; n < N; ++n) {
            im2col(n, col, kh, kw, Ho, Wo);
            std::fill(dcol.begin(), dcol.end(), 0.0);
            for (std::size_t co = 0; co < Cout; ++co) {
                const double* dyrow = &dy.data[(n * Cout + co) * M];
                double b = dbias[co];
                for (std::size_t m = 0; m < M; ++m) b += dyrow[m];
                dbias[co] = b;
                const double* wrow = &weight.data[co * K];
                double* dwrow = &dweight.data[co * K];
                for (std::size_t k = 0; k < K; ++k) {
                    const double* crow = &col[k * M];
                    double* dcrow = &dcol[k * M];
                    const double wv = wrow[k];
                    double dw = dwrow[k];
                    for (std::size_t m = 0; m < M; ++m) {
                        dw += dyrow[m] * crow[m];
                        dcrow[m] += wv * dyrow[m];
                    }
                    dwrow[k] = dw;
                }
            }
            // scatter the column gradient back to input positions
            std::size_t k = 0;
            for (std::size_t ci = 0; ci < Cin; ++ci)
                for (std::size_t i = 0; i < kh; ++i)
                    for (std::size_t j = 0; j < kw; ++j, ++k) {
                        const double* dcrow = &dcol[k * M];
                        for (std::size_t ho = 0; ho < Ho; ++ho) {
                            const std::ptrdiff_t h =
                                std::ptrdiff_t(ho * stride + i) -
                                std::ptrdiff_t(padding);
                            if (h < 0 || h >= std::ptrdiff_t(H)) continue;
                            double* drow =
                                &dx.data[((n * Cin + ci) * H +
                                          std::size_t(h)) * W];
                            for (std::size_t wo = 0; wo < Wo; ++wo) {
                                const std::ptrdiff_t w =
                                    std::ptrdiff_t(wo * stride + j) -
                                    std::ptrdiff_t(padding);
                                if (w < 0 || w >= std::ptrdiff_t(W)) continue;
                                drow[std::size_t(w)] += dcrow[ho * Wo + wo];
                            }
                        }
                    }
        }
        return dx;
    }

    std::vector<ParamRef> params() override {
        return {{"weight", &weight, &dweight}, {"bias", &bias, &dbias}};
    }

private:
    // Unrolls sample n of the saved input into a [Cin*kh*kw, Ho*Wo]
    // column matrix with zero padding, so the conv loops run branch-free
    // over contiguous rows.
    void im2col(std::size_t n, std::vector<double>& col, std::size_t kh,
                std::size_t kw, std::size_t Ho, std::size_t Wo) const {
        const std::size_t Cin = x_.shape[1], H = x_.shape[2], W = x_.shape[3];
        const std::size_t M = Ho * Wo;
        std::size_t k = 0;
        for (std::size_t ci = 0; ci < Cin; ++ci)
            for (std::size_t i = 0; i < kh; ++i)
                for (std::size_t j = 0; j < kw; ++j, ++k) {
                    double* crow = &col[k * M];
                    for (std::size_t ho = 0; ho < Ho; ++ho) {
                        const std::ptrdiff_t h =
                            std::ptrdiff_t(ho * stride + i) -
                            std::ptrdiff_t(padding);
                        double* out = crow + ho * Wo;
                        if (h < 0 || h >= std::ptrdiff_t(H)) {
                            std::fill(out, out + Wo, 0.0);
                            continue;
                        }
                        const double* xrow =
                            &x_.data[((n * Cin + ci) * H + std::size_t(h)) *
                                     W];
                        for (std::size_t wo = 0; wo < Wo; ++wo) {
                            const std::ptrdiff_t w =
                                std::ptrdiff_t(wo * stride + j) -
                                std::ptrdiff_t(padding);
                            out[wo] = (w < 0 || w >= std::ptrdiff_t(W))
                                          ? 0.0
                                          : xrow[std::size_t(w)];
                        }
                    }
                }
    }

    Tensor x_;
};

// 2x2 non-overlapping max pool. Ties route the gradient to the first cell
// in row-major window order so backward is deterministic.
class MaxPool2 : public Layer {
public:
    std::string name() const override { return "maxpool2"; }

    Tensor forward(const Tensor& x, Mode) override {
        if (x.rank() != 4) throw ShapeError("maxpool2: rank-4 input required");
        if (x.shape[2] % 2 != 0 || x.shape[3] % 2 != 0)
            throw ShapeError("maxpool2: odd spatial size");
        in_shape_ = x.shape;
        const std::size_t N = x.shape[0], C = x.shape[1], H = x.shape[2],
                          W = x.shape[3];
        Tensor y({N, C, H / 2, W / 2});
        argmax_.assign(y.size(), 0);
        std::size_t o = 0;
        for (std::size_t n = 0; n < N; ++n)
            for (std::size_t c = 0; c < C; ++c)
                for (std::size_t h = 0; h < H; h += 2)
                    for (std::size_t w = 0; w < W; w += 2) {
                        std::size_t best = ((n * C + c) * H + h) * W + w;
                        double bv = x.data[best];
                        const std::size_t cand[3] = {
                            ((n * C + c) * H + h) * W + w + 1,
                            ((n * C + c) * H + h + 1) * W + w,
                            ((n * C + c) * H + h + 1) * W + w + 1};
                        for (auto idx : cand)
                            if (x.data[idx] > bv) {
                                bv = x.data[idx];
                                best = idx;
                            }
                        y.data[o] = bv;
                        argmax_[o++] = best;
                    }
        return y;
    }

    Tensor backward(const Tensor& dy) override {
        if (dy.size() != argmax_.size())
            throw ShapeError("maxpool2 backward: dy size mismatch");
        Tensor dx(in_shape_);
        for (std::size_t o = 0; o < dy.size(); ++o)
            dx.data[argmax_[o]] += dy.data[o];
        return dx;
    }

private:
    std::vector<std::size_t> in_shape_;
    std::vector<std::size_t> argmax_;
};

class ReluLayer : public Layer {
public:
    std::string name() const override { return "relu"; }
    Tensor forward(const Tensor& x, Mode) override {
        x_ = x;
        return pointwise(x, Pointwise::Relu);
    }
    Tensor backward(const Tensor& dy) override {
        Tensor dx = dy;
        for (std::size_t i = 0; i < dx.size(); ++i)
            dx.data[i] *= x_.data[i] > 0.0 ? 1.0 : 0.0;
        return dx;
    }

private:
    Tensor x_;
};

class Flatten : public Layer {
public:
    std::string name() const override { return "flatten"; }
    Tensor forward(const Tensor& x, Mode) override {
        in_shape_ = x.shape;
        return x.reshaped({x.shape[0], x.size() / x.shape[0]});
    }
    Tensor backward(const Tensor& dy) override { return dy.reshaped(in_shape_); }

private:
    std::vector<std::size_t> in_shape_;
};

// Mean cross-entropy over the batch with max-subtraction stabilization.
// Returns the loss and writes dlogits = (softmax - onehot)/B.
inline double softmax_cross_entropy(const Tensor& logits,
                                    const std::vector<int>& labels,
                                    Tensor& dlogits) {
    if (logits.rank() != 2 || logits.shape[0] != labels.size())
        throw ShapeError("softmax_cross_entropy: shape mismatch");
    const std::size_t B = logits.shape[0], K = logits.shape[1];
    dlogits = zeros({B, K});
    double loss = 0.0;
    for (std::size_t b = 0; b < B; ++b) {
        const int label = labels[b];
        if (label < 0 || std::size_t(label) >= K)
            throw UsageError("softmax_cross_entropy: label out of range");
        double mx = logits.at2(b, 0);
        for (std::size_t k = 1; k < K; ++k)
            mx = std::max(mx, logits.at2(b, k));
        double sum = 0.0;
        for (std::size_t k = 0; k < K; ++k)
            sum += std::exp(logits.at2(b, k) - mx);
        const double logz = mx + std::log(sum);
        loss += logz - logits.at2(b, std::size_t(label));
        for (std::size_t k = 0; k < K; ++k) {
            double p = std::exp(logits.at2(b, k) - logz);
            dlogits.at2(b, k) = (p - (std::size_t(label) == k ? 1.0 : 0.0)) /
                                double(B);
        }
    }
    return loss / double(B);
}

// Finite-difference oracle. Couples the layer output to a scalar probe
// loss sum(y * probe) with fixed random probe weights, then compares the
// central difference for every input and parameter element against the
// analytic gradients. Returns the worst relative error.
struct GradCheckResult {
    double max_rel_error = 0.0;
    std::vector<std::pair<std::string, double>> per_group;
};

inline GradCheckResult grad_check(Layer& layer, Tensor x, double h, Mode mode,
                                  std::uint64_t probe_seed = 7) {
    if (h <= 0.0) throw UsageError("grad_check: h must be positive");
    Tensor y0 = layer.forward(x, mode);
    if (!y0.all_finite())
        throw NumericError(layer.name(), "grad_check forward");
    Prng probe_rng(probe_seed);
    Tensor probe = gaussian(y0.shape, probe_rng);

    layer.zero_grad();
    Tensor dx = layer.backward(probe);

    auto probe_loss = [&](const Tensor& xeval) {
        Tensor y = layer.forward(xeval, mode);
        double s = 0.0;
        for (std::size_t i = 0; i < y.size(); ++i) s += y.data[i] * probe.data[i];
        return s;
    };
    auto rel_err = [](double a, double n) {
        return std::abs(a - n) /
               std::max({std::abs(a), std::abs(n), 1e-8});
    };

    GradCheckResult res;
    double worst_input = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double orig = x.data[i];
        x.data[i] = orig + h;
        const double lp = probe_loss(x);
        x.data[i] = orig - h;
        const double lm = probe_loss(x);
        x.data[i] = orig;
        worst_input = std::max(worst_input,
                               rel_err(dx.data[i], (lp - lm) / (2.0 * h)));
    }
    res.per_group.emplace_back("input", worst_input);
    res.max_rel_error = worst_input;

    for (auto& p : layer.params()) {
        double worst = 0.0;
        for (std::size_t i = 0; i < p.value->size(); ++i) {
            const double orig = p.value->data[i];
            p.value->data[i] = orig + h;
            const double lp = probe_loss(x);
            p.value->data[i] = orig - h;
            const double lm = probe_loss(x);
            p.value->data[i] = orig;
            worst = std::max(worst,
                             rel_err(p.grad->data[i], (lp - lm) / (2.0 * h)));
        }
        res.per_group.emplace_back(p.name, worst);
        res.max_rel_error = std::max(res.max_rel_error, worst);
    }
    return res;
}

}  // namespace afnlab
