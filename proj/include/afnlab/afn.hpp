#pragma once

#include "afnlab/norms.hpp"

namespace afnlab {

// Adaptive fusion normalization.
//
// Pipeline per forward pass (channel-last view of shape (N*H*W, C) for the
// batch scope, or per-sample (H*W, C) rows for the instance scope):
//   1. (mu, sigma) per channel (batch stats, instance stats, or running
//      stats in batch-scope eval)
//   2. stat nets: mu_stan = dec_mu(relu(enc(mu))),
//                 sigma_stan = relu(dec_sigma(relu(enc(sigma))))
//      with one encoder shared by both decoders
//   3. residual blend with sigmoid-bounded lambdas:
//        mu_hat = l_mu*mu_stan + (1-l_mu)*mu   (same for sigma)
//   4. xbar = (x - mu_hat)/(sigma_hat + eps)
//   5. rescale nets (separate encoders):
//        gamma_hat = l_g*sigmoid(gdec(relu(genc(sigma)))) + gamma_bias
//        beta_hat  = l_b*tanh(bdec(relu(benc(mu))))       + beta_bias
//   6. y = xbar*gamma_hat + beta_hat
//
// Lambda logits start at -3 (standardization) and -5 (rescale) so a fresh
// layer behaves like plain BN. The instance-scope variant is the
// ASRNorm-style comparison layer (an approximation, not a reimplementation).
class AfnLayer : public Layer {
public:
    enum class Scope { Batch, Instance };

    std::size_t channels, c_stan, c_rescale;
    Scope scope;
    // standardization stat net (shared encoder)
    Tensor enc_w, enc_b;            // [C_stan,C],[C_stan]
    Tensor dec_mu_w, dec_mu_b;      // [C,C_stan],[C]
    Tensor dec_sg_w, dec_sg_b;
    // rescale nets
    Tensor genc_w, genc_b, gdec_w, gdec_b;  // C -> C_rescale -> C
    Tensor benc_w, benc_b, bdec_w, bdec_b;
    // lambda logits, effective lambda = sigmoid(logit)
    Tensor lam_mu_logit, lam_sg_logit, lam_g_logit, lam_b_logit;  // [C]
    Tensor gamma_bias, beta_bias;   // [C]
    Tensor running_mu, running_sigma;  // [C]; EMA of sigma directly, not var
    double momentum = 0.1, eps = 1e-5;
    // Ablation hook: zeroes the gradient path through mu(x), sigma(x).
    // Exists so tests can demonstrate those terms are load-bearing.
    bool detach_stat_grad = false;

    // grads, one per trainable tensor above
    Tensor d_enc_w, d_enc_b, d_dec_mu_w, d_dec_mu_b, d_dec_sg_w, d_dec_sg_b;
    Tensor d_genc_w, d_genc_b, d_gdec_w, d_gdec_b;
    Tensor d_benc_w, d_benc_b, d_bdec_w, d_bdec_b;
    Tensor d_lam_mu, d_lam_sg, d_lam_g, d_lam_b;
    Tensor d_gamma_bias, d_beta_bias;

    AfnLayer(std::size_t C, Scope scope_, Prng& prng)
        : channels(C),
          c_stan(std::max<std::size_t>(1, C / 2)),
          c_rescale(std::max<std::size_t>(1, C / 16)),
          scope(scope_),
          enc_w(gaussian({c_stan, C}, prng, 0.0, 1.0 / std::sqrt(double(C)))),
          enc_b(zeros({c_stan})),
          dec_mu_w(gaussian({C, c_stan}, prng, 0.0,
                            1.0 / std::sqrt(double(c_stan)))),
          dec_mu_b(zeros({C})),
          dec_sg_w(gaussian({C, c_stan}, prng, 0.0,
                            1.0 / std::sqrt(double(c_stan)))),
          dec_sg_b(zeros({C})),
          genc_w(gaussian({c_rescale, C}, prng, 0.0,
                          1.0 / std::sqrt(double(C)))),
          genc_b(zeros({c_rescale})),
          gdec_w(gaussian({C, c_rescale}, prng, 0.0,
                          1.0 / std::sqrt(double(c_rescale)))),
          gdec_b(zeros({C})),
          benc_w(gaussian({c_rescale, C}, prng, 0.0,
                          1.0 / std::sqrt(double(C)))),
          benc_b(zeros({c_rescale})),
          bdec_w(gaussian({C, c_rescale}, prng, 0.0,
                          1.0 / std::sqrt(double(c_rescale)))),
          bdec_b(zeros({C})),
          lam_mu_logit(constant({C}, -3.0)),
          lam_sg_logit(constant({C}, -3.0)),
          lam_g_logit(constant({C}, -5.0)),
          lam_b_logit(constant({C}, -5.0)),
          gamma_bias(ones({C})),
          beta_bias(zeros({C})),
          running_mu(zeros({C})),
          running_sigma(ones({C})) {
        alloc_grads();
    }

    std::string name() const override {
        return scope == Scope::Batch ? "afn" : "asr";
    }

    std::vector<std::pair<std::string, Tensor*>> state() override {
        return {{"running_mu", &running_mu},
                {"running_sigma", &running_sigma}};
    }

    // Read-only views of the most recent forward's intermediates; the
    // invariants |gamma_hat - gamma_bias| <= sigmoid(lambda_gamma_logit)
    // and sigma_hat >= 0 are asserted against these in tests.
    const Tensor& last_gamma_hat() const { return gamma_hat_; }
    const Tensor& last_beta_hat() const { return beta_hat_; }
    const Tensor& last_sigma_hat() const { return sg_hat_; }
    const Tensor& last_sigma_stan() const { return sg_stan_; }

    // Copies the BN affine parameters and running stats so a pretrained BN
    // stage can be resumed; sigma is the square root of BN's variance.
    void load_from_bn(const BatchNorm2d& bn) {
        if (bn.gamma.size() != channels)
            throw ShapeError("load_from_bn: channel mismatch");
        gamma_bias = bn.gamma;
        beta_bias = bn.beta;
        running_mu = bn.running_mean;
        running_sigma = bn.running_var;
        for (auto& v : running_sigma.data) v = std::sqrt(v);
    }

    Tensor forward(const Tensor& x, Mode mode) override {
        if (x.rank() != 4 || x.shape[1] != channels)
            throw ShapeError("afn: channel mismatch");
        const std::size_t N = x.shape[0], C = channels,
                          HW = x.shape[2] * x.shape[3];
        x_ = x;
        // Stat rows: one per group of positions sharing (mu, sigma).
        rows_ = scope == Scope::Batch ? 1 : N;
        stats_from_x_ = !(scope == Scope::Batch && mode == Mode::Eval);
        mu_ = zeros({rows_, C});
        sg_ = zeros({rows_, C});
        if (stats_from_x_) {
            Tensor gmu, gsg;
            reduce_stats(x,
                         scope == Scope::Batch ? StatScope::batch()
                                               : StatScope::instance(),
                         gmu, gsg);
            for (std::size_t r = 0; r < rows_; ++r)
                for (std::size_t c = 0; c < C; ++c) {
                    mu_.at2(r, c) = gmu[scope == Scope::Batch ? c : r * C + c];
                    sg_.at2(r, c) = gsg[scope == Scope::Batch ? c : r * C + c];
                }
            if (scope == Scope::Batch && mode == Mode::Train) {
                for (std::size_t c = 0; c < C; ++c) {
                    running_mu[c] = (1.0 - momentum) * running_mu[c] +
                                    momentum * mu_.at2(0, c);
                    running_sigma[c] = (1.0 - momentum) * running_sigma[c] +
                                       momentum * sg_.at2(0, c);
                }
            }
        } else {
            for (std::size_t c = 0; c < C; ++c) {
                mu_.at2(0, c) = running_mu[c];
                sg_.at2(0, c) = running_sigma[c];
            }
        }

        // stat nets over the row matrix
        h_mu_pre_ = affine_rows(mu_, enc_w, enc_b);
        h_mu_ = pointwise(h_mu_pre_, Pointwise::Relu);
        mu_stan_ = affine_rows(h_mu_, dec_mu_w, dec_mu_b);
        h_sg_pre_ = affine_rows(sg_, enc_w, enc_b);
        h_sg_ = pointwise(h_sg_pre_, Pointwise::Relu);
        sg_stan_pre_ = affine_rows(h_sg_, dec_sg_w, dec_sg_b);
        sg_stan_ = pointwise(sg_stan_pre_, Pointwise::Relu);

        // residual blend
        mu_hat_ = zeros({rows_, C});
        sg_hat_ = zeros({rows_, C});
        for (std::size_t r = 0; r < rows_; ++r)
            for (std::size_t c = 0; c < C; ++c) {
                const double lm = sigmoid(lam_mu_logit[c]);
                const double ls = sigmoid(lam_sg_logit[c]);
                mu_hat_.at2(r, c) =
                    lm * mu_stan_.at2(r, c) + (1.0 - lm) * mu_.at2(r, c);
                sg_hat_.at2(r, c) =
                    ls * sg_stan_.at2(r, c) + (1.0 - ls) * sg_.at2(r, c);
            }

        // rescale nets
        g_h_pre_ = affine_rows(sg_, genc_w, genc_b);
        g_h_ = pointwise(g_h_pre_, Pointwise::Relu);
        g_z_ = affine_rows(g_h_, gdec_w, gdec_b);
        b_h_pre_ = affine_rows(mu_, benc_w, benc_b);
        b_h_ = pointwise(b_h_pre_, Pointwise::Relu);
        b_z_ = affine_rows(b_h_, bdec_w, bdec_b);
        gamma_hat_ = zeros({rows_, C});
        beta_hat_ = zeros({rows_, C});
        for (std::size_t r = 0; r < rows_; ++r)
            for (std::size_t c = 0; c < C; ++c) {
                gamma_hat_.at2(r, c) =
                    sigmoid(lam_g_logit[c]) * sigmoid(g_z_.at2(r, c)) +
                    gamma_bias[c];
                beta_hat_.at2(r, c) =
                    sigmoid(lam_b_logit[c]) * std::tanh(b_z_.at2(r, c)) +
                    beta_bias[c];
            }

        // standardize + rescale
        xbar_ = zeros(x.shape);
        Tensor y(x.shape);
        for (std::size_t n = 0; n < N; ++n)
            for (std::size_t c = 0; c < C; ++c) {
                const std::size_t r = scope == Scope::Batch ? 0 : n;
                const double inv = 1.0 / (sg_hat_.at2(r, c) + eps);
                const double mh = mu_hat_.at2(r, c);
                const double gh = gamma_hat_.at2(r, c);
                const double bh = beta_hat_.at2(r, c);
                const double* src = &x.data[(n * C + c) * HW];
                double* xb = &xbar_.data[(n * C + c) * HW];
                double* dst = &y.data[(n * C + c) * HW];
                for (std::size_t i = 0; i < HW; ++i) {
                    xb[i] = (src[i] - mh) * inv;
                    dst[i] = xb[i] * gh + bh;
                }
            }
        return y;
    }

    Tensor backward(const Tensor& dy) override {
        if (!dy.same_shape(x_)) throw UsageError("afn backward: cache mismatch");
        const std::size_t N = x_.shape[0], C = channels,
                          HW = x_.shape[2] * x_.shape[3];
        const double m = double(scope == Scope::Batch ? N * HW : HW);
        const std::size_t R = rows_;

        Tensor dgamma_hat = zeros({R, C});
        Tensor dbeta_hat = zeros({R, C});
        Tensor dmu_hat = zeros({R, C});
        Tensor dsg_hat = zeros({R, C});
        Tensor dmu = zeros({R, C});   // grads w.r.t. raw stats
        Tensor dsg = zeros({R, C});
        Tensor dx(x_.shape);

        // through y = xbar*gamma_hat + beta_hat and the standardization
        for (std::size_t n = 0; n < N; ++n)
            for (std::size_t c = 0; c < C; ++c) {
                const std::size_t r = scope == Scope::Batch ? 0 : n;
                const double inv = 1.0 / (sg_hat_.at2(r, c) + eps);
                const double gh = gamma_hat_.at2(r, c);
                const double* g = &dy.data[(n * C + c) * HW];
                const double* xb = &xbar_.data[(n * C + c) * HW];
                double* dxs = &dx.data[(n * C + c) * HW];
                double sgh = 0.0, sbh = 0.0, smh = 0.0, ssh = 0.0;
                for (std::size_t i = 0; i < HW; ++i) {
                    const double dxbar = g[i] * gh;
                    sgh += g[i] * xb[i];
                    sbh += g[i];
                    dxs[i] += dxbar * inv;
                    smh -= dxbar * inv;
                    ssh -= dxbar * xb[i] * inv;
                }
                dgamma_hat.at2(r, c) += sgh;
                dbeta_hat.at2(r, c) += sbh;
                dmu_hat.at2(r, c) += smh;
                dsg_hat.at2(r, c) += ssh;
            }

        // rescale heads
        Tensor dg_z = zeros({R, C});
        Tensor db_z = zeros({R, C});
        for (std::size_t r = 0; r < R; ++r)
            for (std::size_t c = 0; c < C; ++c) {
                const double lg = sigmoid(lam_g_logit[c]);
                const double lb = sigmoid(lam_b_logit[c]);
                const double sg_head = sigmoid(g_z_.at2(r, c));
                const double th = std::tanh(b_z_.at2(r, c));
                d_gamma_bias[c] += dgamma_hat.at2(r, c);
                d_beta_bias[c] += dbeta_hat.at2(r, c);
                d_lam_g[c] += dgamma_hat.at2(r, c) * sg_head * lg * (1.0 - lg);
                d_lam_b[c] += dbeta_hat.at2(r, c) * th * lb * (1.0 - lb);
                dg_z.at2(r, c) =
                    dgamma_hat.at2(r, c) * lg * sg_head * (1.0 - sg_head);
                db_z.at2(r, c) = dbeta_hat.at2(r, c) * lb * (1.0 - th * th);
            }
        mlp_backward(dg_z, g_h_, g_h_pre_, sg_, gdec_w, genc_w, d_gdec_w,
                     d_gdec_b, d_genc_w, d_genc_b, dsg);
        mlp_backward(db_z, b_h_, b_h_pre_, mu_, bdec_w, benc_w, d_bdec_w,
                     d_bdec_b, d_benc_w, d_benc_b, dmu);

        // residual blend
        Tensor dmu_stan = zeros({R, C});
        Tensor dsg_stan_pre = zeros({R, C});
        for (std::size_t r = 0; r < R; ++r)
            for (std::size_t c = 0; c < C; ++c) {
                const double lm = sigmoid(lam_mu_logit[c]);
                const double ls = sigmoid(lam_sg_logit[c]);
                dmu_stan.at2(r, c) = dmu_hat.at2(r, c) * lm;
                dmu.at2(r, c) += dmu_hat.at2(r, c) * (1.0 - lm);
                d_lam_mu[c] += dmu_hat.at2(r, c) *
                               (mu_stan_.at2(r, c) - mu_.at2(r, c)) * lm *
                               (1.0 - lm);
                const double dsg_stan = dsg_hat.at2(r, c) * ls;
                dsg.at2(r, c) += dsg_hat.at2(r, c) * (1.0 - ls);
                d_lam_sg[c] += dsg_hat.at2(r, c) *
                               (sg_stan_.at2(r, c) - sg_.at2(r, c)) * ls *
                               (1.0 - ls);
                dsg_stan_pre.at2(r, c) =
                    dsg_stan * (sg_stan_pre_.at2(r, c) > 0.0 ? 1.0 : 0.0);
            }

        // stat nets; the shared encoder accumulates from both branches
        mlp_backward(dmu_stan, h_mu_, h_mu_pre_, mu_, dec_mu_w, enc_w,
                     d_dec_mu_w, d_dec_mu_b, d_enc_w, d_enc_b, dmu);
        mlp_backward(dsg_stan_pre, h_sg_, h_sg_pre_, sg_, dec_sg_w, enc_w,
                     d_dec_sg_w, d_dec_sg_b, d_enc_w, d_enc_b, dsg);

        // raw stats back into x
        if (stats_from_x_ && !detach_stat_grad) {
            for (std::size_t n = 0; n < N; ++n)
                for (std::size_t c = 0; c < C; ++c) {
                    const std::size_t r = scope == Scope::Batch ? 0 : n;
                    const double mu = mu_.at2(r, c);
                    const double sg = sg_.at2(r, c);
                    const double dmu_per = dmu.at2(r, c) / m;
                    const double dsg_coef =
                        sg > 0.0 ? dsg.at2(r, c) / (m * sg) : 0.0;
                    const double* xs = &x_.data[(n * C + c) * HW];
                    double* dxs = &dx.data[(n * C + c) * HW];
                    for (std::size_t i = 0; i < HW; ++i)
                        dxs[i] += dmu_per + dsg_coef * (xs[i] - mu);
                }
        }
        return dx;
    }

    std::vector<ParamRef> params() override {
        return {{"enc_w", &enc_w, &d_enc_w},
                {"enc_b", &enc_b, &d_enc_b},
                {"dec_mu_w", &dec_mu_w, &d_dec_mu_w},
                {"dec_mu_b", &dec_mu_b, &d_dec_mu_b},
                {"dec_sigma_w", &dec_sg_w, &d_dec_sg_w},
                {"dec_sigma_b", &dec_sg_b, &d_dec_sg_b},
                {"gamma_enc_w", &genc_w, &d_genc_w},
                {"gamma_enc_b", &genc_b, &d_genc_b},
                {"gamma_dec_w", &gdec_w, &d_gdec_w},
                {"gamma_dec_b", &gdec_b, &d_gdec_b},
                {"beta_enc_w", &benc_w, &d_benc_w},
                {"beta_enc_b", &benc_b, &d_benc_b},
                {"beta_dec_w", &bdec_w, &d_bdec_w},
                {"beta_dec_b", &bdec_b, &d_bdec_b},
                {"lambda_mu_logit", &lam_mu_logit, &d_lam_mu},
                {"lambda_sigma_logit", &lam_sg_logit, &d_lam_sg},
                {"lambda_gamma_logit", &lam_g_logit, &d_lam_g},
                {"lambda_beta_logit", &lam_b_logit, &d_lam_b},
                {"gamma_bias", &gamma_bias, &d_gamma_bias},
                {"beta_bias", &beta_bias, &d_beta_bias}};
    }

private:
    // y = rows * W^T + b for a [R,in] row matrix and [out,in] weight.
    static Tensor affine_rows(const Tensor& rows, const Tensor& w,
                              const Tensor& b) {
        const std::size_t R = rows.shape[0], in = w.shape[1],
                          out = w.shape[0];
        Tensor y({R, out});
        for (std::size_t r = 0; r < R; ++r)
            for (std::size_t o = 0; o < out; ++o) {
                double acc = b[o];
                for (std::size_t i = 0; i < in; ++i)
                    acc += rows.at2(r, i) * w.at2(o, i);
                y.at2(r, o) = acc;
            }
        return y;
    }

    // Backward of dec(relu(enc(s))) given d(dec output); accumulates weight
    // grads and adds the input-side gradient into ds.
    static void mlp_backward(const Tensor& dout, const Tensor& h,
                             const Tensor& h_pre, const Tensor& s,
                             const Tensor& dec_w, const Tensor& enc_w,
                             Tensor& d_dec_w, Tensor& d_dec_b, Tensor& d_enc_w,
                             Tensor& d_enc_b, Tensor& ds) {
        const std::size_t R = dout.shape[0], out = dec_w.shape[0],
                          hid = dec_w.shape[1], in = enc_w.shape[1];
        Tensor dh({R, hid});
        for (std::size_t r = 0; r < R; ++r)
            for (std::size_t o = 0; o < out; ++o) {
                const double g = dout.at2(r, o);
                if (g == 0.0) continue;
                d_dec_b[o] += g;
                for (std::size_t j = 0; j < hid; ++j) {
                    d_dec_w.at2(o, j) += g * h.at2(r, j);
                    dh.at2(r, j) += g * dec_w.at2(o, j);
                }
            }
        for (std::size_t r = 0; r < R; ++r)
            for (std::size_t j = 0; j < hid; ++j) {
                const double g =
                    dh.at2(r, j) * (h_pre.at2(r, j) > 0.0 ? 1.0 : 0.0);
                if (g == 0.0) continue;
                d_enc_b[j] += g;
                for (std::size_t i = 0; i < in; ++i) {
                    d_enc_w.at2(j, i) += g * s.at2(r, i);
                    ds.at2(r, i) += g * enc_w.at2(j, i);
                }
            }
    }

    void alloc_grads() {
        auto z = [](const Tensor& t) { return zeros(t.shape); };
        d_enc_w = z(enc_w); d_enc_b = z(enc_b);
        d_dec_mu_w = z(dec_mu_w); d_dec_mu_b = z(dec_mu_b);
        d_dec_sg_w = z(dec_sg_w); d_dec_sg_b = z(dec_sg_b);
        d_genc_w = z(genc_w); d_genc_b = z(genc_b);
        d_gdec_w = z(gdec_w); d_gdec_b = z(gdec_b);
        d_benc_w = z(benc_w); d_benc_b = z(benc_b);
        d_bdec_w = z(bdec_w); d_bdec_b = z(bdec_b);
        d_lam_mu = z(lam_mu_logit); d_lam_sg = z(lam_sg_logit);
        d_lam_g = z(lam_g_logit); d_lam_b = z(lam_b_logit);
        d_gamma_bias = z(gamma_bias); d_beta_bias = z(beta_bias);
    }

    // forward cache
    Tensor x_, mu_, sg_;
    Tensor h_mu_pre_, h_mu_, mu_stan_;
    Tensor h_sg_pre_, h_sg_, sg_stan_pre_, sg_stan_;
    Tensor mu_hat_, sg_hat_;
    Tensor g_h_pre_, g_h_, g_z_;
    Tensor b_h_pre_, b_h_, b_z_;
    Tensor gamma_hat_, beta_hat_, xbar_;
    std::size_t rows_ = 1;
    bool stats_from_x_ = true;
};

}  // namespace afnlab
