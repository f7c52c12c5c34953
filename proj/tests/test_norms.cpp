#include <doctest.h>

#include "afnlab/norms.hpp"

using namespace afnlab;

namespace {

// Independent triple-loop oracle for reduce_stats.
void oracle_stats(const Tensor& x, const StatScope& scope, Tensor& mu,
                  Tensor& sigma) {
    const std::size_t N = x.shape[0], C = x.shape[1], H = x.shape[2],
                      W = x.shape[3];
    const std::size_t G = scope.num_groups(N, C);
    std::vector<std::vector<double>> members(G);
    for (std::size_t n = 0; n < N; ++n)
        for (std::size_t c = 0; c < C; ++c)
            for (std::size_t h = 0; h < H; ++h)
                for (std::size_t w = 0; w < W; ++w)
                    members[scope.group_index(n, c, N, C)].push_back(
                        x.at4(n, c, h, w));
    mu = zeros({G});
    sigma = zeros({G});
    for (std::size_t g = 0; g < G; ++g) {
        double s = 0.0;
        for (double v : members[g]) s += v;
        mu[g] = s / double(members[g].size());
        double q = 0.0;
        for (double v : members[g]) q += (v - mu[g]) * (v - mu[g]);
        sigma[g] = std::sqrt(q / double(members[g].size()));
    }
}

}  // namespace

TEST_CASE("reduce_stats hand examples") {
    Tensor x({2, 1, 1, 1});
    x.data = {1, 3};
    Tensor mu, sg;
    reduce_stats(x, StatScope::batch(), mu, sg);
    CHECK(mu[0] == 2.0);
    CHECK(sg[0] == 1.0);

    Tensor c = constant({2, 3, 2, 2}, 4.2);
    for (auto scope : {StatScope::batch(), StatScope::layer(),
                       StatScope::instance(), StatScope::group(3)}) {
        reduce_stats(c, scope, mu, sg);
        for (double v : sg.data) CHECK(v == 0.0);
    }

    Tensor q({1, 1, 1, 4});
    q.data = {0, 0, 0, 4};
    reduce_stats(q, StatScope::batch(), mu, sg);
    CHECK(mu[0] == 1.0);
    CHECK(sg[0] == doctest::Approx(std::sqrt(3.0)).epsilon(1e-12));
}

TEST_CASE("group degenerate counts equal instance and layer") {
    Prng prng(2);
    Tensor x = gaussian({3, 4, 2, 2}, prng);
    Tensor mu_g, sg_g, mu_ref, sg_ref;
    reduce_stats(x, StatScope::group(4), mu_g, sg_g);
    reduce_stats(x, StatScope::instance(), mu_ref, sg_ref);
    CHECK(mu_g.data == mu_ref.data);
    CHECK(sg_g.data == sg_ref.data);
    reduce_stats(x, StatScope::group(1), mu_g, sg_g);
    reduce_stats(x, StatScope::layer(), mu_ref, sg_ref);
    CHECK(mu_g.data == mu_ref.data);
    CHECK(sg_g.data == sg_ref.data);
}

TEST_CASE("reduce_stats matches triple-loop oracle") {
    Prng prng(3);
    for (int trial = 0; trial < 20; ++trial) {
        const std::size_t N = 1 + prng.below(8), C = 1 + prng.below(16),
                          H = 1 + prng.below(8), W = 1 + prng.below(8);
        Tensor x = gaussian({N, C, H, W}, prng, 0.5, 2.0);
        std::vector<StatScope> scopes = {StatScope::batch(),
                                         StatScope::layer(),
                                         StatScope::instance()};
        for (std::size_t g = 1; g <= C; ++g)
            if (C % g == 0) {
                scopes.push_back(StatScope::group(g));
                break;
            }
        for (const auto& scope : scopes) {
            Tensor mu, sg, omu, osg;
            reduce_stats(x, scope, mu, sg);
            oracle_stats(x, scope, omu, osg);
            for (std::size_t i = 0; i < mu.size(); ++i) {
                CHECK(std::abs(mu[i] - omu[i]) <= 1e-12);
                CHECK(std::abs(sg[i] - osg[i]) <= 1e-12);
            }
        }
    }
}

TEST_CASE("standardized output has zero mean and unit std per group") {
    Prng prng(4);
    Tensor x = gaussian({4, 8, 6, 6}, prng, 3.0, 5.0);
    for (auto scope : {StatScope::batch(), StatScope::layer(),
                       StatScope::instance(), StatScope::group(4)}) {
        ScopeNorm norm(8, scope, 1e-10);
        Tensor y = norm.forward(x, Mode::Train);
        Tensor mu, sg;
        reduce_stats(y, scope, mu, sg);
        for (double v : mu.data) CHECK(std::abs(v) <= 1e-10);
        for (double v : sg.data) CHECK(v == doctest::Approx(1.0).epsilon(1e-6));
    }
}

TEST_CASE("constant input maps to beta") {
    ScopeNorm norm(3, StatScope::instance());
    norm.beta.data = {1.0, -2.0, 0.5};
    Tensor x = constant({2, 3, 2, 2}, 9.0);
    Tensor y = norm.forward(x, Mode::Train);
    for (std::size_t n = 0; n < 2; ++n)
        for (std::size_t c = 0; c < 3; ++c)
            for (std::size_t i = 0; i < 4; ++i)
                CHECK(y.at4(n, c, i / 2, i % 2) == norm.beta[c]);
}

TEST_CASE("norm backward passes grad check for all scopes") {
    for (std::uint64_t seed : {1ull, 2ull, 3ull}) {
        for (auto scope : {StatScope::batch(), StatScope::layer(),
                           StatScope::instance(), StatScope::group(4)}) {
            Prng prng(seed);
            ScopeNorm norm(8, scope);
            norm.gamma = gaussian({8}, prng, 1.0, 0.2);
            norm.beta = gaussian({8}, prng, 0.0, 0.2);
            Tensor x = gaussian({4, 8, 6, 6}, prng);
            auto res = grad_check(norm, x, 1e-5, Mode::Train, seed + 1000);
            CHECK(res.max_rel_error <= 1e-4);
        }
    }
}

TEST_CASE("batchnorm eval with unit running stats") {
    BatchNorm2d bn(2);
    Prng prng(5);
    Tensor x = gaussian({3, 2, 2, 2}, prng);
    Tensor y = bn.forward(x, Mode::Eval);
    for (std::size_t i = 0; i < x.size(); ++i)
        CHECK(y.data[i] ==
              doctest::Approx(x.data[i] / (1.0 + bn.eps)).epsilon(1e-15));
}

TEST_CASE("batchnorm eval is batch-size independent") {
    BatchNorm2d bn(2);
    Prng prng(6);
    bn.running_mean = gaussian({2}, prng, 0.0, 1.0);
    bn.running_var = constant({2}, 2.0);
    Tensor row = gaussian({1, 2, 3, 3}, prng);
    Tensor big = zeros({5, 2, 3, 3});
    for (std::size_t n = 0; n < 5; ++n)
        std::copy(row.data.begin(), row.data.end(),
                  big.data.begin() + std::ptrdiff_t(n * row.size()));
    Tensor y1 = bn.forward(row, Mode::Eval);
    Tensor y5 = bn.forward(big, Mode::Eval);
    for (std::size_t i = 0; i < row.size(); ++i)
        CHECK(y5.data[i] == y1.data[i]);
}

TEST_CASE("batchnorm running stats converge to the data distribution") {
    BatchNorm2d bn(1);
    Prng prng(7);
    const double true_mean = 1.5;
    for (int step = 0; step < 500; ++step) {
        Tensor x = gaussian({16, 1, 2, 2}, prng, true_mean, 1.0);
        bn.forward(x, Mode::Train);
    }
    CHECK(std::abs(bn.running_mean[0] - true_mean) <= 0.05);
    CHECK(std::abs(bn.running_var[0] - 1.0) <= 0.1);
}

TEST_CASE("batchnorm momentum 1 makes eval match train standardization") {
    BatchNorm2d bn(3, /*momentum=*/1.0);
    Prng prng(8);
    Tensor x = gaussian({4, 3, 3, 3}, prng, 2.0, 3.0);
    Tensor yt = bn.forward(x, Mode::Train);
    Tensor ye = bn.forward(x, Mode::Eval);
    for (std::size_t i = 0; i < x.size(); ++i)
        CHECK(ye.data[i] == doctest::Approx(yt.data[i]).epsilon(1e-12));
}

TEST_CASE("batchnorm train grad check") {
    for (std::uint64_t seed : {1ull, 2ull, 3ull}) {
        Prng prng(seed);
        BatchNorm2d bn(8);
        Tensor x = gaussian({4, 8, 5, 5}, prng);
        auto res = grad_check(bn, x, 1e-5, Mode::Train, seed + 1000);
        CHECK(res.max_rel_error <= 1e-4);
    }
}

TEST_CASE("bin endpoints match bn and in exactly") {
    Prng prng(9);
    Tensor x = gaussian({3, 4, 4, 4}, prng, 1.0, 2.0);
    BinLayer bin(4);
    BatchNorm2d bn(4);
    ScopeNorm in(4, StatScope::instance());

    bin.rho = ones({4});
    Tensor yb = bin.forward(x, Mode::Train);
    BatchNorm2d bn_fresh(4);
    Tensor yb_ref = bn_fresh.forward(x, Mode::Train);
    for (std::size_t i = 0; i < x.size(); ++i)
        CHECK(yb.data[i] == yb_ref.data[i]);

    bin.rho = zeros({4});
    Tensor yi = bin.forward(x, Mode::Train);
    Tensor yi_ref = in.forward(x, Mode::Train);
    for (std::size_t i = 0; i < x.size(); ++i)
        CHECK(yi.data[i] == yi_ref.data[i]);
}

TEST_CASE("bin forward is linear in rho") {
    Prng prng(10);
    Tensor x = gaussian({2, 3, 4, 4}, prng);
    BinLayer bin(3);
    auto run = [&](double rho) {
        bin.rho = constant({3}, rho);
        return bin.forward(x, Mode::Train);
    };
    Tensor y0 = run(0.0), yh = run(0.5), y1 = run(1.0);
    for (std::size_t i = 0; i < x.size(); ++i)
        CHECK(yh.data[i] ==
              doctest::Approx(0.5 * (y0.data[i] + y1.data[i])).epsilon(1e-12));
}

TEST_CASE("bin clip clamps rho") {
    BinLayer bin(2);
    bin.rho.data = {1.2, -0.3};
    bin.clip();
    CHECK(bin.rho.data == std::vector<double>{1.0, 0.0});
}

TEST_CASE("bin grad check") {
    for (std::uint64_t seed : {1ull, 2ull, 3ull}) {
        Prng prng(seed);
        BinLayer bin(8);
        bin.rho = constant({8}, 0.37);
        Tensor x = gaussian({4, 8, 5, 5}, prng);
        auto res = grad_check(bin, x, 1e-5, Mode::Train, seed + 1000);
        CHECK(res.max_rel_error <= 1e-4);
    }
}
