#include <doctest.h>

#include "afnlab/norms.hpp"
#include "afnlab/optim.hpp"

using namespace afnlab;

TEST_CASE("vanilla sgd step") {
    Tensor p = zeros({1});
    Tensor g = ones({1});
    SgdNesterov opt(0.1, 0.0);
    opt.step({{"p", &p, &g}});
    CHECK(p[0] == doctest::Approx(-0.1).epsilon(1e-15));
}

TEST_CASE("zero gradient moves nothing") {
    Tensor p = constant({3}, 2.0);
    Tensor g = zeros({3});
    SgdNesterov sgd(0.1, 0.9);
    sgd.step({{"p", &p, &g}});
    for (double v : p.data) CHECK(v == 2.0);

    Adam adam(0.1);
    adam.step({{"p", &p, &g}});
    for (double v : p.data) CHECK(std::abs(v - 2.0) <= 1e-12);
}

TEST_CASE("adam first step magnitude is about lr for constant grad") {
    for (double gval : {0.01, 1.0, 250.0}) {
        Tensor p = zeros({1});
        Tensor g = constant({1}, gval);
        Adam adam(1e-3);
        adam.step({{"p", &p, &g}});
        CHECK(std::abs(std::abs(p[0]) - 1e-3) <= 1e-6);
        CHECK(p[0] < 0.0);
    }
}

TEST_CASE("both optimizers descend a convex quadratic") {
    for (int which = 0; which < 2; ++which) {
        Tensor p({4});
        p.data = {1.0, -2.0, 0.5, 3.0};
        Tensor g = zeros({4});
        std::unique_ptr<Optimizer> opt;
        if (which == 0)
            opt = std::make_unique<SgdNesterov>(1e-2, 0.9);
        else
            opt = std::make_unique<Adam>(1e-2);
        auto objective = [&] {
            double s = 0.0;
            for (double v : p.data) s += 0.5 * v * v;
            return s;
        };
        // Neither optimizer descends strictly per step (momentum and the
        // near-constant Adam step both overshoot), so check convergence.
        const double start = objective();
        for (int step = 0; step < 1000; ++step) {
            for (std::size_t i = 0; i < 4; ++i) g.data[i] = p.data[i];
            opt->step({{"p", &p, &g}});
        }
        CHECK(objective() < 1e-4);
        CHECK(objective() < start);
    }
}

TEST_CASE("step decay schedule") {
    StepDecay s{0.1, 30};
    CHECK(s.lr_at(0) == 0.1);
    CHECK(s.lr_at(30) == doctest::Approx(0.01).epsilon(1e-12));
    CHECK(s.lr_at(59) == doctest::Approx(0.01).epsilon(1e-12));
    CHECK(s.lr_at(60) == doctest::Approx(0.001).epsilon(1e-12));
}

TEST_CASE("bin rho stays in [0,1] under optimization via the hook") {
    BinLayer bin(4);
    Prng prng(1);
    SgdNesterov opt(0.5, 0.9);
    opt.add_hook([&bin] { bin.post_step(); });
    for (int step = 0; step < 50; ++step) {
        Tensor x = gaussian({4, 4, 3, 3}, prng);
        Tensor y = bin.forward(x, Mode::Train);
        bin.zero_grad();
        bin.backward(gaussian(y.shape, prng));
        opt.step(bin.params());
        for (double v : bin.rho.data) {
            CHECK(v >= 0.0);
            CHECK(v <= 1.0);
        }
    }
}

TEST_CASE("misaligned parameter list is a usage error") {
    Tensor p = zeros({2}), g = zeros({2});
    Tensor p2 = zeros({3}), g2 = zeros({3});
    Adam adam(1e-3);
    adam.step({{"p", &p, &g}});
    CHECK_THROWS_AS(adam.step({{"p", &p, &g}, {"q", &p2, &g2}}), UsageError);
}
