#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <cstdint>
#include <numeric>
#include <vector>

#include "afnlab/common.hpp"

namespace afnlab {

// Deterministic 64-bit generator (splitmix64). Same seed gives the same
// sequence within this implementation; no cross-language guarantee.
class Prng {
public:
    explicit Prng(std::uint64_t seed) : state_(seed) {}

    std::uint64_t next_u64() {
        state_ += 0x9e3779b97f4a7c15ull;
        std::uint64_t z = state_;
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
        return z ^ (z >> 31);
    }

    // Uniform in [0, 1).
    double uniform() {
        return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
    }

    // Box-Muller with a cached spare; deterministic in call order.
    double gaussian(double mean = 0.0, double std = 1.0) {
        if (has_spare_) {
            has_spare_ = false;
            return mean + std * spare_;
        }
        double u1 = 0.0;
        while (u1 <= 0.0) u1 = uniform();
        double u2 = uniform();
        double r = std::sqrt(-2.0 * std::log(u1));
        double theta = 2.0 * M_PI * u2;
        spare_ = r * std::sin(theta);
        has_spare_ = true;
        return mean + std * r * std::cos(theta);
    }

    // Uniform integer in [0, n).
    std::uint64_t below(std::uint64_t n) { return next_u64() % n; }

    std::uint64_t state() const { return state_; }
    void set_state(std::uint64_t s) {
        state_ = s;
        has_spare_ = false;
    }

private:
    std::uint64_t state_;
    bool has_spare_ = false;
    double spare_ = 0.0;
};

// Dense row-major N-d array of doubles. The single value carrier of the
// whole library; immutable by convention once handed to a layer.
struct Tensor {
    std::vector<std::size_t> shape;
    std::vector<double> data;

    Tensor() = default;
    explicit Tensor(std::vector<std::size_t> shape_, double fill = 0.0)
        : shape(std::move(shape_)) {
        check_shape(shape);
        data.assign(count(shape), fill);
    }

    static std::size_t count(const std::vector<std::size_t>& s) {
        return std::accumulate(s.begin(), s.end(), std::size_t{1},
                               std::multiplies<>());
    }

    static void check_shape(const std::vector<std::size_t>& s) {
        if (s.empty()) throw ShapeError("empty shape");
        for (auto d : s)
            if (d == 0) throw ShapeError("zero dimension in shape");
    }

    std::size_t size() const { return data.size(); }
    std::size_t rank() const { return shape.size(); }
    std::size_t dim(std::size_t i) const { return shape.at(i); }

    double& operator[](std::size_t i) { return data[i]; }
    double operator[](std::size_t i) const { return data[i]; }

    // 4-d accessors; the feature-map case is ubiquitous enough to earn them.
    double& at4(std::size_t n, std::size_t c, std::size_t h, std::size_t w) {
        return data[((n * shape[1] + c) * shape[2] + h) * shape[3] + w];
    }
    double at4(std::size_t n, std::size_t c, std::size_t h,
               std::size_t w) const {
        return data[((n * shape[1] + c) * shape[2] + h) * shape[3] + w];
    }
    double& at2(std::size_t i, std::size_t j) {
        return data[i * shape[1] + j];
    }
    double at2(std::size_t i, std::size_t j) const {
        return data[i * shape[1] + j];
    }

    bool same_shape(const Tensor& o) const { return shape == o.shape; }

    bool all_finite() const {
        for (double v : data)
            if (!std::isfinite(v)) return false;
        return true;
    }

    Tensor reshaped(std::vector<std::size_t> new_shape) const {
        check_shape(new_shape);
        if (count(new_shape) != size())
            throw ShapeError("reshape changes element count");
        Tensor out;
        out.shape = std::move(new_shape);
        out.data = data;
        return out;
    }
};

inline Tensor zeros(std::vector<std::size_t> shape) {
    return Tensor(std::move(shape), 0.0);
}
inline Tensor ones(std::vector<std::size_t> shape) {
    return Tensor(std::move(shape), 1.0);
}
inline Tensor constant(std::vector<std::size_t> shape, double c) {
    return Tensor(std::move(shape), c);
}
// Gaussian fill draws in flat index order.
inline Tensor gaussian(std::vector<std::size_t> shape, Prng& prng,
                       double mean = 0.0, double std = 1.0) {
    if (std < 0) throw ShapeError("negative std for gaussian fill");
    Tensor t(std::move(shape));
    for (auto& v : t.data) v = prng.gaussian(mean, std);
    return t;
}

inline Tensor identity_matrix(std::size_t n) {
    Tensor t({n, n});
    for (std::size_t i = 0; i < n; ++i) t.at2(i, i) = 1.0;
    return t;
}

// Standard matrix product with 64-bit accumulation.
inline Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.rank() != 2 || b.rank() != 2)
        throw ShapeError("matmul requires rank-2 tensors");
    if (a.shape[1] != b.shape[0])
        throw ShapeError("matmul inner dimensions disagree");
    const std::size_t m = a.shape[0], k = a.shape[1], n = b.shape[1];
    Tensor out({m, n});
    for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t p = 0; p < k; ++p) {
            const double av = a.data[i * k + p];
            if (av == 0.0) continue;
            const double* brow = &b.data[p * n];
            double* orow = &out.data[i * n];
            for (std::size_t j = 0; j < n; ++j) orow[j] += av * brow[j];
        }
    }
    return out;
}

// Physical reorder: element at multi-index i lands at axes-permuted index;
// the result is contiguous row-major.
inline Tensor permute(const Tensor& x, const std::vector<std::size_t>& axes) {
    const std::size_t r = x.rank();
    if (axes.size() != r) throw ShapeError("permute: axes rank mismatch");
    std::vector<bool> seen(r, false);
    for (auto a : axes) {
        if (a >= r || seen[a]) throw ShapeError("permute: invalid permutation");
        seen[a] = true;
    }
    std::vector<std::size_t> new_shape(r);
    for (std::size_t i = 0; i < r; ++i) new_shape[i] = x.shape[axes[i]];
    Tensor out(new_shape);

    std::vector<std::size_t> old_strides(r, 1), new_strides(r, 1);
    for (std::size_t i = r - 1; i-- > 0;)
        old_strides[i] = old_strides[i + 1] * x.shape[i + 1];
    for (std::size_t i = r - 1; i-- > 0;)
        new_strides[i] = new_strides[i + 1] * new_shape[i + 1];

    std::vector<std::size_t> idx(r, 0);
    for (std::size_t flat = 0; flat < x.size(); ++flat) {
        std::size_t rem = flat;
        std::size_t dst = 0;
        for (std::size_t i = 0; i < r; ++i) {
            idx[i] = rem / old_strides[i];
            rem %= old_strides[i];
        }
        for (std::size_t i = 0; i < r; ++i) dst += idx[axes[i]] * new_strides[i];
        out.data[dst] = x.data[flat];
    }
    return out;
}

enum class Pointwise { Relu, Sigmoid, Tanh };

inline double sigmoid(double z) { return 1.0 / (1.0 + std::exp(-z)); }

inline double apply_pointwise(Pointwise fn, double v) {
    switch (fn) {
        case Pointwise::Relu: return v > 0.0 ? v : 0.0;
        case Pointwise::Sigmoid: return sigmoid(v);
        case Pointwise::Tanh: return std::tanh(v);
    }
    return 0.0;
}

// relu'(0) = 0 by convention.
inline double apply_pointwise_grad(Pointwise fn, double v) {
    switch (fn) {
        case Pointwise::Relu: return v > 0.0 ? 1.0 : 0.0;
        case Pointwise::Sigmoid: {
            double s = sigmoid(v);
            return s * (1.0 - s);
        }
        case Pointwise::Tanh: {
            double t = std::tanh(v);
            return 1.0 - t * t;
        }
    }
    return 0.0;
}

inline Tensor pointwise(const Tensor& x, Pointwise fn) {
    Tensor out = x;
    for (auto& v : out.data) v = apply_pointwise(fn, v);
    return out;
}

inline Tensor pointwise_grad(const Tensor& x, Pointwise fn) {
    Tensor out = x;
    for (auto& v : out.data) v = apply_pointwise_grad(fn, v);
    return out;
}

}  // namespace afnlab
