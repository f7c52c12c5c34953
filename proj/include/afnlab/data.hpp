#pragma once

#include <array>
#include <fstream>

#include "afnlab/tensor.hpp"

namespace afnlab {

struct ImageDataset {
    Tensor images;            // [N,C,H,W], values in [0,1]
    std::vector<int> labels;  // length N
    std::string name;

    std::size_t size() const { return images.shape[0]; }
    std::size_t num_classes() const {
        int k = 0;
        for (int l : labels) k = std::max(k, l + 1);
        return std::size_t(k);
    }

    ImageDataset subset(std::size_t offset, std::size_t n) const {
        if (offset + n > size()) throw UsageError("subset out of range");
        const std::size_t C = images.shape[1], H = images.shape[2],
                          W = images.shape[3];
        ImageDataset out;
        out.images = zeros({n, C, H, W});
        const std::size_t per = C * H * W;
        std::copy(images.data.begin() + offset * per,
                  images.data.begin() + (offset + n) * per,
                  out.images.data.begin());
        out.labels.assign(labels.begin() + offset, labels.begin() + offset + n);
        out.name = name;
        return out;
    }
};

namespace detail {
inline std::uint32_t read_be32(std::istream& in) {
    unsigned char b[4];
    in.read(reinterpret_cast<char*>(b), 4);
    if (!in) throw FormatError("idx: truncated header");
    return (std::uint32_t(b[0]) << 24) | (std::uint32_t(b[1]) << 16) |
           (std::uint32_t(b[2]) << 8) | std::uint32_t(b[3]);
}
inline void write_be32(std::ostream& out, std::uint32_t v) {
    unsigned char b[4] = {(unsigned char)(v >> 24), (unsigned char)(v >> 16),
                          (unsigned char)(v >> 8), (unsigned char)v};
    out.write(reinterpret_cast<char*>(b), 4);
}
}  // namespace detail

// IDX format: big-endian magic 0x00000803 (images: count, rows, cols then
// raw bytes) / 0x00000801 (labels: count then bytes). Pixels scale by 1/255.
inline ImageDataset load_idx(const std::string& image_path,
                             const std::string& label_path) {
    std::ifstream imgs(image_path, std::ios::binary);
    if (!imgs) throw FormatError("idx: cannot open " + image_path);
    if (detail::read_be32(imgs) != 0x00000803u)
        throw FormatError("idx: wrong image magic in " + image_path);
    const std::size_t n = detail::read_be32(imgs);
    const std::size_t h = detail::read_be32(imgs);
    const std::size_t w = detail::read_be32(imgs);
    std::vector<unsigned char> buf(n * h * w);
    imgs.read(reinterpret_cast<char*>(buf.data()),
              std::streamsize(buf.size()));
    if (std::size_t(imgs.gcount()) != buf.size())
        throw FormatError("idx: truncated image file " + image_path);

    std::ifstream labs(label_path, std::ios::binary);
    if (!labs) throw FormatError("idx: cannot open " + label_path);
    if (detail::read_be32(labs) != 0x00000801u)
        throw FormatError("idx: wrong label magic in " + label_path);
    const std::size_t nl = detail::read_be32(labs);
    if (nl != n)
        throw FormatError("idx: image/label count mismatch (" +
                          std::to_string(n) + " vs " + std::to_string(nl) +
                          ")");
    std::vector<unsigned char> lbuf(nl);
    labs.read(reinterpret_cast<char*>(lbuf.data()), std::streamsize(nl));
    if (std::size_t(labs.gcount()) != nl)
        throw FormatError("idx: truncated label file " + label_path);

    ImageDataset ds;
    ds.images = zeros({n, 1, h, w});
    for (std::size_t i = 0; i < buf.size(); ++i)
        ds.images.data[i] = double(buf[i]) / 255.0;
    ds.labels.assign(lbuf.begin(), lbuf.end());
    ds.name = image_path;
    return ds;
}

// Writer counterpart; values round to the nearest byte. Grayscale only
// (the IDX image record has no channel dimension).
inline void save_idx(const ImageDataset& ds, const std::string& image_path,
                     const std::string& label_path) {
    if (ds.images.shape[1] != 1)
        throw FormatError("idx: writer supports C=1 only");
    std::ofstream imgs(image_path, std::ios::binary);
    if (!imgs) throw FormatError("idx: cannot write " + image_path);
    detail::write_be32(imgs, 0x00000803u);
    detail::write_be32(imgs, std::uint32_t(ds.images.shape[0]));
    detail::write_be32(imgs, std::uint32_t(ds.images.shape[2]));
    detail::write_be32(imgs, std::uint32_t(ds.images.shape[3]));
    for (double v : ds.images.data) {
        const double c = std::clamp(v, 0.0, 1.0);
        imgs.put(char(std::lround(c * 255.0)));
    }
    std::ofstream labs(label_path, std::ios::binary);
    if (!labs) throw FormatError("idx: cannot write " + label_path);
    detail::write_be32(labs, 0x00000801u);
    detail::write_be32(labs, std::uint32_t(ds.labels.size()));
    for (int l : ds.labels) labs.put(char(l));
}

// 4-class procedural dataset: filled square, circle, cross, triangle at
// random position and scale with gaussian pixel noise (std 0.05).
inline ImageDataset synth_shapes(Prng& prng, std::size_t n,
                                 std::size_t image_size) {
    if (n < 1 || image_size < 8)
        throw UsageError("synth_shapes: n >= 1 and image_size >= 8 required");
    ImageDataset ds;
    ds.name = "synth_shapes";
    ds.images = zeros({n, 1, image_size, image_size});
    ds.labels.resize(n);
    const double S = double(image_size);
    for (std::size_t idx = 0; idx < n; ++idx) {
        const int cls = int(prng.below(4));
        ds.labels[idx] = cls;
        const double half = S * (0.15 + 0.15 * prng.uniform());
        const double cx = half + prng.uniform() * (S - 2.0 * half);
        const double cy = half + prng.uniform() * (S - 2.0 * half);
        double* img = &ds.images.data[idx * image_size * image_size];
        for (std::size_t y = 0; y < image_size; ++y)
            for (std::size_t x = 0; x < image_size; ++x) {
                const double dx = double(x) - cx, dy = double(y) - cy;
                bool on = false;
                switch (cls) {
                    case 0:  // square
                        on = std::abs(dx) <= half && std::abs(dy) <= half;
                        break;
                    case 1:  // circle
                        on = dx * dx + dy * dy <= half * half;
                        break;
                    case 2:  // cross
                        on = (std::abs(dx) <= half * 0.33 &&
                              std::abs(dy) <= half) ||
                             (std::abs(dy) <= half * 0.33 &&
                              std::abs(dx) <= half);
                        break;
                    case 3:  // triangle (upward)
                        on = dy >= -half && dy <= half &&
                             std::abs(dx) <=
                                 half * (dy + half) / (2.0 * half);
                        break;
                }
                img[y * image_size + x] = on ? 0.9 : 0.1;
            }
        for (std::size_t i = 0; i < image_size * image_size; ++i)
            img[i] = std::clamp(img[i] + prng.gaussian(0.0, 0.05), 0.0, 1.0);
    }
    return ds;
}

struct CorruptionSpec {
    enum class Kind {
        GaussianNoise,
        ImpulseNoise,
        GaussianBlur,
        Brightness,
        Contrast
    };
    Kind kind;
    int level;  // 1..5

    void validate() const {
        if (level < 1 || level > 5)
            throw ConfigError("corruption level must be in 1..5");
    }
};

inline const std::vector<std::string>& corruption_kind_names() {
    static const std::vector<std::string> names = {
        "gaussian_noise", "impulse_noise", "gaussian_blur", "brightness",
        "contrast"};
    return names;
}

inline CorruptionSpec::Kind corruption_kind_from_name(const std::string& s) {
    const auto& names = corruption_kind_names();
    for (std::size_t i = 0; i < names.size(); ++i)
        if (names[i] == s) return CorruptionSpec::Kind(i);
    throw ConfigError("unknown corruption kind: " + s);
}

// Severity parameter tables, level 1..5.
namespace severity {
inline constexpr std::array<double, 5> gaussian_noise_std = {.04, .08, .12,
                                                             .18, .26};
inline constexpr std::array<double, 5> impulse_flip_prob = {.01, .03, .06,
                                                            .10, .17};
inline constexpr std::array<double, 5> blur_sigma = {.4, .6, .9, 1.3, 1.8};
inline constexpr std::array<double, 5> brightness_add = {.05, .10, .15, .22,
                                                         .30};
inline constexpr std::array<double, 5> contrast_mult = {.85, .70, .55, .40,
                                                        .30};
}  // namespace severity

inline ImageDataset corrupt(const ImageDataset& ds, const CorruptionSpec& spec,
                            Prng& prng) {
    spec.validate();
    ImageDataset out = ds;
    const std::size_t N = ds.images.shape[0], C = ds.images.shape[1],
                      H = ds.images.shape[2], W = ds.images.shape[3];
    const int lv = spec.level - 1;
    switch (spec.kind) {
        case CorruptionSpec::Kind::GaussianNoise: {
            const double s = severity::gaussian_noise_std[lv];
            for (auto& v : out.images.data) v += prng.gaussian(0.0, s);
            break;
        }
        case CorruptionSpec::Kind::ImpulseNoise: {
            const double p = severity::impulse_flip_prob[lv];
            for (auto& v : out.images.data)
                if (prng.uniform() < p) v = prng.uniform() < 0.5 ? 0.0 : 1.0;
            break;
        }
        case CorruptionSpec::Kind::GaussianBlur: {
            const double sg = severity::blur_sigma[lv];
            std::array<double, 25> k{};
            double sum = 0.0;
            for (int i = -2; i <= 2; ++i)
                for (int j = -2; j <= 2; ++j) {
                    const double v =
                        std::exp(-(i * i + j * j) / (2.0 * sg * sg));
                    k[(i + 2) * 5 + (j + 2)] = v;
                    sum += v;
                }
            for (auto& v : k) v /= sum;
            for (std::size_t n = 0; n < N; ++n)
                for (std::size_t c = 0; c < C; ++c) {
                    const double* src = &ds.images.data[(n * C + c) * H * W];
                    double* dst = &out.images.data[(n * C + c) * H * W];
                    for (std::size_t y = 0; y < H; ++y)
                        for (std::size_t x = 0; x < W; ++x) {
                            double acc = 0.0;
                            for (int i = -2; i <= 2; ++i)
                                for (int j = -2; j <= 2; ++j) {
                                    // clamp-to-edge padding
                                    const std::size_t yy = std::size_t(
                                        std::clamp<std::ptrdiff_t>(
                                            std::ptrdiff_t(y) + i, 0,
                                            std::ptrdiff_t(H) - 1));
                                    const std::size_t xx = std::size_t(
                                        std::clamp<std::ptrdiff_t>(
                                            std::ptrdiff_t(x) + j, 0,
                                            std::ptrdiff_t(W) - 1));
                                    acc += k[(i + 2) * 5 + (j + 2)] *
                                           src[yy * W + xx];
                                }
                            dst[y * W + x] = acc;
                        }
                }
            break;
        }
        case CorruptionSpec::Kind::Brightness: {
            const double a = severity::brightness_add[lv];
            for (auto& v : out.images.data) v += a;
            break;
        }
        case CorruptionSpec::Kind::Contrast: {
            const double mlt = severity::contrast_mult[lv];
            const std::size_t per = C * H * W;
            for (std::size_t n = 0; n < N; ++n) {
                double* img = &out.images.data[n * per];
                double mean = 0.0;
                for (std::size_t i = 0; i < per; ++i) mean += img[i];
                mean /= double(per);
                for (std::size_t i = 0; i < per; ++i)
                    img[i] = mean + (img[i] - mean) * mlt;
            }
            break;
        }
    }
    for (auto& v : out.images.data) v = std::clamp(v, 0.0, 1.0);
    return out;
}

// Mini-batch index plan; deterministic shuffle. The final partial batch
// is emitted.
inline std::vector<std::vector<std::size_t>> batch_plan(std::size_t n,
                                                        std::size_t batch_size,
                                                        Prng& prng,
                                                        bool shuffle) {
    if (batch_size < 1) throw UsageError("batch_size must be >= 1");
    std::vector<std::size_t> order(n);
    for (std::size_t i = 0; i < n; ++i) order[i] = i;
    if (shuffle) {
        for (std::size_t i = n; i > 1; --i) {
            const std::size_t j = std::size_t(prng.below(i));
            std::swap(order[i - 1], order[j]);
        }
    }
    std::vector<std::vector<std::size_t>> plan;
    for (std::size_t off = 0; off < n; off += batch_size) {
        const std::size_t end = std::min(n, off + batch_size);
        plan.emplace_back(order.begin() + std::ptrdiff_t(off),
                          order.begin() + std::ptrdiff_t(end));
    }
    return plan;
}

inline void gather_batch(const ImageDataset& ds,
                         const std::vector<std::size_t>& idx, Tensor& x,
                         std::vector<int>& labels) {
    const std::size_t C = ds.images.shape[1], H = ds.images.shape[2],
                      W = ds.images.shape[3], per = C * H * W;
    x = zeros({idx.size(), C, H, W});
    labels.resize(idx.size());
    for (std::size_t b = 0; b < idx.size(); ++b) {
        std::copy(ds.images.data.begin() + std::ptrdiff_t(idx[b] * per),
                  ds.images.data.begin() + std::ptrdiff_t((idx[b] + 1) * per),
                  x.data.begin() + std::ptrdiff_t(b * per));
        labels[b] = ds.labels[idx[b]];
    }
}

}  // namespace afnlab
