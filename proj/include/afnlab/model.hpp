#pragma once

#include "afnlab/afn.hpp"
#include "afnlab/norms.hpp"

namespace afnlab {

enum class NormKind { Batch, Layer, Instance, Group, Bin, Asr, Afn };

inline NormKind norm_kind_from_name(const std::string& s) {
    if (s == "batch") return NormKind::Batch;
    if (s == "layer") return NormKind::Layer;
    if (s == "instance") return NormKind::Instance;
    if (s == "group") return NormKind::Group;
    if (s == "bin") return NormKind::Bin;
    if (s == "asr") return NormKind::Asr;
    if (s == "afn") return NormKind::Afn;
    throw ConfigError("unknown norm: " + s);
}

inline std::string norm_kind_name(NormKind k) {
    switch (k) {
        case NormKind::Batch: return "batch";
        case NormKind::Layer: return "layer";
        case NormKind::Instance: return "instance";
        case NormKind::Group: return "group";
        case NormKind::Bin: return "bin";
        case NormKind::Asr: return "asr";
        case NormKind::Afn: return "afn";
    }
    return "?";
}

// Group count default: 8, or C when C < 8.
inline std::unique_ptr<Layer> make_norm(NormKind kind, std::size_t C,
                                        Prng& prng) {
    switch (kind) {
        case NormKind::Batch:
            return std::make_unique<BatchNorm2d>(C);
        case NormKind::Layer:
            return std::make_unique<ScopeNorm>(C, StatScope::layer());
        case NormKind::Instance:
            return std::make_unique<ScopeNorm>(C, StatScope::instance());
        case NormKind::Group:
            return std::make_unique<ScopeNorm>(
                C, StatScope::group(C < 8 ? C : 8));
        case NormKind::Bin:
            return std::make_unique<BinLayer>(C);
        case NormKind::Asr:
            return std::make_unique<AfnLayer>(C, AfnLayer::Scope::Instance,
                                              prng);
        case NormKind::Afn:
            return std::make_unique<AfnLayer>(C, AfnLayer::Scope::Batch, prng);
    }
    throw ConfigError("unknown norm kind");
}

// Sequential stack with per-layer finiteness checks in train mode so an
// exploding run aborts with the first offending layer named.
class Model {
public:
    std::vector<std::unique_ptr<Layer>> layers;
    std::vector<std::string> layer_names;  // unique, e.g. "conv1", "norm1"

    void add(std::string name, std::unique_ptr<Layer> layer) {
        layer_names.push_back(std::move(name));
        layers.push_back(std::move(layer));
    }

    Tensor forward(const Tensor& x, Mode mode, bool check_finite = false) {
        Tensor cur = x;
        for (std::size_t i = 0; i < layers.size(); ++i) {
            cur = layers[i]->forward(cur, mode);
            if (check_finite && !cur.all_finite())
                throw NumericError(layer_names[i], "forward output");
        }
        return cur;
    }

    Tensor backward(const Tensor& dy) {
        Tensor cur = dy;
        for (std::size_t i = layers.size(); i-- > 0;)
            cur = layers[i]->backward(cur);
        return cur;
    }

    std::vector<ParamRef> params() {
        std::vector<ParamRef> out;
        for (std::size_t i = 0; i < layers.size(); ++i)
            for (auto p : layers[i]->params()) {
                p.name = layer_names[i] + "." + p.name;
                out.push_back(p);
            }
        return out;
    }

    void zero_grad() {
        for (auto& l : layers) l->zero_grad();
    }

    void post_step() {
        for (auto& l : layers) l->post_step();
    }

    Layer* find(const std::string& name) {
        for (std::size_t i = 0; i < layers.size(); ++i)
            if (layer_names[i] == name) return layers[i].get();
        return nullptr;
    }
};

// ConvNet: conv3x3(C->c0, pad 1) -> norm -> relu -> pool2 ->
//          conv3x3(c0->c1, pad 1) -> norm -> relu -> pool2 ->
//          flatten -> fc(->fc_width) -> relu -> fc(->K)
// Non-norm layers draw from the main stream and norm layers from a derived
// stream, so models differing only in norm share every other parameter.
inline Model build_convnet(std::size_t in_channels, std::size_t image_size,
                           std::size_t num_classes, NormKind norm,
                           const std::vector<std::size_t>& channels,
                           std::size_t fc_width, std::uint64_t seed) {
    if (channels.size() != 2)
        throw ConfigError("convnet expects exactly 2 channel widths");
    if (image_size % 4 != 0)
        throw ConfigError("convnet needs image size divisible by 4");
    Prng prng(seed);
    Prng norm_prng(seed ^ 0xA11CE5EEDull);
    Model m;
    m.add("conv1", std::make_unique<Conv2d>(in_channels, channels[0], 3, 1, 1,
                                            prng));
    m.add("norm1", make_norm(norm, channels[0], norm_prng));
    m.add("relu1", std::make_unique<ReluLayer>());
    m.add("pool1", std::make_unique<MaxPool2>());
    m.add("conv2", std::make_unique<Conv2d>(channels[0], channels[1], 3, 1, 1,
                                            prng));
    m.add("norm2", make_norm(norm, channels[1], norm_prng));
    m.add("relu2", std::make_unique<ReluLayer>());
    m.add("pool2", std::make_unique<MaxPool2>());
    m.add("flatten", std::make_unique<Flatten>());
    const std::size_t flat =
        channels[1] * (image_size / 4) * (image_size / 4);
    m.add("fc1", std::make_unique<Linear>(flat, fc_width, prng));
    m.add("relu3", std::make_unique<ReluLayer>());
    m.add("fc2", std::make_unique<Linear>(fc_width, num_classes, prng));
    return m;
}

// Reshapes a 4-d input to (N, C, 1, 1) so the norm zoo applies unchanged.
class ToFeatureMap : public Layer {
public:
    std::string name() const override { return "to_feature_map"; }
    Tensor forward(const Tensor& x, Mode) override {
        return x.reshaped({x.shape[0], x.shape[1], 1, 1});
    }
    Tensor backward(const Tensor& dy) override {
        return dy.reshaped({dy.shape[0], dy.shape[1]});
    }
};

class FromFeatureMap : public Layer {
public:
    std::string name() const override { return "from_feature_map"; }
    Tensor forward(const Tensor& x, Mode) override {
        return x.reshaped({x.shape[0], x.shape[1]});
    }
    Tensor backward(const Tensor& dy) override {
        return dy.reshaped({dy.shape[0], dy.shape[1], 1, 1});
    }
};

// MLP: flatten -> fc(->fc_width) -> norm on (N,fc_width,1,1) -> relu ->
//      fc(->K)
inline Model build_mlp(std::size_t in_channels, std::size_t image_size,
                       std::size_t num_classes, NormKind norm,
                       std::size_t fc_width, std::uint64_t seed) {
    Prng prng(seed);
    Prng norm_prng(seed ^ 0xA11CE5EEDull);
    Model m;
    m.add("flatten", std::make_unique<Flatten>());
    m.add("fc1", std::make_unique<Linear>(
                     in_channels * image_size * image_size, fc_width, prng));
    m.add("to_map", std::make_unique<ToFeatureMap>());
    m.add("norm1", make_norm(norm, fc_width, norm_prng));
    m.add("from_map", std::make_unique<FromFeatureMap>());
    m.add("relu1", std::make_unique<ReluLayer>());
    m.add("fc2", std::make_unique<Linear>(fc_width, num_classes, prng));
    return m;
}

}  // namespace afnlab
