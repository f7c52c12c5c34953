#pragma once

#include <array>
#include <chrono>
#include <map>
#include <set>
#include <cstdio>
#include <fstream>
#include <iomanip>
#include <sstream>

#include <json.hpp>

#include "afnlab/data.hpp"
#include "afnlab/model.hpp"
#include "afnlab/optim.hpp"

namespace afnlab {

struct DatasetSpec {
    std::string type = "synth";  // synth | idx
    std::size_t n_train = 2000;
    std::size_t n_test = 1000;
    std::size_t image_size = 16;
    std::string train_images, train_labels, test_images, test_labels;
};

struct ExperimentConfig {
    std::string arch = "convnet";  // convnet | mlp
    NormKind norm = NormKind::Batch;
    std::vector<std::size_t> channels = {16, 32};
    std::size_t fc_width = 100;
    std::string optimizer = "adam";  // adam | sgd_nesterov
    double lr = 1e-3;
    double momentum = 0.9;
    std::size_t epochs = 10;
    std::size_t batch_size = 128;
    std::size_t eval_batch = 256;
    std::size_t decay_every = 30;
    std::uint64_t seed = 1;
    DatasetSpec dataset;
    bool eval_corruption = true;

    void validate() const {
        if (arch != "convnet" && arch != "mlp")
            throw ConfigError("unknown arch: " + arch);
        if (optimizer != "adam" && optimizer != "sgd_nesterov")
            throw ConfigError("unknown optimizer: " + optimizer);
        if (lr <= 0 || epochs == 0 || batch_size == 0)
            throw ConfigError("hyperparameters must be positive");
        if (dataset.type != "synth" && dataset.type != "idx")
            throw ConfigError("unknown dataset type: " + dataset.type);
    }

    nlohmann::json to_json() const {
        nlohmann::json j;
        j["arch"] = arch;
        j["norm"] = norm_kind_name(norm);
        j["channels"] = channels;
        j["fc_width"] = fc_width;
        j["optimizer"] = optimizer;
        j["lr"] = lr;
        j["momentum"] = momentum;
        j["epochs"] = epochs;
        j["batch_size"] = batch_size;
        j["eval_batch"] = eval_batch;
        j["decay_every"] = decay_every;
        j["seed"] = seed;
        j["eval_corruption"] = eval_corruption;
        nlohmann::json d;
        d["type"] = dataset.type;
        d["n_train"] = dataset.n_train;
        d["n_test"] = dataset.n_test;
        d["image_size"] = dataset.image_size;
        if (dataset.type == "idx") {
            d["train_images"] = dataset.train_images;
            d["train_labels"] = dataset.train_labels;
            d["test_images"] = dataset.test_images;
            d["test_labels"] = dataset.test_labels;
        }
        j["dataset"] = d;
        return j;
    }

    static ExperimentConfig from_json(const nlohmann::json& j) {
        ExperimentConfig c;
        try {
            if (j.contains("arch")) c.arch = j.at("arch");
            if (j.contains("norm"))
                c.norm = norm_kind_from_name(j.at("norm"));
            if (j.contains("channels"))
                c.channels = j.at("channels").get<std::vector<std::size_t>>();
            if (j.contains("fc_width")) c.fc_width = j.at("fc_width");
            if (j.contains("optimizer")) c.optimizer = j.at("optimizer");
            if (j.contains("lr")) c.lr = j.at("lr");
            if (j.contains("momentum")) c.momentum = j.at("momentum");
            if (j.contains("epochs")) c.epochs = j.at("epochs");
            if (j.contains("batch_size")) c.batch_size = j.at("batch_size");
            if (j.contains("eval_batch")) c.eval_batch = j.at("eval_batch");
            if (j.contains("decay_every")) c.decay_every = j.at("decay_every");
            if (j.contains("seed")) c.seed = j.at("seed");
            if (j.contains("eval_corruption"))
                c.eval_corruption = j.at("eval_corruption");
            if (j.contains("dataset")) {
                const auto& d = j.at("dataset");
                if (d.contains("type")) c.dataset.type = d.at("type");
                if (d.contains("n_train")) c.dataset.n_train = d.at("n_train");
                if (d.contains("n_test")) c.dataset.n_test = d.at("n_test");
                if (d.contains("image_size"))
                    c.dataset.image_size = d.at("image_size");
                if (d.contains("train_images"))
                    c.dataset.train_images = d.at("train_images");
                if (d.contains("train_labels"))
                    c.dataset.train_labels = d.at("train_labels");
                if (d.contains("test_images"))
                    c.dataset.test_images = d.at("test_images");
                if (d.contains("test_labels"))
                    c.dataset.test_labels = d.at("test_labels");
            }
        } catch (const nlohmann::json::exception& e) {
            throw ConfigError(std::string("config parse: ") + e.what());
        }
        c.validate();
        return c;
    }

    static ExperimentConfig load(const std::string& path) {
        std::ifstream in(path);
        if (!in) throw ConfigError("cannot open config: " + path);
        nlohmann::json j;
        try {
            in >> j;
        } catch (const nlohmann::json::exception& e) {
            throw ConfigError(std::string("config parse: ") + e.what());
        }
        return from_json(j);
    }
};

struct RunResult {
    double clean_accuracy = 0.0;
    // shift[kind][level-1]
    std::array<std::array<double, 5>, 5> shift{};
    std::array<double, 5> level_avg{};
    double grand_avg = 0.0;
    std::vector<double> loss_curve;
    double wall_time_s = 0.0;

    void finish_averages() {
        grand_avg = 0.0;
        for (int lv = 0; lv < 5; ++lv) {
            double s = 0.0;
            for (int k = 0; k < 5; ++k) s += shift[std::size_t(k)][std::size_t(lv)];
            level_avg[std::size_t(lv)] = s / 5.0;
            grand_avg += level_avg[std::size_t(lv)];
        }
        grand_avg /= 5.0;
    }
};

inline std::pair<ImageDataset, ImageDataset> resolve_dataset(
    const ExperimentConfig& cfg) {
    if (cfg.dataset.type == "idx") {
        ImageDataset train =
            load_idx(cfg.dataset.train_images, cfg.dataset.train_labels);
        ImageDataset test =
            load_idx(cfg.dataset.test_images, cfg.dataset.test_labels);
        if (cfg.dataset.n_train < train.size())
            train = train.subset(0, cfg.dataset.n_train);
        if (cfg.dataset.n_test < test.size())
            test = test.subset(0, cfg.dataset.n_test);
        return {std::move(train), std::move(test)};
    }
    // Synthetic fallback. Data depends only on the seed so configs that
    // differ in norm see identical datasets.
    Prng data_prng(cfg.seed * 0x9e3779b9ull + 17);
    ImageDataset all = synth_shapes(
        data_prng, cfg.dataset.n_train + cfg.dataset.n_test,
        cfg.dataset.image_size);
    ImageDataset train = all.subset(0, cfg.dataset.n_train);
    ImageDataset test = all.subset(cfg.dataset.n_train, cfg.dataset.n_test);
    return {std::move(train), std::move(test)};
}

inline Model build_model(const ExperimentConfig& cfg,
                         std::size_t in_channels, std::size_t image_size,
                         std::size_t num_classes) {
    cfg.validate();
    if (cfg.arch == "convnet")
        return build_convnet(in_channels, image_size, num_classes, cfg.norm,
                             cfg.channels, cfg.fc_width, cfg.seed);
    return build_mlp(in_channels, image_size, num_classes, cfg.norm,
                     cfg.fc_width, cfg.seed);
}

inline double evaluate_accuracy(Model& model, const ImageDataset& ds,
                                std::size_t eval_batch) {
    Prng dummy(0);
    auto plan = batch_plan(ds.size(), eval_batch, dummy, false);
    std::size_t correct = 0;
    Tensor x;
    std::vector<int> labels;
    for (const auto& idx : plan) {
        gather_batch(ds, idx, x, labels);
        Tensor logits = model.forward(x, Mode::Eval);
        const std::size_t K = logits.shape[1];
        for (std::size_t b = 0; b < idx.size(); ++b) {
            std::size_t best = 0;
            for (std::size_t k = 1; k < K; ++k)
                if (logits.at2(b, k) > logits.at2(b, best)) best = k;
            if (int(best) == labels[b]) ++correct;
        }
    }
    return double(correct) / double(ds.size());
}

// 5 kinds x 5 levels accuracy matrix; one fixed prng per cell.
inline void domain_shift_eval(Model& model, const ImageDataset& clean_test,
                              std::uint64_t seed, std::size_t eval_batch,
                              RunResult& result) {
    for (int k = 0; k < 5; ++k)
        for (int lv = 1; lv <= 5; ++lv) {
            Prng cell_prng(seed * 1000003ull + std::uint64_t(k * 5 + lv));
            CorruptionSpec spec{CorruptionSpec::Kind(k), lv};
            ImageDataset corrupted = corrupt(clean_test, spec, cell_prng);
            result.shift[std::size_t(k)][std::size_t(lv - 1)] =
                evaluate_accuracy(model, corrupted, eval_batch);
        }
    result.finish_averages();
}

inline std::unique_ptr<Optimizer> make_optimizer(const ExperimentConfig& cfg) {
    if (cfg.optimizer == "adam")
        return std::make_unique<Adam>(cfg.lr);
    return std::make_unique<SgdNesterov>(cfg.lr, cfg.momentum);
}

// Full training loop. Deterministic given the config; aborts with a
// NumericError naming the first non-finite layer if the loss explodes.
inline std::pair<Model, RunResult> train(const ExperimentConfig& cfg) {
    cfg.validate();
    const auto t0 = std::chrono::steady_clock::now();
    auto [train_ds, test_ds] = resolve_dataset(cfg);
    const std::size_t C = train_ds.images.shape[1];
    const std::size_t S = train_ds.images.shape[2];
    const std::size_t K = std::max(train_ds.num_classes(),
                                   test_ds.num_classes());
    Model model = build_model(cfg, C, S, K);
    auto opt = make_optimizer(cfg);
    opt->add_hook([&model] { model.post_step(); });
    StepDecay sched{cfg.lr, cfg.decay_every};

    RunResult result;
    Prng shuffle_prng(cfg.seed * 7919ull + 3);
    Tensor x, dlogits;
    std::vector<int> labels;
    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        opt->lr = sched.lr_at(epoch);
        double loss_sum = 0.0;
        std::size_t batches = 0;
        for (const auto& idx :
             batch_plan(train_ds.size(), cfg.batch_size, shuffle_prng, true)) {
            gather_batch(train_ds, idx, x, labels);
            model.zero_grad();
            Tensor logits = model.forward(x, Mode::Train, true);
            const double loss = softmax_cross_entropy(logits, labels, dlogits);
            if (!std::isfinite(loss))
                throw NumericError("softmax_cross_entropy", "loss");
            model.backward(dlogits);
            opt->step(model.params());
            loss_sum += loss;
            ++batches;
        }
        result.loss_curve.push_back(loss_sum / double(batches));
    }
    result.clean_accuracy = evaluate_accuracy(model, test_ds, cfg.eval_batch);
    if (cfg.eval_corruption)
        domain_shift_eval(model, test_ds, cfg.seed, cfg.eval_batch, result);
    result.wall_time_s =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0)
            .count();
    return {std::move(model), std::move(result)};
}

// --- checkpointing ------------------------------------------------------
//
// Versioned human-readable text format. Array values are hexfloats so the
// round trip is bit-exact:
//   afnlab-checkpoint v1
//   config <single-line json>
//   prng <u64>
//   array <name> <rank> <dims...>
//   <values>
//   ...
//   end

namespace detail {
inline std::string hexfloat(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%a", v);
    return buf;
}
}  // namespace detail

inline void save_checkpoint(Model& model, const ExperimentConfig& cfg,
                            std::uint64_t prng_state,
                            const std::string& path) {
    std::ofstream out(path);
    if (!out) throw FormatError("cannot write checkpoint: " + path);
    out << "afnlab-checkpoint v1\n";
    out << "config " << cfg.to_json().dump() << "\n";
    out << "prng " << prng_state << "\n";
    auto dump_array = [&out](const std::string& name, const Tensor& t) {
        out << "array " << name << " " << t.rank();
        for (auto d : t.shape) out << " " << d;
        out << "\n";
        for (std::size_t i = 0; i < t.size(); ++i)
            out << (i ? " " : "") << detail::hexfloat(t.data[i]);
        out << "\n";
    };
    for (auto& p : model.params()) dump_array(p.name, *p.value);
    for (std::size_t i = 0; i < model.layers.size(); ++i)
        for (auto& [n, t] : model.layers[i]->state())
            dump_array(model.layer_names[i] + ".state." + n, *t);
    out << "end\n";
}

struct Checkpoint {
    ExperimentConfig config;
    std::uint64_t prng_state = 0;
    Model model;
};

inline Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw FormatError("cannot open checkpoint: " + path);
    std::string line;
    if (!std::getline(in, line) || line != "afnlab-checkpoint v1")
        throw FormatError("checkpoint: unsupported version header");
    Checkpoint ck;
    if (!std::getline(in, line) || line.rfind("config ", 0) != 0)
        throw FormatError("checkpoint: missing config line");
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(line.substr(7));
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("checkpoint config: ") + e.what());
    }
    ck.config = ExperimentConfig::from_json(j);
    if (!std::getline(in, line) || line.rfind("prng ", 0) != 0)
        throw FormatError("checkpoint: missing prng line");
    ck.prng_state = std::stoull(line.substr(5));

    // Rebuild the architecture, then overwrite arrays by name.
    auto [train_ds, test_ds] = resolve_dataset(ck.config);
    ck.model = build_model(ck.config, train_ds.images.shape[1],
                           train_ds.images.shape[2],
                           std::max(train_ds.num_classes(),
                                    test_ds.num_classes()));
    std::map<std::string, Tensor*> slots;
    for (auto& p : ck.model.params()) slots[p.name] = p.value;
    for (std::size_t i = 0; i < ck.model.layers.size(); ++i)
        for (auto& [n, t] : ck.model.layers[i]->state())
            slots[ck.model.layer_names[i] + ".state." + n] = t;

    std::set<std::string> seen;
    while (std::getline(in, line)) {
        if (line == "end") {
            for (auto& [name, t] : slots)
                if (!seen.count(name))
                    throw FormatError("checkpoint: missing parameter " + name);
            return ck;
        }
        std::istringstream hdr(line);
        std::string tag, name;
        std::size_t rank;
        if (!(hdr >> tag >> name >> rank) || tag != "array")
            throw FormatError("checkpoint: bad array header: " + line);
        std::vector<std::size_t> shape(rank);
        for (auto& d : shape)
            if (!(hdr >> d))
                throw FormatError("checkpoint: bad dims for " + name);
        auto it = slots.find(name);
        if (it == slots.end())
            throw FormatError("checkpoint: unknown parameter " + name);
        if (it->second->shape != shape)
            throw FormatError("checkpoint: shape mismatch for " + name);
        if (!std::getline(in, line))
            throw FormatError("checkpoint: truncated values for " + name);
        std::istringstream vals(line);
        std::size_t count = 0;
        std::string tok;
        while (vals >> tok) {
            if (count >= it->second->size())
                throw FormatError("checkpoint: too many values for " + name);
            it->second->data[count++] = std::strtod(tok.c_str(), nullptr);
        }
        if (count != it->second->size())
            throw FormatError("checkpoint: wrong value count for " + name);
        seen.insert(name);
    }
    throw FormatError("checkpoint: missing end marker");
}

// --- reporting ----------------------------------------------------------

struct MethodRow {
    std::string norm;
    double clean = 0.0;
    std::array<double, 5> level{};
    double avg = 0.0;
};

inline MethodRow mean_row(const std::string& norm,
                          const std::vector<RunResult>& runs) {
    MethodRow row;
    row.norm = norm;
    for (const auto& r : runs) {
        row.clean += r.clean_accuracy;
        for (int lv = 0; lv < 5; ++lv)
            row.level[std::size_t(lv)] += r.level_avg[std::size_t(lv)];
        row.avg += r.grand_avg;
    }
    const double n = double(runs.size());
    row.clean /= n;
    for (auto& v : row.level) v /= n;
    row.avg /= n;
    return row;
}

// Published reference values (percent scale): not reproduced here, shown
// as context rows only.
struct PublishedReference {
    std::string method;
    double avg;
};
inline const std::vector<PublishedReference>& published_references() {
    static const std::vector<PublishedReference> refs = {
        {"BatchNorm", 74.8}, {"ASRNorm", 82.0}, {"AFN", 83.3}};
    return refs;
}

inline std::string format_cell(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.4f", v);
    return buf;
}

inline std::string report_csv(const std::vector<MethodRow>& rows) {
    std::ostringstream out;
    out << "method,clean,level1,level2,level3,level4,level5,avg\n";
    for (const auto& r : rows) {
        out << r.norm << "," << format_cell(r.clean);
        for (double v : r.level) out << "," << format_cell(v);
        out << "," << format_cell(r.avg) << "\n";
    }
    if (rows.size() > 1) {
        for (std::size_t i = 1; i < rows.size(); ++i) {
            out << "delta_" << rows[i].norm << "_vs_" << rows[0].norm << ","
                << format_cell(rows[i].clean - rows[0].clean);
            for (int lv = 0; lv < 5; ++lv)
                out << ","
                    << format_cell(rows[i].level[std::size_t(lv)] -
                                   rows[0].level[std::size_t(lv)]);
            out << "," << format_cell(rows[i].avg - rows[0].avg) << "\n";
        }
    }
    return out.str();
}

inline std::string report_table(const std::vector<MethodRow>& rows) {
    std::ostringstream out;
    out << std::left << std::setw(22) << "method" << std::right;
    for (const char* h :
         {"clean", "L1", "L2", "L3", "L4", "L5", "Avg"})
        out << std::setw(9) << h;
    out << "\n";
    auto emit = [&out](const std::string& name, double clean,
                       const std::array<double, 5>& lv, double avg) {
        out << std::left << std::setw(22) << name << std::right
            << std::setw(9) << format_cell(clean);
        for (double v : lv) out << std::setw(9) << format_cell(v);
        out << std::setw(9) << format_cell(avg) << "\n";
    };
    for (const auto& r : rows) emit(r.norm, r.clean, r.level, r.avg);
    if (rows.size() > 1) {
        for (std::size_t i = 1; i < rows.size(); ++i) {
            std::array<double, 5> d{};
            for (int lv = 0; lv < 5; ++lv)
                d[std::size_t(lv)] = rows[i].level[std::size_t(lv)] -
                                     rows[0].level[std::size_t(lv)];
            emit("delta " + rows[i].norm + "-" + rows[0].norm,
                 rows[i].clean - rows[0].clean, d, rows[i].avg - rows[0].avg);
        }
    }
    out << "\npublished CIFAR-10-C averages (reference only, percent, "
           "not reproduced at this scale):\n";
    for (const auto& ref : published_references())
        out << "  " << std::left << std::setw(12) << ref.method << " "
            << ref.avg << "\n";
    return out.str();
}

inline std::vector<MethodRow> parse_report_csv(const std::string& csv) {
    std::istringstream in(csv);
    std::string line;
    std::getline(in, line);  // header
    std::vector<MethodRow> rows;
    while (std::getline(in, line)) {
        if (line.empty() || line.rfind("delta_", 0) == 0) continue;
        std::istringstream ls(line);
        MethodRow r;
        std::string tok;
        std::getline(ls, r.norm, ',');
        std::getline(ls, tok, ',');
        r.clean = std::stod(tok);
        for (auto& v : r.level) {
            std::getline(ls, tok, ',');
            v = std::stod(tok);
        }
        std::getline(ls, tok, ',');
        r.avg = std::stod(tok);
        rows.push_back(r);
    }
    return rows;
}

}  // namespace afnlab
