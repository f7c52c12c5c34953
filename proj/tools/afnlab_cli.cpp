// afnlab command line: gradcheck / train / eval / compare / corrupt / synth.
//
// Exit codes: 0 success, 1 check failure, 2 config error, 3 format error,
// 4 numeric abort (non-finite value; the diagnostic names the layer).

#include <atomic>
#include <filesystem>
#include <iostream>
#include <thread>

#include <CLI11.hpp>

#include "afnlab/experiment.hpp"

namespace fs = std::filesystem;
using namespace afnlab;

namespace {

constexpr int kExitCheckFailed = 1;
constexpr int kExitConfig = 2;
constexpr int kExitFormat = 3;
constexpr int kExitNumeric = 4;

std::vector<std::size_t> parse_shape(const std::string& s) {
    std::vector<std::size_t> dims;
    std::istringstream in(s);
    std::string tok;
    while (std::getline(in, tok, ',')) dims.push_back(std::stoul(tok));
    if (dims.size() != 4)
        throw ConfigError("--shape must be N,C,H,W");
    return dims;
}

std::vector<std::string> split_list(const std::string& s) {
    std::vector<std::string> out;
    std::istringstream in(s);
    std::string tok;
    while (std::getline(in, tok, ',')) out.push_back(tok);
    return out;
}

// Label-file path convention for the IDX pair: "images" in the name is
// replaced by "labels", otherwise ".labels" is appended.
std::string labels_path_for(const std::string& images_path) {
    const auto pos = images_path.find("images");
    if (pos != std::string::npos) {
        std::string p = images_path;
        p.replace(pos, 6, "labels");
        return p;
    }
    return images_path + ".labels";
}

std::unique_ptr<Layer> make_checked_layer(const std::string& name,
                                          std::size_t C, Prng& prng) {
    if (name == "linear") return std::make_unique<Linear>(C, C, prng);
    if (name == "conv") return std::make_unique<Conv2d>(C, C, 3, 1, 1, prng);
    return make_norm(norm_kind_from_name(name), C, prng);
}

int cmd_gradcheck(const std::string& layer_name, const std::string& shape_str,
                  std::uint64_t seed, const std::string& mode_str) {
    const auto shape = parse_shape(shape_str);
    const Mode mode = mode_str == "eval" ? Mode::Eval : Mode::Train;
    Prng prng(seed);
    auto layer = make_checked_layer(layer_name, shape[1], prng);
    Tensor x = gaussian(shape, prng);
    GradCheckResult res;
    if (layer_name == "linear") {
        Tensor x2 = gaussian({shape[0], shape[1]}, prng);
        res = grad_check(*layer, x2, 1e-5, mode, seed + 1);
    } else {
        res = grad_check(*layer, x, 1e-5, mode, seed + 1);
    }
    bool ok = true;
    for (const auto& [group, err] : res.per_group) {
        std::cout << layer_name << " " << group << " max_rel_error=" << err
                  << "\n";
        if (err > 1e-4) ok = false;
    }
    std::cout << (ok ? "PASS" : "FAIL") << " max=" << res.max_rel_error
              << "\n";
    return ok ? 0 : kExitCheckFailed;
}

void write_file(const fs::path& path, const std::string& content) {
    std::ofstream out(path);
    if (!out) throw FormatError("cannot write " + path.string());
    out << content;
}

std::string loss_curve_csv(const RunResult& r) {
    std::ostringstream out;
    out << "epoch,mean_loss\n";
    for (std::size_t e = 0; e < r.loss_curve.size(); ++e)
        out << e << "," << format_cell(r.loss_curve[e]) << "\n";
    return out.str();
}

std::string result_csv(const std::string& norm, const RunResult& r) {
    std::vector<MethodRow> rows = {mean_row(norm, {r})};
    return report_csv(rows);
}

int cmd_train(const std::string& config_path, const std::string& out_dir) {
    ExperimentConfig cfg = ExperimentConfig::load(config_path);
    fs::create_directories(out_dir);
    auto [model, result] = train(cfg);
    save_checkpoint(model, cfg, cfg.seed, fs::path(out_dir) / "checkpoint.ckpt");
    write_file(fs::path(out_dir) / "result.csv",
               result_csv(norm_kind_name(cfg.norm), result));
    write_file(fs::path(out_dir) / "loss_curve.csv", loss_curve_csv(result));
    std::cout << "clean_accuracy=" << format_cell(result.clean_accuracy)
              << " shift_avg=" << format_cell(result.grand_avg)
              << " wall_time_s=" << result.wall_time_s << "\n";
    return 0;
}

int cmd_eval(const std::string& ckpt_path, const std::string& data_spec,
             const std::string& corruption, int level) {
    Checkpoint ck = load_checkpoint(ckpt_path);
    ImageDataset test;
    if (data_spec.empty()) {
        auto [train_ds, test_ds] = resolve_dataset(ck.config);
        test = std::move(test_ds);
    } else {
        test = load_idx(data_spec, labels_path_for(data_spec));
    }
    if (!corruption.empty()) {
        if (level < 1 || level > 5)
            throw ConfigError("--level must be in 1..5");
        Prng prng(ck.config.seed * 1000003ull +
                  std::uint64_t(int(corruption_kind_from_name(corruption)) * 5 +
                                level));
        test = corrupt(test, {corruption_kind_from_name(corruption), level},
                       prng);
    }
    const double acc =
        evaluate_accuracy(ck.model, test, ck.config.eval_batch);
    std::cout << "accuracy=" << format_cell(acc) << "\n";
    return 0;
}

int cmd_compare(const std::string& config_path, const std::string& norms_str,
                const std::string& seeds_str, const std::string& out_dir,
                unsigned jobs) {
    const ExperimentConfig base = ExperimentConfig::load(config_path);
    const auto norms = split_list(norms_str);
    const auto seed_toks = split_list(seeds_str);
    if (norms.empty() || seed_toks.empty())
        throw ConfigError("compare needs at least one norm and one seed");
    std::vector<std::uint64_t> seeds;
    for (const auto& t : seed_toks) seeds.push_back(std::stoull(t));

    struct Cell {
        ExperimentConfig cfg;
        RunResult result;
        std::string ckpt_path;
        std::exception_ptr error;
    };
    std::vector<Cell> cells;
    fs::create_directories(out_dir);
    for (const auto& norm : norms)
        for (auto seed : seeds) {
            Cell cell;
            cell.cfg = base;
            cell.cfg.norm = norm_kind_from_name(norm);
            cell.cfg.seed = seed;
            cell.ckpt_path = (fs::path(out_dir) /
                              (norm + "_seed" + std::to_string(seed) + ".ckpt"))
                                 .string();
            cells.push_back(std::move(cell));
        }

    // Cells are fully independent; fan out across threads, write in order.
    std::atomic<std::size_t> next{0};
    auto worker = [&] {
        for (;;) {
            const std::size_t i = next.fetch_add(1);
            if (i >= cells.size()) return;
            try {
                auto [model, result] = train(cells[i].cfg);
                cells[i].result = result;
                save_checkpoint(model, cells[i].cfg, cells[i].cfg.seed,
                                cells[i].ckpt_path);
            } catch (...) {
                cells[i].error = std::current_exception();
            }
        }
    };
    const unsigned n_threads = std::max(1u, std::min<unsigned>(
        jobs, unsigned(cells.size())));
    std::vector<std::thread> pool;
    for (unsigned t = 0; t < n_threads; ++t) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
    for (auto& c : cells)
        if (c.error) std::rethrow_exception(c.error);

    std::vector<MethodRow> rows;
    for (const auto& norm : norms) {
        std::vector<RunResult> runs;
        for (const auto& c : cells)
            if (norm_kind_name(c.cfg.norm) == norm) runs.push_back(c.result);
        rows.push_back(mean_row(norm, runs));
    }
    const std::string csv = report_csv(rows);
    const std::string table = report_table(rows);
    write_file(fs::path(out_dir) / "compare.csv", csv);
    write_file(fs::path(out_dir) / "compare.txt", table);

    // Per-(norm, seed) cells for downstream analysis.
    std::ostringstream cell_csv;
    cell_csv << "norm,seed,clean,level1,level2,level3,level4,level5,avg\n";
    for (const auto& c : cells) {
        cell_csv << norm_kind_name(c.cfg.norm) << "," << c.cfg.seed << ","
                 << format_cell(c.result.clean_accuracy);
        for (double v : c.result.level_avg) cell_csv << "," << format_cell(v);
        cell_csv << "," << format_cell(c.result.grand_avg) << "\n";
    }
    write_file(fs::path(out_dir) / "cells.csv", cell_csv.str());
    std::cout << table;
    return 0;
}

int cmd_synth(std::size_t n, std::size_t size, std::uint64_t seed,
              const std::string& out) {
    Prng prng(seed);
    ImageDataset ds = synth_shapes(prng, n, size);
    save_idx(ds, out, labels_path_for(out));
    std::cout << "wrote " << n << " images to " << out << "\n";
    return 0;
}

int cmd_corrupt(const std::string& in, const std::string& type, int level,
                std::uint64_t seed, const std::string& out) {
    if (level < 1 || level > 5)
        throw ConfigError("--level must be in 1..5");
    ImageDataset ds = load_idx(in, labels_path_for(in));
    Prng prng(seed);
    ImageDataset corrupted =
        corrupt(ds, {corruption_kind_from_name(type), level}, prng);
    save_idx(corrupted, out, labels_path_for(out));
    std::cout << "wrote corrupted dataset to " << out << "\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"afnlab: adaptive fusion normalization laboratory"};
    app.require_subcommand(1);

    auto* gc = app.add_subcommand("gradcheck",
                                  "finite-difference check for one layer");
    std::string gc_layer, gc_shape = "4,8,5,5", gc_mode = "train";
    std::uint64_t gc_seed = 1;
    gc->add_option("--layer", gc_layer)->required();
    gc->add_option("--shape", gc_shape);
    gc->add_option("--seed", gc_seed);
    gc->add_option("--mode", gc_mode)
        ->check(CLI::IsMember({"train", "eval"}));

    auto* tr = app.add_subcommand("train", "train a model from a config");
    std::string tr_config, tr_out = "out";
    tr->add_option("--config", tr_config)->required();
    tr->add_option("--out", tr_out);

    auto* ev = app.add_subcommand("eval", "evaluate a checkpoint");
    std::string ev_ckpt, ev_data, ev_corruption;
    int ev_level = 0;
    ev->add_option("--checkpoint", ev_ckpt)->required();
    ev->add_option("--data", ev_data);
    ev->add_option("--corruption", ev_corruption);
    ev->add_option("--level", ev_level);

    auto* cp = app.add_subcommand("compare",
                                  "train norm variants and report the table");
    std::string cp_config, cp_norms, cp_seeds, cp_out = "out";
    unsigned cp_jobs = std::max(1u, std::thread::hardware_concurrency());
    cp->add_option("--config", cp_config)->required();
    cp->add_option("--norms", cp_norms)->required();
    cp->add_option("--seeds", cp_seeds)->required();
    cp->add_option("--out", cp_out);
    cp->add_option("--jobs", cp_jobs);

    auto* sy = app.add_subcommand("synth", "write a synthetic IDX dataset");
    std::size_t sy_n = 1000, sy_size = 16;
    std::uint64_t sy_seed = 1;
    std::string sy_out;
    sy->add_option("--n", sy_n);
    sy->add_option("--size", sy_size);
    sy->add_option("--seed", sy_seed);
    sy->add_option("--out", sy_out)->required();

    auto* co = app.add_subcommand("corrupt", "corrupt an IDX dataset");
    std::string co_in, co_type, co_out;
    int co_level = 0;
    std::uint64_t co_seed = 1;
    co->add_option("--in", co_in)->required();
    co->add_option("--type", co_type)->required();
    co->add_option("--level", co_level)->required();
    co->add_option("--seed", co_seed);
    co->add_option("--out", co_out)->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e) == 0 ? 0 : kExitConfig;
    }

    try {
        if (gc->parsed())
            return cmd_gradcheck(gc_layer, gc_shape, gc_seed, gc_mode);
        if (tr->parsed()) return cmd_train(tr_config, tr_out);
        if (ev->parsed())
            return cmd_eval(ev_ckpt, ev_data, ev_corruption, ev_level);
        if (cp->parsed())
            return cmd_compare(cp_config, cp_norms, cp_seeds, cp_out, cp_jobs);
        if (sy->parsed()) return cmd_synth(sy_n, sy_size, sy_seed, sy_out);
        if (co->parsed())
            return cmd_corrupt(co_in, co_type, co_level, co_seed, co_out);
    } catch (const NumericError& e) {
        std::cerr << "numeric abort: " << e.what() << "\n";
        return kExitNumeric;
    } catch (const FormatError& e) {
        std::cerr << "format error: " << e.what() << "\n";
        return kExitFormat;
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return kExitConfig;
    } catch (const UsageError& e) {
        std::cerr << "usage error: " << e.what() << "\n";
        return kExitConfig;
    } catch (const ShapeError& e) {
        std::cerr << "shape error: " << e.what() << "\n";
        return kExitConfig;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return kExitConfig;
}
