// pfdetr: synth | train | eval | diagnose

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>

#include <fmt/format.h>

#include "CLI11.hpp"
#include "pfdetr/training.hpp"

namespace fs = std::filesystem;
using namespace pfdetr;

namespace {

enum ExitCode { kOk = 0, kUsage = 1, kData = 2, kNumerical = 3 };

struct CommonArgs {
    std::string config;
    std::map<std::string, std::string> overrides;
};

void add_config_flags(CLI::App* cmd, CommonArgs& args) {
    cmd->add_option("--config", args.config, "key = value config file");
    for (const auto& key : RunConfig::keys()) {
        cmd->add_option_function<std::string>(
            "--" + key, [&args, key](const std::string& v) { args.overrides[key] = v; },
            "override config key " + key);
    }
}

RunConfig resolve_config(const CommonArgs& args, const fs::path& fallback) {
    RunConfig cfg;
    if (!args.config.empty())
        cfg = RunConfig::load(args.config);
    else if (!fallback.empty() && fs::exists(fallback))
        cfg = RunConfig::load(fallback);
    for (const auto& [k, v] : args.overrides) cfg.set(k, v);
    cfg.validate();
    return cfg;
}

void load_checkpoint(DetrModel& model, const fs::path& path) {
    try {
        model.params().load(path);
    } catch (const std::out_of_range& e) {
        throw DataError(fmt::format("checkpoint {} does not match the config: {}", path.string(), e.what()));
    } catch (const std::runtime_error& e) {
        throw DataError(fmt::format("checkpoint {} does not match the config: {}", path.string(), e.what()));
    }
}

int cmd_synth(const CommonArgs& args, const fs::path& out) {
    const RunConfig cfg = resolve_config(args, {});
    const Dataset data = synth_generate(cfg.synth_spec());
    save_dataset(data, out);
    cfg.save(out / "config.txt");
    std::ofstream manifest(out / "manifest.txt");
    manifest << "seed = " << cfg.seed << "\n"
             << "signature_seed = " << cfg.synth.signature_seed << "\n"
             << "videos = " << data.videos.size() << "\n"
             << "classes = " << data.class_names.size() << "\n"
             << "input_dim = " << cfg.model.input_dim << "\n";
    if (!manifest) throw DataError("cannot write manifest in " + out.string());
    fmt::print("wrote {} videos to {}\n", data.videos.size(), out.string());
    return kOk;
}

int cmd_train(const CommonArgs& args, const fs::path& data_dir, const fs::path& out, bool quiet) {
    const RunConfig cfg = resolve_config(args, {});
    const Dataset train_set = load_dataset(data_dir);
    const Dataset probe_set = cfg.probe_dir.empty() ? train_set : load_dataset(cfg.probe_dir);
    DetrModel model(cfg.model_config(), cfg.seed);
    TrainOptions opts;
    opts.out_dir = out;
    if (!quiet)
        opts.on_epoch = [&](const EpochMetrics& m) {
            std::fprintf(stderr, "epoch %zu/%zu  loss %.4f  detr %.4f  lr %.3g  probe mAP %.4f\n", m.epoch,
                         cfg.epochs, m.loss.total, m.loss.detr, m.lr, m.probe_map);
        };
    const TrainResult r = train(model, cfg, train_set, probe_set, opts);
    fmt::print("trained {} epochs, best probe epoch {}, outputs in {}\n", r.epochs.size(), r.best_epoch,
               out.string());
    return kOk;
}

int cmd_eval(const CommonArgs& args, const fs::path& ckpt, const fs::path& data_dir, const fs::path& out) {
    const RunConfig cfg = resolve_config(args, ckpt.parent_path() / "config.txt");
    const Dataset data = load_dataset(data_dir);
    check_compatible(data, cfg);
    DetrModel model(cfg.model_config(), cfg.seed);
    load_checkpoint(model, ckpt);
    std::vector<Detection> dets;
    const EvalReport report = evaluate_model(model, data, cfg, &dets);
    fs::create_directories(out);
    save_results(dets, data.class_names, out / "results.csv");
    save_eval_report(report, out / "eval_report.csv");
    for (std::size_t t = 0; t < report.thresholds.size(); ++t)
        fmt::print("mAP@{:.2f} = {:.4f}\n", report.thresholds[t], report.map[t]);
    fmt::print("average mAP = {:.4f}\n", report.average_map);
    return kOk;
}

int cmd_diagnose(const CommonArgs& args, const fs::path& ckpt, const fs::path& data_dir, const fs::path& out) {
    const RunConfig cfg = resolve_config(args, ckpt.parent_path() / "config.txt");
    const Dataset data = load_dataset(data_dir);
    check_compatible(data, cfg);
    DetrModel model(cfg.model_config(), cfg.seed);
    load_checkpoint(model, ckpt);
    const DiversityReport report = diagnose(model, data, cfg, out);
    for (const auto& e : report.entries)
        fmt::print("{:<16} {:.6f}  (n={})\n", provenance_tag(e.kind, e.layer), e.mean, e.count);
    return kOk;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Prediction-feedback DETR for temporal action detection"};
    app.require_subcommand(1);

    CommonArgs synth_args, train_args, eval_args, diag_args;
    std::string out, data_dir, ckpt;
    bool quiet = false;

    auto* synth = app.add_subcommand("synth", "generate a synthetic dataset");
    synth->add_option("--out", out, "output directory")->required();
    add_config_flags(synth, synth_args);

    auto* train = app.add_subcommand("train", "train a model");
    train->add_option("--data", data_dir, "dataset directory")->required();
    train->add_option("--out", out, "run directory")->required();
    train->add_flag("--quiet", quiet, "no per-epoch progress");
    add_config_flags(train, train_args);

    auto* eval = app.add_subcommand("eval", "run inference and compute mAP");
    eval->add_option("--checkpoint", ckpt, "checkpoint file")->required();
    eval->add_option("--data", data_dir, "dataset directory")->required();
    eval->add_option("--out", out, "output directory")->required();
    add_config_flags(eval, eval_args);

    auto* diag = app.add_subcommand("diagnose", "attention diversity and map export");
    diag->add_option("--checkpoint", ckpt, "checkpoint file")->required();
    diag->add_option("--data", data_dir, "dataset directory")->required();
    diag->add_option("--out", out, "output directory")->required();
    add_config_flags(diag, diag_args);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? kOk : kUsage;
    }

    try {
        if (synth->parsed()) return cmd_synth(synth_args, out);
        if (train->parsed()) return cmd_train(train_args, data_dir, out, quiet);
        if (eval->parsed()) return cmd_eval(eval_args, ckpt, data_dir, out);
        if (diag->parsed()) return cmd_diagnose(diag_args, ckpt, data_dir, out);
    } catch (const NumericalError& e) {
        std::fprintf(stderr, "numerical failure: %s\n", e.what());
        return kNumerical;
    } catch (const ConfigError& e) {
        std::fprintf(stderr, "usage error: %s\n", e.what());
        return kUsage;
    } catch (const DataError& e) {
        std::fprintf(stderr, "data error: %s\n", e.what());
        return kData;
    } catch (const std::invalid_argument& e) {
        std::fprintf(stderr, "usage error: %s\n", e.what());
        return kUsage;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "data error: %s\n", e.what());
        return kData;
    }
    return kUsage;
}
