#pragma once

#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "mvfuse/checkpoint.hpp"
#include "mvfuse/config.hpp"
#include "mvfuse/corpus_io.hpp"
#include "mvfuse/csvio.hpp"
#include "mvfuse/errors.hpp"
#include "mvfuse/svgplot.hpp"
#include "mvfuse/trainer.hpp"

namespace mvfuse {

inline constexpr int kExitOk = 0;
inline constexpr int kExitConfig = 2;
inline constexpr int kExitIo = 3;
inline constexpr int kExitNumeric = 4;

// Writes a corpus directory from the corpus.* config section.
inline void cmd_gen_data(const std::filesystem::path& config_path,
                         const std::filesystem::path& out_dir) {
    const RunConfig rc = load_run_config(config_path);
    const Corpus corpus = generate_corpus(rc.corpus);
    write_corpus(out_dir, corpus);
    std::cerr << "corpus written to " << out_dir.string() << "\n"
              << "  train/valid/test: " << corpus.train.size() << "/" << corpus.valid.size()
              << "/" << corpus.test.size() << ", seq_len " << corpus.spec.seq_len << "\n"
              << "  codebook: k=" << corpus.codebook.k
              << ", distortion=" << fmt_double(corpus.codebook_distortion) << "\n"
              << "  unit view range: [" << fmt_double(corpus.unit_min) << ", "
              << fmt_double(corpus.unit_max) << "]\n";
}

struct TrainOptions {
    std::filesystem::path config_path;
    std::filesystem::path data_dir;
    std::filesystem::path out_dir;
    std::optional<std::filesystem::path> init_from;
    std::optional<std::string> mode_override;
    std::optional<std::string> noise_override;
    std::optional<std::filesystem::path> baseline_dir;
};

inline nlohmann::json read_summary(const std::filesystem::path& run_dir) {
    std::ifstream in(run_dir / "summary.json");
    if (!in) throw IoError("cannot open " + (run_dir / "summary.json").string());
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw IoError("malformed summary.json in " + run_dir.string() + ": " + e.what());
    }
    return j;
}

inline void cmd_train(const TrainOptions& opt) {
    RunConfig rc = load_run_config(opt.config_path);
    if (opt.mode_override) rc.train.fusion_mode = parse_fusion_mode(*opt.mode_override);
    if (opt.noise_override) rc.train.noise = parse_noise_mode(*opt.noise_override);

    Corpus corpus = read_corpus(opt.data_dir);
    std::optional<ParamSet> warm_start;
    if (opt.init_from) warm_start = ParamSet::from_named(load_checkpoint(*opt.init_from).tensors);

    RunSettings settings = make_run_settings(rc);
    Trainer trainer(std::move(corpus), settings, opt.out_dir, std::move(warm_start));
    const NoiseRange noise_range = trainer.noise_range();
    const RunResult result = trainer.run();

    // Reload the corpus for final evaluation, applying the same noise
    // ablation the training run saw.
    Corpus eval_corpus =
        with_noise_ablation(read_corpus(opt.data_dir), rc.train.noise, rc.train.seed);

    nlohmann::json summary;
    summary["mode"] = fusion_mode_name(rc.train.fusion_mode);
    summary["epochs_run"] = result.metrics.size();
    summary["noise"] = {{"mode", noise_mode_name(rc.train.noise)},
                        {"min", noise_range.lo},
                        {"max", noise_range.hi}};
    if (result.best_epoch >= 0) {
        summary["best_epoch"] = result.best_epoch;
        summary["epochs_to_best"] = result.best_epoch + 1;
        summary["best_valid_loss"] = result.best_valid_loss;
        summary["best_valid_accuracy"] = result.best_valid_accuracy;
        summary["stopped_epoch"] = result.stopped_epoch;
    }
    if (!result.averaged_epochs.empty()) {
        std::int64_t window_end = result.averaged_epochs.front();
        for (auto e : result.averaged_epochs) window_end = std::max(window_end, e);
        summary["avg_window_end"] = window_end;
        summary["averaged_epochs"] = result.averaged_epochs;

        const Checkpoint avg = load_checkpoint(opt.out_dir / "avg10.ckpt");
        const EvalResult test = evaluate(ParamSet::from_named(avg.tensors), eval_corpus.test,
                                         settings, rc.train.paper_inference,
                                         &eval_corpus.codebook);
        summary["final_test_loss"] = test.loss;
        summary["final_test_accuracy"] = test.accuracy;
    }
    {
        // Validation metric of the parameters as they stand after training
        // (equals the loaded checkpoint's metric when max_epochs = 0).
        const EvalResult valid = evaluate(trainer.params(), eval_corpus.valid, settings, false,
                                          &eval_corpus.codebook);
        summary["valid_loss"] = valid.loss;
        summary["valid_accuracy"] = valid.accuracy;
    }
    if (opt.baseline_dir && result.best_epoch >= 0) {
        const nlohmann::json base = read_summary(*opt.baseline_dir);
        if (base.contains("epochs_to_best")) {
            const double ratio = base["epochs_to_best"].get<double>() /
                                 static_cast<double>(result.best_epoch + 1);
            summary["baseline"] = opt.baseline_dir->string();
            summary["speedup_vs_baseline"] = ratio;
        }
    }

    std::ofstream out(opt.out_dir / "summary.json");
    if (!out) throw IoError("cannot open " + (opt.out_dir / "summary.json").string());
    out << summary.dump(2) << "\n";
    std::cerr << "run complete: " << summary.dump(2) << "\n";
}

// Prints {"loss": ..., "accuracy": ...} on stdout.
inline void cmd_eval(const std::filesystem::path& ckpt_path,
                     const std::filesystem::path& data_dir, bool paper_inference,
                     const std::string& partition = "test") {
    const Checkpoint ckpt = load_checkpoint(ckpt_path);
    RunConfig rc;
    try {
        rc = run_config_from_flat(ckpt.config);
    } catch (const ConfigError& e) {
        throw IoError("checkpoint " + ckpt_path.string() + " has an unusable config echo: " +
                      e.what());
    }
    const Corpus corpus =
        with_noise_ablation(read_corpus(data_dir), rc.train.noise, rc.train.seed);
    const std::vector<MultiViewExample>* examples = &corpus.test;
    if (partition == "train") examples = &corpus.train;
    else if (partition == "valid") examples = &corpus.valid;
    else if (partition != "test") throw ConfigError("unknown partition '" + partition + "'");

    const RunSettings settings = make_run_settings(rc);
    const ParamSet params = ParamSet::from_named(ckpt.tensors);
    const EvalResult r = evaluate(params, *examples, settings,
                                  paper_inference || rc.train.paper_inference, &corpus.codebook);
    nlohmann::json j = {{"loss", r.loss}, {"accuracy", r.accuracy}};
    std::cout << j.dump() << "\n";
}

// Aggregates grads.csv + gates.csv into per-epoch series (report.csv and,
// optionally, SVG line plots).
inline void cmd_report(const std::filesystem::path& run_dir, bool svg) {
    const CsvTable grads = read_csv(run_dir / "grads.csv");
    const CsvTable gates = read_csv(run_dir / "gates.csv");

    struct Acc {
        double sum = 0.0;
        std::size_t n = 0;
        void add(double v) { sum += v; ++n; }
        std::optional<double> mean() const {
            return n ? std::optional<double>(sum / static_cast<double>(n)) : std::nullopt;
        }
    };
    std::map<std::int64_t, Acc> conflict, global_cos, mean_gf, above1;

    const std::size_t g_epoch = grads.column("epoch");
    const std::size_t g_layer = grads.column("layer");
    const std::size_t g_cos = grads.column("global_cos");
    const std::size_t g_conflict = grads.column("conflict_fraction");
    for (const auto& row : grads.rows) {
        if (row[g_layer] != "_global") continue;
        const std::int64_t epoch = std::stoll(row[g_epoch]);
        conflict[epoch].add(std::stod(row[g_conflict]));
        if (!row[g_cos].empty()) global_cos[epoch].add(std::stod(row[g_cos]));
    }

    const std::size_t t_epoch = gates.column("epoch");
    const std::size_t t_gf = gates.column("mean_g_fbank");
    const std::size_t t_above = gates.column("frac_g_fbank_above_1");
    for (const auto& row : gates.rows) {
        const std::int64_t epoch = std::stoll(row[t_epoch]);
        mean_gf[epoch].add(std::stod(row[t_gf]));
        above1[epoch].add(std::stod(row[t_above]));
    }

    auto opt_str = [](const std::optional<double>& v) {
        return v ? fmt_double(*v) : std::string();
    };
    CsvWriter report(run_dir / "report.csv",
                     "epoch,conflict_fraction,global_cos,mean_g_fbank,frac_g_fbank_above_1");
    std::vector<double> xs, ys_conflict, ys_cos, ys_gf, ys_above;
    for (const auto& [epoch, acc] : conflict) {
        report.row({std::to_string(epoch), opt_str(acc.mean()), opt_str(global_cos[epoch].mean()),
                    opt_str(mean_gf[epoch].mean()), opt_str(above1[epoch].mean())});
        xs.push_back(static_cast<double>(epoch));
        ys_conflict.push_back(acc.mean().value_or(0.0));
        ys_cos.push_back(global_cos[epoch].mean().value_or(0.0));
        ys_gf.push_back(mean_gf[epoch].mean().value_or(0.0));
        ys_above.push_back(above1[epoch].mean().value_or(0.0));
    }

    if (svg) {
        svg_line_plot(run_dir / "conflict_fraction.svg", "conflicting gradient fraction per epoch",
                      xs, ys_conflict);
        svg_line_plot(run_dir / "global_cos.svg", "global gradient cosine per epoch", xs, ys_cos);
        svg_line_plot(run_dir / "mean_g_fbank.svg", "mean fbank gate per epoch", xs, ys_gf);
        svg_line_plot(run_dir / "g_fbank_above_1.svg", "fraction of fbank gate elements above 1",
                      xs, ys_above);
    }
    std::cerr << "report written to " << (run_dir / "report.csv").string() << " ("
              << xs.size() << " epochs)\n";
}

}  // namespace mvfuse
