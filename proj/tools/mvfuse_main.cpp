// mvfuse: synthetic multi-view fusion training lab.
//
// Subcommands: gen-data (write a corpus), train (run training with branch
// dropout / gated fusion), eval (score a checkpoint), report (aggregate a
// run's diagnostics). Exit codes: 0 ok, 2 config error, 3 I/O error,
// 4 numeric abort.

#include <exception>
#include <iostream>
#include <string>

#include <CLI11.hpp>

#include "mvfuse/commands.hpp"

int main(int argc, char** argv) {
    CLI::App app{"synthetic multi-view fusion training lab"};
    app.require_subcommand(1);

    std::string config_path, data_dir, out_dir, ckpt_path, run_dir;
    std::string init_from, mode, noise, baseline, partition = "test";
    bool paper_inference = false, svg = false;

    auto* gen = app.add_subcommand("gen-data", "generate a synthetic corpus");
    gen->add_option("--config", config_path, "run config file")->required();
    gen->add_option("--out", out_dir, "corpus output directory")->required();

    auto* train = app.add_subcommand("train", "train a model");
    train->add_option("--config", config_path, "run config file")->required();
    train->add_option("--data", data_dir, "corpus directory")->required();
    train->add_option("--out", out_dir, "run output directory")->required();
    train->add_option("--init-from", init_from, "warm-start checkpoint");
    train->add_option("--mode", mode, "fusion mode: gsgn|concat|fbank_only|unit_only");
    train->add_option("--noise", noise, "noise ablation: sum|replace");
    train->add_option("--baseline", baseline, "baseline run directory for the speedup ratio");

    auto* eval = app.add_subcommand("eval", "evaluate a checkpoint");
    eval->add_option("--ckpt", ckpt_path, "checkpoint file")->required();
    eval->add_option("--data", data_dir, "corpus directory")->required();
    eval->add_option("--partition", partition, "train|valid|test (default test)");
    eval->add_flag("--paper-inference", paper_inference, "sample branches at inference");

    auto* report = app.add_subcommand("report", "aggregate run diagnostics");
    report->add_option("--run", run_dir, "run directory with grads.csv and gates.csv")
        ->required();
    report->add_flag("--svg", svg, "also emit SVG line plots");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : mvfuse::kExitConfig;
    }

    try {
        if (gen->parsed()) {
            mvfuse::cmd_gen_data(config_path, out_dir);
        } else if (train->parsed()) {
            mvfuse::TrainOptions opt;
            opt.config_path = config_path;
            opt.data_dir = data_dir;
            opt.out_dir = out_dir;
            if (!init_from.empty()) opt.init_from = init_from;
            if (!mode.empty()) opt.mode_override = mode;
            if (!noise.empty()) opt.noise_override = noise;
            if (!baseline.empty()) opt.baseline_dir = baseline;
            mvfuse::cmd_train(opt);
        } else if (eval->parsed()) {
            mvfuse::cmd_eval(ckpt_path, data_dir, paper_inference, partition);
        } else if (report->parsed()) {
            mvfuse::cmd_report(run_dir, svg);
        }
    } catch (const mvfuse::ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return mvfuse::kExitConfig;
    } catch (const mvfuse::IoError& e) {
        std::cerr << "io error: " << e.what() << "\n";
        return mvfuse::kExitIo;
    } catch (const mvfuse::NumericError& e) {
        std::cerr << "numeric abort: " << e.what() << "\n";
        return mvfuse::kExitNumeric;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return mvfuse::kExitIo;
    }
    return mvfuse::kExitOk;
}
