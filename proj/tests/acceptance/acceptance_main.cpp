// Acceptance suite: end-to-end checks of the training lab at pinned
// tolerances, one pass/fail line per criterion. Exits nonzero if any fail.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <set>
#include <string>
#include <vector>

#include "mvfuse/commands.hpp"
#include "mvfuse/config.hpp"
#include "mvfuse/corpus_io.hpp"
#include "mvfuse/gradprobe.hpp"
#include "mvfuse/trainer.hpp"

using namespace mvfuse;
namespace fs = std::filesystem;

namespace {

struct Outcome {
    bool pass = true;
    std::string detail;

    void require(bool ok, const std::string& why) {
        if (!ok && pass) {
            pass = false;
            detail = why;
        }
    }
};

Tensor random_tensor(Shape shape, Rng& rng, double lo = -2.0, double hi = 2.0) {
    Tensor t(std::move(shape));
    for (auto& x : t.data) x = rng.uniform(lo, hi);
    return t;
}

std::vector<double> random_vec(std::size_t n, Rng& rng) {
    std::vector<double> v(n);
    for (auto& x : v) x = rng.uniform(-2.0, 2.0);
    return v;
}

// ---- criterion 1: gradient correctness ----

Outcome check_gradients() {
    Outcome out;
    for (std::uint64_t trial = 0; trial < 100 && out.pass; ++trial) {
        Rng rng(1000 + trial);
        const std::size_t t_len = 2 + trial % 3;
        const std::size_t d = 3 + trial % 3;
        const Tensor x = random_tensor({t_len, d}, rng);
        const std::vector<std::int32_t> targets = [&] {
            std::vector<std::int32_t> y(t_len);
            for (auto& v : y) v = static_cast<std::int32_t>(rng.index(4));
            return y;
        }();

        // Per-op probes; each loss touches one op on the parameter path.
        const Tensor w = random_tensor({d, d}, rng);
        const Tensor bias = random_tensor({d}, rng);
        const Tensor other = random_tensor({t_len, d}, rng);
        const Tensor vec = random_tensor({d}, rng);
        using B = std::function<Tape::Id(Tape&, const std::vector<Tape::Id>&)>;
        const std::vector<std::pair<const char*, B>> op_checks = {
            {"matmul", [&](Tape& t, const std::vector<Tape::Id>& p) {
                 return t.sum(t.matmul(t.input(x), p[0]));
             }},
            {"hadamard", [&](Tape& t, const std::vector<Tape::Id>& p) {
                 return t.sum(t.hadamard(p[1], t.input(vec)));
             }},
            {"sigmoid", [&](Tape& t, const std::vector<Tape::Id>& p) {
                 return t.sum(t.sigmoid(t.matmul(t.input(x), p[0])));
             }},
            {"relu", [&](Tape& t, const std::vector<Tape::Id>& p) {
                 return t.sum(t.relu(t.matmul(t.input(x), p[0])));
             }},
            {"layer_norm", [&](Tape& t, const std::vector<Tape::Id>& p) {
                 return t.sum(t.layer_norm(t.matmul(t.input(x), p[0]), p[1],
                                           t.input(Tensor::zeros({d}))));
             }},
            {"add_rowwise", [&](Tape& t, const std::vector<Tape::Id>& p) {
                 return t.sum(t.add_rowwise(t.input(other), p[1]));
             }},
            {"concat_cols", [&](Tape& t, const std::vector<Tape::Id>& p) {
                 return t.sum(t.concat_cols(t.matmul(t.input(x), p[0]), t.input(other)));
             }},
            {"scale_sum", [&](Tape& t, const std::vector<Tape::Id>& p) {
                 return t.scale(t.sum(t.matmul(t.input(x), p[0])), 0.75);
             }},
            {"mse", [&](Tape& t, const std::vector<Tape::Id>& p) {
                 return t.mse(t.matmul(t.input(x), p[0]), t.input(other));
             }},
            {"cross_entropy", [&](Tape& t, const std::vector<Tape::Id>& p) {
                 return t.softmax_cross_entropy(
                     t.concat_cols(t.matmul(t.input(x), p[0]), t.input(other)), targets, 0.1);
             }},
        };
        for (const auto& [name, build] : op_checks) {
            const double err = grad_check(build, {w, bias});
            out.require(err < 1e-4, std::string("op ") + name + " error " + fmt_double(err) +
                                        " at trial " + std::to_string(trial));
        }

        // Full model, both modes.
        for (bool linear : {false, true}) {
            ModelConfig cfg;
            cfg.hidden_dim = d;
            cfg.acoustic_layers = 1;
            cfg.textual_layers = 1;
            cfg.decoder_layers = 1;
            cfg.vocab_size = 4;
            cfg.linear_mode = linear;
            std::vector<Tensor> params;
            for (std::size_t i = 0; i < cfg.total_layers(); ++i) {
                params.push_back(random_tensor({d, d}, rng, -0.5, 0.5));
                params.push_back(random_tensor({d}, rng, -0.5, 0.5));
            }
            params.push_back(random_tensor({d, 4}, rng, -0.5, 0.5));
            auto build = [&](Tape& t, const std::vector<Tape::Id>& p) {
                ModelIds ids;
                ids.p_fbank = ids.p_unit = 0;
                for (std::size_t i = 0; i < cfg.total_layers(); ++i) {
                    ids.layer_w.push_back(p[2 * i]);
                    ids.layer_b.push_back(p[2 * i + 1]);
                }
                ids.w_out = p.back();
                return task_loss(t, build_logits(t, build_trunk(t, t.input(x), ids, cfg), ids),
                                 targets, 0.1);
            };
            const double err = grad_check(build, params);
            const double bound = linear ? 1e-6 : 1e-4;
            out.require(err < bound, std::string("model (") + (linear ? "linear" : "full") +
                                         ") error " + fmt_double(err) + " at trial " +
                                         std::to_string(trial));
        }
    }
    return out;
}

// ---- criterion 2: deconfliction algebra ----

Outcome check_deconfliction() {
    Outcome out;
    for (std::size_t dim : {2ul, 8ul, 64ul, 4096ul}) {
        Rng rng(2000 + dim);
        for (int pair = 0; pair < 1000 && out.pass; ++pair) {
            const auto a = random_vec(dim, rng);
            const auto b = random_vec(dim, rng);
            const double na = norm2(a), nb = norm2(b);
            if (na == 0.0 || nb == 0.0) continue;

            const auto d = deconflict(a, b);
            out.require(std::abs(dot(a, d)) <= 1e-10 * na * nb,
                        "orthogonality failed at dim " + std::to_string(dim));

            const auto again = deconflict(a, d);
            double diff2 = 0.0, ref2 = 0.0;
            for (std::size_t i = 0; i < dim; ++i) {
                diff2 += (again[i] - d[i]) * (again[i] - d[i]);
                ref2 += d[i] * d[i];
            }
            out.require(std::sqrt(diff2) <= 1e-10 * std::max(std::sqrt(ref2), 1e-300),
                        "idempotence failed at dim " + std::to_string(dim));

            const auto got = corrected_gradient(a, b);
            const auto cos_theta = cosine(a, b);
            const double w = (cos_theta && *cos_theta < 0.0) ? 1.0 - nb * *cos_theta / na : 1.0;
            double cdiff2 = 0.0, cref2 = 0.0;
            for (std::size_t i = 0; i < dim; ++i) {
                const double expect = w * a[i] + b[i];
                cdiff2 += (got[i] - expect) * (got[i] - expect);
                cref2 += expect * expect;
            }
            out.require(std::sqrt(cdiff2) <= 1e-12 * std::max(std::sqrt(cref2), 1e-300),
                        "closed-form equivalence failed at dim " + std::to_string(dim));
        }
    }
    return out;
}

// ---- criterion 3: gate-weighted gradient decomposition (linear mode) ----

Outcome check_decomposition() {
    Outcome out;
    for (std::uint64_t trial = 0; trial < 50 && out.pass; ++trial) {
        Rng rng(3000 + trial);
        ModelConfig cfg;
        cfg.hidden_dim = 4 + trial % 5;  // D <= 8
        cfg.acoustic_layers = 1;
        cfg.textual_layers = 1;
        cfg.decoder_layers = 1;  // depth 3
        cfg.vocab_size = 4;
        cfg.linear_mode = true;

        const std::size_t d = cfg.hidden_dim, t_len = 3;
        ModelParams params;
        for (std::size_t i = 0; i < cfg.total_layers(); ++i) {
            params.layer_w.push_back(random_tensor({d, d}, rng, -0.5, 0.5));
            params.layer_b.push_back(Tensor::zeros({d}));  // bias-free, as the analysis assumes
        }
        params.w_out = random_tensor({d, 4}, rng);
        params.p_fbank = params.p_unit = Tensor::zeros({2, d});

        const Tensor x_f = random_tensor({t_len, d}, rng);
        const Tensor x_u = random_tensor({t_len, d}, rng);
        const Tensor c = random_tensor({t_len, d}, rng);
        const double g_f = rng.uniform(0.0, 2.0);
        const double g_u = rng.uniform(0.0, 2.0);

        auto layer_grads = [&](const Tensor& input) {
            Tape tape;
            ModelIds ids = register_model(tape, params);
            Tape::Id h_out = build_trunk(tape, tape.input(input), ids, cfg);
            auto grads = tape.backward(tape.sum(tape.hadamard(h_out, tape.input(c))));
            std::vector<Tensor> per_layer;
            for (auto id : ids.layer_w) per_layer.push_back(grads.at(id));
            return per_layer;
        };

        Tensor fused({t_len, d});
        for (std::size_t i = 0; i < fused.numel(); ++i) fused[i] = g_f * x_f[i] + g_u * x_u[i];
        const auto grad_fused = layer_grads(fused);
        const auto grad_f = layer_grads(x_f);
        const auto grad_u = layer_grads(x_u);

        for (std::size_t layer = 0; layer < grad_fused.size(); ++layer)
            for (std::size_t j = 0; j < grad_fused[layer].numel(); ++j) {
                const double expect = g_f * grad_f[layer][j] + g_u * grad_u[layer][j];
                out.require(std::abs(grad_fused[layer][j] - expect) < 1e-9,
                            "decomposition failed at trial " + std::to_string(trial) +
                                ", layer " + std::to_string(layer));
            }
    }
    return out;
}

// ---- criterion 4: gate-target table ----

Outcome check_gate_target_table() {
    Outcome out;
    GradSnapshot snap;
    snap.grad_fbank_flat = {1.0, 0.0};
    snap.grad_unit_flat = {0.0, 1.0};  // equal norms

    snap.global_cos = 0.3;
    out.require(std::abs(gate_target(snap, 2.0) - 1.0) <= 1e-12, "cos 0.3 -> 1.0");
    snap.global_cos = -0.5;
    out.require(std::abs(gate_target(snap, 2.0) - 1.5) <= 1e-12, "cos -0.5 -> 1.5");
    snap.global_cos = -1.0;
    out.require(std::abs(gate_target(snap, 2.0) - 2.0) <= 1e-12, "cos -1 -> 2.0");
    out.require(std::abs(gate_target(snap, 1.5) - 1.5) <= 1e-12, "cos -1 clamps to scale");
    return out;
}

// ---- criterion 5: branch-sampling frequencies ----

Outcome check_branch_frequencies() {
    Outcome out;
    const std::vector<std::pair<double, double>> settings = {{0.3, 0.0}, {0.5, 0.3}, {0.3, 0.0}};
    std::uint64_t seed = 500;
    for (const auto& [df, du] : settings) {
        Rng rng(seed++);
        std::size_t counts[3] = {0, 0, 0};
        const std::size_t n = 100000;
        for (std::size_t i = 0; i < n; ++i)
            ++counts[static_cast<int>(sample_branch(rng.uniform(), df, du))];
        const double f0 = static_cast<double>(counts[0]) / n;
        const double f1 = static_cast<double>(counts[1]) / n;
        const double f2 = static_cast<double>(counts[2]) / n;
        out.require(std::abs(f0 - df) <= 0.01 && std::abs(f1 - du) <= 0.01 &&
                        std::abs(f2 - (1.0 - df - du)) <= 0.01,
                    "frequencies off for thresholds (" + fmt_double(df) + ", " + fmt_double(du) +
                        ")");
    }
    out.require(sample_branch(0.3, 0.3, 0.3) == Branch::Unit, "boundary p == d_fbank -> unit");
    return out;
}

// ---- criterion 6: stage schedule ----

Outcome check_stage_schedule() {
    Outcome out;
    const StageSchedule s = StageSchedule::default_schedule();
    const Stage a = stage_for_epoch(s, 5), b = stage_for_epoch(s, 15), c = stage_for_epoch(s, 30);
    out.require(a.delta_fbank == 0.3 && a.delta_unit == 0.0, "epoch 5");
    out.require(b.delta_fbank == 0.5 && b.delta_unit == 0.3, "epoch 15");
    out.require(c.delta_fbank == 0.3 && c.delta_unit == 0.0, "epoch 30");
    return out;
}

// ---- criterion 7: Lloyd monotonicity and nearest-neighbor oracle ----

Outcome check_kmeans() {
    Outcome out;
    for (std::uint64_t seed = 0; seed < 50 && out.pass; ++seed) {
        Rng rng(7000 + seed);
        Tensor points({60 + static_cast<std::size_t>(seed % 7) * 10, 3});
        for (auto& v : points.data) v = rng.uniform(-4.0, 4.0);
        const auto result = kmeans_fit(points, 6, 25, seed);
        for (std::size_t i = 1; i < result.distortion_per_iter.size(); ++i)
            out.require(result.distortion_per_iter[i] <= result.distortion_per_iter[i - 1] + 1e-9,
                        "distortion increased at seed " + std::to_string(seed));
    }

    Rng rng(7777);
    Tensor points({200, 4});
    for (auto& v : points.data) v = rng.uniform(-4.0, 4.0);
    const auto fitted = kmeans_fit(points, 10, 25, 7777);
    Tensor queries({1000, 4});
    for (auto& v : queries.data) v = rng.uniform(-5.0, 5.0);
    const auto got = quantize(queries, fitted.codebook);
    const Tensor& cents = fitted.codebook.centroids;
    for (std::size_t i = 0; i < queries.rows(); ++i) {
        std::size_t best = 0;
        double best_d = 1e300;
        for (std::size_t c = 0; c < cents.rows(); ++c) {
            double dist = 0.0;
            for (std::size_t j = 0; j < 4; ++j) {
                const double diff = queries.at(i, j) - cents.at(c, j);
                dist += diff * diff;
            }
            if (dist < best_d) {
                best_d = dist;
                best = c;
            }
        }
        out.require(got.ids[i] == static_cast<std::int32_t>(best),
                    "assignment mismatch at point " + std::to_string(i));
    }
    return out;
}

// ---- criterion 8: surrogate convergence trend ----

RunConfig surrogate_config(std::uint64_t corpus_seed, std::uint64_t train_seed) {
    RunConfig rc;
    rc.corpus.n_train = 2000;
    rc.corpus.n_valid = 200;
    rc.corpus.n_test = 200;
    rc.corpus.seq_len = 12;
    rc.corpus.vocab_size = 16;
    rc.corpus.seed = corpus_seed;
    rc.model.hidden_dim = 32;
    rc.model.vocab_size = 16;
    rc.train.max_epochs = 40;
    rc.train.patience = 10;
    rc.train.probe_every = 5;
    rc.train.seed = train_seed;
    return rc;
}

Outcome check_convergence_trend() {
    Outcome out;
    int seeds_ok = 0;
    std::string details;
    for (int s = 1; s <= 3; ++s) {
        RunConfig rc = surrogate_config(100 + static_cast<std::uint64_t>(s),
                                        200 + static_cast<std::uint64_t>(s));
        const Corpus corpus = generate_corpus(rc.corpus);

        RunConfig fbank_rc = rc;
        fbank_rc.train.fusion_mode = FusionMode::FbankOnly;
        Trainer fbank_trainer(corpus, make_run_settings(fbank_rc));
        const RunResult fbank = fbank_trainer.run();

        RunConfig gsgn_rc = rc;
        gsgn_rc.train.fusion_mode = FusionMode::Gsgn;  // with the default dropout schedule
        Trainer gsgn_trainer(corpus, make_run_settings(gsgn_rc));
        const RunResult gsgn = gsgn_trainer.run();

        const double level = 0.9 * fbank.best_valid_accuracy;
        auto epochs_to_level = [&](const RunResult& r) -> int {
            for (const auto& m : r.metrics)
                if (m.valid_accuracy >= level) return static_cast<int>(m.epoch) + 1;
            return -1;
        };
        const int e_fbank = epochs_to_level(fbank);
        const int e_gsgn = epochs_to_level(gsgn);
        const bool speedup_ok = e_gsgn > 0 && e_fbank > 0 && e_gsgn <= e_fbank;
        const bool accuracy_ok =
            gsgn.best_valid_accuracy >= fbank.best_valid_accuracy - 0.02;
        if (speedup_ok && accuracy_ok) ++seeds_ok;
        details += " seed" + std::to_string(s) + "[fbank best " +
                   fmt_double(fbank.best_valid_accuracy) + " @" + std::to_string(e_fbank) +
                   "e, gsgn best " + fmt_double(gsgn.best_valid_accuracy) + " @" +
                   std::to_string(e_gsgn) + "e]";
    }
    out.require(seeds_ok >= 2, "only " + std::to_string(seeds_ok) + "/3 seeds passed:" + details);
    out.detail = std::to_string(seeds_ok) + "/3 seeds:" + details;
    return out;
}

// ---- criterion 9: diagnostics sanity on mirrored views ----

Outcome check_mirrored_diagnostics(const fs::path& scratch) {
    Outcome out;
    RunConfig rc;
    rc.corpus.n_train = 64;
    rc.corpus.n_valid = 16;
    rc.corpus.n_test = 16;
    rc.corpus.seq_len = 8;
    rc.corpus.d_fbank = 12;
    rc.corpus.d_unit = 12;
    rc.corpus.vocab_size = 8;
    rc.corpus.codebook_k = 16;
    rc.corpus.seed = 9;
    rc.model.hidden_dim = 16;
    rc.model.vocab_size = 8;
    rc.model.acoustic_layers = 2;
    rc.model.textual_layers = 1;
    rc.model.decoder_layers = 1;
    rc.train.max_epochs = 2;
    rc.train.batch_size = 8;
    rc.train.warmup_steps = 10;
    rc.train.probe_every = 1;
    rc.train.tie_view_params = true;
    rc.train.schedule = StageSchedule::fusion_only();

    Corpus corpus = generate_corpus(rc.corpus);
    for (auto* part : {&corpus.train, &corpus.valid, &corpus.test})
        for (auto& ex : *part) ex.x_unit = ex.x_fbank;  // identical views

    const fs::path run_dir = scratch / "mirror_run";
    fs::remove_all(run_dir);
    Trainer trainer(corpus, make_run_settings(rc), run_dir);
    const RunResult result = trainer.run();

    out.require(!result.probes.empty(), "no probes recorded");
    for (const auto& probe : result.probes) {
        out.require(probe.global_cos.has_value() && std::abs(*probe.global_cos - 1.0) <= 1e-9,
                    "global cosine off at step " + std::to_string(probe.step));
        out.require(probe.conflict_fraction == 0.0,
                    "conflict fraction nonzero at step " + std::to_string(probe.step));
    }

    cmd_report(run_dir, false);
    const CsvTable report = read_csv(run_dir / "report.csv");
    const auto col = report.column("frac_g_fbank_above_1");
    out.require(!report.rows.empty(), "report.csv is empty");
    for (const auto& row : report.rows) {
        const double frac = std::stod(row[col]);
        out.require(frac >= 0.0 && frac <= 1.0, "gate fraction outside [0, 1]");
    }
    return out;
}

// ---- criterion 10: persistence ----

Outcome check_persistence(const fs::path& scratch) {
    Outcome out;
    const fs::path dir = scratch / "persist";
    fs::remove_all(dir);
    fs::create_directories(dir);

    RunConfig rc;
    rc.corpus.n_train = 24;
    rc.corpus.n_valid = 8;
    rc.corpus.n_test = 8;
    rc.corpus.seq_len = 5;
    rc.corpus.d_fbank = 6;
    rc.corpus.d_unit = 4;
    rc.corpus.vocab_size = 6;
    rc.corpus.latent_dim = 3;
    rc.corpus.codebook_k = 6;
    rc.corpus.kmeans_iters = 20;
    rc.model.hidden_dim = 8;
    rc.model.vocab_size = 6;
    rc.model.acoustic_layers = 1;
    rc.model.textual_layers = 1;
    rc.model.decoder_layers = 1;
    rc.train.max_epochs = 3;
    rc.train.batch_size = 8;
    rc.train.warmup_steps = 5;
    const Corpus corpus = generate_corpus(rc.corpus);
    const RunSettings settings = make_run_settings(rc);
    Trainer trainer(corpus, settings, dir / "run");
    trainer.run();

    // Round trip.
    const Checkpoint loaded = load_checkpoint(dir / "run" / "ckpt_epoch_0000.ckpt");
    save_checkpoint(dir / "resaved.ckpt", loaded);
    auto bytes = [](const fs::path& p) {
        std::ifstream in(p, std::ios::binary);
        return std::vector<char>(std::istreambuf_iterator<char>(in), {});
    };
    out.require(bytes(dir / "run" / "ckpt_epoch_0000.ckpt") == bytes(dir / "resaved.ckpt"),
                "save/load/save is not byte-identical");

    // Average of 10 identical checkpoints.
    std::vector<fs::path> same;
    for (int i = 0; i < 10; ++i) {
        const fs::path p = dir / ("same" + std::to_string(i) + ".ckpt");
        save_checkpoint(p, loaded);
        same.push_back(p);
    }
    const Checkpoint avg = average_checkpoints(same);
    for (std::size_t t = 0; t < avg.tensors.size(); ++t)
        for (std::size_t j = 0; j < avg.tensors[t].value.numel(); ++j)
            out.require(avg.tensors[t].value[j] == loaded.tensors[t].value[j],
                        "identical-checkpoint average is not exact");

    // Deterministic evaluation of the averaged checkpoint.
    const Checkpoint avg10 = load_checkpoint(dir / "run" / "avg10.ckpt");
    const ParamSet params = ParamSet::from_named(avg10.tensors);
    const EvalResult a = evaluate(params, corpus.test, settings, false);
    const EvalResult b = evaluate(params, corpus.test, settings, false);
    out.require(a.loss == b.loss && a.accuracy == b.accuracy,
                "averaged-checkpoint evaluation is not deterministic");
    return out;
}

// ---- criterion 11: noise ablation plumbing ----

Outcome check_noise_ablation(const fs::path& scratch) {
    Outcome out;
    const fs::path dir = scratch / "noise";
    fs::remove_all(dir);
    fs::create_directories(dir);

    RunConfig rc;
    rc.corpus.n_train = 40;
    rc.corpus.n_valid = 10;
    rc.corpus.n_test = 10;
    rc.corpus.seq_len = 6;
    rc.corpus.d_fbank = 8;
    rc.corpus.d_unit = 5;
    rc.corpus.vocab_size = 8;
    rc.corpus.latent_dim = 4;
    rc.corpus.codebook_k = 10;
    rc.corpus.seed = 11;
    rc.model.hidden_dim = 10;
    rc.model.vocab_size = 8;
    rc.model.acoustic_layers = 1;
    rc.model.textual_layers = 1;
    rc.model.decoder_layers = 1;
    rc.train.max_epochs = 2;
    rc.train.batch_size = 8;
    rc.train.warmup_steps = 5;

    // Write the config + corpus, then drive the actual CLI command path.
    std::ofstream cfg(dir / "run.cfg");
    const nlohmann::json flat = run_config_to_flat(rc);
    for (const auto& [k, v] : flat.items()) cfg << k << " = " << v.dump() << "\n";
    cfg.close();
    cmd_gen_data(dir / "run.cfg", dir / "data");

    TrainOptions opt;
    opt.config_path = dir / "run.cfg";
    opt.data_dir = dir / "data";
    opt.out_dir = dir / "run_replace";
    opt.mode_override = "gsgn";
    opt.noise_override = "replace";
    cmd_train(opt);

    const nlohmann::json summary = read_summary(dir / "run_replace");
    out.require(summary["noise"]["mode"] == "replace", "noise mode not recorded");

    // Independent recomputation of the train-partition unit range.
    const Corpus corpus = read_corpus(dir / "data");
    double lo = 1e300, hi = -1e300;
    for (const auto& ex : corpus.train)
        for (double v : ex.x_unit.data) {
            lo = std::min(lo, v);
            hi = std::max(hi, v);
        }
    out.require(summary["noise"]["min"].get<double>() == lo,
                "stored noise min differs from recomputation");
    out.require(summary["noise"]["max"].get<double>() == hi,
                "stored noise max differs from recomputation");
    return out;
}

}  // namespace

int main() {
    const fs::path scratch = fs::temp_directory_path() / "mvfuse_acceptance";
    fs::remove_all(scratch);
    fs::create_directories(scratch);

    struct Criterion {
        int id;
        const char* label;
        double budget_seconds;
        std::function<Outcome()> run;
    };
    const std::vector<Criterion> criteria = {
        {1, "gradient correctness vs finite differences", 30.0, check_gradients},
        {2, "deconfliction algebra", 5.0, check_deconfliction},
        {3, "gate-weighted gradient decomposition", 10.0, check_decomposition},
        {4, "gate-target table", 60.0, check_gate_target_table},
        {5, "branch-sampling frequencies", 60.0, check_branch_frequencies},
        {6, "stage schedule", 60.0, check_stage_schedule},
        {7, "lloyd monotonicity and nearest-neighbor oracle", 60.0, check_kmeans},
        {8, "surrogate convergence trend", 600.0, check_convergence_trend},
        {9, "mirrored-view diagnostics", 120.0, [&] { return check_mirrored_diagnostics(scratch); }},
        {10, "checkpoint persistence", 120.0, [&] { return check_persistence(scratch); }},
        {11, "noise ablation plumbing", 120.0, [&] { return check_noise_ablation(scratch); }},
    };

    int failures = 0;
    for (const auto& c : criteria) {
        const auto t0 = std::chrono::steady_clock::now();
        Outcome out;
        try {
            out = c.run();
        } catch (const std::exception& e) {
            out.pass = false;
            out.detail = std::string("exception: ") + e.what();
        }
        const double seconds =
            std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        if (seconds > c.budget_seconds) {
            out.pass = false;
            out.detail += " [over time budget " + fmt_double(c.budget_seconds) + "s]";
        }
        std::printf("[%s] criterion %2d: %s (%.2fs)%s%s\n", out.pass ? "PASS" : "FAIL", c.id,
                    c.label, seconds, out.detail.empty() ? "" : " - ", out.detail.c_str());
        std::fflush(stdout);
        if (!out.pass) ++failures;
    }

    fs::remove_all(scratch);
    if (failures > 0) std::printf("%d criterion(s) failed\n", failures);
    return failures == 0 ? 0 : 1;
}
