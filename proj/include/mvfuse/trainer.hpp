#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "mvfuse/autodiff.hpp"
#include "mvfuse/branch_sampler.hpp"
#include "mvfuse/checkpoint.hpp"
#include "mvfuse/csvio.hpp"
#include "mvfuse/datagen.hpp"
#include "mvfuse/errors.hpp"
#include "mvfuse/gradprobe.hpp"
#include "mvfuse/gsgn.hpp"
#include "mvfuse/model.hpp"
#include "mvfuse/rng.hpp"
#include "mvfuse/tensor.hpp"

namespace mvfuse {

enum class FusionMode { Gsgn, Concat, FbankOnly, UnitOnly };
enum class NoiseMode { None, Sum, Replace };

inline const char* fusion_mode_name(FusionMode m) {
    switch (m) {
        case FusionMode::Gsgn: return "gsgn";
        case FusionMode::Concat: return "concat";
        case FusionMode::FbankOnly: return "fbank_only";
        default: return "unit_only";
    }
}

inline FusionMode parse_fusion_mode(const std::string& s) {
    if (s == "gsgn") return FusionMode::Gsgn;
    if (s == "concat") return FusionMode::Concat;
    if (s == "fbank_only") return FusionMode::FbankOnly;
    if (s == "unit_only") return FusionMode::UnitOnly;
    throw ConfigError("unknown fusion mode '" + s + "'");
}

inline const char* noise_mode_name(NoiseMode m) {
    switch (m) {
        case NoiseMode::None: return "none";
        case NoiseMode::Sum: return "sum";
        default: return "replace";
    }
}

inline NoiseMode parse_noise_mode(const std::string& s) {
    if (s == "none") return NoiseMode::None;
    if (s == "sum") return NoiseMode::Sum;
    if (s == "replace") return NoiseMode::Replace;
    throw ConfigError("unknown noise mode '" + s + "'");
}

struct TrainConfig {
    std::size_t max_epochs = 40;
    std::size_t batch_size = 16;
    double lr_peak = 1e-3;
    std::size_t warmup_steps = 200;
    double adam_beta1 = 0.9;
    double adam_beta2 = 0.98;
    double adam_eps = 1e-9;
    double label_smoothing = 0.1;
    std::size_t patience = 10;
    std::size_t probe_every = 1;  // 0 disables probing
    double lambda_gate = 1.0;
    FusionMode fusion_mode = FusionMode::Gsgn;
    StageSchedule schedule = StageSchedule::default_schedule();
    std::uint64_t seed = 1;
    bool per_example_sampling = false;
    bool paper_inference = false;
    // Diagnostic switch: start both view projections and both gates from
    // identical values, so mirrored views stay mirrored during training.
    bool tie_view_params = false;
    // Feed the unit view through a learned id-embedding table instead of
    // the frozen centroid vectors. Ids are recovered by re-quantizing the
    // stored unit view against the corpus codebook.
    bool embed_ids = false;
    NoiseMode noise = NoiseMode::None;

    void validate() const {
        if (batch_size == 0) throw ConfigError("train: batch_size must be positive");
        if (warmup_steps == 0) throw ConfigError("train: warmup_steps must be positive");
        if (lr_peak <= 0.0) throw ConfigError("train: lr_peak must be > 0");
        if (lambda_gate < 0.0) throw ConfigError("train: lambda_gate must be >= 0");
        if (label_smoothing < 0.0 || label_smoothing >= 1.0)
            throw ConfigError("train: label_smoothing must lie in [0, 1)");
        schedule.validate();
    }
};

// ---- optimizer ----

// Inverse-square-root decay with linear warmup; both branches meet at the
// warmup step, where the rate equals the peak.
inline double lr_at(std::int64_t step, const TrainConfig& cfg) {
    if (step < 1) throw ConfigError("lr_at: step must be >= 1");
    const double s = static_cast<double>(step);
    const double w = static_cast<double>(cfg.warmup_steps);
    return cfg.lr_peak * std::min(std::sqrt(w) / std::sqrt(s), s / w);
}

struct AdamState {
    std::vector<Tensor> m;
    std::vector<Tensor> v;
};

struct ParamRef {
    std::string name;
    Tensor* tensor = nullptr;
};

inline void adam_step(const std::vector<ParamRef>& params, const std::vector<Tensor>& grads,
                      AdamState& state, std::int64_t step, const TrainConfig& cfg) {
    if (step < 1) throw ConfigError("adam: step must be >= 1");
    if (grads.size() != params.size()) throw ShapeError("adam: gradient count mismatch");
    if (state.m.empty()) {
        for (const auto& p : params) {
            state.m.push_back(Tensor::zeros(p.tensor->shape));
            state.v.push_back(Tensor::zeros(p.tensor->shape));
        }
    }
    const double lr = lr_at(step, cfg);
    const double bc1 = 1.0 - std::pow(cfg.adam_beta1, static_cast<double>(step));
    const double bc2 = 1.0 - std::pow(cfg.adam_beta2, static_cast<double>(step));
    for (std::size_t p = 0; p < params.size(); ++p) {
        Tensor& theta = *params[p].tensor;
        const Tensor& g = grads[p];
        if (!g.same_shape(theta)) throw ShapeError("adam: gradient shape mismatch");
        for (std::size_t i = 0; i < theta.numel(); ++i) {
            state.m[p][i] = cfg.adam_beta1 * state.m[p][i] + (1.0 - cfg.adam_beta1) * g[i];
            state.v[p][i] = cfg.adam_beta2 * state.v[p][i] + (1.0 - cfg.adam_beta2) * g[i] * g[i];
            const double mhat = state.m[p][i] / bc1;
            const double vhat = state.v[p][i] / bc2;
            theta[i] -= lr * mhat / (std::sqrt(vhat) + cfg.adam_eps);
        }
    }
}

// True once the best validation loss is `patience` epochs old.
inline bool early_stop(const std::vector<double>& valid_losses, std::size_t patience = 10) {
    if (valid_losses.empty()) return false;
    std::size_t best = 0;
    for (std::size_t i = 1; i < valid_losses.size(); ++i)
        if (valid_losses[i] < valid_losses[best]) best = i;
    return valid_losses.size() - 1 - best >= patience;
}

// ---- the full learnable parameter set ----

// All modes carry the same parameter set; unused pieces simply receive zero
// gradients, which keeps checkpoints layout-compatible across modes.
struct ParamSet {
    ModelParams model;
    GsgnParams gsgn;
    ConcatFuseParams concat;
    std::optional<Tensor> unit_embed;  // [k x D_u] id-embedding table, embed_ids mode only

    static ParamSet init(const ModelConfig& cfg, std::size_t d_fbank, std::size_t d_unit,
                         std::uint64_t seed, bool tie_view_params) {
        Rng rng(derive_seed(seed, "init"));
        ParamSet p;
        p.model = ModelParams::init(cfg, d_fbank, d_unit, rng);
        p.gsgn = GsgnParams::init(d_fbank, d_unit, cfg.hidden_dim, rng);
        p.concat = ConcatFuseParams::init(cfg.hidden_dim, rng);
        if (tie_view_params) {
            if (d_fbank != d_unit)
                throw ConfigError("tie_view_params requires d_fbank == d_unit");
            p.model.p_unit = p.model.p_fbank;
            p.gsgn.unit = p.gsgn.fbank;
        }
        return p;
    }

    std::vector<ParamRef> refs() {
        std::vector<ParamRef> out;
        out.push_back({"proj.fbank", &model.p_fbank});
        out.push_back({"proj.unit", &model.p_unit});
        for (std::size_t i = 0; i < model.layer_w.size(); ++i) {
            const std::string tag = i < 10 ? "0" + std::to_string(i) : std::to_string(i);
            out.push_back({"layer" + tag + ".w", &model.layer_w[i]});
            out.push_back({"layer" + tag + ".b", &model.layer_b[i]});
        }
        out.push_back({"out.w", &model.w_out});
        for (auto [gate, name] : {std::pair{&gsgn.fbank, "fbank"}, {&gsgn.unit, "unit"}}) {
            out.push_back({std::string("gate.") + name + ".w_fbank", &gate->w_fbank});
            out.push_back({std::string("gate.") + name + ".w_unit", &gate->w_unit});
            out.push_back({std::string("gate.") + name + ".bias", &gate->bias});
        }
        out.push_back({"concat.w", &concat.w});
        out.push_back({"concat.bias", &concat.bias});
        if (unit_embed) out.push_back({"embed.unit", &*unit_embed});
        return out;
    }

    std::vector<NamedTensor> to_named() {
        std::vector<NamedTensor> out;
        for (const auto& r : refs()) out.push_back({r.name, *r.tensor});
        return out;
    }

    static ParamSet from_named(const std::vector<NamedTensor>& named) {
        ParamSet p;
        auto find = [&](const std::string& name) -> const Tensor& {
            for (const auto& t : named)
                if (t.name == name) return t.value;
            throw ConfigError("checkpoint: missing parameter " + name);
        };
        p.model.p_fbank = find("proj.fbank");
        p.model.p_unit = find("proj.unit");
        for (const auto& t : named) {
            if (t.name.rfind("layer", 0) == 0 && t.name.size() >= 8 &&
                t.name.substr(t.name.size() - 2) == ".w") {
                p.model.layer_w.push_back(t.value);
            }
            if (t.name.rfind("layer", 0) == 0 && t.name.substr(t.name.size() - 2) == ".b")
                p.model.layer_b.push_back(t.value);
        }
        p.model.w_out = find("out.w");
        for (auto [gate, name] : {std::pair{&p.gsgn.fbank, "fbank"}, {&p.gsgn.unit, "unit"}}) {
            gate->w_fbank = find(std::string("gate.") + name + ".w_fbank");
            gate->w_unit = find(std::string("gate.") + name + ".w_unit");
            gate->bias = find(std::string("gate.") + name + ".bias");
        }
        p.concat.w = find("concat.w");
        p.concat.bias = find("concat.bias");
        for (const auto& t : named)
            if (t.name == "embed.unit") p.unit_embed = t.value;
        return p;
    }
};

struct AllIds {
    ModelIds model;
    GsgnIds gsgn;
    ConcatFuseIds concat;
    Tape::Id unit_embed = 0;
    bool has_unit_embed = false;
    std::vector<Tape::Id> ordered;  // aligned with ParamSet::refs()
};

inline AllIds register_all(Tape& tape, const ParamSet& params) {
    AllIds ids;
    ids.model = register_model(tape, params.model);
    ids.gsgn = register_gsgn(tape, params.gsgn);
    ids.concat = register_concat_fuse(tape, params.concat);
    if (params.unit_embed) {
        ids.unit_embed = tape.param(*params.unit_embed, "embed.unit");
        ids.has_unit_embed = true;
    }
    ids.ordered.push_back(ids.model.p_fbank);
    ids.ordered.push_back(ids.model.p_unit);
    for (std::size_t i = 0; i < ids.model.layer_w.size(); ++i) {
        ids.ordered.push_back(ids.model.layer_w[i]);
        ids.ordered.push_back(ids.model.layer_b[i]);
    }
    ids.ordered.push_back(ids.model.w_out);
    for (const GateIds* g : {&ids.gsgn.fbank, &ids.gsgn.unit}) {
        ids.ordered.push_back(g->w_fbank);
        ids.ordered.push_back(g->w_unit);
        ids.ordered.push_back(g->bias);
    }
    ids.ordered.push_back(ids.concat.w);
    ids.ordered.push_back(ids.concat.bias);
    if (ids.has_unit_embed) ids.ordered.push_back(ids.unit_embed);
    return ids;
}

// ---- batches ----

struct Batch {
    Tensor x_fbank;  // [sum(T) x D_f]
    Tensor x_unit;   // [sum(T) x D_u]
    std::vector<std::int32_t> targets;
};

inline Batch make_batch(const std::vector<MultiViewExample>& examples,
                        const std::vector<std::size_t>& indices) {
    std::size_t rows = 0;
    for (auto i : indices) rows += examples[i].x_fbank.rows();
    const std::size_t d_f = examples[indices[0]].x_fbank.cols();
    const std::size_t d_u = examples[indices[0]].x_unit.cols();
    Batch b;
    b.x_fbank = Tensor({rows, d_f});
    b.x_unit = Tensor({rows, d_u});
    std::size_t r = 0;
    for (auto i : indices) {
        const auto& ex = examples[i];
        for (std::size_t t = 0; t < ex.x_fbank.rows(); ++t, ++r) {
            for (std::size_t c = 0; c < d_f; ++c) b.x_fbank.at(r, c) = ex.x_fbank.at(t, c);
            for (std::size_t c = 0; c < d_u; ++c) b.x_unit.at(r, c) = ex.x_unit.at(t, c);
        }
        b.targets.insert(b.targets.end(), ex.targets.begin(), ex.targets.end());
    }
    return b;
}

// Applies the configured noise ablation to every partition, with a stream
// derived from the training seed; the identity when mode is none.
inline Corpus with_noise_ablation(Corpus corpus, NoiseMode mode, std::uint64_t seed) {
    if (mode == NoiseMode::None) return corpus;
    const NoiseRange range{corpus.unit_min, corpus.unit_max};
    Rng rng(derive_seed(seed, "noise-ablation"));
    for (auto* part : {&corpus.train, &corpus.valid, &corpus.test})
        for (auto& ex : *part)
            ex = mode == NoiseMode::Sum ? noise_sum(ex, range, rng)
                                        : noise_replace(ex, range, rng);
    return corpus;
}

// ---- evaluation ----

struct EvalResult {
    double loss = 0.0;
    double accuracy = 0.0;
};

struct RunSettings {
    ModelConfig model;
    GsgnConfig gsgn;
    TrainConfig train;
    nlohmann::json config_echo = nlohmann::json::object();
    std::string config_hash = "0";
};

namespace detail {

struct BuiltInput {
    Tape::Id x = 0;
    std::optional<GatePair> gates;
};

inline BuiltInput build_branch_input(Tape& tape, const AllIds& ids, Tape::Id x_fbank_raw,
                                     Tape::Id x_unit_raw, Branch branch, FusionMode mode,
                                     const GsgnConfig& gsgn_cfg) {
    BuiltInput out;
    switch (branch) {
        case Branch::Fbank:
            out.x = tape.matmul(x_fbank_raw, ids.model.p_fbank);
            return out;
        case Branch::Unit:
            out.x = tape.matmul(x_unit_raw, ids.model.p_unit);
            return out;
        case Branch::Fusion:
            break;
    }
    Tape::Id proj_f = tape.matmul(x_fbank_raw, ids.model.p_fbank);
    Tape::Id proj_u = tape.matmul(x_unit_raw, ids.model.p_unit);
    if (mode == FusionMode::Concat) {
        out.x = build_concat_fuse(tape, proj_f, proj_u, ids.concat);
    } else {
        out.gates = build_gates(tape, x_fbank_raw, x_unit_raw, ids.gsgn, gsgn_cfg);
        out.x = build_fuse(tape, *out.gates, proj_f, proj_u);
    }
    return out;
}

inline Branch forced_branch(FusionMode mode) {
    return mode == FusionMode::FbankOnly ? Branch::Fbank
           : mode == FusionMode::UnitOnly ? Branch::Unit
                                          : Branch::Fusion;
}

}  // namespace detail

// Deterministic by default: single-view modes use their view, fusion modes
// the fused input. With paper_inference the branch is sampled per example
// from the schedule's final stage, with a stream derived from the seed.
// embed_ids mode needs the corpus codebook to recover unit ids.
inline EvalResult evaluate(const ParamSet& params, const std::vector<MultiViewExample>& examples,
                           const RunSettings& settings, bool paper_inference,
                           const Codebook* codebook = nullptr) {
    const FusionMode mode = settings.train.fusion_mode;
    const Stage last_stage = settings.train.schedule.stages.back();
    Rng rng(derive_seed(settings.train.seed, "paper-inference"));
    if (settings.train.embed_ids && (!codebook || !params.unit_embed))
        throw ConfigError("evaluate: embed_ids mode needs a codebook and an embedding table");

    double loss_sum = 0.0;
    std::size_t positions = 0, correct = 0;
    for (const auto& ex : examples) {
        Branch branch = detail::forced_branch(mode);
        if (paper_inference && (mode == FusionMode::Gsgn || mode == FusionMode::Concat))
            branch = sample_branch(rng.uniform(), last_stage.delta_fbank, last_stage.delta_unit);

        Tape tape;
        AllIds ids = register_all(tape, params);
        Tape::Id unit_raw =
            settings.train.embed_ids
                ? tape.gather_rows(ids.unit_embed, quantize(ex.x_unit, *codebook).ids)
                : tape.input(ex.x_unit);
        auto built = detail::build_branch_input(tape, ids, tape.input(ex.x_fbank), unit_raw,
                                                branch, mode, settings.gsgn);
        Tape::Id logits = build_logits(
            tape, build_trunk(tape, built.x, ids.model, settings.model), ids.model);
        Tape::Id loss = task_loss(tape, logits, ex.targets, settings.train.label_smoothing);

        const std::size_t t_len = ex.targets.size();
        loss_sum += tape.value(loss)[0] * static_cast<double>(t_len);
        positions += t_len;
        const auto decoded = greedy_decode(tape.value(logits));
        for (std::size_t t = 0; t < t_len; ++t)
            if (decoded[t] == ex.targets[t]) ++correct;
    }
    EvalResult r;
    r.loss = loss_sum / static_cast<double>(positions);
    r.accuracy = static_cast<double>(correct) / static_cast<double>(positions);
    return r;
}

// ---- training run ----

struct EpochMetrics {
    std::int64_t epoch = 0;
    double train_loss = 0.0;
    double valid_loss = 0.0;
    double valid_accuracy = 0.0;
    std::optional<double> mean_g_fbank;
    std::optional<double> mean_g_unit;
    std::optional<double> conflict_fraction;
    double seconds = 0.0;
};

// Slim per-probe record kept for diagnostics (full gradient vectors are
// dropped once the statistics are taken).
struct ProbeLog {
    std::int64_t step = 0;
    std::int64_t epoch = 0;
    std::vector<LayerGradStat> per_layer;
    std::optional<double> global_cos;
    double conflict_fraction = 0.0;
    double global_norm_fbank = 0.0;
    double global_norm_unit = 0.0;
    double gate_target = 1.0;
};

struct RunResult {
    std::vector<EpochMetrics> metrics;
    std::vector<ProbeLog> probes;
    std::int64_t best_epoch = -1;
    double best_valid_loss = 0.0;
    double best_valid_accuracy = 0.0;
    std::int64_t stopped_epoch = -1;           // last epoch actually run
    std::vector<std::int64_t> averaged_epochs;  // sources of avg10.ckpt
};

class Trainer {
  public:
    Trainer(Corpus corpus, RunSettings settings,
            std::optional<std::filesystem::path> out_dir = std::nullopt,
            std::optional<ParamSet> warm_start = std::nullopt)
        : corpus_(std::move(corpus)), settings_(std::move(settings)), out_dir_(std::move(out_dir)) {
        settings_.model.validate();
        settings_.gsgn.validate();
        settings_.train.validate();
        if (settings_.model.vocab_size != corpus_.spec.vocab_size)
            throw ConfigError("model vocab_size " + std::to_string(settings_.model.vocab_size) +
                              " does not match corpus vocab_size " +
                              std::to_string(corpus_.spec.vocab_size));
        corpus_ = with_noise_ablation(std::move(corpus_), settings_.train.noise,
                                      settings_.train.seed);
        if (warm_start) {
            params_ = std::move(*warm_start);
        } else {
            params_ = ParamSet::init(settings_.model, corpus_.spec.d_fbank, corpus_.spec.d_unit,
                                     settings_.train.seed, settings_.train.tie_view_params);
        }
        if (settings_.train.embed_ids) {
            // Table starts at the codebook rows; ids come from re-quantizing
            // the stored unit view (a projection, so this is exact).
            if (!params_.unit_embed) params_.unit_embed = corpus_.codebook.centroids;
            train_unit_ids_.reserve(corpus_.train.size());
            for (const auto& ex : corpus_.train)
                train_unit_ids_.push_back(quantize(ex.x_unit, corpus_.codebook).ids);
        }
    }

    const ParamSet& params() const { return params_; }
    NoiseRange noise_range() const { return {corpus_.unit_min, corpus_.unit_max}; }

    RunResult run() {
        const TrainConfig& tc = settings_.train;
        Rng rng(derive_seed(tc.seed, "train"));
        AdamState adam;
        RunResult result;
        std::vector<double> valid_history;
        std::vector<std::filesystem::path> ckpt_paths;
        std::vector<double> ckpt_losses;

        std::unique_ptr<CsvWriter> metrics_csv, grads_csv, gates_csv;
        if (out_dir_) {
            std::error_code ec;
            std::filesystem::create_directories(*out_dir_, ec);
            if (ec) throw IoError("cannot create " + out_dir_->string() + ": " + ec.message());
            metrics_csv = std::make_unique<CsvWriter>(
                *out_dir_ / "metrics.csv",
                "epoch,train_loss,valid_loss,valid_accuracy,mean_g_fbank,mean_g_unit,"
                "conflict_fraction,seconds");
            grads_csv = std::make_unique<CsvWriter>(
                *out_dir_ / "grads.csv",
                "step,epoch,layer,cos_theta,norm_fbank,norm_unit,global_cos,conflict_fraction,"
                "gate_target");
            gates_csv = std::make_unique<CsvWriter>(
                *out_dir_ / "gates.csv",
                "step,epoch,mean_g_fbank,mean_g_unit,frac_g_fbank_above_1,gate_target");
        }

        std::int64_t global_step = 0;  // completed optimizer steps
        double gate_target_now = 1.0;
        const bool fusion_capable =
            tc.fusion_mode == FusionMode::Gsgn || tc.fusion_mode == FusionMode::Concat;

        for (std::size_t epoch = 0; epoch < tc.max_epochs; ++epoch) {
            const auto t0 = std::chrono::steady_clock::now();
            const Stage stage = stage_for_epoch(tc.schedule, static_cast<std::int64_t>(epoch));

            std::vector<std::size_t> order(corpus_.train.size());
            for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
            for (std::size_t i = order.size(); i > 1; --i)
                std::swap(order[i - 1], order[rng.index(i)]);

            double loss_sum = 0.0;
            std::size_t batches = 0;
            double g_fbank_sum = 0.0, g_unit_sum = 0.0;
            std::size_t gate_batches = 0;
            double conflict_sum = 0.0;
            std::size_t probe_count = 0;

            for (std::size_t start = 0; start < order.size(); start += tc.batch_size) {
                const std::size_t end = std::min(start + tc.batch_size, order.size());
                const std::vector<std::size_t> idx(order.begin() + start, order.begin() + end);
                Batch batch = make_batch(corpus_.train, idx);

                std::vector<std::int32_t> unit_ids;
                if (settings_.train.embed_ids)
                    for (auto i : idx)
                        unit_ids.insert(unit_ids.end(), train_unit_ids_[i].begin(),
                                        train_unit_ids_[i].end());

                if (fusion_capable && tc.probe_every > 0 &&
                    global_step % static_cast<std::int64_t>(tc.probe_every) == 0) {
                    GradSnapshot snap = per_view_gradients(
                        params_.model, batch.x_fbank, unit_view_values(batch, unit_ids),
                        batch.targets, settings_.model, tc.label_smoothing, global_step,
                        static_cast<std::int64_t>(epoch));
                    gate_target_now = gate_target(snap, settings_.gsgn.activation_scale);
                    conflict_sum += snap.conflict_fraction;
                    ++probe_count;
                    log_probe(result, snap, gate_target_now, grads_csv.get());
                }

                const double step_loss =
                    train_step(batch, unit_ids, idx.size(), stage, rng, adam, global_step + 1,
                               gate_target_now, g_fbank_sum, g_unit_sum, gate_batches,
                               gates_csv.get(), static_cast<std::int64_t>(epoch));
                if (!std::isfinite(step_loss))
                    throw NumericError("train: non-finite loss at epoch " +
                                       std::to_string(epoch) + ", step " +
                                       std::to_string(global_step + 1) + ", batch index " +
                                       std::to_string(start / tc.batch_size) +
                                       (last_probe_note_.empty() ? "" :
                                        "; last probe: " + last_probe_note_));
                ++global_step;
                loss_sum += step_loss;
                ++batches;
            }

            EvalResult valid = evaluate(params_, corpus_.valid, settings_, false,
                                        &corpus_.codebook);
            EpochMetrics m;
            m.epoch = static_cast<std::int64_t>(epoch);
            m.train_loss = loss_sum / static_cast<double>(batches);
            m.valid_loss = valid.loss;
            m.valid_accuracy = valid.accuracy;
            if (gate_batches > 0) {
                m.mean_g_fbank = g_fbank_sum / static_cast<double>(gate_batches);
                m.mean_g_unit = g_unit_sum / static_cast<double>(gate_batches);
            }
            if (probe_count > 0) m.conflict_fraction = conflict_sum / static_cast<double>(probe_count);
            m.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
            result.metrics.push_back(m);
            if (metrics_csv) write_metrics_row(*metrics_csv, m);

            valid_history.push_back(valid.loss);
            if (result.best_epoch < 0 || valid.loss < result.best_valid_loss) {
                result.best_epoch = m.epoch;
                result.best_valid_loss = valid.loss;
                result.best_valid_accuracy = valid.accuracy;
            }
            result.stopped_epoch = m.epoch;

            if (out_dir_) {
                char name[48];
                std::snprintf(name, sizeof(name), "ckpt_epoch_%04zu.ckpt", epoch);
                const auto path = *out_dir_ / name;
                save_checkpoint(path, make_checkpoint(m.epoch, global_step, valid.loss));
                ckpt_paths.push_back(path);
                ckpt_losses.push_back(valid.loss);
            }

            if (early_stop(valid_history, tc.patience)) break;
        }

        if (out_dir_ && !ckpt_paths.empty()) {
            std::vector<std::size_t> by_loss(ckpt_paths.size());
            for (std::size_t i = 0; i < by_loss.size(); ++i) by_loss[i] = i;
            std::stable_sort(by_loss.begin(), by_loss.end(), [&](std::size_t a, std::size_t b) {
                return ckpt_losses[a] < ckpt_losses[b];
            });
            std::vector<std::filesystem::path> best;
            for (std::size_t i = 0; i < std::min<std::size_t>(10, by_loss.size()); ++i)
                best.push_back(ckpt_paths[by_loss[i]]);
            Checkpoint avg = average_checkpoints(best);
            save_checkpoint(*out_dir_ / "avg10.ckpt", avg);
            result.averaged_epochs = avg.source_epochs;
        }
        return result;
    }

  private:
    Corpus corpus_;
    RunSettings settings_;
    std::optional<std::filesystem::path> out_dir_;
    ParamSet params_;
    std::vector<std::vector<std::int32_t>> train_unit_ids_;  // embed_ids mode only
    std::string last_probe_note_;

    Checkpoint make_checkpoint(std::int64_t epoch, std::int64_t step, double valid_loss) {
        Checkpoint c;
        c.config_hash = settings_.config_hash;
        c.epoch = epoch;
        c.step = step;
        c.valid_metric = valid_loss;
        c.has_metric = true;
        c.config = settings_.config_echo;
        c.tensors = params_.to_named();
        return c;
    }

    void log_probe(RunResult& result, const GradSnapshot& snap, double target,
                   CsvWriter* grads_csv) {
        last_probe_note_ = "step " + std::to_string(snap.step) + ", global_cos " +
                           (snap.global_cos ? fmt_double(*snap.global_cos) : "undefined") +
                           ", conflict_fraction " + fmt_double(snap.conflict_fraction) +
                           ", gate_target " + fmt_double(target);
        ProbeLog log;
        log.step = snap.step;
        log.epoch = snap.epoch;
        log.per_layer = snap.per_layer;
        log.global_cos = snap.global_cos;
        log.conflict_fraction = snap.conflict_fraction;
        log.global_norm_fbank = norm2(snap.grad_fbank_flat);
        log.global_norm_unit = norm2(snap.grad_unit_flat);
        log.gate_target = target;
        if (grads_csv) {
            auto opt_str = [](const std::optional<double>& v) {
                return v ? fmt_double(*v) : std::string();
            };
            const std::string step_s = std::to_string(log.step);
            const std::string epoch_s = std::to_string(log.epoch);
            const std::string global_cos_s = opt_str(log.global_cos);
            const std::string conflict_s = fmt_double(log.conflict_fraction);
            const std::string target_s = fmt_double(log.gate_target);
            for (const auto& layer : log.per_layer)
                grads_csv->row({step_s, epoch_s, layer.layer, opt_str(layer.cos_theta),
                                fmt_double(layer.norm_fbank), fmt_double(layer.norm_unit),
                                global_cos_s, conflict_s, target_s});
            grads_csv->row({step_s, epoch_s, "_global", global_cos_s,
                            fmt_double(log.global_norm_fbank), fmt_double(log.global_norm_unit),
                            global_cos_s, conflict_s, target_s});
        }
        result.probes.push_back(std::move(log));
    }

    void write_metrics_row(CsvWriter& csv, const EpochMetrics& m) {
        auto opt_str = [](const std::optional<double>& v) {
            return v ? fmt_double(*v) : std::string();
        };
        csv.row({std::to_string(m.epoch), fmt_double(m.train_loss), fmt_double(m.valid_loss),
                 fmt_double(m.valid_accuracy), opt_str(m.mean_g_fbank), opt_str(m.mean_g_unit),
                 opt_str(m.conflict_fraction), fmt_double(m.seconds)});
    }

    // Unit-view values as the model currently sees them: raw view, or the
    // present embedding-table rows in embed_ids mode.
    Tensor unit_view_values(const Batch& batch, const std::vector<std::int32_t>& unit_ids) const {
        if (!settings_.train.embed_ids) return batch.x_unit;
        const Tensor& table = *params_.unit_embed;
        Tensor out({unit_ids.size(), table.cols()});
        for (std::size_t i = 0; i < unit_ids.size(); ++i)
            for (std::size_t c = 0; c < table.cols(); ++c)
                out.at(i, c) = table.at(static_cast<std::size_t>(unit_ids[i]), c);
        return out;
    }

    // One optimizer step over one batch; returns the final loss value.
    double train_step(const Batch& batch, const std::vector<std::int32_t>& unit_ids,
                      std::size_t n_examples, const Stage& stage, Rng& rng,
                      AdamState& adam, std::int64_t step, double gate_target_now,
                      double& g_fbank_sum, double& g_unit_sum, std::size_t& gate_batches,
                      CsvWriter* gates_csv, std::int64_t epoch) {
        const TrainConfig& tc = settings_.train;
        const bool fusion_capable =
            tc.fusion_mode == FusionMode::Gsgn || tc.fusion_mode == FusionMode::Concat;

        // Branch choice: forced in single-view modes, otherwise sampled
        // per batch (or per example) from the current stage thresholds.
        std::vector<Branch> example_branch;
        Branch batch_branch = detail::forced_branch(tc.fusion_mode);
        if (fusion_capable) {
            if (tc.per_example_sampling) {
                example_branch.resize(n_examples);
                for (auto& b : example_branch)
                    b = sample_branch(rng.uniform(), stage.delta_fbank, stage.delta_unit);
            } else {
                batch_branch = sample_branch(rng.uniform(), stage.delta_fbank, stage.delta_unit);
            }
        }

        Tape tape;
        AllIds ids = register_all(tape, params_);

        struct Group {
            Branch branch;
            Tape::Id loss;
            std::size_t positions;
        };
        std::vector<Group> groups;
        double mean_gf = 0.0, mean_gu = 0.0, frac_above_1 = 0.0;
        bool saw_gates = false;

        auto build_group = [&](Branch branch, const Tensor& xf, const Tensor& xu,
                               const std::vector<std::int32_t>& group_unit_ids,
                               const std::vector<std::int32_t>& targets) {
            Tape::Id unit_raw = tc.embed_ids ? tape.gather_rows(ids.unit_embed, group_unit_ids)
                                             : tape.input(xu);
            auto built = detail::build_branch_input(tape, ids, tape.input(xf), unit_raw, branch,
                                                    tc.fusion_mode, settings_.gsgn);
            Tape::Id logits = build_logits(
                tape, build_trunk(tape, built.x, ids.model, settings_.model), ids.model);
            Tape::Id loss = task_loss(tape, logits, targets, tc.label_smoothing);
            if (built.gates && tc.fusion_mode == FusionMode::Gsgn) {
                Tape::Id gl = build_gate_loss(tape, *built.gates, gate_target_now);
                loss = build_final_loss(tape, loss, gl, tc.lambda_gate);
                const Tensor& gf = tape.value(built.gates->fbank);
                const Tensor& gu = tape.value(built.gates->unit);
                double sf = 0.0, su = 0.0, above = 0.0;
                for (std::size_t i = 0; i < gf.numel(); ++i) {
                    sf += gf[i];
                    su += gu[i];
                    if (gf[i] > 1.0) above += 1.0;
                }
                mean_gf = sf / static_cast<double>(gf.numel());
                mean_gu = su / static_cast<double>(gu.numel());
                frac_above_1 = above / static_cast<double>(gf.numel());
                saw_gates = true;
            }
            groups.push_back({branch, loss, targets.size()});
        };

        if (example_branch.empty()) {
            build_group(batch_branch, batch.x_fbank, batch.x_unit, unit_ids, batch.targets);
        } else {
            // Split the batch rows by per-example branch assignment.
            const std::size_t t_len = batch.targets.size() / n_examples;
            for (Branch want : {Branch::Fbank, Branch::Unit, Branch::Fusion}) {
                std::vector<std::size_t> rows;
                for (std::size_t e = 0; e < n_examples; ++e)
                    if (example_branch[e] == want)
                        for (std::size_t t = 0; t < t_len; ++t) rows.push_back(e * t_len + t);
                if (rows.empty()) continue;
                Tensor xf({rows.size(), batch.x_fbank.cols()});
                Tensor xu({rows.size(), batch.x_unit.cols()});
                std::vector<std::int32_t> targets(rows.size());
                std::vector<std::int32_t> group_ids(tc.embed_ids ? rows.size() : 0);
                for (std::size_t r = 0; r < rows.size(); ++r) {
                    for (std::size_t c = 0; c < xf.cols(); ++c)
                        xf.at(r, c) = batch.x_fbank.at(rows[r], c);
                    for (std::size_t c = 0; c < xu.cols(); ++c)
                        xu.at(r, c) = batch.x_unit.at(rows[r], c);
                    targets[r] = batch.targets[rows[r]];
                    if (tc.embed_ids) group_ids[r] = unit_ids[rows[r]];
                }
                build_group(want, xf, xu, group_ids, targets);
            }
        }

        // Position-weighted combination of the group losses.
        std::size_t total_positions = 0;
        for (const auto& g : groups) total_positions += g.positions;
        Tape::Id loss = groups[0].loss;
        if (groups.size() > 1 || groups[0].positions != total_positions) {
            loss = tape.scale(groups[0].loss, static_cast<double>(groups[0].positions) /
                                                  static_cast<double>(total_positions));
            for (std::size_t i = 1; i < groups.size(); ++i)
                loss = tape.add(loss, tape.scale(groups[i].loss,
                                                 static_cast<double>(groups[i].positions) /
                                                     static_cast<double>(total_positions)));
        }

        const double loss_value = tape.value(loss)[0];
        if (!std::isfinite(loss_value)) return loss_value;  // caller aborts with context

        auto grads = tape.backward(loss);
        auto refs = params_.refs();
        std::vector<Tensor> grad_list;
        grad_list.reserve(refs.size());
        for (std::size_t i = 0; i < refs.size(); ++i) grad_list.push_back(grads.at(ids.ordered[i]));
        adam_step(refs, grad_list, adam, step, tc);

        if (saw_gates) {
            g_fbank_sum += mean_gf;
            g_unit_sum += mean_gu;
            ++gate_batches;
            if (gates_csv)
                gates_csv->row({std::to_string(step - 1), std::to_string(epoch),
                                fmt_double(mean_gf), fmt_double(mean_gu),
                                fmt_double(frac_above_1), fmt_double(gate_target_now)});
        }
        return loss_value;
    }
};

}  // namespace mvfuse
