#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "mvfuse/autodiff.hpp"
#include "mvfuse/errors.hpp"
#include "mvfuse/rng.hpp"
#include "mvfuse/tensor.hpp"

namespace mvfuse {

// Miniature residual encoder-decoder: an acoustic stack, a textual stack and
// a position-wise decoder stack over a shared hidden width. linear_mode
// reduces every residual branch to an affine map.
struct ModelConfig {
    std::size_t hidden_dim = 32;
    std::size_t acoustic_layers = 4;
    std::size_t textual_layers = 2;
    std::size_t decoder_layers = 2;
    std::size_t vocab_size = 16;
    bool linear_mode = false;
    bool residual = true;

    std::size_t total_layers() const { return acoustic_layers + textual_layers + decoder_layers; }

    void validate() const {
        if (acoustic_layers < 1 || textual_layers < 1 || decoder_layers < 1)
            throw ConfigError("model: all layer counts must be >= 1");
        if (hidden_dim < 2) throw ConfigError("model: hidden_dim must be >= 2");
        if (vocab_size < 2) throw ConfigError("model: vocab_size must be >= 2");
    }
};

// Learned tensors: per-layer weight/bias, output projection, and one input
// projection per view. Layer-norm gain/bias are fixed (1, 0), not learned.
struct ModelParams {
    std::vector<Tensor> layer_w;  // [D x D] each
    std::vector<Tensor> layer_b;  // [D] each
    Tensor w_out;                 // [D x V]
    Tensor p_fbank;               // [D_f x D]
    Tensor p_unit;                // [D_u x D]

    static ModelParams init(const ModelConfig& cfg, std::size_t d_fbank, std::size_t d_unit,
                            Rng& rng) {
        cfg.validate();
        ModelParams p;
        const std::size_t d = cfg.hidden_dim;
        for (std::size_t i = 0; i < cfg.total_layers(); ++i) {
            p.layer_w.push_back(gaussian({d, d}, rng));
            p.layer_b.push_back(Tensor::zeros({d}));
        }
        p.w_out = gaussian({d, cfg.vocab_size}, rng);
        p.p_fbank = gaussian({d_fbank, d}, rng);
        p.p_unit = gaussian({d_unit, d}, rng);
        return p;
    }

    static Tensor gaussian(Shape shape, Rng& rng) {
        Tensor t(shape);
        const double sd = 1.0 / std::sqrt(static_cast<double>(shape[0]));
        for (auto& x : t.data) x = sd * rng.normal();
        return t;
    }
};

// Parameter leaves of one model instance on a tape.
struct ModelIds {
    std::vector<Tape::Id> layer_w;
    std::vector<Tape::Id> layer_b;
    Tape::Id w_out = 0;
    Tape::Id p_fbank = 0;
    Tape::Id p_unit = 0;
};

inline ModelIds register_model(Tape& tape, const ModelParams& params) {
    ModelIds ids;
    ids.p_fbank = tape.param(params.p_fbank, "proj.fbank");
    ids.p_unit = tape.param(params.p_unit, "proj.unit");
    for (std::size_t i = 0; i < params.layer_w.size(); ++i) {
        const std::string tag = i < 10 ? "0" + std::to_string(i) : std::to_string(i);
        ids.layer_w.push_back(tape.param(params.layer_w[i], "layer" + tag + ".w"));
        ids.layer_b.push_back(tape.param(params.layer_b[i], "layer" + tag + ".b"));
    }
    ids.w_out = tape.param(params.w_out, "out.w");
    return ids;
}

// Residual stack over a fused [T x D] input; returns the final hidden state.
inline Tape::Id build_trunk(Tape& tape, Tape::Id x, const ModelIds& ids,
                            const ModelConfig& cfg) {
    if (tape.value(x).cols() != cfg.hidden_dim)
        throw ShapeError("model: input width " + std::to_string(tape.value(x).cols()) +
                         " does not match hidden_dim " + std::to_string(cfg.hidden_dim));
    Tape::Id ln_gain = 0, ln_bias = 0;
    if (!cfg.linear_mode) {
        ln_gain = tape.input(Tensor::ones({cfg.hidden_dim}));
        ln_bias = tape.input(Tensor::zeros({cfg.hidden_dim}));
    }
    Tape::Id h = x;
    for (std::size_t i = 0; i < cfg.total_layers(); ++i) {
        Tape::Id branch = tape.add_rowwise(tape.matmul(h, ids.layer_w[i]), ids.layer_b[i]);
        if (!cfg.linear_mode) branch = tape.layer_norm(tape.relu(branch), ln_gain, ln_bias);
        h = cfg.residual ? tape.add(branch, h) : branch;
    }
    return h;
}

inline Tape::Id build_logits(Tape& tape, Tape::Id h_out, const ModelIds& ids) {
    return tape.matmul(h_out, ids.w_out);
}

// Convenience un-taped forward.
inline Tensor forward(const Tensor& x, const ModelParams& params, const ModelConfig& cfg) {
    Tape tape;
    ModelIds ids = register_model(tape, params);
    Tape::Id logits = build_logits(tape, build_trunk(tape, tape.input(x), ids, cfg), ids);
    return tape.value(logits);
}

inline Tape::Id task_loss(Tape& tape, Tape::Id logits, const std::vector<std::int32_t>& targets,
                          double smoothing) {
    return tape.softmax_cross_entropy(logits, targets, smoothing);
}

// Per-position argmax; the lowest id wins ties.
inline std::vector<std::int32_t> greedy_decode(const Tensor& logits) {
    std::vector<std::int32_t> out(logits.rows());
    for (std::size_t t = 0; t < logits.rows(); ++t) {
        std::size_t best = 0;
        for (std::size_t v = 1; v < logits.cols(); ++v)
            if (logits.at(t, v) > logits.at(t, best)) best = v;
        out[t] = static_cast<std::int32_t>(best);
    }
    return out;
}

}  // namespace mvfuse
