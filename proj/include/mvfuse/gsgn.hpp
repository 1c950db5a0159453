#pragma once

#include <string>
#include <utility>
#include <vector>

#include "mvfuse/autodiff.hpp"
#include "mvfuse/errors.hpp"
#include "mvfuse/model.hpp"
#include "mvfuse/rng.hpp"
#include "mvfuse/tensor.hpp"

namespace mvfuse {

struct GsgnConfig {
    // Gates are scale * sigmoid(..), so targets above 1 stay reachable.
    // scale = 1 gives the plain sigmoid gate.
    double activation_scale = 2.0;
    // Pin the unit gate to exactly 1 instead of regressing it there.
    bool hard_unit_gate = false;

    void validate() const {
        if (activation_scale <= 0.0) throw ConfigError("gsgn: activation_scale must be > 0");
    }
};

// One gate: a linear map from each raw view plus a shared bias.
struct GateParams {
    Tensor w_fbank;  // [D_f x D]
    Tensor w_unit;   // [D_u x D]
    Tensor bias;     // [D]
};

struct GsgnParams {
    GateParams fbank;
    GateParams unit;

    static GsgnParams init(std::size_t d_fbank, std::size_t d_unit, std::size_t d, Rng& rng) {
        auto gate = [&] {
            GateParams g;
            g.w_fbank = ModelParams::gaussian({d_fbank, d}, rng);
            g.w_unit = ModelParams::gaussian({d_unit, d}, rng);
            g.bias = Tensor::zeros({d});
            return g;
        };
        GsgnParams p;
        p.fbank = gate();
        p.unit = gate();
        return p;
    }
};

// Concatenation baseline: a single linear map from [x_fbank ; x_unit]
// (projected views, 2D wide) back to D.
struct ConcatFuseParams {
    Tensor w;     // [2D x D]
    Tensor bias;  // [D]

    static ConcatFuseParams init(std::size_t d, Rng& rng) {
        ConcatFuseParams p;
        p.w = ModelParams::gaussian({2 * d, d}, rng);
        p.bias = Tensor::zeros({d});
        return p;
    }
};

struct GateIds {
    Tape::Id w_fbank = 0, w_unit = 0, bias = 0;
};

struct GsgnIds {
    GateIds fbank, unit;
};

struct ConcatFuseIds {
    Tape::Id w = 0, bias = 0;
};

inline GsgnIds register_gsgn(Tape& tape, const GsgnParams& params) {
    auto reg = [&](const GateParams& g, const std::string& name) {
        GateIds ids;
        ids.w_fbank = tape.param(g.w_fbank, "gate." + name + ".w_fbank");
        ids.w_unit = tape.param(g.w_unit, "gate." + name + ".w_unit");
        ids.bias = tape.param(g.bias, "gate." + name + ".bias");
        return ids;
    };
    return {reg(params.fbank, "fbank"), reg(params.unit, "unit")};
}

inline ConcatFuseIds register_concat_fuse(Tape& tape, const ConcatFuseParams& params) {
    return {tape.param(params.w, "concat.w"), tape.param(params.bias, "concat.bias")};
}

// g = scale * sigmoid(x_fbank W1 + x_unit W2 + bias), per position.
inline Tape::Id build_gate(Tape& tape, Tape::Id x_fbank, Tape::Id x_unit, const GateIds& ids,
                           double scale) {
    if (tape.value(x_fbank).rows() != tape.value(x_unit).rows())
        throw ShapeError("gate: sequence lengths differ, " +
                         std::to_string(tape.value(x_fbank).rows()) + " vs " +
                         std::to_string(tape.value(x_unit).rows()));
    Tape::Id pre = tape.add_rowwise(
        tape.add(tape.matmul(x_fbank, ids.w_fbank), tape.matmul(x_unit, ids.w_unit)), ids.bias);
    Tape::Id g = tape.sigmoid(pre);
    return scale == 1.0 ? g : tape.scale(g, scale);
}

struct GatePair {
    Tape::Id fbank = 0;
    Tape::Id unit = 0;
};

inline GatePair build_gates(Tape& tape, Tape::Id x_fbank, Tape::Id x_unit, const GsgnIds& ids,
                            const GsgnConfig& cfg) {
    cfg.validate();
    GatePair g;
    g.fbank = build_gate(tape, x_fbank, x_unit, ids.fbank, cfg.activation_scale);
    g.unit = cfg.hard_unit_gate
                 ? tape.input(Tensor::ones(tape.value(g.fbank).shape))
                 : build_gate(tape, x_fbank, x_unit, ids.unit, cfg.activation_scale);
    return g;
}

// x_fusion = g_fbank o x_fbank + g_unit o x_unit (projected views).
inline Tape::Id build_fuse(Tape& tape, const GatePair& gates, Tape::Id x_fbank_proj,
                           Tape::Id x_unit_proj) {
    return tape.add(tape.hadamard(gates.fbank, x_fbank_proj),
                    tape.hadamard(gates.unit, x_unit_proj));
}

inline Tape::Id build_concat_fuse(Tape& tape, Tape::Id x_fbank_proj, Tape::Id x_unit_proj,
                                  const ConcatFuseIds& ids) {
    return tape.add_rowwise(tape.matmul(tape.concat_cols(x_fbank_proj, x_unit_proj), ids.w),
                            ids.bias);
}

// MSE(g_fbank, target) + MSE(g_unit, 1): the unit gate is regressed to 1,
// the fbank gate to the conflict-derived target.
inline Tape::Id build_gate_loss(Tape& tape, const GatePair& gates, double target_fbank) {
    const Shape shape = tape.value(gates.fbank).shape;
    Tape::Id loss_fbank = tape.mse(gates.fbank, tape.input(Tensor::full(shape, target_fbank)));
    Tape::Id loss_unit = tape.mse(gates.unit, tape.input(Tensor::ones(shape)));
    return tape.add(loss_fbank, loss_unit);
}

inline Tape::Id build_final_loss(Tape& tape, Tape::Id task, Tape::Id gate_loss, double lambda) {
    if (lambda < 0.0) throw ConfigError("gsgn: lambda_gate must be >= 0");
    return lambda == 0.0 ? task : tape.add(task, tape.scale(gate_loss, lambda));
}

// ---- plain-value wrappers (diagnostics and tests) ----

struct GateOutput {
    Tensor g_fbank;
    Tensor g_unit;
    double activation_scale = 1.0;
};

inline GateOutput compute_gates(const Tensor& x_fbank, const Tensor& x_unit,
                                const GsgnParams& params, const GsgnConfig& cfg) {
    Tape tape;
    GsgnIds ids = register_gsgn(tape, params);
    GatePair g = build_gates(tape, tape.input(x_fbank), tape.input(x_unit), ids, cfg);
    return {tape.value(g.fbank), tape.value(g.unit), cfg.activation_scale};
}

inline Tensor fuse(const GateOutput& gates, const Tensor& x_fbank_proj,
                   const Tensor& x_unit_proj) {
    Tape tape;
    GatePair g{tape.input(gates.g_fbank), tape.input(gates.g_unit)};
    return tape.value(build_fuse(tape, g, tape.input(x_fbank_proj), tape.input(x_unit_proj)));
}

inline Tensor concat_gate_fuse(const Tensor& x_fbank_proj, const Tensor& x_unit_proj,
                               const ConcatFuseParams& params) {
    Tape tape;
    ConcatFuseIds ids = register_concat_fuse(tape, params);
    return tape.value(
        build_concat_fuse(tape, tape.input(x_fbank_proj), tape.input(x_unit_proj), ids));
}

inline double gate_loss(const GateOutput& gates, double target_fbank) {
    Tape tape;
    GatePair g{tape.input(gates.g_fbank), tape.input(gates.g_unit)};
    return tape.value(build_gate_loss(tape, g, target_fbank))[0];
}

inline double final_loss(double task, double gate, double lambda) {
    if (lambda < 0.0) throw ConfigError("gsgn: lambda_gate must be >= 0");
    return task + lambda * gate;
}

}  // namespace mvfuse
