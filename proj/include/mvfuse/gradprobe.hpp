#pragma once

#include <algorithm>
#include <cstdint>
#include <iostream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "mvfuse/autodiff.hpp"
#include "mvfuse/errors.hpp"
#include "mvfuse/model.hpp"
#include "mvfuse/tensor.hpp"

namespace mvfuse {

// Cosine of the angle between two gradient vectors, clamped against
// rounding. Undefined (nullopt) when either norm is zero - never NaN.
inline std::optional<double> cosine(const std::vector<double>& a, const std::vector<double>& b) {
    const double na = norm2(a);
    const double nb = norm2(b);
    if (na == 0.0 || nb == 0.0) return std::nullopt;
    return std::clamp(dot(a, b) / (na * nb), -1.0, 1.0);
}

// Removes from b its component along a: b - (|b| cos(theta) / |a|) a.
// Applied regardless of the sign of cos(theta); callers gate on it.
inline std::vector<double> deconflict(const std::vector<double>& a,
                                      const std::vector<double>& b) {
    const double na = norm2(a);
    if (na == 0.0) throw NumericError("deconflict: degenerate input, |a| = 0");
    const double nb = norm2(b);
    const double cos_theta = nb == 0.0 ? 0.0 : std::clamp(dot(a, b) / (na * nb), -1.0, 1.0);
    const double coef = nb * cos_theta / na;
    std::vector<double> out(b.size());
    for (std::size_t i = 0; i < b.size(); ++i) out[i] = b[i] - coef * a[i];
    return out;
}

// Combined update direction: plain sum while the gradients agree, sum with
// the conflicting component of b projected out otherwise.
inline std::vector<double> corrected_gradient(const std::vector<double>& a,
                                              const std::vector<double>& b) {
    const auto cos_theta = cosine(a, b);
    std::vector<double> out(a.size());
    if (!cos_theta || *cos_theta >= 0.0) {
        for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[i] + b[i];
        return out;
    }
    const auto proj = deconflict(a, b);
    for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[i] + proj[i];
    return out;
}

struct LayerGradStat {
    std::string layer;
    std::optional<double> cos_theta;
    double norm_fbank = 0.0;
    double norm_unit = 0.0;
};

// Result of one probe: per-view gradients of the shared trunk under frozen
// parameters, with per-layer and global conflict statistics. The
// view-specific input projections are excluded - each view only ever
// touches its own projection, so a cross-view angle there is meaningless.
struct GradSnapshot {
    std::vector<double> grad_fbank_flat;
    std::vector<double> grad_unit_flat;
    std::vector<LayerGradStat> per_layer;
    std::optional<double> global_cos;
    double conflict_fraction = 0.0;
    std::int64_t step = 0;
    std::int64_t epoch = 0;
};

namespace detail {

struct TrunkGrads {
    std::vector<std::vector<double>> by_layer;  // layer i = [grad w_i ; grad b_i], last = w_out
    std::vector<std::string> names;
};

inline TrunkGrads trunk_gradients_for_view(const ModelParams& params, const Tensor& view,
                                           bool fbank_view,
                                           const std::vector<std::int32_t>& targets,
                                           const ModelConfig& cfg, double smoothing) {
    Tape tape;
    ModelIds ids = register_model(tape, params);
    Tape::Id x = tape.matmul(tape.input(view), fbank_view ? ids.p_fbank : ids.p_unit);
    Tape::Id logits = build_logits(tape, build_trunk(tape, x, ids, cfg), ids);
    auto grads = tape.backward(task_loss(tape, logits, targets, smoothing));

    TrunkGrads out;
    for (std::size_t i = 0; i < ids.layer_w.size(); ++i) {
        std::vector<double> flat = grads.at(ids.layer_w[i]).data;
        const auto gb = grads.at(ids.layer_b[i]).data;
        flat.insert(flat.end(), gb.begin(), gb.end());
        out.by_layer.push_back(std::move(flat));
        out.names.push_back(tape.param_name(ids.layer_w[i]).substr(0, 7));  // "layerNN"
    }
    out.by_layer.push_back(grads.at(ids.w_out).data);
    out.names.push_back("out");
    return out;
}

}  // namespace detail

// Two independent passes over the same frozen parameters, one per view;
// parameters are never updated here.
inline GradSnapshot per_view_gradients(const ModelParams& params, const Tensor& x_fbank,
                                       const Tensor& x_unit,
                                       const std::vector<std::int32_t>& targets,
                                       const ModelConfig& cfg, double smoothing,
                                       std::int64_t step = 0, std::int64_t epoch = 0) {
    auto fbank = detail::trunk_gradients_for_view(params, x_fbank, true, targets, cfg, smoothing);
    auto unit = detail::trunk_gradients_for_view(params, x_unit, false, targets, cfg, smoothing);

    GradSnapshot snap;
    snap.step = step;
    snap.epoch = epoch;
    std::size_t defined = 0, conflicting = 0;
    for (std::size_t i = 0; i < fbank.by_layer.size(); ++i) {
        LayerGradStat stat;
        stat.layer = fbank.names[i];
        stat.norm_fbank = norm2(fbank.by_layer[i]);
        stat.norm_unit = norm2(unit.by_layer[i]);
        stat.cos_theta = cosine(fbank.by_layer[i], unit.by_layer[i]);
        if (stat.cos_theta) {
            ++defined;
            if (*stat.cos_theta < 0.0) ++conflicting;
        }
        snap.per_layer.push_back(std::move(stat));
        snap.grad_fbank_flat.insert(snap.grad_fbank_flat.end(), fbank.by_layer[i].begin(),
                                    fbank.by_layer[i].end());
        snap.grad_unit_flat.insert(snap.grad_unit_flat.end(), unit.by_layer[i].begin(),
                                   unit.by_layer[i].end());
    }
    snap.global_cos = cosine(snap.grad_fbank_flat, snap.grad_unit_flat);
    snap.conflict_fraction =
        defined == 0 ? 0.0 : static_cast<double>(conflicting) / static_cast<double>(defined);
    return snap;
}

// Regression target for the fbank gate: 1 while the per-view gradients
// agree, the closed-form correction coefficient 1 - |b| cos(theta) / |a|
// when they conflict, clamped to the reachable gate range [0, scale].
inline double gate_target(const GradSnapshot& snap, double activation_scale) {
    const double norm_fbank = norm2(snap.grad_fbank_flat);
    if (norm_fbank == 0.0) {
        std::cerr << "[gradprobe] warning: zero fbank gradient at step " << snap.step
                  << ", gate target defaults to 1\n";
        return 1.0;
    }
    if (!snap.global_cos || *snap.global_cos >= 0.0) return 1.0;
    const double target = 1.0 - norm2(snap.grad_unit_flat) * (*snap.global_cos) / norm_fbank;
    return std::clamp(target, 0.0, activation_scale);
}

struct ConflictReportRow {
    std::int64_t epoch = 0;
    double mean_global_cos = 0.0;
    double mean_conflict_fraction = 0.0;
    double mean_gate_target = 0.0;
    std::size_t probes = 0;
};

// Per-epoch means over a run's snapshots; empty input gives an empty report.
inline std::vector<ConflictReportRow> conflict_report(const std::vector<GradSnapshot>& snaps,
                                                      double activation_scale) {
    std::map<std::int64_t, ConflictReportRow> by_epoch;
    std::map<std::int64_t, std::size_t> cos_counts;
    for (const auto& s : snaps) {
        auto& row = by_epoch[s.epoch];
        row.epoch = s.epoch;
        row.mean_conflict_fraction += s.conflict_fraction;
        row.mean_gate_target += gate_target(s, activation_scale);
        if (s.global_cos) {
            row.mean_global_cos += *s.global_cos;
            ++cos_counts[s.epoch];
        }
        ++row.probes;
    }
    std::vector<ConflictReportRow> out;
    for (auto& [epoch, row] : by_epoch) {
        row.mean_conflict_fraction /= static_cast<double>(row.probes);
        row.mean_gate_target /= static_cast<double>(row.probes);
        if (cos_counts[epoch] > 0)
            row.mean_global_cos /= static_cast<double>(cos_counts[epoch]);
        out.push_back(row);
    }
    return out;
}

}  // namespace mvfuse
