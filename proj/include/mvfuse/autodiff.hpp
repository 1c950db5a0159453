#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <string>
#include <utility>
#include <vector>

#include "mvfuse/errors.hpp"
#include "mvfuse/tensor.hpp"

namespace mvfuse {

inline constexpr double kLayerNormEps = 1e-5;

namespace detail {

// Logistic function, clamped so outputs stay strictly inside (0, 1) even
// where the exact value would round to 0.0 or 1.0.
inline double stable_sigmoid(double x) {
    double y;
    if (x >= 0.0) {
        y = 1.0 / (1.0 + std::exp(-x));
    } else {
        double e = std::exp(x);
        y = e / (1.0 + e);
    }
    y = std::min(y, 1.0 - std::numeric_limits<double>::epsilon() / 2);
    return std::max(y, std::numeric_limits<double>::min());
}

}  // namespace detail

// Append-only reverse-mode tape. Nodes cache their forward values and are
// stored in evaluation order, so every node's parents precede it and
// backward() is a single reverse sweep that visits each node once.
class Tape {
  public:
    using Id = std::uint32_t;

    // ---- leaves ----

    Id input(Tensor v) { return push_leaf(std::move(v), false, {}); }

    Id param(Tensor v, std::string name) { return push_leaf(std::move(v), true, std::move(name)); }

    // ---- elementwise and structural ops ----

    Id add(Id a, Id b) {
        require_same_shape("add", a, b);
        Tensor out = val(a);
        const Tensor& vb = val(b);
        for (std::size_t i = 0; i < out.numel(); ++i) out[i] += vb[i];
        return push(Op::Add, {a, b}, std::move(out));
    }

    Id hadamard(Id a, Id b) {
        require_same_shape("hadamard", a, b);
        Tensor out = val(a);
        const Tensor& vb = val(b);
        for (std::size_t i = 0; i < out.numel(); ++i) out[i] *= vb[i];
        return push(Op::Hadamard, {a, b}, std::move(out));
    }

    Id matmul(Id a, Id b) {
        const Tensor& va = val(a);
        const Tensor& vb = val(b);
        if (va.shape.size() != 2 || vb.shape.size() != 2 || va.cols() != vb.rows())
            throw ShapeError("matmul: " + shape_str(va.shape) + " x " + shape_str(vb.shape) +
                             ": inner dimensions do not agree");
        return push(Op::MatMul, {a, b}, matmul_values(va, vb));
    }

    Id concat_cols(Id a, Id b) {
        const Tensor& va = val(a);
        const Tensor& vb = val(b);
        if (va.shape.size() != 2 || vb.shape.size() != 2 || va.rows() != vb.rows())
            throw ShapeError("concat_cols: " + shape_str(va.shape) + " vs " + shape_str(vb.shape) +
                             ": row counts differ");
        Tensor out({va.rows(), va.cols() + vb.cols()});
        for (std::size_t r = 0; r < va.rows(); ++r) {
            for (std::size_t c = 0; c < va.cols(); ++c) out.at(r, c) = va.at(r, c);
            for (std::size_t c = 0; c < vb.cols(); ++c) out.at(r, va.cols() + c) = vb.at(r, c);
        }
        return push(Op::ConcatCols, {a, b}, std::move(out));
    }

    // Broadcast a [D] bias over the rows of a [T x D] matrix.
    Id add_rowwise(Id a, Id bias) {
        const Tensor& va = val(a);
        const Tensor& vb = val(bias);
        if (va.shape.size() != 2 || vb.numel() != va.cols())
            throw ShapeError("add_rowwise: " + shape_str(va.shape) + " with bias " +
                             shape_str(vb.shape));
        Tensor out = va;
        for (std::size_t r = 0; r < out.rows(); ++r)
            for (std::size_t c = 0; c < out.cols(); ++c) out.at(r, c) += vb[c];
        return push(Op::AddRowwise, {a, bias}, std::move(out));
    }

    Id sigmoid(Id a) {
        Tensor out = val(a);
        for (auto& x : out.data) x = detail::stable_sigmoid(x);
        return push(Op::Sigmoid, {a}, std::move(out));
    }

    Id relu(Id a) {
        Tensor out = val(a);
        for (auto& x : out.data) x = x > 0.0 ? x : 0.0;
        return push(Op::Relu, {a}, std::move(out));
    }

    // Normalizes over the last dimension, then applies gain and bias.
    Id layer_norm(Id x, Id gain, Id bias) {
        const Tensor& vx = val(x);
        const std::size_t width = vx.cols();
        if (vx.shape.size() != 2 || width < 2)
            throw ShapeError("layer_norm: needs a [T x D] input with D >= 2, got " +
                             shape_str(vx.shape));
        if (val(gain).numel() != width || val(bias).numel() != width)
            throw ShapeError("layer_norm: gain/bias must have " + std::to_string(width) +
                             " elements");
        Tensor out = vx;
        const Tensor& vg = val(gain);
        const Tensor& vb = val(bias);
        for (std::size_t r = 0; r < vx.rows(); ++r) {
            auto [mu, inv_sd] = row_moments(vx, r);
            for (std::size_t c = 0; c < width; ++c)
                out.at(r, c) = (vx.at(r, c) - mu) * inv_sd * vg[c] + vb[c];
        }
        return push(Op::LayerNorm, {x, gain, bias}, std::move(out));
    }

    // Row lookup into a [k x D] table; rows may repeat.
    Id gather_rows(Id table, std::vector<std::int32_t> rows) {
        const Tensor& vt = val(table);
        if (vt.shape.size() != 2)
            throw ShapeError("gather_rows: table must be 2-D, got " + shape_str(vt.shape));
        for (auto r : rows)
            if (r < 0 || static_cast<std::size_t>(r) >= vt.rows())
                throw ShapeError("gather_rows: row " + std::to_string(r) + " out of range [0, " +
                                 std::to_string(vt.rows()) + ")");
        Tensor out({rows.size(), vt.cols()});
        for (std::size_t i = 0; i < rows.size(); ++i)
            for (std::size_t c = 0; c < vt.cols(); ++c)
                out.at(i, c) = vt.at(static_cast<std::size_t>(rows[i]), c);
        Id id = push(Op::GatherRows, {table}, std::move(out));
        nodes_[id].targets = std::move(rows);
        return id;
    }

    Id scale(Id a, double c) {
        Tensor out = val(a);
        for (auto& x : out.data) x *= c;
        Id id = push(Op::Scale, {a}, std::move(out));
        nodes_[id].c = c;
        return id;
    }

    Id sum(Id a) {
        double s = 0.0;
        for (double x : val(a).data) s += x;
        return push(Op::Sum, {a}, Tensor::scalar(s));
    }

    // ---- losses ----

    Id mse(Id a, Id b) {
        require_same_shape("mse", a, b);
        const Tensor& va = val(a);
        const Tensor& vb = val(b);
        double s = 0.0;
        for (std::size_t i = 0; i < va.numel(); ++i) {
            double d = va[i] - vb[i];
            s += d * d;
        }
        return push(Op::Mse, {a, b}, Tensor::scalar(s / static_cast<double>(va.numel())));
    }

    // Mean over positions of label-smoothed cross-entropy. The smoothing
    // mass is spread uniformly over all classes, target included.
    Id softmax_cross_entropy(Id logits, std::vector<std::int32_t> targets, double smoothing) {
        const Tensor& vl = val(logits);
        if (vl.shape.size() != 2)
            throw ShapeError("cross_entropy: logits must be [T x V], got " + shape_str(vl.shape));
        const auto t_len = vl.rows();
        const auto vocab = vl.cols();
        if (targets.size() != t_len)
            throw ShapeError("cross_entropy: " + std::to_string(targets.size()) +
                             " targets for " + std::to_string(t_len) + " positions");
        if (smoothing < 0.0 || smoothing >= 1.0)
            throw ShapeError("cross_entropy: smoothing must lie in [0, 1)");
        for (auto y : targets)
            if (y < 0 || static_cast<std::size_t>(y) >= vocab)
                throw ShapeError("cross_entropy: target id " + std::to_string(y) +
                                 " out of range [0, " + std::to_string(vocab) + ")");

        double loss = 0.0;
        std::vector<double> logp(vocab);
        for (std::size_t t = 0; t < t_len; ++t) {
            row_log_softmax(vl, t, logp);
            double pos = -(1.0 - smoothing) * logp[static_cast<std::size_t>(targets[t])];
            if (smoothing > 0.0) {
                double s = 0.0;
                for (double lp : logp) s += lp;
                pos -= smoothing / static_cast<double>(vocab) * s;
            }
            loss += pos;
        }
        Id id = push(Op::SoftmaxXent, {logits}, Tensor::scalar(loss / static_cast<double>(t_len)));
        nodes_[id].c = smoothing;
        nodes_[id].targets = std::move(targets);
        return id;
    }

    // ---- access ----

    const Tensor& value(Id id) const { return nodes_.at(id).value; }
    bool is_param(Id id) const { return nodes_.at(id).is_param; }
    const std::string& param_name(Id id) const { return nodes_.at(id).name; }
    std::size_t size() const { return nodes_.size(); }

    // ---- backward ----

    class Gradients {
      public:
        // Gradient of the loss w.r.t. node `id`; zero tensor if the node
        // does not influence the loss.
        Tensor at(Id id) const {
            if (id < grads_.size() && !grads_[id].data.empty()) return grads_[id];
            return Tensor::zeros(shapes_[id]);
        }

      private:
        friend class Tape;
        std::vector<Tensor> grads_;
        std::vector<Shape> shapes_;
    };

    Gradients backward(Id loss) const {
        if (!value(loss).is_scalar())
            throw ShapeError("backward: loss must be a scalar, got " +
                             shape_str(value(loss).shape));
        Gradients out;
        out.shapes_.reserve(nodes_.size());
        for (const auto& n : nodes_) out.shapes_.push_back(n.value.shape);
        auto& g = out.grads_;
        g.resize(nodes_.size());
        auto grad_of = [&](Id i) -> Tensor& {
            if (g[i].data.empty()) g[i] = Tensor::zeros(nodes_[i].value.shape);
            return g[i];
        };
        grad_of(loss)[0] = 1.0;

        for (Id i = loss + 1; i-- > 0;) {
            const Node& n = nodes_[i];
            if (g[i].data.empty() || n.op == Op::Leaf) continue;
            const Tensor gi = g[i];  // copy: grad_of() may reallocate g
            switch (n.op) {
                case Op::Add: {
                    accumulate(grad_of(n.parent[0]), gi);
                    accumulate(grad_of(n.parent[1]), gi);
                    break;
                }
                case Op::Hadamard: {
                    const Tensor& va = nodes_[n.parent[0]].value;
                    const Tensor& vb = nodes_[n.parent[1]].value;
                    Tensor& ga = grad_of(n.parent[0]);
                    for (std::size_t k = 0; k < gi.numel(); ++k) ga[k] += gi[k] * vb[k];
                    Tensor& gb = grad_of(n.parent[1]);
                    for (std::size_t k = 0; k < gi.numel(); ++k) gb[k] += gi[k] * va[k];
                    break;
                }
                case Op::MatMul: {
                    const Tensor& va = nodes_[n.parent[0]].value;
                    const Tensor& vb = nodes_[n.parent[1]].value;
                    matmul_acc_abt(gi, vb, grad_of(n.parent[0]));  // gi * vb^T
                    matmul_acc_atb(va, gi, grad_of(n.parent[1]));  // va^T * gi
                    break;
                }
                case Op::ConcatCols: {
                    const std::size_t ca = nodes_[n.parent[0]].value.cols();
                    const std::size_t cb = nodes_[n.parent[1]].value.cols();
                    Tensor& ga = grad_of(n.parent[0]);
                    Tensor& gb = grad_of(n.parent[1]);
                    for (std::size_t r = 0; r < gi.rows(); ++r) {
                        for (std::size_t c = 0; c < ca; ++c) ga.at(r, c) += gi.at(r, c);
                        for (std::size_t c = 0; c < cb; ++c) gb.at(r, c) += gi.at(r, ca + c);
                    }
                    break;
                }
                case Op::AddRowwise: {
                    accumulate(grad_of(n.parent[0]), gi);
                    Tensor& gb = grad_of(n.parent[1]);
                    for (std::size_t r = 0; r < gi.rows(); ++r)
                        for (std::size_t c = 0; c < gi.cols(); ++c) gb[c] += gi.at(r, c);
                    break;
                }
                case Op::Sigmoid: {
                    const Tensor& y = n.value;
                    Tensor& ga = grad_of(n.parent[0]);
                    for (std::size_t k = 0; k < gi.numel(); ++k)
                        ga[k] += gi[k] * y[k] * (1.0 - y[k]);
                    break;
                }
                case Op::Relu: {
                    const Tensor& x = nodes_[n.parent[0]].value;
                    Tensor& ga = grad_of(n.parent[0]);
                    for (std::size_t k = 0; k < gi.numel(); ++k)
                        if (x[k] > 0.0) ga[k] += gi[k];
                    break;
                }
                case Op::LayerNorm:
                    backward_layer_norm(n, gi, grad_of(n.parent[0]), grad_of(n.parent[1]),
                                        grad_of(n.parent[2]));
                    break;
                case Op::Scale: {
                    Tensor& ga = grad_of(n.parent[0]);
                    for (std::size_t k = 0; k < gi.numel(); ++k) ga[k] += n.c * gi[k];
                    break;
                }
                case Op::Sum: {
                    Tensor& ga = grad_of(n.parent[0]);
                    for (auto& x : ga.data) x += gi[0];
                    break;
                }
                case Op::Mse: {
                    const Tensor& va = nodes_[n.parent[0]].value;
                    const Tensor& vb = nodes_[n.parent[1]].value;
                    const double f = 2.0 * gi[0] / static_cast<double>(va.numel());
                    Tensor& ga = grad_of(n.parent[0]);
                    for (std::size_t k = 0; k < va.numel(); ++k) ga[k] += f * (va[k] - vb[k]);
                    Tensor& gb = grad_of(n.parent[1]);
                    for (std::size_t k = 0; k < va.numel(); ++k) gb[k] -= f * (va[k] - vb[k]);
                    break;
                }
                case Op::SoftmaxXent:
                    backward_softmax_xent(n, gi[0], grad_of(n.parent[0]));
                    break;
                case Op::GatherRows: {
                    Tensor& gt = grad_of(n.parent[0]);
                    for (std::size_t r = 0; r < gi.rows(); ++r)
                        for (std::size_t c = 0; c < gi.cols(); ++c)
                            gt.at(static_cast<std::size_t>(n.targets[r]), c) += gi.at(r, c);
                    break;
                }
                case Op::Leaf:
                    break;
            }
        }
        return out;
    }

  private:
    enum class Op {
        Leaf,
        Add,
        Hadamard,
        MatMul,
        ConcatCols,
        AddRowwise,
        Sigmoid,
        Relu,
        LayerNorm,
        Scale,
        Sum,
        Mse,
        SoftmaxXent,
        GatherRows,
    };

    struct Node {
        Op op = Op::Leaf;
        std::array<Id, 3> parent{};
        Tensor value;
        double c = 0.0;                       // scale factor or smoothing
        std::vector<std::int32_t> targets;    // cross-entropy targets or gathered rows
        bool is_param = false;
        std::string name;
    };

    std::vector<Node> nodes_;

    const Tensor& val(Id id) const { return nodes_.at(id).value; }

    Id push_leaf(Tensor v, bool is_param, std::string name) {
        Node n;
        n.value = std::move(v);
        n.is_param = is_param;
        n.name = std::move(name);
        nodes_.push_back(std::move(n));
        return static_cast<Id>(nodes_.size() - 1);
    }

    Id push(Op op, std::array<Id, 3> parents, Tensor v) {
        Node n;
        n.op = op;
        n.parent = parents;
        n.value = std::move(v);
        nodes_.push_back(std::move(n));
        return static_cast<Id>(nodes_.size() - 1);
    }

    void require_same_shape(const char* op, Id a, Id b) const {
        if (!val(a).same_shape(val(b)))
            throw ShapeError(std::string(op) + ": shapes differ, " + shape_str(val(a).shape) +
                             " vs " + shape_str(val(b).shape));
    }

    static Tensor matmul_values(const Tensor& a, const Tensor& b) {
        const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
        Tensor out({m, n});
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t p = 0; p < k; ++p) {
                const double aip = a.at(i, p);
                for (std::size_t j = 0; j < n; ++j) out.at(i, j) += aip * b.at(p, j);
            }
        return out;
    }

    // acc += g * b^T, where g is [m x n] and b is [k x n].
    static void matmul_acc_abt(const Tensor& g, const Tensor& b, Tensor& acc) {
        const std::size_t m = g.rows(), n = g.cols(), k = b.rows();
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t p = 0; p < k; ++p) {
                double s = 0.0;
                for (std::size_t j = 0; j < n; ++j) s += g.at(i, j) * b.at(p, j);
                acc.at(i, p) += s;
            }
    }

    // acc += a^T * g, where a is [m x k] and g is [m x n].
    static void matmul_acc_atb(const Tensor& a, const Tensor& g, Tensor& acc) {
        const std::size_t m = a.rows(), k = a.cols(), n = g.cols();
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t p = 0; p < k; ++p) {
                const double api = a.at(i, p);
                for (std::size_t j = 0; j < n; ++j) acc.at(p, j) += api * g.at(i, j);
            }
    }

    static void accumulate(Tensor& acc, const Tensor& g) {
        for (std::size_t i = 0; i < g.numel(); ++i) acc[i] += g[i];
    }

    static std::pair<double, double> row_moments(const Tensor& x, std::size_t r) {
        const std::size_t width = x.cols();
        double mu = 0.0;
        for (std::size_t c = 0; c < width; ++c) mu += x.at(r, c);
        mu /= static_cast<double>(width);
        double var = 0.0;
        for (std::size_t c = 0; c < width; ++c) {
            double d = x.at(r, c) - mu;
            var += d * d;
        }
        var /= static_cast<double>(width);
        return {mu, 1.0 / std::sqrt(var + kLayerNormEps)};
    }

    void backward_layer_norm(const Node& n, const Tensor& gi, Tensor& gx, Tensor& ggain,
                             Tensor& gbias) const {
        const Tensor& x = nodes_[n.parent[0]].value;
        const Tensor& gain = nodes_[n.parent[1]].value;
        const std::size_t width = x.cols();
        std::vector<double> xhat(width), gy(width);
        for (std::size_t r = 0; r < x.rows(); ++r) {
            auto [mu, inv_sd] = row_moments(x, r);
            double mean_gy = 0.0, mean_gy_xhat = 0.0;
            for (std::size_t c = 0; c < width; ++c) {
                xhat[c] = (x.at(r, c) - mu) * inv_sd;
                gy[c] = gi.at(r, c) * gain[c];
                mean_gy += gy[c];
                mean_gy_xhat += gy[c] * xhat[c];
                ggain[c] += gi.at(r, c) * xhat[c];
                gbias[c] += gi.at(r, c);
            }
            mean_gy /= static_cast<double>(width);
            mean_gy_xhat /= static_cast<double>(width);
            for (std::size_t c = 0; c < width; ++c)
                gx.at(r, c) += inv_sd * (gy[c] - mean_gy - xhat[c] * mean_gy_xhat);
        }
    }

    static void row_log_softmax(const Tensor& logits, std::size_t r, std::vector<double>& out) {
        const std::size_t vocab = logits.cols();
        double mx = logits.at(r, 0);
        for (std::size_t v = 1; v < vocab; ++v) mx = std::max(mx, logits.at(r, v));
        double lse = 0.0;
        for (std::size_t v = 0; v < vocab; ++v) lse += std::exp(logits.at(r, v) - mx);
        lse = mx + std::log(lse);
        for (std::size_t v = 0; v < vocab; ++v) out[v] = logits.at(r, v) - lse;
    }

    void backward_softmax_xent(const Node& n, double gs, Tensor& gl) const {
        const Tensor& logits = nodes_[n.parent[0]].value;
        const std::size_t t_len = logits.rows(), vocab = logits.cols();
        const double smoothing = n.c;
        const double f = gs / static_cast<double>(t_len);
        std::vector<double> logp(vocab);
        for (std::size_t t = 0; t < t_len; ++t) {
            row_log_softmax(logits, t, logp);
            for (std::size_t v = 0; v < vocab; ++v) {
                double q = smoothing / static_cast<double>(vocab);
                if (v == static_cast<std::size_t>(n.targets[t])) q += 1.0 - smoothing;
                gl.at(t, v) += f * (std::exp(logp[v]) - q);
            }
        }
    }
};

// ---- finite-difference gradient checking ----

// Builds a scalar loss on the given tape from parameter leaves placed there
// by the caller; must be deterministic in the parameter values.
using TapeBuilder = std::function<Tape::Id(Tape&, const std::vector<Tape::Id>&)>;

inline double eval_loss(const TapeBuilder& build, const std::vector<Tensor>& params) {
    Tape tape;
    std::vector<Tape::Id> ids;
    ids.reserve(params.size());
    for (std::size_t i = 0; i < params.size(); ++i)
        ids.push_back(tape.param(params[i], "p" + std::to_string(i)));
    Tape::Id loss = build(tape, ids);
    if (!tape.value(loss).is_scalar())
        throw ShapeError("grad_check: builder must produce a scalar loss");
    return tape.value(loss)[0];
}

// Central-difference check of backward() over every parameter element.
// Returns the worst guarded relative error.
inline double grad_check(const TapeBuilder& build, std::vector<Tensor> params, double h = 1e-6) {
    Tape tape;
    std::vector<Tape::Id> ids;
    ids.reserve(params.size());
    for (std::size_t i = 0; i < params.size(); ++i)
        ids.push_back(tape.param(params[i], "p" + std::to_string(i)));
    Tape::Id loss = build(tape, ids);
    auto grads = tape.backward(loss);

    double worst = 0.0;
    for (std::size_t p = 0; p < params.size(); ++p) {
        const Tensor analytic = grads.at(ids[p]);
        for (std::size_t j = 0; j < params[p].numel(); ++j) {
            const double orig = params[p][j];
            params[p][j] = orig + h;
            const double fp = eval_loss(build, params);
            params[p][j] = orig - h;
            const double fm = eval_loss(build, params);
            params[p][j] = orig;
            const double numeric = (fp - fm) / (2.0 * h);
            const double denom = std::max({std::abs(analytic[j]), std::abs(numeric), 1.0});
            worst = std::max(worst, std::abs(analytic[j] - numeric) / denom);
        }
    }
    return worst;
}

}  // namespace mvfuse
