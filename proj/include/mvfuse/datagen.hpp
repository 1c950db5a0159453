#pragma once

#include <algorithm>
#include <cstdint>
#include <limits>
#include <string>
#include <vector>

#include "mvfuse/errors.hpp"
#include "mvfuse/rng.hpp"
#include "mvfuse/tensor.hpp"

namespace mvfuse {

inline Tensor matmul_plain(const Tensor& a, const Tensor& b) {
    if (a.cols() != b.rows())
        throw ShapeError("matmul: " + shape_str(a.shape) + " x " + shape_str(b.shape) +
                         ": inner dimensions do not agree");
    Tensor out({a.rows(), b.cols()});
    for (std::size_t i = 0; i < a.rows(); ++i)
        for (std::size_t p = 0; p < a.cols(); ++p) {
            const double aip = a.at(i, p);
            for (std::size_t j = 0; j < b.cols(); ++j) out.at(i, j) += aip * b.at(p, j);
        }
    return out;
}

// ---- k-means / vector quantization ----

struct Codebook {
    Tensor centroids;  // [k x D]
    std::size_t k = 0;
};

struct KmeansResult {
    Codebook codebook;
    std::vector<double> distortion_per_iter;  // nearest-centroid SSE after each iteration
    std::size_t iters = 0;
};

namespace detail {

inline double sq_dist_row(const Tensor& a, std::size_t ra, const Tensor& b, std::size_t rb) {
    double s = 0.0;
    for (std::size_t c = 0; c < a.cols(); ++c) {
        const double d = a.at(ra, c) - b.at(rb, c);
        s += d * d;
    }
    return s;
}

inline std::size_t nearest_centroid(const Tensor& points, std::size_t row,
                                    const Tensor& centroids) {
    std::size_t best = 0;
    double best_d = sq_dist_row(points, row, centroids, 0);
    for (std::size_t c = 1; c < centroids.rows(); ++c) {
        const double d = sq_dist_row(points, row, centroids, c);
        if (d < best_d) {
            best_d = d;
            best = c;
        }
    }
    return best;
}

}  // namespace detail

// Lloyd iterations from k-means++ style seeding. Stops when assignments are
// stable or after max_iters. Empty clusters respawn at the point currently
// farthest from its centroid.
inline KmeansResult kmeans_fit(const Tensor& points, std::size_t k, std::size_t max_iters,
                               std::uint64_t seed) {
    const std::size_t n = points.rows(), dim = points.cols();
    if (k == 0) throw ConfigError("k-means: k must be positive");
    if (n < k)
        throw ConfigError("k-means: k exceeds points (" + std::to_string(k) + " > " +
                          std::to_string(n) + ")");

    Rng rng(seed);
    Tensor centroids({k, dim});
    std::vector<double> min_d(n, std::numeric_limits<double>::infinity());

    // ++ seeding: first uniform, then proportional to squared distance.
    auto copy_point = [&](std::size_t c, std::size_t row) {
        for (std::size_t j = 0; j < dim; ++j) centroids.at(c, j) = points.at(row, j);
    };
    copy_point(0, rng.index(n));
    for (std::size_t c = 1; c < k; ++c) {
        double total = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            min_d[i] = std::min(min_d[i], detail::sq_dist_row(points, i, centroids, c - 1));
            total += min_d[i];
        }
        std::size_t pick = rng.index(n);
        if (total > 0.0) {
            double r = rng.uniform() * total;
            for (std::size_t i = 0; i < n; ++i) {
                r -= min_d[i];
                if (r <= 0.0) {
                    pick = i;
                    break;
                }
            }
        }
        copy_point(c, pick);
    }

    KmeansResult result;
    std::vector<std::size_t> assign(n, 0), prev_assign(n, k);
    std::vector<std::size_t> counts(k);
    for (std::size_t it = 0; it < max_iters; ++it) {
        for (std::size_t i = 0; i < n; ++i)
            assign[i] = detail::nearest_centroid(points, i, centroids);
        if (assign == prev_assign) break;
        prev_assign = assign;

        std::fill(counts.begin(), counts.end(), 0);
        Tensor sums({k, dim});
        for (std::size_t i = 0; i < n; ++i) {
            ++counts[assign[i]];
            for (std::size_t j = 0; j < dim; ++j) sums.at(assign[i], j) += points.at(i, j);
        }
        std::vector<double> point_d(n);
        bool have_point_d = false;
        for (std::size_t c = 0; c < k; ++c) {
            if (counts[c] > 0) {
                for (std::size_t j = 0; j < dim; ++j)
                    centroids.at(c, j) = sums.at(c, j) / static_cast<double>(counts[c]);
            } else {
                // Respawn at the point with the highest current distortion.
                if (!have_point_d) {
                    for (std::size_t i = 0; i < n; ++i)
                        point_d[i] = detail::sq_dist_row(points, i, centroids, assign[i]);
                    have_point_d = true;
                }
                const std::size_t worst = static_cast<std::size_t>(
                    std::max_element(point_d.begin(), point_d.end()) - point_d.begin());
                copy_point(c, worst);
                point_d[worst] = 0.0;
            }
        }

        double sse = 0.0;
        for (std::size_t i = 0; i < n; ++i)
            sse += detail::sq_dist_row(points, i, centroids,
                                       detail::nearest_centroid(points, i, centroids));
        result.distortion_per_iter.push_back(sse);
        result.iters = it + 1;
    }

    result.codebook = {std::move(centroids), k};
    return result;
}

struct QuantizeResult {
    std::vector<std::int32_t> ids;
    Tensor embedded;  // centroid rows, same row count as the input
};

// Nearest centroid under squared Euclidean distance; lowest id wins ties.
// The embedded output carries centroid vectors, not one-hot ids.
inline QuantizeResult quantize(const Tensor& points, const Codebook& codebook) {
    if (points.cols() != codebook.centroids.cols())
        throw ShapeError("quantize: point dim " + std::to_string(points.cols()) +
                         " vs codebook dim " + std::to_string(codebook.centroids.cols()));
    QuantizeResult out;
    out.embedded = Tensor({points.rows(), points.cols()});
    for (std::size_t i = 0; i < points.rows(); ++i) {
        const std::size_t c = detail::nearest_centroid(points, i, codebook.centroids);
        out.ids.push_back(static_cast<std::int32_t>(c));
        for (std::size_t j = 0; j < points.cols(); ++j)
            out.embedded.at(i, j) = codebook.centroids.at(c, j);
    }
    return out;
}

// ---- synthetic multi-view corpus ----

struct CorpusSpec {
    std::size_t n_train = 2000;
    std::size_t n_valid = 200;
    std::size_t n_test = 200;
    std::size_t seq_len = 12;
    std::size_t d_fbank = 16;
    std::size_t d_unit = 8;
    std::size_t vocab_size = 16;
    std::size_t latent_dim = 3;
    double noise_sigma = 0.8;
    std::size_t codebook_k = 512;
    std::size_t kmeans_iters = 50;
    std::uint64_t seed = 1;

    void validate() const {
        if (n_train == 0 || n_valid == 0 || n_test == 0)
            throw ConfigError("corpus: partition sizes must be positive");
        if (seq_len == 0 || d_fbank == 0 || d_unit == 0 || latent_dim == 0 || codebook_k == 0)
            throw ConfigError("corpus: dimensions must be positive");
        if (vocab_size < 2) throw ConfigError("corpus: vocab_size must be >= 2");
        if (noise_sigma < 0.0) throw ConfigError("corpus: noise_sigma must be >= 0");
    }
};

// One training instance: aligned continuous and quantized views of a shared
// latent sequence plus the target token per position.
struct MultiViewExample {
    Tensor x_fbank;                     // [T x D_f]
    Tensor x_unit;                      // [T x D_u]
    std::vector<std::int32_t> targets;  // length T, each in [0, V)
};

struct Corpus {
    CorpusSpec spec;
    std::vector<MultiViewExample> train, valid, test;
    Codebook codebook;
    double codebook_distortion = 0.0;
    double unit_min = 0.0;  // over the train partition's x_unit
    double unit_max = 0.0;
};

namespace detail {

// Smooth latent path: a momentum random walk clipped to [-3, 3].
inline Tensor latent_walk(std::size_t t_len, std::size_t dim, Rng& rng) {
    Tensor z({t_len, dim});
    std::vector<double> pos(dim), vel(dim, 0.0);
    for (std::size_t j = 0; j < dim; ++j) pos[j] = std::clamp(rng.normal(), -3.0, 3.0);
    for (std::size_t t = 0; t < t_len; ++t) {
        for (std::size_t j = 0; j < dim; ++j) {
            if (t > 0) {
                vel[j] = 0.9 * vel[j] + 0.35 * rng.normal();
                pos[j] = std::clamp(pos[j] + vel[j], -3.0, 3.0);
            }
            z.at(t, j) = pos[j];
        }
    }
    return z;
}

inline std::vector<Tensor> partition_latents(const CorpusSpec& spec, std::size_t count,
                                             const std::string& name) {
    Rng rng(derive_seed(spec.seed, "latent/" + name));
    std::vector<Tensor> out;
    out.reserve(count);
    for (std::size_t i = 0; i < count; ++i)
        out.push_back(latent_walk(spec.seq_len, spec.latent_dim, rng));
    return out;
}

}  // namespace detail

// Builds the three partitions from a shared latent process. The continuous
// view is a noisy linear image of the latent; the quantized view passes a
// second linear image through a codebook fit on the train partition only,
// so it loses information by construction. Targets are the argmax of a
// fixed linear readout of the latent.
inline Corpus generate_corpus(const CorpusSpec& spec) {
    spec.validate();
    Corpus corpus;
    corpus.spec = spec;

    Rng mix_rng(derive_seed(spec.seed, "mixing"));
    auto gaussian = [&](std::size_t r, std::size_t c) {
        Tensor t({r, c});
        for (auto& x : t.data) x = mix_rng.normal();
        return t;
    };
    const Tensor mix_fbank = gaussian(spec.latent_dim, spec.d_fbank);
    const Tensor mix_unit = gaussian(spec.latent_dim, spec.d_unit);
    // Unit-norm readout columns make the per-position class prior uniform.
    Tensor readout = gaussian(spec.latent_dim, spec.vocab_size);
    for (std::size_t v = 0; v < spec.vocab_size; ++v) {
        double n = 0.0;
        for (std::size_t j = 0; j < spec.latent_dim; ++j)
            n += readout.at(j, v) * readout.at(j, v);
        n = std::max(std::sqrt(n), 1e-12);
        for (std::size_t j = 0; j < spec.latent_dim; ++j) readout.at(j, v) /= n;
    }

    auto latents_train = detail::partition_latents(spec, spec.n_train, "train");
    auto latents_valid = detail::partition_latents(spec, spec.n_valid, "valid");
    auto latents_test = detail::partition_latents(spec, spec.n_test, "test");

    // Codebook sees train rows only.
    Tensor train_points({spec.n_train * spec.seq_len, spec.d_unit});
    for (std::size_t i = 0; i < latents_train.size(); ++i) {
        const Tensor u = matmul_plain(latents_train[i], mix_unit);
        for (std::size_t t = 0; t < spec.seq_len; ++t)
            for (std::size_t j = 0; j < spec.d_unit; ++j)
                train_points.at(i * spec.seq_len + t, j) = u.at(t, j);
    }
    auto fitted = kmeans_fit(train_points, spec.codebook_k, spec.kmeans_iters,
                             derive_seed(spec.seed, "kmeans"));
    corpus.codebook = std::move(fitted.codebook);
    corpus.codebook_distortion =
        fitted.distortion_per_iter.empty() ? 0.0 : fitted.distortion_per_iter.back();

    auto build_partition = [&](const std::vector<Tensor>& latents, const std::string& name) {
        Rng noise_rng(derive_seed(spec.seed, "noise/" + name));
        std::vector<MultiViewExample> out;
        out.reserve(latents.size());
        for (const Tensor& z : latents) {
            MultiViewExample ex;
            ex.x_fbank = matmul_plain(z, mix_fbank);
            for (auto& v : ex.x_fbank.data) v += spec.noise_sigma * noise_rng.normal();
            ex.x_unit = quantize(matmul_plain(z, mix_unit), corpus.codebook).embedded;
            const Tensor scores = matmul_plain(z, readout);
            ex.targets = std::vector<std::int32_t>(spec.seq_len);
            for (std::size_t t = 0; t < spec.seq_len; ++t) {
                std::size_t best = 0;
                for (std::size_t v = 1; v < spec.vocab_size; ++v)
                    if (scores.at(t, v) > scores.at(t, best)) best = v;
                ex.targets[t] = static_cast<std::int32_t>(best);
            }
            out.push_back(std::move(ex));
        }
        return out;
    };

    corpus.train = build_partition(latents_train, "train");
    corpus.valid = build_partition(latents_valid, "valid");
    corpus.test = build_partition(latents_test, "test");

    corpus.unit_min = std::numeric_limits<double>::infinity();
    corpus.unit_max = -std::numeric_limits<double>::infinity();
    for (const auto& ex : corpus.train)
        for (double v : ex.x_unit.data) {
            corpus.unit_min = std::min(corpus.unit_min, v);
            corpus.unit_max = std::max(corpus.unit_max, v);
        }
    return corpus;
}

// ---- ablation transforms ----

struct NoiseRange {
    double lo = 0.0;
    double hi = 0.0;

    void validate() const {
        if (lo > hi) throw ConfigError("noise range: min must not exceed max");
    }
};

// Adds uniform(lo, hi) noise to the continuous view in place of real
// augmentation; the range comes from the train partition's unit view.
inline MultiViewExample noise_sum(const MultiViewExample& ex, NoiseRange range, Rng& rng) {
    range.validate();
    MultiViewExample out = ex;
    for (auto& v : out.x_fbank.data) v += rng.uniform(range.lo, range.hi);
    return out;
}

// Replaces the unit view entirely with uniform(lo, hi) samples.
inline MultiViewExample noise_replace(const MultiViewExample& ex, NoiseRange range, Rng& rng) {
    range.validate();
    MultiViewExample out = ex;
    for (auto& v : out.x_unit.data) v = rng.uniform(range.lo, range.hi);
    return out;
}

// Nearest-index resampling of a [T' x D] sequence onto T rows.
inline Tensor length_align(const Tensor& x, std::size_t t_out) {
    if (x.rows() == 0) throw ShapeError("length_align: empty input");
    if (t_out == 0) throw ShapeError("length_align: output length must be positive");
    Tensor out({t_out, x.cols()});
    for (std::size_t i = 0; i < t_out; ++i) {
        const std::size_t src = i * x.rows() / t_out;
        for (std::size_t c = 0; c < x.cols(); ++c) out.at(i, c) = x.at(src, c);
    }
    return out;
}

}  // namespace mvfuse
