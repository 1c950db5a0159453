#pragma once

#include <bit>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "mvfuse/datagen.hpp"
#include "mvfuse/errors.hpp"

namespace mvfuse {

static_assert(std::endian::native == std::endian::little,
              "corpus and checkpoint files are little-endian raw dumps");

inline constexpr const char* kCorpusFormatVersion = "mvfuse-corpus/1";

namespace detail {

template <typename T>
void write_raw(std::ostream& out, const T& v) {
    out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_raw(std::istream& in, const std::string& what) {
    T v{};
    in.read(reinterpret_cast<char*>(&v), sizeof(T));
    if (!in) throw IoError("unexpected end of file while reading " + what);
    return v;
}

inline void write_partition(const std::filesystem::path& path,
                            const std::vector<MultiViewExample>& examples) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot open " + path.string() + " for writing");
    write_raw<std::uint64_t>(out, examples.size());
    for (const auto& ex : examples) {
        write_raw<std::uint32_t>(out, static_cast<std::uint32_t>(ex.x_fbank.rows()));
        out.write(reinterpret_cast<const char*>(ex.x_fbank.data.data()),
                  static_cast<std::streamsize>(ex.x_fbank.data.size() * sizeof(double)));
        out.write(reinterpret_cast<const char*>(ex.x_unit.data.data()),
                  static_cast<std::streamsize>(ex.x_unit.data.size() * sizeof(double)));
        out.write(reinterpret_cast<const char*>(ex.targets.data()),
                  static_cast<std::streamsize>(ex.targets.size() * sizeof(std::int32_t)));
    }
    if (!out) throw IoError("write failed for " + path.string());
}

inline std::vector<MultiViewExample> read_partition(const std::filesystem::path& path,
                                                    std::size_t d_fbank, std::size_t d_unit) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path.string());
    const auto count = read_raw<std::uint64_t>(in, path.string());
    std::vector<MultiViewExample> out;
    out.reserve(count);
    for (std::uint64_t i = 0; i < count; ++i) {
        const auto t_len = read_raw<std::uint32_t>(in, path.string());
        MultiViewExample ex;
        ex.x_fbank = Tensor({t_len, d_fbank});
        ex.x_unit = Tensor({t_len, d_unit});
        ex.targets.resize(t_len);
        in.read(reinterpret_cast<char*>(ex.x_fbank.data.data()),
                static_cast<std::streamsize>(ex.x_fbank.data.size() * sizeof(double)));
        in.read(reinterpret_cast<char*>(ex.x_unit.data.data()),
                static_cast<std::streamsize>(ex.x_unit.data.size() * sizeof(double)));
        in.read(reinterpret_cast<char*>(ex.targets.data()),
                static_cast<std::streamsize>(ex.targets.size() * sizeof(std::int32_t)));
        if (!in) throw IoError("unexpected end of file in " + path.string());
        out.push_back(std::move(ex));
    }
    return out;
}

}  // namespace detail

inline nlohmann::json corpus_spec_to_json(const CorpusSpec& s) {
    return {{"n_train", s.n_train},       {"n_valid", s.n_valid},
            {"n_test", s.n_test},         {"seq_len", s.seq_len},
            {"d_fbank", s.d_fbank},       {"d_unit", s.d_unit},
            {"vocab_size", s.vocab_size}, {"latent_dim", s.latent_dim},
            {"noise_sigma", s.noise_sigma}, {"codebook_k", s.codebook_k},
            {"kmeans_iters", s.kmeans_iters}, {"seed", s.seed}};
}

inline CorpusSpec corpus_spec_from_json(const nlohmann::json& j) {
    CorpusSpec s;
    s.n_train = j.at("n_train");
    s.n_valid = j.at("n_valid");
    s.n_test = j.at("n_test");
    s.seq_len = j.at("seq_len");
    s.d_fbank = j.at("d_fbank");
    s.d_unit = j.at("d_unit");
    s.vocab_size = j.at("vocab_size");
    s.latent_dim = j.at("latent_dim");
    s.noise_sigma = j.at("noise_sigma");
    s.codebook_k = j.at("codebook_k");
    s.kmeans_iters = j.at("kmeans_iters");
    s.seed = j.at("seed");
    return s;
}

inline void write_corpus(const std::filesystem::path& dir, const Corpus& corpus) {
    std::error_code ec;
    std::filesystem::create_directories(dir, ec);
    if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());

    nlohmann::json meta = {
        {"format_version", kCorpusFormatVersion},
        {"spec", corpus_spec_to_json(corpus.spec)},
        {"codebook",
         {{"k", corpus.codebook.k},
          {"dim", corpus.codebook.centroids.cols()},
          {"centroids", corpus.codebook.centroids.data}}},
        {"codebook_distortion", corpus.codebook_distortion},
        {"unit_range", {{"min", corpus.unit_min}, {"max", corpus.unit_max}}},
        {"sizes",
         {{"train", corpus.train.size()},
          {"valid", corpus.valid.size()},
          {"test", corpus.test.size()}}}};
    std::ofstream meta_out(dir / "meta.json");
    if (!meta_out) throw IoError("cannot open " + (dir / "meta.json").string() + " for writing");
    meta_out << meta.dump(2) << "\n";

    detail::write_partition(dir / "train.bin", corpus.train);
    detail::write_partition(dir / "valid.bin", corpus.valid);
    detail::write_partition(dir / "test.bin", corpus.test);
}

inline Corpus read_corpus(const std::filesystem::path& dir) {
    std::ifstream meta_in(dir / "meta.json");
    if (!meta_in) throw IoError("cannot open " + (dir / "meta.json").string());
    nlohmann::json meta;
    try {
        meta_in >> meta;
    } catch (const nlohmann::json::exception& e) {
        throw IoError("malformed meta.json in " + dir.string() + ": " + e.what());
    }
    if (meta.value("format_version", "") != kCorpusFormatVersion)
        throw IoError("unsupported corpus format in " + dir.string());

    Corpus corpus;
    try {
        corpus.spec = corpus_spec_from_json(meta.at("spec"));
        const auto& cb = meta.at("codebook");
        const std::size_t k = cb.at("k");
        const std::size_t dim = cb.at("dim");
        corpus.codebook.k = k;
        corpus.codebook.centroids =
            Tensor({k, dim}, cb.at("centroids").get<std::vector<double>>());
        corpus.codebook_distortion = meta.at("codebook_distortion");
        corpus.unit_min = meta.at("unit_range").at("min");
        corpus.unit_max = meta.at("unit_range").at("max");
    } catch (const nlohmann::json::exception& e) {
        throw IoError("malformed meta.json in " + dir.string() + ": " + e.what());
    }

    corpus.train = detail::read_partition(dir / "train.bin", corpus.spec.d_fbank,
                                          corpus.spec.d_unit);
    corpus.valid = detail::read_partition(dir / "valid.bin", corpus.spec.d_fbank,
                                          corpus.spec.d_unit);
    corpus.test = detail::read_partition(dir / "test.bin", corpus.spec.d_fbank,
                                         corpus.spec.d_unit);
    return corpus;
}

}  // namespace mvfuse
