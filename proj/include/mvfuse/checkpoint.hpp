#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "mvfuse/corpus_io.hpp"
#include "mvfuse/errors.hpp"
#include "mvfuse/tensor.hpp"

namespace mvfuse {

inline constexpr char kCheckpointMagic[4] = {'M', 'V', 'F', '1'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct NamedTensor {
    std::string name;
    Tensor value;
};

// Versioned parameter snapshot. Tensors keep a fixed canonical order; the
// metadata carries the run-config echo so evaluation can rebuild the model
// from the file alone.
struct Checkpoint {
    std::string config_hash;
    std::int64_t epoch = 0;
    std::int64_t step = 0;
    double valid_metric = 0.0;
    bool has_metric = false;
    nlohmann::json config;                    // run-config echo
    std::vector<std::int64_t> source_epochs;  // non-empty for averaged checkpoints
    std::vector<NamedTensor> tensors;
};

inline void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot open " + path.string() + " for writing");

    nlohmann::json meta = {{"config_hash", ckpt.config_hash},
                           {"epoch", ckpt.epoch},
                           {"step", ckpt.step},
                           {"valid_metric",
                            ckpt.has_metric ? nlohmann::json(ckpt.valid_metric)
                                            : nlohmann::json(nullptr)},
                           {"config", ckpt.config}};
    if (!ckpt.source_epochs.empty()) meta["source_epochs"] = ckpt.source_epochs;
    const std::string meta_str = meta.dump();

    out.write(kCheckpointMagic, 4);
    detail::write_raw<std::uint32_t>(out, kCheckpointVersion);
    detail::write_raw<std::uint64_t>(out, meta_str.size());
    out.write(meta_str.data(), static_cast<std::streamsize>(meta_str.size()));

    for (const auto& [name, value] : ckpt.tensors) {
        detail::write_raw<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
        out.write(name.data(), static_cast<std::streamsize>(name.size()));
        detail::write_raw<std::uint32_t>(out, static_cast<std::uint32_t>(value.shape.size()));
        for (auto d : value.shape) detail::write_raw<std::uint64_t>(out, d);
        out.write(reinterpret_cast<const char*>(value.data.data()),
                  static_cast<std::streamsize>(value.data.size() * sizeof(double)));
    }
    if (!out) throw IoError("write failed for " + path.string());
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open checkpoint " + path.string());

    char magic[4];
    in.read(magic, 4);
    if (!in || std::string(magic, 4) != std::string(kCheckpointMagic, 4))
        throw IoError("not a checkpoint file: " + path.string());
    const auto version = detail::read_raw<std::uint32_t>(in, path.string());
    if (version != kCheckpointVersion)
        throw IoError("unsupported checkpoint version " + std::to_string(version) + " in " +
                      path.string());

    const auto meta_len = detail::read_raw<std::uint64_t>(in, path.string());
    std::string meta_str(meta_len, '\0');
    in.read(meta_str.data(), static_cast<std::streamsize>(meta_len));
    if (!in) throw IoError("truncated metadata in " + path.string());

    Checkpoint ckpt;
    try {
        nlohmann::json meta = nlohmann::json::parse(meta_str);
        ckpt.config_hash = meta.at("config_hash");
        ckpt.epoch = meta.at("epoch");
        ckpt.step = meta.at("step");
        if (!meta.at("valid_metric").is_null()) {
            ckpt.valid_metric = meta.at("valid_metric");
            ckpt.has_metric = true;
        }
        ckpt.config = meta.value("config", nlohmann::json::object());
        if (meta.contains("source_epochs"))
            ckpt.source_epochs = meta["source_epochs"].get<std::vector<std::int64_t>>();
    } catch (const nlohmann::json::exception& e) {
        throw IoError("malformed checkpoint metadata in " + path.string() + ": " + e.what());
    }

    while (in.peek() != std::char_traits<char>::eof()) {
        const auto name_len = detail::read_raw<std::uint32_t>(in, path.string());
        std::string name(name_len, '\0');
        in.read(name.data(), name_len);
        const auto rank = detail::read_raw<std::uint32_t>(in, path.string());
        Shape shape(rank);
        for (auto& d : shape)
            d = static_cast<std::size_t>(detail::read_raw<std::uint64_t>(in, path.string()));
        Tensor value(shape);
        in.read(reinterpret_cast<char*>(value.data.data()),
                static_cast<std::streamsize>(value.data.size() * sizeof(double)));
        if (!in) throw IoError("truncated tensor data in " + path.string());
        ckpt.tensors.push_back({std::move(name), std::move(value)});
    }
    return ckpt;
}

// Elementwise mean over checkpoints that share a config hash and parameter
// layout. Summation is anchored on the first checkpoint, so averaging k
// identical files reproduces them bit for bit.
inline Checkpoint average_checkpoints(const std::vector<std::filesystem::path>& paths) {
    if (paths.empty()) throw ConfigError("average: no checkpoints given");
    Checkpoint base = load_checkpoint(paths[0]);
    Checkpoint avg = base;
    avg.has_metric = false;
    avg.valid_metric = 0.0;
    avg.source_epochs = {base.epoch};

    std::vector<std::vector<double>> delta_sums(base.tensors.size());
    for (std::size_t t = 0; t < base.tensors.size(); ++t)
        delta_sums[t].assign(base.tensors[t].value.numel(), 0.0);

    for (std::size_t i = 1; i < paths.size(); ++i) {
        Checkpoint other = load_checkpoint(paths[i]);
        if (other.config_hash != base.config_hash)
            throw ConfigError("average: incompatible checkpoints, config hash " +
                              other.config_hash + " in " + paths[i].string() +
                              " does not match " + base.config_hash);
        if (other.tensors.size() != base.tensors.size())
            throw ConfigError("average: tensor count mismatch in " + paths[i].string());
        for (std::size_t t = 0; t < base.tensors.size(); ++t) {
            if (other.tensors[t].name != base.tensors[t].name ||
                !other.tensors[t].value.same_shape(base.tensors[t].value))
                throw ConfigError("average: parameter layout mismatch in " + paths[i].string());
            for (std::size_t j = 0; j < delta_sums[t].size(); ++j)
                delta_sums[t][j] += other.tensors[t].value[j] - base.tensors[t].value[j];
        }
        avg.source_epochs.push_back(other.epoch);
        avg.epoch = std::max(avg.epoch, other.epoch);
        avg.step = std::max(avg.step, other.step);
    }

    const double n = static_cast<double>(paths.size());
    for (std::size_t t = 0; t < avg.tensors.size(); ++t)
        for (std::size_t j = 0; j < delta_sums[t].size(); ++j)
            avg.tensors[t].value[j] = base.tensors[t].value[j] + delta_sums[t][j] / n;
    return avg;
}

}  // namespace mvfuse
