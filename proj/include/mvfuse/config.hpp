#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "mvfuse/branch_sampler.hpp"
#include "mvfuse/datagen.hpp"
#include "mvfuse/errors.hpp"
#include "mvfuse/gsgn.hpp"
#include "mvfuse/model.hpp"
#include "mvfuse/trainer.hpp"

namespace mvfuse {

// Everything a run needs, under one roof. Serialized as a flat text file of
// dotted keys with JSON-compatible values; unknown keys are rejected.
struct RunConfig {
    CorpusSpec corpus;
    ModelConfig model;
    GsgnConfig gsgn;
    TrainConfig train;
};

namespace detail {

inline nlohmann::json schedule_to_json(const StageSchedule& s) {
    nlohmann::json arr = nlohmann::json::array();
    for (const auto& st : s.stages) {
        nlohmann::json hi = st.epoch_hi ? nlohmann::json(*st.epoch_hi) : nlohmann::json(nullptr);
        arr.push_back({st.epoch_lo, hi, st.delta_fbank, st.delta_unit});
    }
    return arr;
}

inline StageSchedule schedule_from_json(const nlohmann::json& j) {
    StageSchedule s;
    if (!j.is_array()) throw ConfigError("train.stage_schedule must be a list of stages");
    for (const auto& st : j) {
        if (!st.is_array() || st.size() != 4)
            throw ConfigError(
                "train.stage_schedule: each stage is [epoch_lo, epoch_hi|null, d_fbank, d_unit]");
        Stage stage;
        stage.epoch_lo = st[0];
        if (!st[1].is_null()) stage.epoch_hi = st[1].get<std::int64_t>();
        stage.delta_fbank = st[2];
        stage.delta_unit = st[3];
        s.stages.push_back(stage);
    }
    s.validate();
    return s;
}

}  // namespace detail

inline nlohmann::json run_config_to_flat(const RunConfig& rc) {
    nlohmann::json f;
    f["corpus.n_train"] = rc.corpus.n_train;
    f["corpus.n_valid"] = rc.corpus.n_valid;
    f["corpus.n_test"] = rc.corpus.n_test;
    f["corpus.seq_len"] = rc.corpus.seq_len;
    f["corpus.d_fbank"] = rc.corpus.d_fbank;
    f["corpus.d_unit"] = rc.corpus.d_unit;
    f["corpus.vocab_size"] = rc.corpus.vocab_size;
    f["corpus.latent_dim"] = rc.corpus.latent_dim;
    f["corpus.noise_sigma"] = rc.corpus.noise_sigma;
    f["corpus.codebook_k"] = rc.corpus.codebook_k;
    f["corpus.kmeans_iters"] = rc.corpus.kmeans_iters;
    f["corpus.seed"] = rc.corpus.seed;
    f["model.hidden_dim"] = rc.model.hidden_dim;
    f["model.acoustic_layers"] = rc.model.acoustic_layers;
    f["model.textual_layers"] = rc.model.textual_layers;
    f["model.decoder_layers"] = rc.model.decoder_layers;
    f["model.vocab_size"] = rc.model.vocab_size;
    f["model.linear_mode"] = rc.model.linear_mode;
    f["model.residual"] = rc.model.residual;
    f["gsgn.activation_scale"] = rc.gsgn.activation_scale;
    f["gsgn.hard_unit_gate"] = rc.gsgn.hard_unit_gate;
    f["train.max_epochs"] = rc.train.max_epochs;
    f["train.batch_size"] = rc.train.batch_size;
    f["train.lr_peak"] = rc.train.lr_peak;
    f["train.warmup_steps"] = rc.train.warmup_steps;
    f["train.adam_beta1"] = rc.train.adam_beta1;
    f["train.adam_beta2"] = rc.train.adam_beta2;
    f["train.adam_eps"] = rc.train.adam_eps;
    f["train.label_smoothing"] = rc.train.label_smoothing;
    f["train.patience"] = rc.train.patience;
    f["train.probe_every"] = rc.train.probe_every;
    f["train.lambda_gate"] = rc.train.lambda_gate;
    f["train.fusion_mode"] = fusion_mode_name(rc.train.fusion_mode);
    f["train.seed"] = rc.train.seed;
    f["train.per_example_sampling"] = rc.train.per_example_sampling;
    f["train.paper_inference"] = rc.train.paper_inference;
    f["train.tie_view_params"] = rc.train.tie_view_params;
    f["train.embed_ids"] = rc.train.embed_ids;
    f["train.noise"] = noise_mode_name(rc.train.noise);
    f["train.stage_schedule"] = detail::schedule_to_json(rc.train.schedule);
    return f;
}

inline RunConfig run_config_from_flat(const nlohmann::json& flat) {
    nlohmann::json merged = run_config_to_flat(RunConfig{});
    for (const auto& [key, value] : flat.items()) {
        if (!merged.contains(key)) throw ConfigError("unknown config key '" + key + "'");
        merged[key] = value;
    }
    RunConfig rc;
    try {
        rc.corpus.n_train = merged.at("corpus.n_train");
        rc.corpus.n_valid = merged.at("corpus.n_valid");
        rc.corpus.n_test = merged.at("corpus.n_test");
        rc.corpus.seq_len = merged.at("corpus.seq_len");
        rc.corpus.d_fbank = merged.at("corpus.d_fbank");
        rc.corpus.d_unit = merged.at("corpus.d_unit");
        rc.corpus.vocab_size = merged.at("corpus.vocab_size");
        rc.corpus.latent_dim = merged.at("corpus.latent_dim");
        rc.corpus.noise_sigma = merged.at("corpus.noise_sigma");
        rc.corpus.codebook_k = merged.at("corpus.codebook_k");
        rc.corpus.kmeans_iters = merged.at("corpus.kmeans_iters");
        rc.corpus.seed = merged.at("corpus.seed");
        rc.model.hidden_dim = merged.at("model.hidden_dim");
        rc.model.acoustic_layers = merged.at("model.acoustic_layers");
        rc.model.textual_layers = merged.at("model.textual_layers");
        rc.model.decoder_layers = merged.at("model.decoder_layers");
        rc.model.vocab_size = merged.at("model.vocab_size");
        rc.model.linear_mode = merged.at("model.linear_mode");
        rc.model.residual = merged.at("model.residual");
        rc.gsgn.activation_scale = merged.at("gsgn.activation_scale");
        rc.gsgn.hard_unit_gate = merged.at("gsgn.hard_unit_gate");
        rc.train.max_epochs = merged.at("train.max_epochs");
        rc.train.batch_size = merged.at("train.batch_size");
        rc.train.lr_peak = merged.at("train.lr_peak");
        rc.train.warmup_steps = merged.at("train.warmup_steps");
        rc.train.adam_beta1 = merged.at("train.adam_beta1");
        rc.train.adam_beta2 = merged.at("train.adam_beta2");
        rc.train.adam_eps = merged.at("train.adam_eps");
        rc.train.label_smoothing = merged.at("train.label_smoothing");
        rc.train.patience = merged.at("train.patience");
        rc.train.probe_every = merged.at("train.probe_every");
        rc.train.lambda_gate = merged.at("train.lambda_gate");
        rc.train.fusion_mode = parse_fusion_mode(merged.at("train.fusion_mode"));
        rc.train.seed = merged.at("train.seed");
        rc.train.per_example_sampling = merged.at("train.per_example_sampling");
        rc.train.paper_inference = merged.at("train.paper_inference");
        rc.train.tie_view_params = merged.at("train.tie_view_params");
        rc.train.embed_ids = merged.at("train.embed_ids");
        rc.train.noise = parse_noise_mode(merged.at("train.noise"));
        rc.train.schedule = detail::schedule_from_json(merged.at("train.stage_schedule"));
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("config value has the wrong type: ") + e.what());
    }
    rc.corpus.validate();
    rc.model.validate();
    rc.gsgn.validate();
    rc.train.validate();
    return rc;
}

// One `key = value` pair per line; values are JSON (strings quoted, lists
// bracketed). Blank lines and lines starting with # are skipped.
inline nlohmann::json parse_config_text(std::istream& in, const std::string& origin) {
    nlohmann::json flat = nlohmann::json::object();
    std::string line;
    std::size_t line_no = 0;
    auto trim = [](std::string s) {
        const auto a = s.find_first_not_of(" \t\r");
        if (a == std::string::npos) return std::string();
        const auto b = s.find_last_not_of(" \t\r");
        return s.substr(a, b - a + 1);
    };
    while (std::getline(in, line)) {
        ++line_no;
        const std::string stripped = trim(line);
        if (stripped.empty() || stripped[0] == '#') continue;
        const auto eq = stripped.find('=');
        if (eq == std::string::npos)
            throw ConfigError(origin + ":" + std::to_string(line_no) +
                              ": expected 'key = value'");
        const std::string key = trim(stripped.substr(0, eq));
        const std::string value = trim(stripped.substr(eq + 1));
        if (key.empty() || value.empty())
            throw ConfigError(origin + ":" + std::to_string(line_no) + ": empty key or value");
        try {
            flat[key] = nlohmann::json::parse(value);
        } catch (const nlohmann::json::exception&) {
            throw ConfigError(origin + ":" + std::to_string(line_no) +
                              ": value for '" + key + "' is not valid JSON: " + value);
        }
    }
    return flat;
}

inline RunConfig load_run_config(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open config " + path.string());
    return run_config_from_flat(parse_config_text(in, path.string()));
}

inline std::string canonical_config_string(const RunConfig& rc) {
    return run_config_to_flat(rc).dump();  // object keys are sorted
}

inline std::string config_hash(const RunConfig& rc) {
    const std::string s = canonical_config_string(rc);
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

inline RunSettings make_run_settings(const RunConfig& rc) {
    RunSettings s;
    s.model = rc.model;
    s.gsgn = rc.gsgn;
    s.train = rc.train;
    s.config_echo = run_config_to_flat(rc);
    s.config_hash = config_hash(rc);
    return s;
}

}  // namespace mvfuse
