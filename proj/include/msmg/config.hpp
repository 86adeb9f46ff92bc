#pragma once

#include <fstream>
#include <string>

#include <json.hpp>

#include "msmg/checkpoint.hpp"
#include "msmg/model.hpp"
#include "msmg/pipeline.hpp"

namespace msmg {

// Declarative run configuration: model architecture plus training knobs in
// one JSON document. Missing keys fall back to defaults (or the toy preset
// when requested); unknown keys are rejected outright.
struct RunConfig {
    ModelConfig model;
    TrainConfig train;

    void validate() const {
        model.validate();
        train.validate();
        if (model.input_size != train.input_size)
            throw ConfigError("config: model and train input_size disagree");
    }
};

namespace detail {

using json = nlohmann::json;

inline void reject_unknown(const json& j, const std::string& where,
                           std::initializer_list<const char*> known) {
    if (!j.is_object()) throw ConfigError("config: " + where + " must be an object");
    for (const auto& [key, _] : j.items()) {
        bool ok = false;
        for (const char* k : known) ok = ok || key == k;
        if (!ok) throw ConfigError("config: unknown key \"" + key + "\" in " + where);
    }
}

template <class U, std::size_t N>
void read_array(const json& j, const char* key, std::array<U, N>& out,
                const std::string& where) {
    if (!j.contains(key)) return;
    const auto& a = j.at(key);
    if (!a.is_array() || a.size() != N)
        throw ConfigError("config: " + where + "." + key + " must be an array of " +
                          std::to_string(N));
    for (std::size_t i = 0; i < N; ++i) out[i] = a[i].get<U>();
}

template <class U>
void read_val(const json& j, const char* key, U& out) {
    if (j.contains(key)) out = j.at(key).get<U>();
}

inline void parse_model(const json& j, ModelConfig& m) {
    reject_unknown(j, "model",
                   {"preset", "input_size", "backbone", "grained", "fusion", "enable_grained"});
    if (j.contains("preset")) {
        const auto p = j.at("preset").get<std::string>();
        if (p == "toy")
            m = ModelConfig::toy(m.input_size);
        else if (p != "default")
            throw ConfigError("config: unknown model preset \"" + p + "\"");
    }
    read_val(j, "input_size", m.input_size);
    read_array(j, "enable_grained", m.enable_grained, "model");
    if (j.contains("backbone")) {
        const auto& b = j.at("backbone");
        reject_unknown(b, "model.backbone",
                       {"stem_channels", "stage_channels", "blocks_per_stage"});
        read_val(b, "stem_channels", m.backbone.stem_channels);
        read_array(b, "stage_channels", m.backbone.stage_channels, "model.backbone");
        read_array(b, "blocks_per_stage", m.backbone.blocks_per_stage, "model.backbone");
    }
    if (j.contains("grained")) {
        const auto& gr = j.at("grained");
        reject_unknown(gr, "model.grained",
                       {"embed_dims", "heads", "shunt_ratios", "blocks", "mlp_ratio",
                        "detail_enhance"});
        read_array(gr, "embed_dims", m.grained.embed_dims, "model.grained");
        read_array(gr, "heads", m.grained.heads, "model.grained");
        read_array(gr, "blocks", m.grained.blocks, "model.grained");
        read_val(gr, "mlp_ratio", m.grained.mlp_ratio);
        read_val(gr, "detail_enhance", m.grained.detail_enhance);
        if (gr.contains("shunt_ratios")) {
            const auto& r = gr.at("shunt_ratios");
            if (!r.is_array() || r.size() != 4)
                throw ConfigError("config: model.grained.shunt_ratios must have 4 lists");
            for (std::size_t i = 0; i < 4; ++i)
                m.grained.shunt_ratios[i] = r[i].get<std::vector<int>>();
        }
    }
    if (j.contains("fusion")) {
        const auto& f = j.at("fusion");
        reject_unknown(f, "model.fusion", {"fuse_channels", "edge_channels"});
        read_array(f, "fuse_channels", m.fusion.fuse_channels, "model.fusion");
        read_val(f, "edge_channels", m.fusion.edge_channels);
    }
}

inline void parse_train(const json& j, TrainConfig& t) {
    reject_unknown(j, "train",
                   {"batch_size", "max_steps", "lr_start", "lr_end", "schedule", "seed",
                    "loss_weights", "augment", "checkpoint_every", "log_every"});
    read_val(j, "batch_size", t.batch_size);
    read_val(j, "max_steps", t.max_steps);
    read_val(j, "lr_start", t.lr_start);
    read_val(j, "lr_end", t.lr_end);
    read_val(j, "seed", t.seed);
    read_val(j, "checkpoint_every", t.checkpoint_every);
    read_val(j, "log_every", t.log_every);
    if (j.contains("schedule")) {
        const auto s = j.at("schedule").get<std::string>();
        if (s == "cosine")
            t.schedule = LrSchedule::cosine;
        else if (s == "step")
            t.schedule = LrSchedule::step;
        else
            throw ConfigError("config: unknown schedule \"" + s + "\"");
    }
    if (j.contains("loss_weights")) {
        const auto& w = j.at("loss_weights");
        reject_unknown(w, "train.loss_weights", {"gamma_r", "gamma_e"});
        read_val(w, "gamma_r", t.loss_weights.gamma_r);
        read_val(w, "gamma_e", t.loss_weights.gamma_e);
    }
    if (j.contains("augment")) {
        const auto& a = j.at("augment");
        reject_unknown(a, "train.augment",
                       {"p_flip", "p_blur", "p_jpeg", "blur_kernels", "jpeg_quality_lo",
                        "jpeg_quality_hi"});
        read_val(a, "p_flip", t.augment.p_flip);
        read_val(a, "p_blur", t.augment.p_blur);
        read_val(a, "p_jpeg", t.augment.p_jpeg);
        read_val(a, "blur_kernels", t.augment.blur_kernels);
        read_val(a, "jpeg_quality_lo", t.augment.jpeg_quality_lo);
        read_val(a, "jpeg_quality_hi", t.augment.jpeg_quality_hi);
    }
}

inline json model_to_json(const ModelConfig& m) {
    json j;
    j["input_size"] = m.input_size;
    j["enable_grained"] = m.enable_grained;
    j["backbone"] = {{"stem_channels", m.backbone.stem_channels},
                     {"stage_channels", m.backbone.stage_channels},
                     {"blocks_per_stage", m.backbone.blocks_per_stage}};
    j["grained"] = {{"embed_dims", m.grained.embed_dims},
                    {"heads", m.grained.heads},
                    {"shunt_ratios", m.grained.shunt_ratios},
                    {"blocks", m.grained.blocks},
                    {"mlp_ratio", m.grained.mlp_ratio},
                    {"detail_enhance", m.grained.detail_enhance}};
    j["fusion"] = {{"fuse_channels", m.fusion.fuse_channels},
                   {"edge_channels", m.fusion.edge_channels}};
    return j;
}

inline json train_to_json(const TrainConfig& t) {
    json j;
    j["batch_size"] = t.batch_size;
    j["max_steps"] = t.max_steps;
    j["lr_start"] = t.lr_start;
    j["lr_end"] = t.lr_end;
    j["schedule"] = t.schedule == LrSchedule::cosine ? "cosine" : "step";
    j["seed"] = t.seed;
    j["checkpoint_every"] = t.checkpoint_every;
    j["log_every"] = t.log_every;
    j["loss_weights"] = {{"gamma_r", t.loss_weights.gamma_r},
                         {"gamma_e", t.loss_weights.gamma_e}};
    j["augment"] = {{"p_flip", t.augment.p_flip},
                    {"p_blur", t.augment.p_blur},
                    {"p_jpeg", t.augment.p_jpeg},
                    {"blur_kernels", t.augment.blur_kernels},
                    {"jpeg_quality_lo", t.augment.jpeg_quality_lo},
                    {"jpeg_quality_hi", t.augment.jpeg_quality_hi}};
    return j;
}

}  // namespace detail

inline RunConfig parse_run_config(const std::string& text) {
    detail::json j;
    try {
        j = detail::json::parse(text);
    } catch (const detail::json::parse_error& e) {
        throw ConfigError(std::string("config: invalid JSON: ") + e.what());
    }
    detail::reject_unknown(j, "top level", {"model", "train"});
    RunConfig cfg;
    try {
        if (j.contains("model")) detail::parse_model(j.at("model"), cfg.model);
        if (j.contains("train")) detail::parse_train(j.at("train"), cfg.train);
    } catch (const detail::json::exception& e) {
        throw ConfigError(std::string("config: ") + e.what());
    }
    cfg.train.input_size = cfg.model.input_size;
    cfg.validate();
    return cfg;
}

inline RunConfig load_run_config(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw ConfigError("config: cannot open: " + path);
    std::string text((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
    return parse_run_config(text);
}

// Frozen copy written next to training outputs; reloads to an equal config.
inline std::string dump_run_config(const RunConfig& cfg) {
    detail::json j;
    j["model"] = detail::model_to_json(cfg.model);
    j["train"] = detail::train_to_json(cfg.train);
    return j.dump(2) + "\n";
}

// Hash over the architecture-relevant part only; training knobs do not
// invalidate checkpoints.
inline std::uint64_t config_fingerprint(const ModelConfig& m) {
    return fnv1a(detail::model_to_json(m).dump());
}

}  // namespace msmg
