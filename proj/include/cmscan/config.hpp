#pragma once

#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "cmscan/data.hpp"
#include "cmscan/fusion.hpp"
#include "cmscan/optim.hpp"

namespace cmscan {

using Json = nlohmann::ordered_json;

struct AugmentConfig {
    std::size_t resize_h = 0, resize_w = 0;
    std::size_t crop_h = 0, crop_w = 0;
    double hflip_p = 0.5;

    AugmentPolicy policy() const { return {resize_h, resize_w, crop_h, crop_w, hflip_p}; }
};

struct TrainConfig {
    std::size_t batch_size = 4;
    std::size_t max_iter = 300;
    std::size_t epochs = 0;  // when set, translated to max_iter at resolve time
    double base_lr = 1e-4;
    double power = 0.9;
    double weight_decay = 5e-4;
    OptimizerMode optimizer = OptimizerMode::Adam;
    AugmentConfig augment;
    std::size_t eval_every = 0;       // 0 = only at the end
    std::size_t checkpoint_every = 0; // 0 = only at the end
    bool zero_thermal = false;        // ablation: feed zeros to the thermal encoder
};

enum class DataSource { Synthetic, Directory };

struct DataConfig {
    DataSource source = DataSource::Synthetic;
    std::string root;
    std::string train_split = "train";
    std::string eval_split = "test";
    std::size_t train_count = 16;  // synthetic only
    std::size_t eval_count = 8;    // synthetic only
    SceneSpec scene = default_scene_spec();
};

struct RunConfig {
    std::uint64_t seed = 0;
    std::string output_dir = "runs/out";
    ModelConfig model;
    TrainConfig train;
    DataConfig data;
};

// ---------------------------------------------------------------------------
// Strict JSON binding: unknown keys are rejected at every level.
// ---------------------------------------------------------------------------

namespace detail {

inline void check_keys(const Json& j, const std::string& where, std::initializer_list<const char*> allowed) {
    if (!j.is_object()) throw ConfigError("config: '" + where + "' must be an object");
    for (const auto& [key, _] : j.items()) {
        bool ok = false;
        for (const char* a : allowed)
            if (key == a) {
                ok = true;
                break;
            }
        if (!ok) throw ConfigError("config: unknown key '" + key + "' in " + where);
    }
}

template <typename T>
T get_or(const Json& j, const char* key, T fallback) {
    if (!j.contains(key)) return fallback;
    try {
        return j.at(key).get<T>();
    } catch (const std::exception&) {
        throw ConfigError(std::string("config: bad value for '") + key + "'");
    }
}

}  // namespace detail

inline GateMode gate_mode_from_string(const std::string& s) {
    if (s == "mul") return GateMode::Mul;
    if (s == "add") return GateMode::Add;
    throw ConfigError("config: gate_mode must be 'mul' or 'add', got '" + s + "'");
}

inline FuseInputs fuse_inputs_from_string(const std::string& s) {
    if (s == "gated") return FuseInputs::Gated;
    if (s == "raw") return FuseInputs::Raw;
    throw ConfigError("config: fuse_inputs must be 'gated' or 'raw', got '" + s + "'");
}

inline FusionMode fusion_mode_from_string(const std::string& s) {
    if (s == "cmssa") return FusionMode::CmSsa;
    if (s == "no_cmss2d") return FusionMode::NoCmSs2d;
    if (s == "addition") return FusionMode::Addition;
    throw ConfigError("config: fusion_mode must be cmssa|no_cmss2d|addition, got '" + s + "'");
}

inline OptimizerMode optimizer_from_string(const std::string& s) {
    if (s == "adam") return OptimizerMode::Adam;
    if (s == "adam+lookahead") return OptimizerMode::AdamLookahead;
    throw ConfigError("config: optimizer must be 'adam' or 'adam+lookahead', got '" + s + "'");
}

inline SceneSpec scene_from_json(const Json& j) {
    detail::check_keys(j, "data.scene",
                       {"num_classes", "height", "width", "shapes_min", "shapes_max", "classes",
                        "ambiguous_pairs", "rgb_noise", "thermal_noise", "bg_thermal_jitter"});
    SceneSpec s = default_scene_spec();
    s.num_classes = detail::get_or<std::size_t>(j, "num_classes", s.num_classes);
    s.height = detail::get_or<std::size_t>(j, "height", s.height);
    s.width = detail::get_or<std::size_t>(j, "width", s.width);
    s.shapes_min = detail::get_or<std::size_t>(j, "shapes_min", s.shapes_min);
    s.shapes_max = detail::get_or<std::size_t>(j, "shapes_max", s.shapes_max);
    s.rgb_noise = detail::get_or<double>(j, "rgb_noise", s.rgb_noise);
    s.thermal_noise = detail::get_or<double>(j, "thermal_noise", s.thermal_noise);
    s.bg_thermal_jitter = detail::get_or<double>(j, "bg_thermal_jitter", s.bg_thermal_jitter);
    if (j.contains("classes")) {
        s.classes.clear();
        for (const auto& cj : j.at("classes")) {
            detail::check_keys(cj, "data.scene.classes[]", {"rgb", "thermal"});
            SceneClass c;
            const auto rgb = cj.at("rgb").get<std::vector<double>>();
            if (rgb.size() != 3) throw ConfigError("config: scene class rgb must have 3 entries");
            c.rgb = {rgb[0], rgb[1], rgb[2]};
            c.thermal = cj.at("thermal").get<double>();
            s.classes.push_back(c);
        }
    }
    if (j.contains("ambiguous_pairs")) {
        s.ambiguous_pairs.clear();
        for (const auto& pj : j.at("ambiguous_pairs")) {
            const auto pair = pj.get<std::vector<std::size_t>>();
            if (pair.size() != 2) throw ConfigError("config: ambiguous pair must have 2 entries");
            s.ambiguous_pairs.push_back({pair[0], pair[1]});
        }
    }
    s.validate();
    return s;
}

inline Json scene_to_json(const SceneSpec& s) {
    Json j;
    j["num_classes"] = s.num_classes;
    j["height"] = s.height;
    j["width"] = s.width;
    j["shapes_min"] = s.shapes_min;
    j["shapes_max"] = s.shapes_max;
    j["classes"] = Json::array();
    for (const auto& c : s.classes)
        j["classes"].push_back({{"rgb", std::vector<double>{c.rgb[0], c.rgb[1], c.rgb[2]}},
                                {"thermal", c.thermal}});
    j["ambiguous_pairs"] = Json::array();
    for (const auto& p : s.ambiguous_pairs)
        j["ambiguous_pairs"].push_back(std::vector<std::size_t>{p[0], p[1]});
    j["rgb_noise"] = s.rgb_noise;
    j["thermal_noise"] = s.thermal_noise;
    j["bg_thermal_jitter"] = s.bg_thermal_jitter;
    return j;
}

inline RunConfig config_from_json(const Json& j) {
    detail::check_keys(j, "config root", {"seed", "output_dir", "model", "train", "data"});
    RunConfig cfg;
    cfg.seed = detail::get_or<std::uint64_t>(j, "seed", cfg.seed);
    cfg.output_dir = detail::get_or<std::string>(j, "output_dir", cfg.output_dir);

    if (j.contains("model")) {
        const Json& m = j.at("model");
        detail::check_keys(m, "model",
                           {"stage_channels", "num_classes", "decoder_hidden", "expand_factor",
                            "gate_mode", "fuse_inputs", "fusion_mode", "ssm"});
        if (m.contains("stage_channels")) {
            const auto ch = m.at("stage_channels").get<std::vector<std::size_t>>();
            if (ch.size() != 4) throw ConfigError("config: stage_channels must have 4 entries");
            std::copy(ch.begin(), ch.end(), cfg.model.stage_channels.begin());
        }
        cfg.model.num_classes = detail::get_or<std::size_t>(m, "num_classes", cfg.model.num_classes);
        cfg.model.decoder_hidden = detail::get_or<std::size_t>(m, "decoder_hidden", cfg.model.decoder_hidden);
        cfg.model.expand_factor = detail::get_or<std::size_t>(m, "expand_factor", cfg.model.expand_factor);
        if (cfg.model.expand_factor < 1) throw ConfigError("config: expand_factor must be >= 1");
        if (m.contains("gate_mode")) cfg.model.gate_mode = gate_mode_from_string(m.at("gate_mode"));
        if (m.contains("fuse_inputs")) cfg.model.fuse_inputs = fuse_inputs_from_string(m.at("fuse_inputs"));
        if (m.contains("fusion_mode")) cfg.model.fusion_mode = fusion_mode_from_string(m.at("fusion_mode"));
        if (m.contains("ssm")) {
            const Json& s = m.at("ssm");
            detail::check_keys(s, "model.ssm",
                               {"state_dim", "dt_rank", "delta_softplus", "strict_interleave",
                                "parallel_scan"});
            cfg.model.ssm.state_dim = detail::get_or<std::size_t>(s, "state_dim", cfg.model.ssm.state_dim);
            cfg.model.ssm.dt_rank = detail::get_or<std::size_t>(s, "dt_rank", cfg.model.ssm.dt_rank);
            cfg.model.ssm.delta_softplus =
                detail::get_or<bool>(s, "delta_softplus", cfg.model.ssm.delta_softplus);
            cfg.model.ssm.strict_interleave =
                detail::get_or<bool>(s, "strict_interleave", cfg.model.ssm.strict_interleave);
            cfg.model.ssm.parallel_scan =
                detail::get_or<bool>(s, "parallel_scan", cfg.model.ssm.parallel_scan);
        }
    }

    if (j.contains("train")) {
        const Json& t = j.at("train");
        detail::check_keys(t, "train",
                           {"batch_size", "max_iter", "epochs", "base_lr", "power", "weight_decay",
                            "optimizer", "augment", "eval_every", "checkpoint_every", "zero_thermal"});
        if (t.contains("max_iter") && t.contains("epochs"))
            throw ConfigError("config: give train.max_iter or train.epochs, not both");
        cfg.train.batch_size = detail::get_or<std::size_t>(t, "batch_size", cfg.train.batch_size);
        cfg.train.max_iter = detail::get_or<std::size_t>(t, "max_iter", cfg.train.max_iter);
        cfg.train.epochs = detail::get_or<std::size_t>(t, "epochs", 0);
        cfg.train.base_lr = detail::get_or<double>(t, "base_lr", cfg.train.base_lr);
        cfg.train.power = detail::get_or<double>(t, "power", cfg.train.power);
        cfg.train.weight_decay = detail::get_or<double>(t, "weight_decay", cfg.train.weight_decay);
        if (t.contains("optimizer")) cfg.train.optimizer = optimizer_from_string(t.at("optimizer"));
        if (t.contains("augment")) {
            const Json& a = t.at("augment");
            detail::check_keys(a, "train.augment", {"resize", "crop", "hflip_p"});
            if (a.contains("resize")) {
                const auto r = a.at("resize").get<std::vector<std::size_t>>();
                if (r.size() != 2) throw ConfigError("config: augment.resize must be [H,W]");
                cfg.train.augment.resize_h = r[0];
                cfg.train.augment.resize_w = r[1];
            }
            if (a.contains("crop")) {
                const auto c = a.at("crop").get<std::vector<std::size_t>>();
                if (c.size() != 2) throw ConfigError("config: augment.crop must be [H,W]");
                cfg.train.augment.crop_h = c[0];
                cfg.train.augment.crop_w = c[1];
            }
            cfg.train.augment.hflip_p = detail::get_or<double>(a, "hflip_p", cfg.train.augment.hflip_p);
        }
        cfg.train.eval_every = detail::get_or<std::size_t>(t, "eval_every", 0);
        cfg.train.checkpoint_every = detail::get_or<std::size_t>(t, "checkpoint_every", 0);
        cfg.train.zero_thermal = detail::get_or<bool>(t, "zero_thermal", false);
    }

    if (j.contains("data")) {
        const Json& d = j.at("data");
        detail::check_keys(d, "data",
                           {"source", "root", "train_split", "eval_split", "train_count", "eval_count",
                            "scene"});
        const std::string src = detail::get_or<std::string>(d, "source", "synthetic");
        if (src == "synthetic")
            cfg.data.source = DataSource::Synthetic;
        else if (src == "directory")
            cfg.data.source = DataSource::Directory;
        else
            throw ConfigError("config: data.source must be 'synthetic' or 'directory'");
        cfg.data.root = detail::get_or<std::string>(d, "root", "");
        cfg.data.train_split = detail::get_or<std::string>(d, "train_split", cfg.data.train_split);
        cfg.data.eval_split = detail::get_or<std::string>(d, "eval_split", cfg.data.eval_split);
        cfg.data.train_count = detail::get_or<std::size_t>(d, "train_count", cfg.data.train_count);
        cfg.data.eval_count = detail::get_or<std::size_t>(d, "eval_count", cfg.data.eval_count);
        if (d.contains("scene")) cfg.data.scene = scene_from_json(d.at("scene"));
        if (cfg.data.source == DataSource::Directory && cfg.data.root.empty())
            throw ConfigError("config: data.root is required for directory datasets");
    }
    if (cfg.model.num_classes != cfg.data.scene.num_classes && cfg.data.source == DataSource::Synthetic)
        throw ConfigError("config: model.num_classes must match data.scene.num_classes");
    return cfg;
}

inline Json config_to_json(const RunConfig& cfg) {
    Json j;
    j["seed"] = cfg.seed;
    j["output_dir"] = cfg.output_dir;
    Json m;
    m["stage_channels"] = std::vector<std::size_t>(cfg.model.stage_channels.begin(),
                                                   cfg.model.stage_channels.end());
    m["num_classes"] = cfg.model.num_classes;
    m["decoder_hidden"] = cfg.model.decoder_hidden;
    m["expand_factor"] = cfg.model.expand_factor;
    m["gate_mode"] = cfg.model.gate_mode == GateMode::Mul ? "mul" : "add";
    m["fuse_inputs"] = cfg.model.fuse_inputs == FuseInputs::Gated ? "gated" : "raw";
    m["fusion_mode"] = cfg.model.fusion_mode == FusionMode::CmSsa
                           ? "cmssa"
                           : (cfg.model.fusion_mode == FusionMode::NoCmSs2d ? "no_cmss2d" : "addition");
    Json s;
    s["state_dim"] = cfg.model.ssm.state_dim;
    s["dt_rank"] = cfg.model.ssm.dt_rank;
    s["delta_softplus"] = cfg.model.ssm.delta_softplus;
    s["strict_interleave"] = cfg.model.ssm.strict_interleave;
    s["parallel_scan"] = cfg.model.ssm.parallel_scan;
    m["ssm"] = std::move(s);
    j["model"] = std::move(m);

    Json t;
    t["batch_size"] = cfg.train.batch_size;
    t["max_iter"] = cfg.train.max_iter;
    t["base_lr"] = cfg.train.base_lr;
    t["power"] = cfg.train.power;
    t["weight_decay"] = cfg.train.weight_decay;
    t["optimizer"] = cfg.train.optimizer == OptimizerMode::Adam ? "adam" : "adam+lookahead";
    Json a;
    a["resize"] = std::vector<std::size_t>{cfg.train.augment.resize_h, cfg.train.augment.resize_w};
    a["crop"] = std::vector<std::size_t>{cfg.train.augment.crop_h, cfg.train.augment.crop_w};
    a["hflip_p"] = cfg.train.augment.hflip_p;
    t["augment"] = std::move(a);
    t["eval_every"] = cfg.train.eval_every;
    t["checkpoint_every"] = cfg.train.checkpoint_every;
    t["zero_thermal"] = cfg.train.zero_thermal;
    j["train"] = std::move(t);

    Json d;
    d["source"] = cfg.data.source == DataSource::Synthetic ? "synthetic" : "directory";
    d["root"] = cfg.data.root;
    d["train_split"] = cfg.data.train_split;
    d["eval_split"] = cfg.data.eval_split;
    d["train_count"] = cfg.data.train_count;
    d["eval_count"] = cfg.data.eval_count;
    d["scene"] = scene_to_json(cfg.data.scene);
    j["data"] = std::move(d);
    return j;
}

inline RunConfig load_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open config: " + path);
    Json j;
    try {
        in >> j;
    } catch (const std::exception& e) {
        throw ConfigError("config: invalid JSON in " + path + ": " + e.what());
    }
    return config_from_json(j);
}

}  // namespace cmscan
