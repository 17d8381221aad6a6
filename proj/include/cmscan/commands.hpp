#pragma once

#include <array>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <string>

#include "cmscan/bench.hpp"
#include "cmscan/train.hpp"

namespace cmscan {

namespace fs = std::filesystem;

// Stable class palette for prediction maps (documented in the README).
inline constexpr std::array<std::array<std::uint8_t, 3>, 16> kClassPalette{{
    {0, 0, 0},       {0, 128, 0},    {0, 255, 64},   {255, 128, 0},
    {128, 64, 0},    {64, 96, 255},  {255, 255, 0},  {255, 0, 255},
    {0, 255, 255},   {128, 0, 255},  {255, 64, 64},  {64, 255, 192},
    {192, 192, 192}, {128, 128, 64}, {0, 64, 128},   {255, 255, 255},
}};

// ---------------------------------------------------------------------------
// gen-data: materialize a synthetic dataset in the documented layout.
// ---------------------------------------------------------------------------

inline void cmd_gen_data(const RunConfig& cfg, const fs::path& out_dir, std::size_t count,
                         const std::string& split = "train") {
    const fs::path base = out_dir / split;
    std::error_code ec;
    for (const char* sub : {"rgb", "thermal", "labels"}) {
        fs::create_directories(base / sub, ec);
        if (ec) throw IoError("cannot create dataset directory: " + (base / sub).string());
    }
    Rng rng(cfg.seed);
    for (std::size_t i = 0; i < count; ++i) {
        Rng child = rng.split();
        const SamplePair s = generate_scene(cfg.data.scene, child);
        char stem[16];
        std::snprintf(stem, sizeof(stem), "%05zu", i);
        write_sample(base, stem, s);
    }
    Json prov;
    prov["seed"] = cfg.seed;
    prov["count"] = count;
    prov["split"] = split;
    prov["scene"] = scene_to_json(cfg.data.scene);
    std::ofstream spec_out(out_dir / "spec.json");
    if (!spec_out) throw IoError("cannot write spec.json in " + out_dir.string());
    spec_out << prov.dump(2) << "\n";
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

inline TrainOutcome cmd_train(const RunConfig& cfg, const std::string& resume_path = "",
                              const std::string& out_override = "", bool quiet = false) {
    TrainState st = resume_path.empty() ? init_train_state(cfg)
                                        : state_from_checkpoint(load_checkpoint(resume_path));
    if (!resume_path.empty() && !out_override.empty()) st.cfg.output_dir = out_override;
    auto progress = [&](const Json& j) {
        if (quiet) return;
        if (j.contains("loss"))
            log::info("step %llu lr %.3g loss %.5f", static_cast<unsigned long long>(j["step"].get<std::uint64_t>()),
                      j["lr"].get<double>(), j["loss"].get<double>());
        else if (j.contains("miou"))
            log::info("step %llu %s mIoU %.4f", static_cast<unsigned long long>(j["step"].get<std::uint64_t>()),
                      j["split"].get<std::string>().c_str(), j["miou"].get<double>());
    };
    return run_training(st, progress);
}

// ---------------------------------------------------------------------------
// eval
// ---------------------------------------------------------------------------

inline Json cmd_eval(const std::string& ckpt_path, const std::string& data_root = "",
                     const std::string& split = "") {
    const Checkpoint ckpt = load_checkpoint(ckpt_path);
    const RunConfig cfg = config_from_json(ckpt.config);

    SegModel<float> model;
    model.cfg = cfg.model;
    Rng init_rng(0);
    model.init(init_rng);
    load_params_from_checkpoint(model, ckpt);

    SampleSet set;
    if (!data_root.empty()) {
        set = load_samples(data_root, split.empty() ? cfg.data.eval_split : split);
    } else if (cfg.data.source == DataSource::Synthetic) {
        // reconstruct the training-time sets from the recorded seed
        Rng master(cfg.seed);
        master.split();  // model stream
        Rng train_rng = master.split();
        Rng eval_rng = master.split();
        if (split == "train")
            set = generate_samples(cfg.data.scene, cfg.data.train_count, train_rng);
        else
            set = generate_samples(cfg.data.scene, cfg.data.eval_count, eval_rng);
    } else {
        set = load_samples(cfg.data.root, split.empty() ? cfg.data.eval_split : split);
    }

    const IouResult iou = evaluate_model(model, set, cfg.train.zero_thermal);
    Json j = iou_to_json(iou);
    j["samples"] = set.size();
    j["checkpoint"] = ckpt_path;
    return j;
}

// ---------------------------------------------------------------------------
// predict
// ---------------------------------------------------------------------------

inline void cmd_predict(const std::string& ckpt_path, const std::string& rgb_path,
                        const std::string& thermal_path, const std::string& out_path,
                        bool auto_resize = false) {
    const Checkpoint ckpt = load_checkpoint(ckpt_path);
    const RunConfig cfg = config_from_json(ckpt.config);
    SegModel<float> model;
    model.cfg = cfg.model;
    Rng init_rng(0);
    model.init(init_rng);
    load_params_from_checkpoint(model, ckpt);

    auto to_tensor = [](const PngImage& img) {
        Tensor<float> t({3, img.height, img.width});
        const std::size_t hw = img.height * img.width;
        for (std::size_t p = 0; p < hw; ++p)
            for (std::size_t c = 0; c < 3; ++c)
                t.data[c * hw + p] = img.pixels[p * img.channels + (img.channels == 3 ? c : 0)] / 255.0f;
        return t;
    };
    const PngImage rgb_img = read_png(rgb_path);
    const PngImage th_img = read_png(thermal_path);
    if (rgb_img.width != th_img.width || rgb_img.height != th_img.height)
        throw ConfigError("predict: rgb and thermal sizes differ");
    Tensor<float> rgb = to_tensor(rgb_img), thermal = to_tensor(th_img);

    const std::size_t in_h = rgb_img.height, in_w = rgb_img.width;
    std::size_t h = in_h, w = in_w;
    if (h % 32 != 0 || w % 32 != 0) {
        if (!auto_resize)
            throw ConfigError("predict: input size must be divisible by 32 (or pass --auto-resize)");
        h = std::max<std::size_t>(32, (h + 16) / 32 * 32);
        w = std::max<std::size_t>(32, (w + 16) / 32 * 32);
        rgb = detail::resize_bilinear_3(rgb, h, w);
        thermal = detail::resize_bilinear_3(thermal, h, w);
    }

    LabelMap pred = predict_labels(model, rgb, thermal);
    if (h != in_h || w != in_w) pred = detail::resize_nearest(pred, in_h, in_w);

    std::vector<std::uint8_t> pixels(in_h * in_w * 3);
    for (std::size_t p = 0; p < in_h * in_w; ++p) {
        const auto& color = kClassPalette[pred.v[p] % kClassPalette.size()];
        pixels[p * 3 + 0] = color[0];
        pixels[p * 3 + 1] = color[1];
        pixels[p * 3 + 2] = color[2];
    }
    write_png(out_path, in_w, in_h, 3, pixels.data());
}

// ---------------------------------------------------------------------------
// bench
// ---------------------------------------------------------------------------

struct BenchOptions {
    std::size_t channels = 16;
    std::size_t state_dim = 16;
    std::size_t flops_h = 64, flops_w = 64;
    std::vector<std::size_t> scan_sizes{32 * 32, 64 * 64, 128 * 128, 256 * 256};
    std::vector<std::size_t> attention_sizes{24 * 24, 32 * 32, 64 * 64, 128 * 128};
    std::size_t reps = 5;
};

inline Json scaling_to_json(const ScalingReport& rep) {
    Json j;
    j["sizes"] = rep.sizes;
    j["median_seconds"] = rep.median_seconds;
    j["dropped"] = rep.dropped;
    j["slope"] = rep.slope;
    j["intercept"] = rep.intercept;
    return j;
}

inline ScalingReport bench_scan_scaling(const BenchOptions& opt) {
    Rng rng(1234);
    SsmConfig ssm;
    ssm.state_dim = opt.state_dim;
    SsmDirectionArray<float> dirs;
    for (std::size_t d = 0; d < 4; ++d)
        dirs[d].init("bench.dir" + std::to_string(d), opt.channels, opt.state_dim,
                     ssm.resolved_dt_rank(opt.channels), rng);
    std::map<std::size_t, std::pair<Tensor<float>, Tensor<float>>> inputs;
    for (std::size_t hw : opt.scan_sizes) {
        const auto side = static_cast<std::size_t>(std::round(std::sqrt(double(hw))));
        Tensor<float> fr({opt.channels, side, hw / side}), ft(fr.shape);
        for (auto& v : fr.data) v = static_cast<float>(rng.normal());
        for (auto& v : ft.data) v = static_cast<float>(rng.normal());
        inputs.emplace(hw, std::make_pair(std::move(fr), std::move(ft)));
    }
    return measure_runtime_scaling(
        [&](std::size_t hw) {
            const auto& [fr, ft] = inputs.at(hw);
            cm_ss2d_forward(fr, ft, dirs, ssm);
        },
        opt.scan_sizes, opt.reps);
}

inline ScalingReport bench_attention_scaling(const BenchOptions& opt) {
    Rng rng(1235);
    NaiveCrossAttention<float> att;
    att.init(opt.channels, rng);
    std::map<std::size_t, std::pair<Tensor<float>, Tensor<float>>> inputs;
    for (std::size_t hw : opt.attention_sizes) {
        const auto side = static_cast<std::size_t>(std::round(std::sqrt(double(hw))));
        Tensor<float> fr({opt.channels, side, hw / side}), ft(fr.shape);
        for (auto& v : fr.data) v = static_cast<float>(rng.normal());
        for (auto& v : ft.data) v = static_cast<float>(rng.normal());
        inputs.emplace(hw, std::make_pair(std::move(fr), std::move(ft)));
    }
    return measure_runtime_scaling(
        [&](std::size_t hw) {
            const auto& [fr, ft] = inputs.at(hw);
            att.forward(fr, ft);
        },
        opt.attention_sizes, opt.reps);
}

inline Json cmd_bench(const ModelConfig& model_cfg, const BenchOptions& opt, std::ostream& os) {
    const FlopsReport flops = count_flops(model_cfg, opt.flops_h, opt.flops_w);
    os << flops.table() << "\n";

    SegModel<float> model;
    model.cfg = model_cfg;
    Rng rng(0);
    model.init(rng);
    const std::size_t n_params = params_count(model);

    os << "measuring scan scaling...\n";
    const ScalingReport scan_rep = bench_scan_scaling(opt);
    os << "measuring attention scaling...\n";
    const ScalingReport att_rep = bench_attention_scaling(opt);

    char line[160];
    std::snprintf(line, sizeof(line), "%-22s %8s\n", "op", "slope");
    os << line;
    std::snprintf(line, sizeof(line), "%-22s %8.3f\n", "cm_ss2d", scan_rep.slope);
    os << line;
    std::snprintf(line, sizeof(line), "%-22s %8.3f\n", "naive_cross_attention", att_rep.slope);
    os << line;
    std::snprintf(line, sizeof(line), "%-22s %8.3f\n", "gap", att_rep.slope - scan_rep.slope);
    os << line;

    Json j;
    Json fj;
    fj["entries"] = Json::array();
    for (const auto& e : flops.entries)
        fj["entries"].push_back({{"name", e.name}, {"flops", e.flops}, {"params", e.params}});
    fj["total_flops"] = flops.total_flops();
    fj["total_params"] = flops.total_params();
    j["flops"] = std::move(fj);
    j["model_params"] = n_params;
    j["scan_scaling"] = scaling_to_json(scan_rep);
    j["attention_scaling"] = scaling_to_json(att_rep);
    j["slope_gap"] = att_rep.slope - scan_rep.slope;
    return j;
}

}  // namespace cmscan
