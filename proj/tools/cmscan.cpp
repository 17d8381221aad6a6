#include <CLI11.hpp>

#include <fstream>
#include <iostream>

#include "cmscan/commands.hpp"

namespace {

cmscan::RunConfig load_or_default(const std::string& config_path, std::uint64_t seed_override,
                                  bool has_seed, const std::string& out_override) {
    cmscan::RunConfig cfg;
    if (!config_path.empty()) cfg = cmscan::load_config(config_path);
    if (has_seed) cfg.seed = seed_override;
    if (!out_override.empty()) cfg.output_dir = out_override;
    return cfg;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"cross-modal selective-scan segmentation toolkit"};
    app.require_subcommand(1);

    std::string config_path, out_dir, resume_path;
    std::uint64_t seed = 0;
    bool has_seed = false;
    int threads = 1;
    app.add_option("--config", config_path, "run config (JSON)");
    app.add_option("--seed", seed, "seed override")->each([&](const std::string&) { has_seed = true; });
    app.add_option("--out", out_dir, "output directory override");
    app.add_option("--threads", threads, "worker threads (1 = deterministic single-thread)");

    app.fallthrough();

    auto* gen = app.add_subcommand("gen-data", "write a synthetic dataset to disk");
    std::size_t gen_count = 16;
    std::string gen_split = "train";
    gen->add_option("--count", gen_count, "number of samples");
    gen->add_option("--split", gen_split, "split subdirectory name");

    auto* train = app.add_subcommand("train", "train a model from a config");
    train->add_option("--resume", resume_path, "checkpoint to resume from");

    auto* eval = app.add_subcommand("eval", "evaluate a checkpoint");
    std::string eval_ckpt, eval_root, eval_split;
    eval->add_option("--ckpt", eval_ckpt, "checkpoint path")->required();
    eval->add_option("--data-root", eval_root, "dataset root (defaults to the checkpoint's data)");
    eval->add_option("--split", eval_split, "dataset split");

    auto* predict = app.add_subcommand("predict", "segment one rgb/thermal pair");
    std::string pred_ckpt, pred_rgb, pred_thermal, pred_out;
    bool auto_resize = false;
    predict->add_option("--ckpt", pred_ckpt, "checkpoint path")->required();
    predict->add_option("--rgb", pred_rgb, "rgb png")->required();
    predict->add_option("--thermal", pred_thermal, "thermal png")->required();
    predict->add_option("--out-png", pred_out, "output png")->required();
    predict->add_flag("--auto-resize", auto_resize, "resize inputs to a multiple of 32");

    auto* bench = app.add_subcommand("bench", "flops report and runtime scaling");
    std::size_t bench_hw = 64;
    bench->add_option("--size", bench_hw, "input side for the flops report (multiple of 32)");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        if (e.get_exit_code() == 0) return 0;  // --help
        std::cerr << e.what() << "\n";
        return 2;
    }

    cmscan::set_thread_count(threads);
    try {
        if (*gen) {
            const auto cfg = load_or_default(config_path, seed, has_seed, "");
            const std::string target = out_dir.empty() ? "dataset" : out_dir;
            cmscan::cmd_gen_data(cfg, target, gen_count, gen_split);
            std::cout << "wrote " << gen_count << " samples under " << target << "/" << gen_split << "\n";
        } else if (*train) {
            if (resume_path.empty() && config_path.empty())
                throw cmscan::ConfigError("train: --config is required (or --resume)");
            const auto cfg = load_or_default(config_path, seed, has_seed, out_dir);
            const auto outcome = cmscan::cmd_train(cfg, resume_path, out_dir);
            std::cout << "final loss " << outcome.final_loss << ", train mIoU " << outcome.train_miou
                      << ", eval mIoU " << outcome.eval_miou << "\n"
                      << "checkpoint: " << outcome.checkpoint_path << "\n";
        } else if (*eval) {
            const cmscan::Json metrics = cmscan::cmd_eval(eval_ckpt, eval_root, eval_split);
            std::cout << metrics.dump(2) << "\n";
            if (!out_dir.empty()) {
                std::filesystem::create_directories(out_dir);
                std::ofstream f(std::filesystem::path(out_dir) / "eval.json");
                f << metrics.dump(2) << "\n";
            }
        } else if (*predict) {
            cmscan::cmd_predict(pred_ckpt, pred_rgb, pred_thermal, pred_out, auto_resize);
            std::cout << "wrote " << pred_out << "\n";
        } else if (*bench) {
            cmscan::BenchOptions opt;
            opt.flops_h = opt.flops_w = bench_hw;
            cmscan::ModelConfig model_cfg;
            if (!config_path.empty()) model_cfg = cmscan::load_config(config_path).model;
            const cmscan::Json report = cmscan::cmd_bench(model_cfg, opt, std::cout);
            std::cout << report.dump(2) << "\n";
            if (!out_dir.empty()) {
                std::filesystem::create_directories(out_dir);
                std::ofstream f(std::filesystem::path(out_dir) / "bench.json");
                f << report.dump(2) << "\n";
            }
        }
    } catch (const cmscan::NumericError& e) {
        std::cerr << "numeric failure: " << e.what() << "\n";
        return 4;
    } catch (const cmscan::IoError& e) {
        std::cerr << "io error: " << e.what() << "\n";
        return 3;
    } catch (const cmscan::Error& e) {  // config / shape / contract
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "unexpected error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
