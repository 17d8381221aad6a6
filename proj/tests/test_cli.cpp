#include <catch2/catch_amalgamated.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>

#include "cmscan/commands.hpp"

using namespace cmscan;
namespace fs = std::filesystem;

namespace {

fs::path fresh_dir(const std::string& name) {
    const fs::path p = fs::temp_directory_path() / ("cmscan_cli_" + name);
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
}

RunConfig tiny_config(std::uint64_t seed, const std::string& out) {
    RunConfig cfg;
    cfg.seed = seed;
    cfg.output_dir = out;
    cfg.model.stage_channels = {4, 8, 16, 32};
    cfg.model.ssm.state_dim = 2;
    cfg.model.ssm.dt_rank = 1;
    cfg.model.decoder_hidden = 16;
    cfg.data.scene = default_scene_spec(32);
    cfg.data.train_count = 4;
    cfg.data.eval_count = 2;
    cfg.train.batch_size = 2;
    cfg.train.max_iter = 2;
    return cfg;
}

std::vector<char> read_bytes(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    REQUIRE(in.good());
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

int run_cli(const std::string& args) {
#ifdef CMSCAN_BIN
    const std::string cmd = std::string(CMSCAN_BIN) + " " + args + " >/dev/null 2>&1";
    const int rc = std::system(cmd.c_str());
    return WEXITSTATUS(rc);
#else
    (void)args;
    return -1;
#endif
}

}  // namespace

TEST_CASE("config parsing is strict") {
    REQUIRE_THROWS_AS(config_from_json(Json::parse(R"({"sead": 1})")), ConfigError);
    REQUIRE_THROWS_AS(config_from_json(Json::parse(R"({"model": {"widths": [1,2,3,4]}})")), ConfigError);
    REQUIRE_THROWS_AS(config_from_json(Json::parse(R"({"train": {"max_iter": 1, "epochs": 2}})")),
                      ConfigError);
    REQUIRE_THROWS_AS(config_from_json(Json::parse(R"({"model": {"gate_mode": "times"}})")), ConfigError);
    REQUIRE_THROWS_AS(config_from_json(Json::parse(R"({"data": {"source": "directory"}})")), ConfigError);

    const RunConfig cfg = config_from_json(Json::parse(R"({"seed": 5})"));
    REQUIRE(cfg.seed == 5);
    REQUIRE(cfg.model.stage_channels[0] == 16);
    REQUIRE(cfg.train.base_lr == 1e-4);
    REQUIRE(cfg.train.weight_decay == 5e-4);
}

TEST_CASE("config json round trip") {
    RunConfig cfg = tiny_config(3, "x");
    cfg.model.gate_mode = GateMode::Add;
    cfg.model.fusion_mode = FusionMode::NoCmSs2d;
    cfg.train.optimizer = OptimizerMode::AdamLookahead;
    const Json j = config_to_json(cfg);
    const RunConfig back = config_from_json(j);
    REQUIRE(config_to_json(back) == j);
}

TEST_CASE("epochs translate to max_iter") {
    RunConfig cfg = tiny_config(0, "x");
    cfg.train.epochs = 3;
    cfg.train.max_iter = 0;
    // 4 samples, batch 2 -> 2 steps per epoch
    REQUIRE(resolve_max_iter(cfg.train, 4) == 6);
}

TEST_CASE("checkpoint round trip is byte-identical") {
    const fs::path dir = fresh_dir("ckpt");
    Checkpoint ckpt;
    ckpt.step = 17;
    ckpt.rng_seed = 3;
    ckpt.rng_counter = 99;
    ckpt.config = config_to_json(tiny_config(3, "x"));
    Rng rng(4);
    Tensor<float> t1({3, 2});
    for (auto& v : t1.data) v = static_cast<float>(rng.normal());
    Tensor<float> t2({5});
    for (auto& v : t2.data) v = static_cast<float>(rng.normal());
    ckpt.tensors.emplace_back("a.w", t1);
    ckpt.tensors.emplace_back("b.w", t2);

    const std::string p1 = (dir / "a.cmss").string();
    const std::string p2 = (dir / "b.cmss").string();
    save_checkpoint(p1, ckpt);
    const Checkpoint loaded = load_checkpoint(p1);
    REQUIRE(loaded.step == 17);
    REQUIRE(loaded.tensors.size() == 2);
    REQUIRE(loaded.tensors[0].second.data == t1.data);
    REQUIRE(loaded.tensors[1].second.data == t2.data);
    save_checkpoint(p2, loaded);
    REQUIRE(read_bytes(p1) == read_bytes(p2));

    REQUIRE_THROWS_AS(load_checkpoint((dir / "missing.cmss").string()), IoError);
    std::ofstream junk(dir / "junk.cmss", std::ios::binary);
    junk << "NOPE";
    junk.close();
    REQUIRE_THROWS_AS(load_checkpoint((dir / "junk.cmss").string()), IoError);
}

TEST_CASE("gen-data writes a reloadable dataset deterministically") {
    const fs::path d1 = fresh_dir("gen1");
    const fs::path d2 = fresh_dir("gen2");
    RunConfig cfg = tiny_config(9, "x");

    cmd_gen_data(cfg, d1, 3, "train");
    cmd_gen_data(cfg, d2, 3, "train");
    REQUIRE(fs::exists(d1 / "spec.json"));
    REQUIRE(load_dataset(d1, "train").size() == 3);
    for (const char* f : {"train/rgb/00001.png", "train/thermal/00001.png", "train/labels/00001.png"})
        REQUIRE(read_bytes(d1 / f) == read_bytes(d2 / f));

    // count = 0 still writes a valid (empty) dataset
    const fs::path d0 = fresh_dir("gen0");
    cmd_gen_data(cfg, d0, 0, "train");
    REQUIRE(fs::exists(d0 / "spec.json"));
    REQUIRE(load_dataset(d0, "train").empty());
}

TEST_CASE("train writes metrics, config and exactly one checkpoint per step count") {
    const fs::path out = fresh_dir("train1");
    RunConfig cfg = tiny_config(1, out.string());
    cfg.train.max_iter = 1;
    const TrainOutcome outcome = cmd_train(cfg, "", "", true);
    REQUIRE(fs::exists(out / "config.resolved.json"));
    REQUIRE(fs::exists(out / "metrics.jsonl"));
    REQUIRE(fs::exists(outcome.checkpoint_path));

    std::ifstream metrics(out / "metrics.jsonl");
    std::size_t step_lines = 0, eval_lines = 0;
    std::string line;
    while (std::getline(metrics, line)) {
        const Json j = Json::parse(line);
        if (j.contains("loss"))
            ++step_lines;
        else if (j.contains("miou"))
            ++eval_lines;
    }
    REQUIRE(step_lines == 1);  // max_iter = 1: exactly one optimizer step
    REQUIRE(eval_lines == 2);  // final train + eval metrics

    const Checkpoint ckpt = load_checkpoint(outcome.checkpoint_path);
    REQUIRE(ckpt.step == 1);
}

TEST_CASE("eval on the training set reproduces the logged mIoU exactly") {
    const fs::path out = fresh_dir("train2");
    RunConfig cfg = tiny_config(2, out.string());
    const TrainOutcome outcome = cmd_train(cfg, "", "", true);
    const Json metrics = cmd_eval(outcome.checkpoint_path, "", "train");
    REQUIRE(metrics["miou"].get<double>() == outcome.train_miou);
    REQUIRE(metrics["per_class_iou"].size() == cfg.model.num_classes);
}

TEST_CASE("resume continues the poly schedule from the saved step") {
    const fs::path out = fresh_dir("resume");
    RunConfig cfg = tiny_config(3, out.string());
    cfg.train.max_iter = 4;
    TrainState st = init_train_state(cfg);
    train_step(st);
    train_step(st);
    const fs::path ckpt_path = out / "mid.cmss";
    fs::create_directories(out);
    save_checkpoint(ckpt_path.string(), checkpoint_from_state(st));

    TrainState resumed = state_from_checkpoint(load_checkpoint(ckpt_path.string()));
    REQUIRE(resumed.step == 2);
    const StepResult r3 = train_step(resumed);
    REQUIRE(r3.lr == poly_lr(2, 4, cfg.train.base_lr, cfg.train.power));

    // the resumed stream matches an uninterrupted run bit-for-bit
    const StepResult direct3 = train_step(st);
    REQUIRE(r3.loss == direct3.loss);
}

TEST_CASE("params_count equals the checkpoint manifest total") {
    const fs::path out = fresh_dir("manifest");
    RunConfig cfg = tiny_config(4, out.string());
    TrainState st = init_train_state(cfg);
    const Checkpoint ckpt = checkpoint_from_state(st);
    std::size_t manifest_total = 0;
    for (const auto& [name, t] : ckpt.tensors) {
        const bool buffer = name.find(".running_") != std::string::npos;
        if (name.rfind("opt.", 0) != 0 && !buffer) manifest_total += t.numel();
    }
    REQUIRE(manifest_total == params_count(st.model));
}

TEST_CASE("predict writes a palette map of the input size") {
    const fs::path out = fresh_dir("predict");
    RunConfig cfg = tiny_config(5, out.string());
    cfg.train.max_iter = 1;
    const TrainOutcome outcome = cmd_train(cfg, "", "", true);

    // materialize one sample pair as pngs
    Rng rng(12);
    const SamplePair s = generate_scene(cfg.data.scene, rng);
    for (const char* sub : {"rgb", "thermal", "labels"}) fs::create_directories(out / "pair" / sub);
    write_sample(out / "pair", "x", s);

    const std::string pred_path = (out / "pred.png").string();
    cmd_predict(outcome.checkpoint_path, (out / "pair/rgb/x.png").string(),
                (out / "pair/thermal/x.png").string(), pred_path);
    const PngImage img = read_png(pred_path);
    REQUIRE(img.width == 32);
    REQUIRE(img.height == 32);
    REQUIRE(img.channels == 3);

    // deterministic output
    const std::string pred2 = (out / "pred2.png").string();
    cmd_predict(outcome.checkpoint_path, (out / "pair/rgb/x.png").string(),
                (out / "pair/thermal/x.png").string(), pred2);
    REQUIRE(read_bytes(pred_path) == read_bytes(pred2));
}

#ifdef CMSCAN_BIN
TEST_CASE("cli exit codes") {
    REQUIRE(run_cli("train --config /nonexistent.json") == 3);

    const fs::path dir = fresh_dir("exitcodes");
    {
        std::ofstream bad(dir / "bad.json");
        bad << "{\"unknown_key\": 1}";
    }
    REQUIRE(run_cli("train --config " + (dir / "bad.json").string()) == 2);
    REQUIRE(run_cli("eval --ckpt " + (dir / "missing.cmss").string()) == 3);
    REQUIRE(run_cli("bogus-subcommand") == 2);
}
#endif
