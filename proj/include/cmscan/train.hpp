#pragma once

#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <string>
#include <vector>

#include "cmscan/checkpoint.hpp"
#include "cmscan/config.hpp"
#include "cmscan/dataset.hpp"
#include "cmscan/loss.hpp"
#include "cmscan/metrics.hpp"
#include "cmscan/optim.hpp"

namespace cmscan {

struct TrainState {
    RunConfig cfg;
    SegModel<float> model;
    Optimizer<float> opt;
    std::size_t step = 0;
    std::size_t max_iter = 0;
    Rng rng{0};  // training-loop stream (batch choice, augmentation)
    SampleSet train_set, eval_set;
    Tensor<float> ce_weights;
};

inline std::size_t resolve_max_iter(const TrainConfig& t, std::size_t train_size) {
    if (t.epochs == 0) return t.max_iter;
    const std::size_t steps_per_epoch = (train_size + t.batch_size - 1) / t.batch_size;
    return t.epochs * std::max<std::size_t>(1, steps_per_epoch);
}

// Deterministic stream layout: one master stream per run, split in a fixed
// order into model-init / train-data / eval-data / loop streams.
inline TrainState init_train_state(const RunConfig& cfg) {
    TrainState st;
    st.cfg = cfg;
    Rng master(cfg.seed);
    Rng model_rng = master.split();
    Rng train_data_rng = master.split();
    Rng eval_data_rng = master.split();
    st.rng = master.split();

    st.model.cfg = cfg.model;
    st.model.init(model_rng);

    if (cfg.data.source == DataSource::Synthetic) {
        st.train_set = generate_samples(cfg.data.scene, cfg.data.train_count, train_data_rng);
        st.eval_set = generate_samples(cfg.data.scene, cfg.data.eval_count, eval_data_rng);
    } else {
        st.train_set = load_samples(cfg.data.root, cfg.data.train_split);
        st.eval_set = load_samples(cfg.data.root, cfg.data.eval_split);
    }
    if (st.train_set.size() == 0) throw ConfigError("training set is empty");

    st.ce_weights = class_weights(label_frequencies(st.train_set, cfg.model.num_classes));
    st.max_iter = resolve_max_iter(cfg.train, st.train_set.size());

    st.opt.mode = cfg.train.optimizer;
    st.opt.weight_decay = cfg.train.weight_decay;
    st.opt.attach(st.model.params());
    return st;
}

struct StepResult {
    double loss = 0.0;
    double lr = 0.0;
};

inline StepResult train_step(TrainState& st) {
    const std::size_t bsz = st.cfg.train.batch_size;
    const AugmentPolicy policy = st.cfg.train.augment.policy();

    std::vector<SamplePair> batch;
    batch.reserve(bsz);
    for (std::size_t b = 0; b < bsz; ++b) {
        const std::size_t idx = st.rng.next_below(st.train_set.size());
        Rng sample_rng = st.rng.split();
        batch.push_back(augment(st.train_set.samples[idx], sample_rng, policy));
        if (st.cfg.train.zero_thermal) batch.back().thermal.zero();
    }
    const std::size_t h = batch[0].labels.h, w = batch[0].labels.w;
    Tensor<float> rgb({bsz, 3, h, w}), thermal({bsz, 3, h, w});
    for (std::size_t b = 0; b < bsz; ++b) {
        if (batch[b].labels.h != h || batch[b].labels.w != w)
            throw ConfigError("train_step: batch samples must share one size (set augment.crop)");
        place_item(rgb, b, batch[b].rgb);
        place_item(thermal, b, batch[b].thermal);
    }

    st.model.zero_grad();
    Tensor<float> logits = st.model.forward(rgb, thermal, Mode::Train);
    Tensor<float> d_logits(logits.shape);
    double loss = 0;
    for (std::size_t b = 0; b < bsz; ++b) {
        Tensor<float> item = slice_item(logits, b);
        Tensor<float> d_item;
        loss += total_loss(item, batch[b].labels, st.ce_weights, &d_item);
        d_item *= static_cast<float>(1.0 / bsz);
        place_item(d_logits, b, d_item);
    }
    loss /= bsz;
    if (!std::isfinite(loss))
        throw NumericError("train_step: non-finite loss at step " + std::to_string(st.step));
    st.model.backward(d_logits);

    const double lr = poly_lr(st.step, st.max_iter, st.cfg.train.base_lr, st.cfg.train.power);
    try {
        st.opt.step(st.model.params(), lr);
    } catch (const NumericError& e) {
        throw NumericError(std::string(e.what()) + " at step " + std::to_string(st.step));
    }
    ++st.step;
    return {loss, lr};
}

// Argmax prediction for one sample (eval-mode normalization, no augmentation).
inline LabelMap predict_labels(SegModel<float>& model, const Tensor<float>& rgb,
                               const Tensor<float>& thermal) {
    Tensor<float> rgb_b({1, 3, rgb.dim(1), rgb.dim(2)});
    Tensor<float> th_b(rgb_b.shape);
    place_item(rgb_b, 0, rgb);
    place_item(th_b, 0, thermal);
    Tensor<float> logits = model.forward(rgb_b, th_b, Mode::Eval);
    const std::size_t k = logits.dim(1), h = logits.dim(2), w = logits.dim(3), hw = h * w;
    LabelMap pred(h, w);
    for (std::size_t p = 0; p < hw; ++p) {
        std::size_t best = 0;
        float best_v = logits.data[p];
        for (std::size_t c = 1; c < k; ++c)
            if (logits.data[c * hw + p] > best_v) {
                best_v = logits.data[c * hw + p];
                best = c;
            }
        pred.v[p] = static_cast<std::uint8_t>(best);
    }
    return pred;
}

inline IouResult evaluate_model(SegModel<float>& model, const SampleSet& set, bool zero_thermal = false) {
    if (set.size() == 0) throw ConfigError("evaluate_model: empty dataset");
    ConfusionMatrix cm(model.cfg.num_classes);
    for (const auto& s : set.samples) {
        Tensor<float> thermal = s.thermal;
        if (zero_thermal) thermal.zero();
        cm_update(cm, predict_labels(model, s.rgb, thermal), s.labels);
    }
    return iou_from_cm(cm);
}

// ---------------------------------------------------------------------------
// Checkpoint plumbing
// ---------------------------------------------------------------------------

inline Checkpoint checkpoint_from_state(TrainState& st) {
    Checkpoint ckpt;
    ckpt.step = st.step;
    ckpt.rng_seed = st.rng.seed();
    ckpt.rng_counter = st.rng.counter();
    ckpt.optimizer_t = st.opt.t;
    ckpt.config = config_to_json(st.cfg);
    const auto params = st.model.params();
    for (const auto* p : params) ckpt.tensors.emplace_back(p->name, p->value);
    for (const auto& [name, buf] : st.model.buffers()) ckpt.tensors.emplace_back(name, *buf);
    for (std::size_t i = 0; i < params.size(); ++i) {
        ckpt.tensors.emplace_back("opt.m." + params[i]->name, st.opt.m[i]);
        ckpt.tensors.emplace_back("opt.v." + params[i]->name, st.opt.v[i]);
        if (st.opt.mode == OptimizerMode::AdamLookahead)
            ckpt.tensors.emplace_back("opt.slow." + params[i]->name, st.opt.slow[i]);
    }
    return ckpt;
}

inline void load_params_from_checkpoint(SegModel<float>& model, const Checkpoint& ckpt) {
    for (auto* p : model.params()) {
        const Tensor<float>* t = ckpt.find(p->name);
        if (!t) throw ConfigError("checkpoint is missing tensor '" + p->name + "'");
        if (t->shape != p->value.shape)
            throw ConfigError("checkpoint tensor '" + p->name + "' has shape " + shape_str(t->shape) +
                              ", model expects " + shape_str(p->value.shape));
        p->value = *t;
    }
    for (auto& [name, buf] : model.buffers()) {
        const Tensor<float>* t = ckpt.find(name);
        if (!t) throw ConfigError("checkpoint is missing buffer '" + name + "'");
        if (t->shape != buf->shape)
            throw ConfigError("checkpoint buffer '" + name + "' shape mismatch");
        *buf = *t;
    }
}

inline TrainState state_from_checkpoint(const Checkpoint& ckpt) {
    TrainState st = init_train_state(config_from_json(ckpt.config));
    load_params_from_checkpoint(st.model, ckpt);
    const auto params = st.model.params();
    for (std::size_t i = 0; i < params.size(); ++i) {
        if (const Tensor<float>* m = ckpt.find("opt.m." + params[i]->name)) st.opt.m[i] = *m;
        if (const Tensor<float>* v = ckpt.find("opt.v." + params[i]->name)) st.opt.v[i] = *v;
        if (st.opt.mode == OptimizerMode::AdamLookahead)
            if (const Tensor<float>* s = ckpt.find("opt.slow." + params[i]->name)) st.opt.slow[i] = *s;
    }
    st.opt.t = ckpt.optimizer_t;
    st.step = ckpt.step;
    st.rng = Rng(ckpt.rng_seed, ckpt.rng_counter);
    return st;
}

// ---------------------------------------------------------------------------
// Full training run with JSON-lines metrics and periodic checkpoints.
// ---------------------------------------------------------------------------

struct TrainOutcome {
    double final_loss = 0.0;
    double train_miou = 0.0;
    double eval_miou = 0.0;
    std::string checkpoint_path;
};

inline Json iou_to_json(const IouResult& iou) {
    Json per = Json::array();
    for (std::size_t c = 0; c < iou.per_class.size(); ++c)
        per.push_back(iou.valid[c] ? Json(iou.per_class[c]) : Json(nullptr));
    return Json{{"per_class_iou", per}, {"miou", iou.miou}};
}

inline TrainOutcome run_training(TrainState& st, const std::function<void(const Json&)>& on_metrics = {}) {
    namespace fs = std::filesystem;
    const fs::path out_dir(st.cfg.output_dir);
    std::error_code ec;
    fs::create_directories(out_dir, ec);
    if (ec) throw IoError("cannot create output dir: " + out_dir.string());

    {
        std::ofstream cfg_out(out_dir / "config.resolved.json");
        RunConfig resolved = st.cfg;
        resolved.train.max_iter = st.max_iter;
        resolved.train.epochs = 0;
        cfg_out << config_to_json(resolved).dump(2) << "\n";
    }
    std::ofstream metrics(out_dir / "metrics.jsonl", std::ios::app);
    auto emit = [&](const Json& j) {
        metrics << j.dump() << "\n";
        if (on_metrics) on_metrics(j);
    };

    TrainOutcome outcome;
    while (st.step < st.max_iter) {
        const StepResult res = train_step(st);
        outcome.final_loss = res.loss;
        emit({{"step", st.step}, {"lr", res.lr}, {"loss", res.loss}});
        const bool at_end = st.step == st.max_iter;
        if (st.cfg.train.eval_every && st.step % st.cfg.train.eval_every == 0 && !at_end) {
            const IouResult iou = evaluate_model(st.model, st.eval_set, st.cfg.train.zero_thermal);
            Json j = iou_to_json(iou);
            j["step"] = st.step;
            j["split"] = "eval";
            emit(j);
        }
        if (st.cfg.train.checkpoint_every && st.step % st.cfg.train.checkpoint_every == 0 && !at_end) {
            save_checkpoint((out_dir / ("ckpt_step" + std::to_string(st.step) + ".cmss")).string(),
                            checkpoint_from_state(st));
        }
    }

    const IouResult train_iou = evaluate_model(st.model, st.train_set, st.cfg.train.zero_thermal);
    outcome.train_miou = train_iou.miou;
    Json jt = iou_to_json(train_iou);
    jt["step"] = st.step;
    jt["split"] = "train";
    emit(jt);
    if (st.eval_set.size() > 0) {
        const IouResult eval_iou = evaluate_model(st.model, st.eval_set, st.cfg.train.zero_thermal);
        outcome.eval_miou = eval_iou.miou;
        Json je = iou_to_json(eval_iou);
        je["step"] = st.step;
        je["split"] = "eval";
        emit(je);
    }
    outcome.checkpoint_path = (out_dir / "checkpoint.cmss").string();
    save_checkpoint(outcome.checkpoint_path, checkpoint_from_state(st));
    return outcome;
}

}  // namespace cmscan
