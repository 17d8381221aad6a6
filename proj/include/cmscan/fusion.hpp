#pragma once

#include <array>
#include <string>
#include <vector>

#include "cmscan/layers.hpp"
#include "cmscan/scan.hpp"

namespace cmscan {

enum class GateMode { Mul, Add };
enum class FuseInputs { Gated, Raw };
enum class FusionMode { CmSsa, NoCmSs2d, Addition };

struct ModelConfig {
    std::array<std::size_t, 4> stage_channels{16, 32, 64, 128};
    std::size_t num_classes = 6;
    std::size_t decoder_hidden = 128;
    SsmConfig ssm;
    std::size_t expand_factor = 1;
    GateMode gate_mode = GateMode::Mul;
    FuseInputs fuse_inputs = FuseInputs::Gated;
    FusionMode fusion_mode = FusionMode::CmSsa;

    static constexpr std::array<std::size_t, 4> stage_strides{4, 8, 16, 32};
};

// ---------------------------------------------------------------------------
// Encoder: four conv stages at strides 4/8/16/32
// ---------------------------------------------------------------------------

template <typename T>
struct ConvBnRelu {
    Conv2dLayer<T> conv;
    BatchNorm2dLayer<T> bn;
    ActivationLayer<T> act;

    void init(const std::string& name, std::size_t cin, std::size_t cout, std::size_t k, ConvSpec cs,
              Rng& rng) {
        conv.init(name + ".conv", cin, cout, k, cs, rng);
        bn.init(name + ".bn", cout);
        act.kind = Activation::ReLU;
    }

    void collect(ParamRefs<T>& out) {
        conv.collect(out);
        bn.collect(out);
    }

    void collect_buffers(BufferRefs<T>& out) { bn.collect_buffers(out); }

    Tensor<T> forward(const Tensor<T>& x, Mode mode) { return act.forward(bn.forward(conv.forward(x), mode)); }
    Tensor<T> apply(const Tensor<T>& x, Mode mode) const { return act.apply(bn.apply(conv.apply(x), mode)); }
    Tensor<T> backward(const Tensor<T>& dy) { return conv.backward(bn.backward(act.backward(dy))); }
};

template <typename T>
struct Encoder {
    std::array<std::vector<ConvBnRelu<T>>, 4> stages;

    void init(const std::string& name, const ModelConfig& cfg, Rng& rng) {
        const auto& ch = cfg.stage_channels;
        // stage 1 reaches stride 4 through two stride-2 convs
        stages[0].resize(3);
        stages[0][0].init(name + ".s1.a", 3, ch[0], 3, {2, 1, 1}, rng);
        stages[0][1].init(name + ".s1.b", ch[0], ch[0], 3, {2, 1, 1}, rng);
        stages[0][2].init(name + ".s1.c", ch[0], ch[0], 3, {1, 1, 1}, rng);
        for (std::size_t s = 1; s < 4; ++s) {
            stages[s].resize(2);
            stages[s][0].init(name + ".s" + std::to_string(s + 1) + ".a", ch[s - 1], ch[s], 3, {2, 1, 1},
                              rng);
            stages[s][1].init(name + ".s" + std::to_string(s + 1) + ".b", ch[s], ch[s], 3, {1, 1, 1}, rng);
        }
    }

    void collect(ParamRefs<T>& out) {
        for (auto& st : stages)
            for (auto& l : st) l.collect(out);
    }

    void collect_buffers(BufferRefs<T>& out) {
        for (auto& st : stages)
            for (auto& l : st) l.collect_buffers(out);
    }

    std::array<Tensor<T>, 4> forward(const Tensor<T>& x, Mode mode) {
        if (x.dim(2) % 32 != 0 || x.dim(3) % 32 != 0)
            throw ConfigError("encoder: input H and W must be divisible by 32, got " + shape_str(x.shape));
        std::array<Tensor<T>, 4> feats;
        Tensor<T> cur = x;
        for (std::size_t s = 0; s < 4; ++s) {
            for (auto& l : stages[s]) cur = l.forward(cur, mode);
            feats[s] = cur;
        }
        return feats;
    }

    // d_feats[i] is the gradient flowing into stage i's output from the
    // fusion stage; deeper stages chain additional gradient into it.
    Tensor<T> backward(const std::array<Tensor<T>, 4>& d_feats) {
        Tensor<T> grad = d_feats[3];
        for (std::size_t s = 4; s-- > 0;) {
            if (s < 3) grad += d_feats[s];
            std::vector<ConvBnRelu<T>>& st = stages[s];
            for (std::size_t l = st.size(); l-- > 0;) grad = st[l].backward(grad);
        }
        return grad;
    }
};

// ---------------------------------------------------------------------------
// CM-SSA fusion block for one stage
// ---------------------------------------------------------------------------

template <typename T>
struct CmSsaBlock {
    std::size_t width = 0;     // stage channels C
    std::size_t expanded = 0;  // C_e
    GateMode gate_mode = GateMode::Mul;
    FuseInputs fuse_inputs = FuseInputs::Gated;
    bool scan_enabled = true;  // false reproduces the "without global branch" ablation
    SsmConfig ssm;

    PointwiseLinear<T> in_proj_r, in_proj_t;
    Conv2dLayer<T> dw_r, dw_t;
    ActivationLayer<T> act_r, act_t;
    SsmDirectionArray<T> scan;
    ChannelLayerNorm<T> ln_r, ln_t;
    PointwiseLinear<T> out_proj_r, out_proj_t;
    PointwiseLinear<T> gate_r, gate_t;
    ActivationLayer<T> gate_act_r, gate_act_t;
    Conv2dLayer<T> local_conv;
    BatchNorm2dLayer<T> local_bn;
    ActivationLayer<T> local_act;
    Conv2dLayer<T> fuse_conv;
    BatchNorm2dLayer<T> fuse_bn;
    ActivationLayer<T> fuse_act;

    // recorded forward
    Tensor<T> saved_r, saved_t, saved_ln_r, saved_ln_t, saved_gate_sr, saved_gate_st;
    std::vector<CmSs2dSaved<T>> scan_saved;

    void init(const std::string& name, std::size_t c, const ModelConfig& cfg, Rng& rng) {
        width = c;
        expanded = cfg.expand_factor * c;
        gate_mode = cfg.gate_mode;
        fuse_inputs = cfg.fuse_inputs;
        scan_enabled = cfg.fusion_mode != FusionMode::NoCmSs2d;
        ssm = cfg.ssm;

        in_proj_r.init(name + ".in_proj_r", c, expanded, rng);
        in_proj_t.init(name + ".in_proj_t", c, expanded, rng);
        dw_r.init(name + ".dw_r", expanded, expanded, 3, {1, 1, expanded}, rng, 1.0);
        dw_t.init(name + ".dw_t", expanded, expanded, 3, {1, 1, expanded}, rng, 1.0);
        act_r.kind = act_t.kind = Activation::SiLU;
        const std::size_t d_rank = ssm.resolved_dt_rank(expanded);
        for (std::size_t d = 0; d < 4; ++d)
            scan[d].init(name + ".scan.dir" + std::to_string(d), expanded, ssm.state_dim, d_rank, rng);
        ln_r.init(name + ".ln_r", expanded);
        ln_t.init(name + ".ln_t", expanded);
        out_proj_r.init(name + ".out_proj_r", expanded, c, rng);
        out_proj_t.init(name + ".out_proj_t", expanded, c, rng);
        gate_r.init(name + ".gate_r", c, expanded, rng);
        gate_t.init(name + ".gate_t", c, expanded, rng);
        gate_act_r.kind = gate_act_t.kind = Activation::SiLU;
        local_conv.init(name + ".local_conv", 2 * c, c, 3, {1, 1, 1}, rng);
        local_bn.init(name + ".local_bn", c);
        local_act.kind = Activation::ReLU;
        fuse_conv.init(name + ".fuse_conv", 3 * c, c, 1, {1, 0, 1}, rng);
        fuse_bn.init(name + ".fuse_bn", c);
        fuse_act.kind = Activation::ReLU;
    }

    void collect(ParamRefs<T>& out) {
        in_proj_r.collect(out);
        in_proj_t.collect(out);
        dw_r.collect(out);
        dw_t.collect(out);
        for (auto& d : scan) d.collect(out);
        ln_r.collect(out);
        ln_t.collect(out);
        out_proj_r.collect(out);
        out_proj_t.collect(out);
        gate_r.collect(out);
        gate_t.collect(out);
        local_conv.collect(out);
        local_bn.collect(out);
        fuse_conv.collect(out);
        fuse_bn.collect(out);
    }

    void collect_buffers(BufferRefs<T>& out) {
        local_bn.collect_buffers(out);
        fuse_bn.collect_buffers(out);
    }

    std::pair<Tensor<T>, Tensor<T>> run_scan(const Tensor<T>& f_r, const Tensor<T>& f_t, bool record) {
        const std::size_t bsz = f_r.dim(0);
        Tensor<T> out_r(f_r.shape), out_t(f_t.shape);
        if (record) scan_saved.assign(bsz, CmSs2dSaved<T>{});
        for (std::size_t bi = 0; bi < bsz; ++bi) {
            auto [r, t] = cm_ss2d_forward(slice_item(f_r, bi), slice_item(f_t, bi), scan, ssm,
                                          record ? &scan_saved[bi] : nullptr);
            place_item(out_r, bi, r);
            place_item(out_t, bi, t);
        }
        return {std::move(out_r), std::move(out_t)};
    }

    std::pair<Tensor<T>, Tensor<T>> forward(const Tensor<T>& r_in, const Tensor<T>& t_in, Mode mode,
                                            Tensor<T>& fused_out, bool record = true) {
        r_in.require_same_shape(t_in, "cm_ssa_forward");
        saved_r = r_in;
        saved_t = t_in;

        // Eq-style global branch: project, depthwise conv, SiLU, scan.
        Tensor<T> f_r = act_r.forward(dw_r.forward(in_proj_r.forward(r_in)));
        Tensor<T> f_t = act_t.forward(dw_t.forward(in_proj_t.forward(t_in)));
        auto [s_r, s_t] = scan_enabled ? run_scan(f_r, f_t, record) : std::pair<Tensor<T>, Tensor<T>>{f_r, f_t};

        saved_ln_r = ln_r.forward(s_r);
        saved_ln_t = ln_t.forward(s_t);
        saved_gate_sr = gate_act_r.forward(gate_r.forward(r_in));
        saved_gate_st = gate_act_t.forward(gate_t.forward(t_in));

        Tensor<T> mixed_r(saved_ln_r.shape), mixed_t(saved_ln_t.shape);
        for (std::size_t i = 0; i < mixed_r.numel(); ++i) {
            if (gate_mode == GateMode::Mul) {
                mixed_r.data[i] = saved_ln_r.data[i] * saved_gate_sr.data[i];
                mixed_t.data[i] = saved_ln_t.data[i] * saved_gate_st.data[i];
            } else {
                mixed_r.data[i] = saved_ln_r.data[i] + saved_gate_sr.data[i];
                mixed_t.data[i] = saved_ln_t.data[i] + saved_gate_st.data[i];
            }
        }
        Tensor<T> g_r = out_proj_r.forward(mixed_r);
        g_r += r_in;
        Tensor<T> g_t = out_proj_t.forward(mixed_t);
        g_t += t_in;

        Tensor<T> local_in = concat_channels<T>({&r_in, &t_in});
        Tensor<T> local = local_act.forward(local_bn.forward(local_conv.forward(local_in), mode));

        Tensor<T> fuse_in = fuse_inputs == FuseInputs::Gated
                                ? concat_channels<T>({&g_r, &g_t, &local})
                                : concat_channels<T>({&r_in, &t_in, &local});
        fused_out = fuse_act.forward(fuse_bn.forward(fuse_conv.forward(fuse_in), mode));
        return {std::move(g_r), std::move(g_t)};
    }

    std::pair<Tensor<T>, Tensor<T>> backward(const Tensor<T>& d_fused) {
        const std::size_t c = width;
        Tensor<T> d_fuse_in = fuse_conv.backward(fuse_bn.backward(fuse_act.backward(d_fused)));
        Tensor<T> d_first = slice_channels(d_fuse_in, 0, c);
        Tensor<T> d_second = slice_channels(d_fuse_in, c, c);
        Tensor<T> d_local = slice_channels(d_fuse_in, 2 * c, c);

        Tensor<T> d_local_in = local_conv.backward(local_bn.backward(local_act.backward(d_local)));
        Tensor<T> d_r = slice_channels(d_local_in, 0, c);
        Tensor<T> d_t = slice_channels(d_local_in, c, c);

        if (fuse_inputs == FuseInputs::Raw) {
            d_r += d_first;
            d_t += d_second;
            return {std::move(d_r), std::move(d_t)};
        }

        // gated branch: d_first/d_second are dG_R/dG_T
        d_r += d_first;  // residual
        d_t += d_second;
        Tensor<T> d_mixed_r = out_proj_r.backward(d_first);
        Tensor<T> d_mixed_t = out_proj_t.backward(d_second);

        Tensor<T> d_ln_r(d_mixed_r.shape), d_gate_sr(d_mixed_r.shape);
        Tensor<T> d_ln_t(d_mixed_t.shape), d_gate_st(d_mixed_t.shape);
        for (std::size_t i = 0; i < d_mixed_r.numel(); ++i) {
            if (gate_mode == GateMode::Mul) {
                d_ln_r.data[i] = d_mixed_r.data[i] * saved_gate_sr.data[i];
                d_gate_sr.data[i] = d_mixed_r.data[i] * saved_ln_r.data[i];
                d_ln_t.data[i] = d_mixed_t.data[i] * saved_gate_st.data[i];
                d_gate_st.data[i] = d_mixed_t.data[i] * saved_ln_t.data[i];
            } else {
                d_ln_r.data[i] = d_mixed_r.data[i];
                d_gate_sr.data[i] = d_mixed_r.data[i];
                d_ln_t.data[i] = d_mixed_t.data[i];
                d_gate_st.data[i] = d_mixed_t.data[i];
            }
        }
        d_r += gate_r.backward(gate_act_r.backward(d_gate_sr));
        d_t += gate_t.backward(gate_act_t.backward(d_gate_st));

        Tensor<T> d_scan_r = ln_r.backward(d_ln_r);
        Tensor<T> d_scan_t = ln_t.backward(d_ln_t);

        Tensor<T> d_f_r, d_f_t;
        if (scan_enabled) {
            const std::size_t bsz = d_scan_r.dim(0);
            d_f_r = Tensor<T>(d_scan_r.shape);
            d_f_t = Tensor<T>(d_scan_t.shape);
            for (std::size_t bi = 0; bi < bsz; ++bi) {
                auto [dr, dt] = cm_ss2d_backward(scan_saved[bi], scan, slice_item(d_scan_r, bi),
                                                 slice_item(d_scan_t, bi));
                place_item(d_f_r, bi, dr);
                place_item(d_f_t, bi, dt);
            }
        } else {
            d_f_r = std::move(d_scan_r);
            d_f_t = std::move(d_scan_t);
        }

        d_r += in_proj_r.backward(dw_r.backward(act_r.backward(d_f_r)));
        d_t += in_proj_t.backward(dw_t.backward(act_t.backward(d_f_t)));
        return {std::move(d_r), std::move(d_t)};
    }
};

// ---------------------------------------------------------------------------
// MLP decoder: per-stage projection to a shared width, upsample to the
// stride-4 grid, fuse, classify, upsample to full resolution.
// ---------------------------------------------------------------------------

template <typename T>
struct MlpDecoder {
    std::array<PointwiseLinear<T>, 4> proj;
    std::array<UpsampleLayer<T>, 4> up;
    PointwiseLinear<T> fuse;
    ActivationLayer<T> act;
    PointwiseLinear<T> head;
    UpsampleLayer<T> up_out;

    void init(const std::string& name, const ModelConfig& cfg, Rng& rng) {
        for (std::size_t i = 0; i < 4; ++i) {
            proj[i].init(name + ".proj" + std::to_string(i + 1), cfg.stage_channels[i], cfg.decoder_hidden,
                         rng);
            up[i].factor = std::size_t{1} << i;
        }
        fuse.init(name + ".fuse", 4 * cfg.decoder_hidden, cfg.decoder_hidden, rng, std::sqrt(2.0));
        act.kind = Activation::ReLU;
        head.init(name + ".head", cfg.decoder_hidden, cfg.num_classes, rng);
        up_out.factor = 4;
    }

    void collect(ParamRefs<T>& out) {
        for (auto& p : proj) p.collect(out);
        fuse.collect(out);
        head.collect(out);
    }

    Tensor<T> forward(const std::array<Tensor<T>, 4>& feats) {
        std::array<Tensor<T>, 4> lifted;
        for (std::size_t i = 0; i < 4; ++i) lifted[i] = up[i].forward(proj[i].forward(feats[i]));
        Tensor<T> cat = concat_channels<T>({&lifted[0], &lifted[1], &lifted[2], &lifted[3]});
        return up_out.forward(head.forward(act.forward(fuse.forward(cat))));
    }

    std::array<Tensor<T>, 4> backward(const Tensor<T>& d_logits) {
        Tensor<T> d = fuse.backward(act.backward(head.backward(up_out.backward(d_logits))));
        std::array<Tensor<T>, 4> d_feats;
        const std::size_t hidden = fuse.w.value.dim(1) / 4;
        for (std::size_t i = 0; i < 4; ++i) {
            Tensor<T> di = slice_channels(d, i * hidden, hidden);
            d_feats[i] = proj[i].backward(up[i].backward(di));
        }
        return d_feats;
    }
};

// ---------------------------------------------------------------------------
// Full segmenter
// ---------------------------------------------------------------------------

template <typename T>
struct SegModel {
    ModelConfig cfg;
    Encoder<T> enc_rgb, enc_th;
    std::array<CmSsaBlock<T>, 4> blocks;
    MlpDecoder<T> dec;

    void init(Rng& rng) {
        enc_rgb.init("enc_rgb", cfg, rng);
        enc_th.init("enc_th", cfg, rng);
        if (cfg.fusion_mode != FusionMode::Addition)
            for (std::size_t i = 0; i < 4; ++i)
                blocks[i].init("fuse" + std::to_string(i + 1), cfg.stage_channels[i], cfg, rng);
        dec.init("decoder", cfg, rng);
    }

    ParamRefs<T> params() {
        ParamRefs<T> out;
        enc_rgb.collect(out);
        enc_th.collect(out);
        if (cfg.fusion_mode != FusionMode::Addition)
            for (auto& b : blocks) b.collect(out);
        dec.collect(out);
        check_unique_names(out);
        return out;
    }

    BufferRefs<T> buffers() {
        BufferRefs<T> out;
        enc_rgb.collect_buffers(out);
        enc_th.collect_buffers(out);
        if (cfg.fusion_mode != FusionMode::Addition)
            for (auto& b : blocks) b.collect_buffers(out);
        return out;
    }

    void zero_grad() {
        for (auto* p : params()) p->zero_grad();
    }

    Tensor<T> forward(const Tensor<T>& rgb, const Tensor<T>& thermal, Mode mode) {
        auto feats_r = enc_rgb.forward(rgb, mode);
        auto feats_t = enc_th.forward(thermal, mode);
        std::array<Tensor<T>, 4> fused;
        for (std::size_t i = 0; i < 4; ++i) {
            if (cfg.fusion_mode == FusionMode::Addition) {
                fused[i] = feats_r[i];
                fused[i] += feats_t[i];
            } else {
                blocks[i].forward(feats_r[i], feats_t[i], mode, fused[i]);
            }
        }
        return dec.forward(fused);
    }

    std::pair<Tensor<T>, Tensor<T>> backward(const Tensor<T>& d_logits) {
        auto d_fused = dec.backward(d_logits);
        std::array<Tensor<T>, 4> d_r, d_t;
        for (std::size_t i = 0; i < 4; ++i) {
            if (cfg.fusion_mode == FusionMode::Addition) {
                d_r[i] = d_fused[i];
                d_t[i] = d_fused[i];
            } else {
                auto [dr, dt] = blocks[i].backward(d_fused[i]);
                d_r[i] = std::move(dr);
                d_t[i] = std::move(dt);
            }
        }
        Tensor<T> d_rgb = enc_rgb.backward(d_r);
        Tensor<T> d_th = enc_th.backward(d_t);
        return {std::move(d_rgb), std::move(d_th)};
    }
};

}  // namespace cmscan
