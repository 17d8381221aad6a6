#pragma once

#include <chrono>
#include <cmath>
#include <cstdint>
#include <functional>
#include <sstream>
#include <string>
#include <vector>

#include "cmscan/fusion.hpp"
#include "cmscan/log.hpp"

namespace cmscan {

// ---------------------------------------------------------------------------
// Analytic FLOPs / parameter counting.
//
// Conventions (all counts are conventions, chosen to be comparable, not
// "true" costs):
//   linear / conv    2 * MACs, bias adds not counted; bias IS in params
//   batchnorm        2 flops per element
//   layernorm        8 flops per element
//   relu             1 flop per element; silu 7; softplus 9; exp 4
//   bilinear         8 flops per output element
//   scan             J*C*(11N + 2) per direction (6N discretize,
//                    3N state update, 2N readout, 2 skip), J = 2*H*W
//   merge            8 flops per output element (4 directions, 2 modalities)
// ---------------------------------------------------------------------------

struct FlopsEntry {
    std::string name;
    std::uint64_t flops = 0;
    std::uint64_t params = 0;
};

struct FlopsReport {
    std::vector<FlopsEntry> entries;

    std::uint64_t total_flops() const {
        std::uint64_t s = 0;
        for (const auto& e : entries) s += e.flops;
        return s;
    }
    std::uint64_t total_params() const {
        std::uint64_t s = 0;
        for (const auto& e : entries) s += e.params;
        return s;
    }

    std::string table() const {
        std::size_t name_w = 5;
        for (const auto& e : entries) name_w = std::max(name_w, e.name.size());
        std::ostringstream os;
        char line[256];
        std::snprintf(line, sizeof(line), "%-*s %16s %12s\n", int(name_w), "layer", "flops", "params");
        os << line;
        for (const auto& e : entries) {
            std::snprintf(line, sizeof(line), "%-*s %16llu %12llu\n", int(name_w), e.name.c_str(),
                          static_cast<unsigned long long>(e.flops),
                          static_cast<unsigned long long>(e.params));
            os << line;
        }
        std::snprintf(line, sizeof(line), "%-*s %16llu %12llu\n", int(name_w), "total",
                      static_cast<unsigned long long>(total_flops()),
                      static_cast<unsigned long long>(total_params()));
        os << line;
        return os.str();
    }
};

namespace flops {

inline std::uint64_t linear(std::uint64_t l, std::uint64_t cin, std::uint64_t cout) {
    return 2 * l * cin * cout;
}
inline std::uint64_t linear_params(std::uint64_t cin, std::uint64_t cout) { return cin * cout + cout; }
inline std::uint64_t conv(std::uint64_t k, std::uint64_t cin_per_group, std::uint64_t cout,
                          std::uint64_t out_hw) {
    return 2 * k * k * cin_per_group * cout * out_hw;
}
inline std::uint64_t conv_params(std::uint64_t k, std::uint64_t cin_per_group, std::uint64_t cout) {
    return k * k * cin_per_group * cout + cout;
}
inline std::uint64_t scan_direction(std::uint64_t hw, std::uint64_t c, std::uint64_t n) {
    return 2 * hw * c * (11 * n + 2);
}

constexpr std::uint64_t kRelu = 1, kSilu = 7, kSoftplus = 9, kBatchNorm = 2, kLayerNorm = 8,
                        kBilinear = 8;

}  // namespace flops

inline FlopsReport count_flops(const ModelConfig& cfg, std::size_t height, std::size_t width) {
    if (height % 32 != 0 || width % 32 != 0)
        throw ConfigError("count_flops: input size must be divisible by 32");
    FlopsReport rep;
    auto add = [&](const std::string& name, std::uint64_t f, std::uint64_t p) {
        rep.entries.push_back({name, f, p});
    };

    const auto& ch = cfg.stage_channels;

    // two encoders
    for (const char* enc : {"enc_rgb", "enc_th"}) {
        struct Step {
            std::uint64_t cin, cout, out_hw;
        };
        std::vector<Step> steps = {
            {3, ch[0], (height / 2) * (width / 2)},
            {ch[0], ch[0], (height / 4) * (width / 4)},
            {ch[0], ch[0], (height / 4) * (width / 4)},
            {ch[0], ch[1], (height / 8) * (width / 8)},
            {ch[1], ch[1], (height / 8) * (width / 8)},
            {ch[1], ch[2], (height / 16) * (width / 16)},
            {ch[2], ch[2], (height / 16) * (width / 16)},
            {ch[2], ch[3], (height / 32) * (width / 32)},
            {ch[3], ch[3], (height / 32) * (width / 32)},
        };
        std::uint64_t f = 0, p = 0;
        for (const auto& s : steps) {
            f += flops::conv(3, s.cin, s.cout, s.out_hw);
            f += (flops::kBatchNorm + flops::kRelu) * s.cout * s.out_hw;
            p += flops::conv_params(3, s.cin, s.cout) + 2 * s.cout;
        }
        add(enc, f, p);
    }

    // fusion stage per scale
    for (std::size_t i = 0; i < 4; ++i) {
        const std::uint64_t c = ch[i];
        const std::uint64_t hw = (height / ModelConfig::stage_strides[i]) *
                                 (width / ModelConfig::stage_strides[i]);
        const std::string name = "fuse" + std::to_string(i + 1);
        if (cfg.fusion_mode == FusionMode::Addition) {
            add(name, hw * c, 0);
            continue;
        }
        const std::uint64_t ce = cfg.expand_factor * c;
        const std::uint64_t n = cfg.ssm.state_dim;
        const std::uint64_t d_rank = cfg.ssm.resolved_dt_rank(ce);
        const std::uint64_t j = 2 * hw;
        std::uint64_t f = 0, p = 0;
        // global branch input: in_proj + depthwise + silu (both modalities)
        f += 2 * (flops::linear(hw, c, ce) + flops::conv(3, 1, ce, hw) + flops::kSilu * ce * hw);
        p += 2 * (flops::linear_params(c, ce) + flops::conv_params(3, 1, ce));
        if (cfg.fusion_mode == FusionMode::CmSsa) {
            // per direction: projections + recurrence
            std::uint64_t scan_f = 0, scan_p = 0;
            for (int d = 0; d < 4; ++d) {
                scan_f += flops::linear(j, ce, n) * 2;                      // B and C
                scan_f += flops::linear(j, ce, d_rank) + flops::linear(j, d_rank, ce) +
                          flops::kSoftplus * j * ce;                        // delta
                scan_f += flops::scan_direction(hw, ce, n);
                scan_p += 2 * n * ce + d_rank * ce + ce * d_rank + ce;      // w_b, w_c, dt maps, dt_bias
                scan_p += ce * n + ce;                                      // a_log, skip
            }
            scan_f += 8 * hw * ce;  // merge
            f += scan_f;
            p += scan_p;
        }
        // gated residual (both modalities)
        f += 2 * (flops::kLayerNorm * ce * hw + flops::linear(hw, c, ce) + flops::kSilu * ce * hw +
                  ce * hw /* gate mix */ + flops::linear(hw, ce, c) + c * hw /* residual */);
        p += 2 * (2 * ce + flops::linear_params(c, ce) + flops::linear_params(ce, c));
        // local and fuse CBRs
        f += flops::conv(3, 2 * c, c, hw) + (flops::kBatchNorm + flops::kRelu) * c * hw;
        p += flops::conv_params(3, 2 * c, c) + 2 * c;
        f += flops::conv(1, 3 * c, c, hw) + (flops::kBatchNorm + flops::kRelu) * c * hw;
        p += flops::conv_params(1, 3 * c, c) + 2 * c;
        add(name, f, p);
    }

    // decoder
    {
        const std::uint64_t hidden = cfg.decoder_hidden;
        const std::uint64_t hw4 = (height / 4) * (width / 4);
        std::uint64_t f = 0, p = 0;
        for (std::size_t i = 0; i < 4; ++i) {
            const std::uint64_t hw = (height / ModelConfig::stage_strides[i]) *
                                     (width / ModelConfig::stage_strides[i]);
            f += flops::linear(hw, ch[i], hidden);
            p += flops::linear_params(ch[i], hidden);
            if (i > 0) f += flops::kBilinear * hidden * hw4;
        }
        f += flops::linear(hw4, 4 * hidden, hidden) + flops::kRelu * hidden * hw4;
        p += flops::linear_params(4 * hidden, hidden);
        f += flops::linear(hw4, hidden, cfg.num_classes);
        p += flops::linear_params(hidden, cfg.num_classes);
        f += flops::kBilinear * cfg.num_classes * height * width;
        add("decoder", f, p);
    }
    return rep;
}

template <typename T>
std::size_t params_count(SegModel<T>& model) {
    return total_param_count(model.params());
}

// ---------------------------------------------------------------------------
// Quadratic baseline: plain cross-attention, forward only, size-guarded.
// ---------------------------------------------------------------------------

template <typename T>
struct NaiveCrossAttention {
    Tensor<T> wq, wk, wv;  // [C,C]

    void init(std::size_t c, Rng& rng) {
        wq = Tensor<T>({c, c});
        wk = Tensor<T>({c, c});
        wv = Tensor<T>({c, c});
        kaiming_uniform(wq, c, 1.0, rng);
        kaiming_uniform(wk, c, 1.0, rng);
        kaiming_uniform(wv, c, 1.0, rng);
    }

    // softmax(Q_R K_T^T / sqrt(C)) V_T over flattened pixels
    Tensor<T> forward(const Tensor<T>& f_r, const Tensor<T>& f_t) const {
        f_r.require_same_shape(f_t, "naive_cross_attention");
        const std::size_t c = f_r.dim(0), h = f_r.dim(1), w = f_r.dim(2), hw = h * w;
        if (hw > (std::size_t{1} << 14))
            throw ConfigError("naive_cross_attention: refusing H*W > 2^14 (quadratic baseline)");

        auto tokens = [&](const Tensor<T>& x) {
            Tensor<T> t({hw, c});
            for (std::size_t ci = 0; ci < c; ++ci)
                for (std::size_t p = 0; p < hw; ++p) t.data[p * c + ci] = x.data[ci * hw + p];
            return t;
        };
        const Tensor<T> q = linear(tokens(f_r), wq);
        const Tensor<T> k = linear(tokens(f_t), wk);
        const Tensor<T> v = linear(tokens(f_t), wv);

        Tensor<T> out({c, h, w});
        const T inv_sqrt_c = static_cast<T>(1.0 / std::sqrt(double(c)));
        parallel_for(hw, [&](std::size_t p0, std::size_t p1) {
            std::vector<T> scores(hw);
            for (std::size_t p = p0; p < p1; ++p) {
                const T* qp = q.ptr() + p * c;
                T mx = -std::numeric_limits<T>::infinity();
                for (std::size_t o = 0; o < hw; ++o) {
                    const T* kp = k.ptr() + o * c;
                    T dot = 0;
                    for (std::size_t ci = 0; ci < c; ++ci) dot += qp[ci] * kp[ci];
                    scores[o] = dot * inv_sqrt_c;
                    mx = std::max(mx, scores[o]);
                }
                T z = 0;
                for (std::size_t o = 0; o < hw; ++o) {
                    scores[o] = std::exp(scores[o] - mx);
                    z += scores[o];
                }
                for (std::size_t ci = 0; ci < c; ++ci) {
                    T acc = 0;
                    for (std::size_t o = 0; o < hw; ++o) acc += scores[o] * v.data[o * c + ci];
                    out.data[ci * hw + p] = acc / z;
                }
            }
        });
        return out;
    }
};

// ---------------------------------------------------------------------------
// Runtime scaling measurement
// ---------------------------------------------------------------------------

struct ScalingReport {
    std::vector<std::size_t> sizes;        // H*W values actually measured
    std::vector<double> median_seconds;
    std::vector<std::size_t> dropped;      // below timer resolution
    double slope = 0.0;
    double intercept = 0.0;
};

inline double timer_resolution_estimate() {
    using clock = std::chrono::steady_clock;
    double best = 1e9;
    for (int i = 0; i < 64; ++i) {
        auto a = clock::now();
        auto b = clock::now();
        while (b == a) b = clock::now();
        best = std::min(best, std::chrono::duration<double>(b - a).count());
    }
    return best;
}

inline ScalingReport measure_runtime_scaling(const std::function<void(std::size_t)>& op,
                                             const std::vector<std::size_t>& sizes, std::size_t reps) {
    if (sizes.size() < 4) throw ConfigError("measure_runtime_scaling: need at least 4 sizes");
    for (std::size_t i = 1; i < sizes.size(); ++i)
        if (sizes[i] <= sizes[i - 1])
            throw ConfigError("measure_runtime_scaling: sizes must be strictly increasing");
    if (reps < 5) throw ConfigError("measure_runtime_scaling: need at least 5 repetitions");

    using clock = std::chrono::steady_clock;
    const double resolution = timer_resolution_estimate();
    // spin briefly so frequency scaling settles before the smallest sizes
    {
        volatile double sink = 0;
        const auto t0 = clock::now();
        while (std::chrono::duration<double>(clock::now() - t0).count() < 0.05) sink = sink + 1.0;
    }
    ScalingReport rep;
    // warmup pass (excluded), then repetitions interleaved across sizes so
    // slow host drift (thermal, frequency) does not correlate with size
    for (std::size_t hw : sizes) op(hw);
    std::vector<std::vector<double>> times(sizes.size());
    for (std::size_t r = 0; r < reps; ++r) {
        for (std::size_t i = 0; i < sizes.size(); ++i) {
            const auto t0 = clock::now();
            op(sizes[i]);
            const auto t1 = clock::now();
            times[i].push_back(std::chrono::duration<double>(t1 - t0).count());
        }
    }
    for (std::size_t i = 0; i < sizes.size(); ++i) {
        std::sort(times[i].begin(), times[i].end());
        const double median = times[i][times[i].size() / 2];
        if (median < 100.0 * resolution) {
            log::warn("scaling: size %zu dropped (median %.3g s below timer resolution)", sizes[i], median);
            rep.dropped.push_back(sizes[i]);
            continue;
        }
        rep.sizes.push_back(sizes[i]);
        rep.median_seconds.push_back(median);
    }
    if (rep.sizes.size() < 2)
        throw NumericError("measure_runtime_scaling: not enough measurable sizes");

    // least squares on (log size, log time)
    const std::size_t n = rep.sizes.size();
    double sx = 0, sy = 0, sxx = 0, sxy = 0;
    for (std::size_t i = 0; i < n; ++i) {
        const double x = std::log(static_cast<double>(rep.sizes[i]));
        const double y = std::log(rep.median_seconds[i]);
        sx += x;
        sy += y;
        sxx += x * x;
        sxy += x * y;
    }
    rep.slope = (n * sxy - sx * sy) / (n * sxx - sx * sx);
    rep.intercept = (sy - rep.slope * sx) / n;
    return rep;
}

}  // namespace cmscan
