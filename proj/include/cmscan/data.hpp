#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <string>
#include <vector>

#include "cmscan/errors.hpp"
#include "cmscan/rng.hpp"
#include "cmscan/tensor.hpp"

namespace cmscan {

// One aligned rgb/thermal/label triple. The thermal source is single-channel
// but stored replicated to 3 channels, matching the model input contract.
struct SamplePair {
    Tensor<float> rgb;      // [3,H,W] in [0,1]
    Tensor<float> thermal;  // [3,H,W] in [0,1]
    LabelMap labels;
};

struct SceneClass {
    std::array<double, 3> rgb{0.5, 0.5, 0.5};
    double thermal = 0.5;
};

// Synthetic benchmark scenes: random shapes whose classes are separable in
// RGB except for the ambiguous pairs, which share a color bit-for-bit and
// differ only in thermal level.
struct SceneSpec {
    std::size_t num_classes = 6;
    std::size_t height = 64, width = 64;
    std::size_t shapes_min = 4, shapes_max = 10;
    std::vector<SceneClass> classes;
    std::vector<std::array<std::size_t, 2>> ambiguous_pairs;
    double rgb_noise = 0.02;
    double thermal_noise = 0.02;
    // Per-scene uniform shift applied to every thermal level. A nonzero
    // jitter makes absolute temperature uninformative, so telling the
    // ambiguous classes apart requires comparing against the rest of the
    // scene rather than reading the pixel alone.
    double bg_thermal_jitter = 0.0;

    void validate() const {
        if (height % 32 != 0 || width % 32 != 0)
            throw ConfigError("scene: canvas must be divisible by 32");
        if (classes.size() != num_classes)
            throw ConfigError("scene: per-class appearance list must have num_classes entries");
        if (shapes_min > shapes_max) throw ConfigError("scene: shapes_min > shapes_max");
        for (const auto& pair : ambiguous_pairs) {
            if (pair[0] >= num_classes || pair[1] >= num_classes)
                throw ConfigError("scene: ambiguous pair class out of range");
            if (classes[pair[0]].rgb != classes[pair[1]].rgb)
                throw ConfigError("scene: ambiguous pair must share the rgb color exactly");
            if (std::abs(classes[pair[0]].thermal - classes[pair[1]].thermal) < 0.3)
                throw ConfigError("scene: ambiguous pair needs thermal separation >= 0.3");
        }
    }
};

// Default 6-class benchmark: background, two ambiguous pairs, one free class.
inline SceneSpec default_scene_spec(std::size_t hw = 64) {
    SceneSpec s;
    s.height = s.width = hw;
    s.classes = {
        {{0.45, 0.45, 0.45}, 0.50},  // background
        {{0.20, 0.60, 0.30}, 0.15},  // pair A, cold
        {{0.20, 0.60, 0.30}, 0.85},  // pair A, hot
        {{0.70, 0.35, 0.25}, 0.75},  // pair B, hot
        {{0.70, 0.35, 0.25}, 0.20},  // pair B, cold
        {{0.25, 0.35, 0.75}, 0.40},  // distinct class
    };
    s.ambiguous_pairs = {{1, 2}, {3, 4}};
    return s;
}

inline SamplePair generate_scene(const SceneSpec& spec, Rng& rng) {
    spec.validate();
    const std::size_t h = spec.height, w = spec.width;
    SamplePair out;
    out.labels = LabelMap(h, w, 0);
    const double thermal_shift =
        spec.bg_thermal_jitter > 0 ? rng.uniform(-spec.bg_thermal_jitter, spec.bg_thermal_jitter) : 0.0;

    const std::size_t count =
        spec.shapes_min + rng.next_below(spec.shapes_max - spec.shapes_min + 1);
    for (std::size_t s = 0; s < count; ++s) {
        const std::uint8_t cls = static_cast<std::uint8_t>(1 + rng.next_below(spec.num_classes - 1));
        const bool ellipse = rng.next_below(2) == 1;
        const double cy = rng.uniform(0.0, double(h));
        const double cx = rng.uniform(0.0, double(w));
        const double ry = rng.uniform(0.08, 0.3) * h;
        const double rx = rng.uniform(0.08, 0.3) * w;
        const std::size_t y0 = static_cast<std::size_t>(std::max(0.0, cy - ry));
        const std::size_t y1 = std::min<std::size_t>(h, static_cast<std::size_t>(std::max(0.0, cy + ry)) + 1);
        const std::size_t x0 = static_cast<std::size_t>(std::max(0.0, cx - rx));
        const std::size_t x1 = std::min<std::size_t>(w, static_cast<std::size_t>(std::max(0.0, cx + rx)) + 1);
        for (std::size_t y = y0; y < y1; ++y)
            for (std::size_t x = x0; x < x1; ++x) {
                if (ellipse) {
                    const double dy = (y + 0.5 - cy) / ry, dx = (x + 0.5 - cx) / rx;
                    if (dy * dy + dx * dx > 1.0) continue;
                }
                out.labels.at(y, x) = cls;  // later shapes occlude earlier ones
            }
    }

    out.rgb = Tensor<float>({3, h, w});
    out.thermal = Tensor<float>({3, h, w});
    for (std::size_t y = 0; y < h; ++y)
        for (std::size_t x = 0; x < w; ++x) {
            const SceneClass& c = spec.classes[out.labels.at(y, x)];
            for (std::size_t ch = 0; ch < 3; ++ch) {
                const double v = c.rgb[ch] + spec.rgb_noise * rng.normal();
                out.rgb.data[ch * h * w + y * w + x] =
                    static_cast<float>(std::clamp(v, 0.0, 1.0));
            }
            const double tv =
                std::clamp(c.thermal + thermal_shift + spec.thermal_noise * rng.normal(), 0.0, 1.0);
            for (std::size_t ch = 0; ch < 3; ++ch)
                out.thermal.data[ch * h * w + y * w + x] = static_cast<float>(tv);
        }
    return out;
}

// ---------------------------------------------------------------------------
// Augmentation: one geometric transform applied to rgb, thermal and labels
// alike (labels via nearest neighbor).
// ---------------------------------------------------------------------------

struct AugmentPolicy {
    std::size_t resize_h = 0, resize_w = 0;  // 0 = keep
    std::size_t crop_h = 0, crop_w = 0;      // 0 = keep
    double hflip_p = 0.5;
};

namespace detail {

inline Tensor<float> resize_bilinear_3(const Tensor<float>& x, std::size_t oh, std::size_t ow) {
    const std::size_t h = x.dim(1), w = x.dim(2);
    Tensor<float> y({3, oh, ow});
    for (std::size_t c = 0; c < 3; ++c)
        for (std::size_t dy = 0; dy < oh; ++dy) {
            double sy = (dy + 0.5) * h / oh - 0.5;
            sy = std::clamp(sy, 0.0, double(h - 1));
            const std::size_t y0 = static_cast<std::size_t>(sy);
            const std::size_t y1 = std::min(y0 + 1, h - 1);
            const double fy = sy - y0;
            for (std::size_t dx = 0; dx < ow; ++dx) {
                double sx = (dx + 0.5) * w / ow - 0.5;
                sx = std::clamp(sx, 0.0, double(w - 1));
                const std::size_t x0 = static_cast<std::size_t>(sx);
                const std::size_t x1 = std::min(x0 + 1, w - 1);
                const double fx = sx - x0;
                const double top = (1 - fx) * x.data[c * h * w + y0 * w + x0] + fx * x.data[c * h * w + y0 * w + x1];
                const double bot = (1 - fx) * x.data[c * h * w + y1 * w + x0] + fx * x.data[c * h * w + y1 * w + x1];
                y.data[c * oh * ow + dy * ow + dx] = static_cast<float>((1 - fy) * top + fy * bot);
            }
        }
    return y;
}

inline LabelMap resize_nearest(const LabelMap& m, std::size_t oh, std::size_t ow) {
    LabelMap out(oh, ow);
    for (std::size_t dy = 0; dy < oh; ++dy) {
        const std::size_t sy = std::min<std::size_t>(
            m.h - 1, static_cast<std::size_t>(std::max(0.0, std::round((dy + 0.5) * m.h / double(oh) - 0.5))));
        for (std::size_t dx = 0; dx < ow; ++dx) {
            const std::size_t sx = std::min<std::size_t>(
                m.w - 1,
                static_cast<std::size_t>(std::max(0.0, std::round((dx + 0.5) * m.w / double(ow) - 0.5))));
            out.at(dy, dx) = m.at(sy, sx);
        }
    }
    return out;
}

}  // namespace detail

inline SamplePair augment(const SamplePair& in, Rng& rng, const AugmentPolicy& policy) {
    SamplePair s = in;
    if (policy.resize_h && policy.resize_w &&
        (policy.resize_h != s.labels.h || policy.resize_w != s.labels.w)) {
        s.rgb = detail::resize_bilinear_3(s.rgb, policy.resize_h, policy.resize_w);
        s.thermal = detail::resize_bilinear_3(s.thermal, policy.resize_h, policy.resize_w);
        s.labels = detail::resize_nearest(s.labels, policy.resize_h, policy.resize_w);
    }
    const std::size_t h = s.labels.h, w = s.labels.w;
    const std::size_t ch = policy.crop_h ? policy.crop_h : h;
    const std::size_t cw = policy.crop_w ? policy.crop_w : w;
    if (ch > h || cw > w) throw ConfigError("augment: crop larger than image");
    if (ch != h || cw != w) {
        const std::size_t oy = rng.next_below(h - ch + 1);
        const std::size_t ox = rng.next_below(w - cw + 1);
        SamplePair cropped;
        cropped.rgb = Tensor<float>({3, ch, cw});
        cropped.thermal = Tensor<float>({3, ch, cw});
        cropped.labels = LabelMap(ch, cw);
        for (std::size_t c = 0; c < 3; ++c)
            for (std::size_t y = 0; y < ch; ++y)
                for (std::size_t x = 0; x < cw; ++x) {
                    cropped.rgb.data[c * ch * cw + y * cw + x] =
                        s.rgb.data[c * h * w + (y + oy) * w + (x + ox)];
                    cropped.thermal.data[c * ch * cw + y * cw + x] =
                        s.thermal.data[c * h * w + (y + oy) * w + (x + ox)];
                }
        for (std::size_t y = 0; y < ch; ++y)
            for (std::size_t x = 0; x < cw; ++x) cropped.labels.at(y, x) = s.labels.at(y + oy, x + ox);
        s = std::move(cropped);
    }
    if (rng.next_double() < policy.hflip_p) {
        const std::size_t hh = s.labels.h, ww = s.labels.w;
        for (std::size_t c = 0; c < 3; ++c)
            for (std::size_t y = 0; y < hh; ++y)
                for (std::size_t x = 0; x < ww / 2; ++x) {
                    std::swap(s.rgb.data[c * hh * ww + y * ww + x],
                              s.rgb.data[c * hh * ww + y * ww + (ww - 1 - x)]);
                    std::swap(s.thermal.data[c * hh * ww + y * ww + x],
                              s.thermal.data[c * hh * ww + y * ww + (ww - 1 - x)]);
                }
        for (std::size_t y = 0; y < hh; ++y)
            for (std::size_t x = 0; x < ww / 2; ++x)
                std::swap(s.labels.at(y, x), s.labels.at(y, ww - 1 - x));
    }
    return s;
}

}  // namespace cmscan
