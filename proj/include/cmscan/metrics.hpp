#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "cmscan/errors.hpp"
#include "cmscan/tensor.hpp"

namespace cmscan {

// K x K pixel counts; rows = ground truth, columns = prediction.
struct ConfusionMatrix {
    std::size_t k = 0;
    std::vector<std::uint64_t> counts;

    explicit ConfusionMatrix(std::size_t num_classes = 0) : k(num_classes), counts(num_classes * num_classes, 0) {}

    std::uint64_t& at(std::size_t gt, std::size_t pred) { return counts[gt * k + pred]; }
    std::uint64_t at(std::size_t gt, std::size_t pred) const { return counts[gt * k + pred]; }

    std::uint64_t total() const {
        std::uint64_t s = 0;
        for (auto c : counts) s += c;
        return s;
    }
};

inline void cm_update(ConfusionMatrix& cm, const LabelMap& pred, const LabelMap& gt) {
    if (pred.h != gt.h || pred.w != gt.w)
        throw ShapeError("cm_update: prediction and ground truth sizes differ");
    for (std::size_t i = 0; i < gt.numel(); ++i) {
        const std::uint8_t g = gt.v[i];
        if (g == kIgnoreLabel) continue;
        const std::uint8_t p = pred.v[i];
        if (g >= cm.k) throw ConfigError("cm_update: ground-truth label out of range");
        if (p >= cm.k) throw ConfigError("cm_update: predicted label out of range");
        ++cm.at(g, p);
    }
}

struct IouResult {
    std::vector<double> per_class;  // NaN for excluded classes
    std::vector<bool> valid;
    double miou = 0.0;
};

// IoU_c = TP / (TP + FP + FN); classes with an empty denominator are
// excluded from the mean.
inline IouResult iou_from_cm(const ConfusionMatrix& cm) {
    IouResult res;
    res.per_class.assign(cm.k, std::nan(""));
    res.valid.assign(cm.k, false);
    double sum = 0;
    std::size_t n = 0;
    for (std::size_t c = 0; c < cm.k; ++c) {
        const std::uint64_t tp = cm.at(c, c);
        std::uint64_t fp = 0, fn = 0;
        for (std::size_t o = 0; o < cm.k; ++o) {
            if (o != c) {
                fp += cm.at(o, c);
                fn += cm.at(c, o);
            }
        }
        const std::uint64_t denom = tp + fp + fn;
        if (denom == 0) continue;
        res.per_class[c] = static_cast<double>(tp) / static_cast<double>(denom);
        res.valid[c] = true;
        sum += res.per_class[c];
        ++n;
    }
    if (n == 0) throw NumericError("iou_from_cm: every class has an empty denominator");
    res.miou = sum / static_cast<double>(n);
    return res;
}

// w_c = 1 / ln(1.02 + p_c) over training-set pixel frequencies.
template <typename T>
Tensor<T> class_weights(const Tensor<T>& freqs) {
    Tensor<T> w(freqs.shape);
    for (std::size_t i = 0; i < freqs.numel(); ++i)
        w.data[i] = static_cast<T>(1.0 / std::log(1.02 + double(freqs.data[i])));
    return w;
}

}  // namespace cmscan
