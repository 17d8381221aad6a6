#pragma once

#include <cmath>
#include <vector>

#include "cmscan/errors.hpp"
#include "cmscan/tensor.hpp"

namespace cmscan {

template <typename T>
Tensor<T> softmax_channels(const Tensor<T>& logits) {
    // [K,H,W] -> per-pixel softmax over K
    const std::size_t k = logits.dim(0), hw = logits.dim(1) * logits.dim(2);
    Tensor<T> p(logits.shape);
    for (std::size_t i = 0; i < hw; ++i) {
        T mx = logits.data[i];
        for (std::size_t c = 1; c < k; ++c) mx = std::max(mx, logits.data[c * hw + i]);
        T z = 0;
        for (std::size_t c = 0; c < k; ++c) {
            const T e = std::exp(logits.data[c * hw + i] - mx);
            p.data[c * hw + i] = e;
            z += e;
        }
        for (std::size_t c = 0; c < k; ++c) p.data[c * hw + i] /= z;
    }
    return p;
}

// Mean over scored pixels of w[gt] * (-log softmax[gt]), normalized by the
// summed weights of those pixels.
template <typename T>
T weighted_cross_entropy(const Tensor<T>& logits, const LabelMap& gt, const Tensor<T>& weights,
                         Tensor<T>* d_logits = nullptr) {
    const std::size_t k = logits.dim(0), hw = logits.dim(1) * logits.dim(2);
    if (gt.numel() != hw) throw ShapeError("weighted_cross_entropy: label map size mismatch");
    if (weights.numel() != k) throw ShapeError("weighted_cross_entropy: weights must have K entries");
    for (T wv : weights.data)
        if (!(wv > T(0))) throw ConfigError("weighted_cross_entropy: weights must be positive");

    Tensor<T> probs = softmax_channels(logits);
    double loss = 0, weight_sum = 0;
    for (std::size_t i = 0; i < hw; ++i) {
        const std::uint8_t g = gt.v[i];
        if (g == kIgnoreLabel) continue;
        if (g >= k) throw ConfigError("weighted_cross_entropy: label out of range");
        const double wv = weights.data[g];
        loss += wv * -std::log(std::max(double(probs.data[g * hw + i]), 1e-300));
        weight_sum += wv;
    }
    if (weight_sum == 0) throw NumericError("weighted_cross_entropy: every pixel is ignored");
    if (d_logits) {
        *d_logits = Tensor<T>(logits.shape);
        for (std::size_t i = 0; i < hw; ++i) {
            const std::uint8_t g = gt.v[i];
            if (g == kIgnoreLabel) continue;
            const T scale = static_cast<T>(weights.data[g] / weight_sum);
            for (std::size_t c = 0; c < k; ++c)
                d_logits->data[c * hw + i] =
                    scale * (probs.data[c * hw + i] - (c == g ? T(1) : T(0)));
        }
    }
    return static_cast<T>(loss / weight_sum);
}

// 1 - mean over classes of (2*sum(p*g)+eps) / (sum(p)+sum(g)+eps), ignored
// pixels excluded from every sum. Gradient is w.r.t. the probabilities.
template <typename T>
T dice_loss(const Tensor<T>& probs, const LabelMap& gt, double eps = 1.0, Tensor<T>* d_probs = nullptr) {
    const std::size_t k = probs.dim(0), hw = probs.dim(1) * probs.dim(2);
    if (gt.numel() != hw) throw ShapeError("dice_loss: label map size mismatch");

    std::vector<double> sum_p(k, 0), sum_g(k, 0), sum_pg(k, 0);
    for (std::size_t i = 0; i < hw; ++i) {
        const std::uint8_t g = gt.v[i];
        if (g == kIgnoreLabel) continue;
        for (std::size_t c = 0; c < k; ++c) {
            const double p = probs.data[c * hw + i];
            sum_p[c] += p;
            if (c == g) {
                sum_g[c] += 1;
                sum_pg[c] += p;
            }
        }
    }
    double dice_total = 0;
    std::vector<double> num(k), den(k);
    for (std::size_t c = 0; c < k; ++c) {
        num[c] = 2 * sum_pg[c] + eps;
        den[c] = sum_p[c] + sum_g[c] + eps;
        dice_total += num[c] / den[c];
    }
    if (d_probs) {
        *d_probs = Tensor<T>(probs.shape);
        for (std::size_t i = 0; i < hw; ++i) {
            const std::uint8_t g = gt.v[i];
            if (g == kIgnoreLabel) continue;
            for (std::size_t c = 0; c < k; ++c) {
                const double gval = (c == g) ? 1.0 : 0.0;
                const double d_dice = (2 * gval * den[c] - num[c]) / (den[c] * den[c]);
                d_probs->data[c * hw + i] = static_cast<T>(-d_dice / k);
            }
        }
    }
    return static_cast<T>(1.0 - dice_total / k);
}

// Eq-style combined objective: cross-entropy plus dice, coefficients 1 and 1.
template <typename T>
T total_loss(const Tensor<T>& logits, const LabelMap& gt, const Tensor<T>& weights,
             Tensor<T>* d_logits = nullptr) {
    Tensor<T> d_ce;
    const T ce = weighted_cross_entropy(logits, gt, weights, d_logits ? &d_ce : nullptr);

    Tensor<T> probs = softmax_channels(logits);
    Tensor<T> d_probs;
    const T dice = dice_loss(probs, gt, 1.0, d_logits ? &d_probs : nullptr);

    if (d_logits) {
        // chain the dice gradient through the softmax
        const std::size_t k = logits.dim(0), hw = logits.dim(1) * logits.dim(2);
        *d_logits = d_ce;
        for (std::size_t i = 0; i < hw; ++i) {
            if (gt.v[i] == kIgnoreLabel) continue;
            double dot = 0;
            for (std::size_t c = 0; c < k; ++c) dot += double(d_probs.data[c * hw + i]) * probs.data[c * hw + i];
            for (std::size_t c = 0; c < k; ++c)
                d_logits->data[c * hw + i] += static_cast<T>(
                    probs.data[c * hw + i] * (double(d_probs.data[c * hw + i]) - dot));
        }
    }
    return ce + dice;
}

}  // namespace cmscan
