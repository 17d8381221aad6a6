#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "cmscan/errors.hpp"
#include "cmscan/parameter.hpp"

namespace cmscan {

// base_lr * (1 - step/max_iter)^power
inline double poly_lr(std::size_t step, std::size_t max_iter, double base_lr, double power = 0.9) {
    if (max_iter == 0 || step > max_iter)
        throw ConfigError("poly_lr: need 0 <= step <= max_iter");
    return base_lr * std::pow(1.0 - static_cast<double>(step) / static_cast<double>(max_iter), power);
}

enum class OptimizerMode { Adam, AdamLookahead };

// Adam with decoupled weight decay; optional lookahead wrapper that pulls
// slow weights halfway to the fast weights every k steps.
template <typename T>
struct Optimizer {
    OptimizerMode mode = OptimizerMode::Adam;
    double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
    double weight_decay = 5e-4;
    std::size_t lookahead_k = 5;
    double lookahead_alpha = 0.5;

    std::size_t t = 0;
    std::vector<Tensor<T>> m, v, slow;

    void attach(const ParamRefs<T>& params) {
        m.clear();
        v.clear();
        slow.clear();
        for (const auto* p : params) {
            m.push_back(Tensor<T>::zeros(p->value.shape));
            v.push_back(Tensor<T>::zeros(p->value.shape));
            if (mode == OptimizerMode::AdamLookahead) slow.push_back(p->value);
        }
        t = 0;
    }

    void step(const ParamRefs<T>& params, double lr) {
        if (m.size() != params.size())
            throw ContractError("optimizer: attach() must be called before step()");
        ++t;
        const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(t));
        const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(t));
        for (std::size_t i = 0; i < params.size(); ++i) {
            Parameter<T>& p = *params[i];
            for (std::size_t j = 0; j < p.value.numel(); ++j) {
                const double g = p.grad.data[j];
                if (!std::isfinite(g))
                    throw NumericError("optimizer: non-finite gradient in " + p.name);
                const double mj = beta1 * m[i].data[j] + (1.0 - beta1) * g;
                const double vj = beta2 * v[i].data[j] + (1.0 - beta2) * g * g;
                m[i].data[j] = static_cast<T>(mj);
                v[i].data[j] = static_cast<T>(vj);
                const double update = (mj / bc1) / (std::sqrt(vj / bc2) + eps);
                p.value.data[j] -=
                    static_cast<T>(lr * update + lr * weight_decay * p.value.data[j]);
            }
        }
        if (mode == OptimizerMode::AdamLookahead && t % lookahead_k == 0) {
            for (std::size_t i = 0; i < params.size(); ++i) {
                Parameter<T>& p = *params[i];
                for (std::size_t j = 0; j < p.value.numel(); ++j) {
                    const double s =
                        slow[i].data[j] + lookahead_alpha * (p.value.data[j] - slow[i].data[j]);
                    slow[i].data[j] = static_cast<T>(s);
                    p.value.data[j] = static_cast<T>(s);
                }
            }
        }
    }
};

}  // namespace cmscan
