#pragma once

#include <cmath>
#include <string>
#include <unordered_set>
#include <vector>

#include "cmscan/errors.hpp"
#include "cmscan/rng.hpp"
#include "cmscan/tensor.hpp"

namespace cmscan {

// A learnable tensor paired with its gradient accumulator.
template <typename T>
struct Parameter {
    Tensor<T> value;
    Tensor<T> grad;
    std::string name;

    Parameter() = default;
    Parameter(std::string n, Tensor<T> v) : value(std::move(v)), name(std::move(n)) {
        grad = Tensor<T>::zeros(value.shape);
    }

    void zero_grad() { grad.zero(); }
    std::size_t numel() const { return value.numel(); }
};

template <typename T>
using ParamRefs = std::vector<Parameter<T>*>;

template <typename T>
inline void check_unique_names(const ParamRefs<T>& params) {
    std::unordered_set<std::string> seen;
    for (const auto* p : params)
        if (!seen.insert(p->name).second)
            throw ContractError("duplicate parameter name: " + p->name);
}

template <typename T>
inline std::size_t total_param_count(const ParamRefs<T>& params) {
    std::size_t n = 0;
    for (const auto* p : params) n += p->numel();
    return n;
}

// Kaiming-uniform fill: bound = gain * sqrt(3 / fan_in).
template <typename T>
inline void kaiming_uniform(Tensor<T>& t, std::size_t fan_in, double gain, Rng& rng) {
    const double bound = gain * std::sqrt(3.0 / static_cast<double>(fan_in ? fan_in : 1));
    for (auto& v : t.data) v = static_cast<T>(rng.uniform(-bound, bound));
}

}  // namespace cmscan
