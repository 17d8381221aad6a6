#pragma once

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "cmscan/errors.hpp"
#include "cmscan/rng.hpp"
#include "cmscan/tensor.hpp"

namespace cmscan {

// One tensor under test: its value buffer (perturbed in place), the analytic
// gradient produced by the implementation, and optionally a coordinate
// subsample (empty = every coordinate).
struct GradCheckItem {
    std::string name;
    Tensor<double>* value = nullptr;
    const Tensor<double>* analytic = nullptr;
    std::vector<std::size_t> coords;
};

struct GradCheckReport {
    double max_rel_err = 0.0;
    std::string worst;  // "tensor[index]"
    bool finite = true;

    bool ok(double tol) const { return finite && max_rel_err < tol; }
};

// Central finite differences of a scalar-valued loss against recorded
// analytic gradients. rel err = |analytic - numeric| / max(|numeric|, 1e-8).
// abs_tol, when nonzero, accepts coordinates whose absolute disagreement is
// below it: FD on an O(1) loss cannot resolve differences under the
// double-precision noise floor, so near-zero gradients would otherwise fail
// the relative formula spuriously.
inline GradCheckReport grad_check_multi(const std::function<double()>& loss,
                                        std::vector<GradCheckItem> items,
                                        const std::vector<double>& deltas, double abs_tol = 0.0) {
    if (deltas.empty()) throw ContractError("grad_check: need at least one step size");
    GradCheckReport report;
    for (auto& item : items) {
        if (!item.value || !item.analytic)
            throw ContractError("grad_check: item '" + item.name + "' missing value or analytic grad");
        if (item.value->shape != item.analytic->shape)
            throw ShapeError("grad_check: '" + item.name + "' value/grad shape mismatch");
        std::vector<std::size_t> coords = item.coords;
        if (coords.empty()) {
            coords.resize(item.value->numel());
            for (std::size_t i = 0; i < coords.size(); ++i) coords[i] = i;
        }
        for (std::size_t i : coords) {
            const double analytic = item.analytic->data[i];
            // A coordinate is accepted at the best-agreeing step size;
            // truncation shrinks with delta while FD roundoff grows, so a
            // correct adjoint passes somewhere and a wrong one nowhere.
            double best_rel = std::numeric_limits<double>::infinity();
            for (double delta : deltas) {
                const double saved = item.value->data[i];
                item.value->data[i] = saved + delta;
                const double up = loss();
                item.value->data[i] = saved - delta;
                const double down = loss();
                item.value->data[i] = saved;
                const double numeric = (up - down) / (2.0 * delta);
                if (!std::isfinite(numeric) || !std::isfinite(analytic)) {
                    report.finite = false;
                    report.worst = item.name + "[" + std::to_string(i) + "]";
                    report.max_rel_err = std::numeric_limits<double>::infinity();
                    return report;
                }
                if (std::abs(analytic - numeric) <= abs_tol) {
                    best_rel = 0.0;
                    break;
                }
                best_rel = std::min(best_rel,
                                    std::abs(analytic - numeric) / std::max(std::abs(numeric), 1e-8));
            }
            if (best_rel > report.max_rel_err) {
                report.max_rel_err = best_rel;
                report.worst = item.name + "[" + std::to_string(i) + "]";
            }
        }
    }
    return report;
}

inline GradCheckReport grad_check(const std::function<double()>& loss, std::vector<GradCheckItem> items,
                                  double delta = 1e-5, double abs_tol = 0.0) {
    return grad_check_multi(loss, std::move(items), {delta}, abs_tol);
}

// Deterministic coordinate subsample for large tensors.
inline std::vector<std::size_t> sample_coords(std::size_t numel, std::size_t max_coords, Rng& rng) {
    std::vector<std::size_t> coords;
    if (numel <= max_coords) {
        coords.resize(numel);
        for (std::size_t i = 0; i < numel; ++i) coords[i] = i;
        return coords;
    }
    for (std::size_t i = 0; i < max_coords; ++i) coords.push_back(rng.next_below(numel));
    return coords;
}

}  // namespace cmscan
