#pragma once

#include <cmath>
#include <functional>
#include <random>
#include <utility>
#include <vector>

#include "msmg/tensor.hpp"

namespace msmg {

// Central finite differences against analytic gradients.
//
// `loss_fn` recomputes the scalar loss from current tensor values, so the
// caller mutates the checked tensors in place. `checks` pairs each tensor
// with its previously computed analytic gradient. Coordinates are sampled
// uniformly (all of them if max_coords covers the tensor).
//
// Returns the worst relative error, |a - n| / max(|a|, |n|, 1e-8).
//
// Coordinates whose analytic and numeric derivatives both sit below the
// resolution of central differencing (rounding of the loss divided by the
// step) carry no signal — e.g. structurally zero gradients — and count as
// exact agreement.
template <class T>
double finite_diff_check(const std::function<double()>& loss_fn,
                         std::vector<std::pair<Tensor<T>*, const Tensor<T>*>> checks,
                         double eps, std::size_t max_coords_per_tensor,
                         std::mt19937_64& rng) {
    double worst = 0.0;
    for (auto& [tensor, analytic] : checks) {
        if (tensor->size() != analytic->size())
            throw ShapeError("finite_diff_check: gradient shape mismatch");
        std::vector<std::size_t> coords;
        if (tensor->size() <= max_coords_per_tensor) {
            coords.resize(tensor->size());
            for (std::size_t i = 0; i < coords.size(); ++i) coords[i] = i;
        } else {
            std::uniform_int_distribution<std::size_t> pick(0, tensor->size() - 1);
            for (std::size_t i = 0; i < max_coords_per_tensor; ++i)
                coords.push_back(pick(rng));
        }
        for (std::size_t ci : coords) {
            const T saved = (*tensor)[ci];
            (*tensor)[ci] = saved + static_cast<T>(eps);
            const double fp = loss_fn();
            (*tensor)[ci] = saved - static_cast<T>(eps);
            const double fm = loss_fn();
            (*tensor)[ci] = saved;
            const double numeric = (fp - fm) / (2.0 * eps);
            const double a = static_cast<double>((*analytic)[ci]);
            const double noise_floor =
                100.0 * 2.22e-16 * std::max({std::abs(fp), std::abs(fm), 1.0}) / eps;
            if (std::abs(a) <= noise_floor && std::abs(numeric) <= noise_floor) continue;
            const double denom = std::max({std::abs(a), std::abs(numeric), 1e-8});
            worst = std::max(worst, std::abs(a - numeric) / denom);
        }
    }
    return worst;
}

}  // namespace msmg
