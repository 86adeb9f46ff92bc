#pragma once

#include <functional>
#include <random>
#include <vector>

#include "msmg/gradcheck.hpp"
#include "msmg/graph.hpp"
#include "msmg/ops.hpp"

// Test-side harness: checks d(proj·f(x))/dx for a graph-building function
// against central finite differences, with a fixed random projection making
// the loss scalar. Independent of any model code.

using GraphBuilder =
    std::function<int(msmg::Graph<double>&, const std::vector<int>& input_ids)>;

inline double graph_gradcheck(const GraphBuilder& build,
                              std::vector<msmg::Tensor<double>> inputs,
                              std::mt19937_64& rng, double eps = 1e-5,
                              std::size_t max_coords = 64) {
    namespace ops = msmg::ops;
    // Fixed projection vector, drawn once.
    msmg::Tensor<double> proj;
    auto run = [&](bool want_grads, std::vector<msmg::Tensor<double>>* grads) {
        msmg::Graph<double> g;
        std::vector<int> ids;
        for (auto& in : inputs) ids.push_back(g.leaf(in, true));
        int out = build(g, ids);
        if (proj.size() == 0) {
            std::uniform_real_distribution<double> d(-1.0, 1.0);
            proj = msmg::Tensor<double>(g.value(out).shape);
            for (auto& v : proj.data) v = d(rng);
        }
        int loss = ops::sum_all(g, ops::mul(g, out, g.leaf(proj, false)));
        if (want_grads) {
            g.backward(loss);
            grads->clear();
            for (int id : ids) grads->push_back(g.grad(id));
        }
        return g.value(loss)[0];
    };

    std::vector<msmg::Tensor<double>> analytic;
    run(true, &analytic);

    std::vector<std::pair<msmg::Tensor<double>*, const msmg::Tensor<double>*>> checks;
    for (std::size_t i = 0; i < inputs.size(); ++i)
        checks.emplace_back(&inputs[i], &analytic[i]);
    auto loss_fn = [&]() { return run(false, nullptr); };
    return msmg::finite_diff_check<double>(loss_fn, checks, eps, max_coords, rng);
}

// Finite-difference check of d(loss)/d(params) for a model-owned store.
// `build` records a fresh forward pass and returns the scalar loss node.
template <class Builder>
double param_gradcheck(msmg::ParamStore<double>& store, Builder&& build,
                       const std::vector<int>& param_indices, std::mt19937_64& rng,
                       double eps = 1e-5, std::size_t max_coords = 8) {
    store.zero_grad();
    double loss0;
    {
        msmg::Graph<double> g;
        int loss = build(g);
        g.backward(loss);
        loss0 = g.value(loss)[0];
    }
    (void)loss0;
    std::vector<msmg::Tensor<double>> analytic;
    std::vector<std::pair<msmg::Tensor<double>*, const msmg::Tensor<double>*>> checks;
    analytic.reserve(param_indices.size());
    for (int pi : param_indices) analytic.push_back(store.grad(pi));
    for (std::size_t i = 0; i < param_indices.size(); ++i)
        checks.emplace_back(&store.value(param_indices[i]), &analytic[i]);
    auto loss_fn = [&]() {
        msmg::Graph<double> g;
        return g.value(build(g))[0];
    };
    return msmg::finite_diff_check<double>(loss_fn, checks, eps, max_coords, rng);
}

inline msmg::Tensor<double> random_tensor(std::vector<std::size_t> shape,
                                          std::mt19937_64& rng, double lo = -1.0,
                                          double hi = 1.0) {
    std::uniform_real_distribution<double> d(lo, hi);
    msmg::Tensor<double> t(std::move(shape));
    for (auto& v : t.data) v = d(rng);
    return t;
}
