#pragma once

#include <random>
#include <string>

#include "msmg/graph.hpp"
#include "msmg/ops.hpp"
#include "msmg/params.hpp"

// Thin layer wrappers: each owns ParamStore handles and a forward() that
// records onto a Graph. Construction registers parameters under a dotted
// name path and He-initializes weights.

namespace msmg {

template <class T>
struct Conv2dLayer {
    ParamStore<T>* store = nullptr;
    int w = -1, b = -1;
    std::size_t stride = 1, padding = 0, groups = 1;

    Conv2dLayer() = default;
    Conv2dLayer(ParamStore<T>& ps, std::mt19937_64& rng, const std::string& name,
                std::size_t in_ch, std::size_t out_ch, std::size_t kernel,
                std::size_t stride_ = 1, std::size_t padding_ = 0, std::size_t groups_ = 1,
                bool bias = true)
        : store(&ps), stride(stride_), padding(padding_), groups(groups_) {
        const std::size_t fan_in = (in_ch / groups_) * kernel * kernel;
        w = ps.add(name + ".weight",
                   he_normal<T>({out_ch, in_ch / groups_, kernel, kernel}, fan_in, rng));
        if (bias) b = ps.add(name + ".bias", Tensor<T>::zeros({out_ch}));
    }

    int forward(Graph<T>& g, int x) const {
        return ops::conv2d(g, x, g.param(*store, w), b >= 0 ? g.param(*store, b) : -1,
                           stride, padding, groups);
    }
};

template <class T>
struct LinearLayer {
    ParamStore<T>* store = nullptr;
    int w = -1, b = -1;

    LinearLayer() = default;
    LinearLayer(ParamStore<T>& ps, std::mt19937_64& rng, const std::string& name,
                std::size_t in_dim, std::size_t out_dim, bool bias = true)
        : store(&ps) {
        w = ps.add(name + ".weight", he_normal<T>({in_dim, out_dim}, in_dim, rng));
        if (bias) b = ps.add(name + ".bias", Tensor<T>::zeros({out_dim}));
    }

    int forward(Graph<T>& g, int x) const {
        return ops::linear(g, x, g.param(*store, w), b >= 0 ? g.param(*store, b) : -1);
    }
};

template <class T>
struct LayerNormLayer {
    ParamStore<T>* store = nullptr;
    int gain = -1, shift = -1;

    LayerNormLayer() = default;
    LayerNormLayer(ParamStore<T>& ps, const std::string& name, std::size_t dim)
        : store(&ps) {
        gain = ps.add(name + ".gain", Tensor<T>::full({dim}, T(1)));
        shift = ps.add(name + ".shift", Tensor<T>::zeros({dim}));
    }

    int forward(Graph<T>& g, int x) const {
        return ops::layer_norm(g, x, g.param(*store, gain), g.param(*store, shift));
    }
};

template <class T>
struct BatchNorm2dLayer {
    ParamStore<T>* store = nullptr;
    int gamma = -1, beta = -1;
    int running_mean = -1, running_var = -1;  // non-trainable entries

    BatchNorm2dLayer() = default;
    BatchNorm2dLayer(ParamStore<T>& ps, const std::string& name, std::size_t channels)
        : store(&ps) {
        gamma = ps.add(name + ".gamma", Tensor<T>::full({channels}, T(1)));
        beta = ps.add(name + ".beta", Tensor<T>::zeros({channels}));
        running_mean = ps.add(name + ".running_mean", Tensor<T>::zeros({channels}), false);
        running_var = ps.add(name + ".running_var", Tensor<T>::full({channels}, T(1)), false);
    }

    int forward(Graph<T>& g, int x, bool training) const {
        return ops::batch_norm2d(g, x, g.param(*store, gamma), g.param(*store, beta),
                                 store->value(running_mean), store->value(running_var),
                                 training);
    }
};

}  // namespace msmg
