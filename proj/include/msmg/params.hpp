#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <unordered_map>
#include <vector>

#include "msmg/error.hpp"
#include "msmg/tensor.hpp"

namespace msmg {

// Named parameter registry. Every learnable (and persistent non-learnable,
// e.g. batch-norm running statistics) tensor of a model lives here, with a
// gradient buffer of identical shape.
template <class T>
class ParamStore {
  public:
    struct Entry {
        std::string name;
        Tensor<T> value;
        Tensor<T> grad;
        bool trainable = true;
    };

    int add(std::string name, Tensor<T> init, bool trainable = true) {
        if (index_.count(name))
            throw ConfigError("duplicate parameter name: " + name);
        Entry e;
        e.grad = Tensor<T>::zeros(init.shape);
        e.value = std::move(init);
        e.name = std::move(name);
        e.trainable = trainable;
        index_[e.name] = static_cast<int>(entries_.size());
        entries_.push_back(std::move(e));
        return static_cast<int>(entries_.size()) - 1;
    }

    int find(const std::string& name) const {
        auto it = index_.find(name);
        return it == index_.end() ? -1 : it->second;
    }

    Entry& entry(int i) { return entries_.at(static_cast<std::size_t>(i)); }
    const Entry& entry(int i) const { return entries_.at(static_cast<std::size_t>(i)); }
    Tensor<T>& value(int i) { return entry(i).value; }
    const Tensor<T>& value(int i) const { return entry(i).value; }
    Tensor<T>& grad(int i) { return entry(i).grad; }
    const std::string& name(int i) const { return entry(i).name; }

    std::size_t size() const { return entries_.size(); }

    void zero_grad() {
        for (auto& e : entries_) e.grad.fill(T(0));
    }

  private:
    std::vector<Entry> entries_;
    std::unordered_map<std::string, int> index_;
};

// He-style normal initializer: stddev = sqrt(2 / fan_in).
template <class T>
Tensor<T> he_normal(std::vector<std::size_t> shape, std::size_t fan_in, std::mt19937_64& rng) {
    std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / static_cast<double>(fan_in)));
    Tensor<T> t(std::move(shape));
    for (auto& v : t.data) v = static_cast<T>(dist(rng));
    return t;
}

template <class T>
Tensor<T> uniform_init(std::vector<std::size_t> shape, double lo, double hi, std::mt19937_64& rng) {
    std::uniform_real_distribution<double> dist(lo, hi);
    Tensor<T> t(std::move(shape));
    for (auto& v : t.data) v = static_cast<T>(dist(rng));
    return t;
}

}  // namespace msmg
