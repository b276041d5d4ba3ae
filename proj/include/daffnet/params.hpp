#pragma once

// Named, ordered collection of learnable tensors. Registration order is the
// serialization and optimizer-iteration order, so it must be deterministic.

#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "daffnet/rng.hpp"
#include "daffnet/tensor.hpp"

namespace daffnet {

template <class T>
struct ParamSetT {
    std::vector<std::pair<std::string, TensorT<T>>> items;
    std::unordered_map<std::string, std::size_t> index;

    TensorT<T>& add(const std::string& name, TensorT<T> t) {
        if (index.count(name)) throw graph_error("parameter registered twice: " + name);
        t.set_requires_grad(true);
        index.emplace(name, items.size());
        items.emplace_back(name, std::move(t));
        return items.back().second;
    }

    TensorT<T>& at(const std::string& name) {
        auto it = index.find(name);
        if (it == index.end()) throw graph_error("unknown parameter: " + name);
        return items[it->second].second;
    }

    std::size_t tensor_count() const { return items.size(); }
    std::size_t scalar_count() const {
        std::size_t n = 0;
        for (const auto& [name, t] : items) n += t.numel();
        return n;
    }
    void zero_grad() {
        for (auto& [name, t] : items) t.zero_grad();
    }
};

using ParamSet = ParamSetT<float>;

template <class T>
TensorT<T> normal_init(Shape shape, Rng& rng, double stddev = 0.02) {
    return TensorT<T>::from(shape, rng.normal_vec<T>(shape_numel(shape), 0.0, stddev));
}

}  // namespace daffnet
