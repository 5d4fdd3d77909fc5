// Named parameter registry. Modules register their tensors here in
// construction order, which fixes the optimizer update order, the
// checkpoint layout and the global-norm reduction order.
#pragma once

#include <cmath>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "aunet/rng.hpp"
#include "aunet/tensor.hpp"

namespace aunet {

template <typename T>
struct ParamStore {
    std::vector<std::pair<std::string, Tensor<T>>> params;   // trainable
    std::vector<std::pair<std::string, Tensor<T>>> buffers;  // running stats etc.

    Tensor<T> add_param(const std::string& name, Tensor<T> t) {
        t.set_requires_grad(true);
        params.emplace_back(name, t);
        return t;
    }

    Tensor<T> add_buffer(const std::string& name, Tensor<T> t) {
        buffers.emplace_back(name, t);
        return t;
    }

    Tensor<T>* find(const std::string& name) {
        for (auto& [n, t] : params)
            if (n == name) return &t;
        for (auto& [n, t] : buffers)
            if (n == name) return &t;
        return nullptr;
    }

    int64_t param_count() const {
        int64_t n = 0;
        for (const auto& [name, t] : params) n += t.numel();
        return n;
    }

    void zero_grads() {
        for (auto& [name, t] : params) t.zero_grad();
    }

    // detects NaN/inf gradients before an optimizer step
    bool grads_finite() const {
        for (const auto& [name, t] : params) {
            if (!t.has_grad()) continue;
            for (T g : t.grad())
                if (!std::isfinite(double(g))) return false;
        }
        return true;
    }
};

// He-style initialization for layers feeding rectifier-family activations.
template <typename T>
std::vector<T> normal_init(int64_t n, int64_t fan_in, Rng& rng, double gain = 2.0) {
    const double stddev = std::sqrt(gain / static_cast<double>(fan_in));
    std::vector<T> v(static_cast<size_t>(n));
    for (T& x : v) x = static_cast<T>(rng.normal(0.0, stddev));
    return v;
}

}  // namespace aunet
