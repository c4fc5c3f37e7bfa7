#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "mlmlab/tensor.hpp"

namespace mlmlab {

// Ordered collection of named tensors. Names are unique; order is the
// flattening order.
struct NamedTensors {
    std::vector<std::pair<std::string, Tensor>> segments;

    bool has(std::string_view name) const {
        for (const auto& [n, t] : segments)
            if (n == name) return true;
        return false;
    }

    Tensor& get(std::string_view name) {
        for (auto& [n, t] : segments)
            if (n == name) return t;
        throw ArgumentError("no segment named '" + std::string(name) + "'");
    }

    const Tensor& get(std::string_view name) const {
        for (const auto& [n, t] : segments)
            if (n == name) return t;
        throw ArgumentError("no segment named '" + std::string(name) + "'");
    }

    void add(std::string name, Tensor t) {
        require(!has(name), "duplicate segment name '" + name + "'");
        segments.emplace_back(std::move(name), std::move(t));
    }

    int64_t total_size() const {
        int64_t n = 0;
        for (const auto& [name, t] : segments) n += t.size();
        return n;
    }

    std::vector<double> flatten() const {
        std::vector<double> out;
        out.reserve(static_cast<size_t>(total_size()));
        for (const auto& [name, t] : segments) out.insert(out.end(), t.v.begin(), t.v.end());
        return out;
    }

    void set_flat(const std::vector<double>& flat) {
        require(static_cast<int64_t>(flat.size()) == total_size(),
                "set_flat: length mismatch");
        size_t off = 0;
        for (auto& [name, t] : segments) {
            std::copy(flat.begin() + static_cast<ptrdiff_t>(off),
                      flat.begin() + static_cast<ptrdiff_t>(off + t.v.size()), t.v.begin());
            off += t.v.size();
        }
    }

    bool same_layout(const NamedTensors& o) const {
        if (segments.size() != o.segments.size()) return false;
        for (size_t i = 0; i < segments.size(); ++i) {
            if (segments[i].first != o.segments[i].first) return false;
            if (segments[i].second.shape != o.segments[i].second.shape) return false;
        }
        return true;
    }
};

// Model parameters: named segments plus the seed they were initialized from.
struct ParamStore : NamedTensors {
    uint64_t seed = 0;
};

// One tensor per parameter segment, shapes matching the ParamStore.
struct Gradients : NamedTensors {
    static Gradients zeros_like(const ParamStore& p) {
        Gradients g;
        g.segments.reserve(p.segments.size());
        for (const auto& [name, t] : p.segments) g.segments.emplace_back(name, Tensor::zeros(t.shape));
        return g;
    }

    double squared_norm() const {
        double s = 0.0;
        for (const auto& [name, t] : segments) s += mlmlab::squared_norm(t);
        return s;
    }
};

inline void axpy(double a, const Gradients& x, Gradients& y) {
    require(x.same_layout(y), "axpy: layout mismatch");
    for (size_t s = 0; s < x.segments.size(); ++s)
        for (size_t i = 0; i < x.segments[s].second.v.size(); ++i)
            y.segments[s].second.v[i] += a * x.segments[s].second.v[i];
}

}  // namespace mlmlab
