#pragma once

#include <string>
#include <utility>
#include <vector>

#include "mamlab/rng.hpp"
#include "mamlab/tensor.hpp"

namespace mamlab {

struct NamedParameter {
    std::string name;
    Tensor tensor;
    bool decay = true; // AdamW weight decay applies
};

// Ordered registry of named trainable tensors. Order is creation order and is what the
// checkpoint writer and the optimizer iterate over.
class ParameterSet {
public:
    Tensor add(std::string name, Tensor tensor, bool decay = true) {
        for (const auto& p : items_) {
            if (p.name == name) throw ContractError("duplicate parameter name: " + name);
        }
        tensor.set_requires_grad(true);
        items_.push_back({std::move(name), std::move(tensor), decay});
        return items_.back().tensor;
    }

    const std::vector<NamedParameter>& items() const { return items_; }
    std::vector<NamedParameter>& items() { return items_; }
    std::size_t size() const { return items_.size(); }

    const NamedParameter* find(const std::string& name) const {
        for (const auto& p : items_) {
            if (p.name == name) return &p;
        }
        return nullptr;
    }

    NamedParameter* find(const std::string& name) {
        for (auto& p : items_) {
            if (p.name == name) return &p;
        }
        return nullptr;
    }

    // Parameters whose name starts with `prefix`.
    std::vector<NamedParameter*> with_prefix(const std::string& prefix) {
        std::vector<NamedParameter*> out;
        for (auto& p : items_) {
            if (p.name.compare(0, prefix.size(), prefix) == 0) out.push_back(&p);
        }
        return out;
    }

    void zero_grad() {
        for (auto& p : items_) p.tensor.zero_grad();
    }

    std::size_t scalar_count() const {
        std::size_t n = 0;
        for (const auto& p : items_) n += p.tensor.numel();
        return n;
    }

private:
    std::vector<NamedParameter> items_;
};

inline Tensor truncated_normal_tensor(Shape shape, double stddev, Rng& rng) {
    std::vector<double> v(shape_numel(shape));
    for (double& x : v) x = rng.truncated_normal(stddev);
    return Tensor::from(std::move(shape), std::move(v));
}

inline Tensor normal_tensor(Shape shape, double stddev, Rng& rng) {
    std::vector<double> v(shape_numel(shape));
    for (double& x : v) x = rng.normal(0.0, stddev);
    return Tensor::from(std::move(shape), std::move(v));
}

} // namespace mamlab
