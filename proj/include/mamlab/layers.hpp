#pragma once

#include <atomic>
#include <cmath>
#include <memory>
#include <string>
#include <vector>

#include <spdlog/spdlog.h>

#include "mamlab/ops.hpp"
#include "mamlab/params.hpp"
#include "mamlab/patching.hpp"

namespace mamlab {

struct Linear {
    Tensor weight; // in x out
    Tensor bias;   // out

    Linear() = default;
    Linear(ParameterSet& params, const std::string& name, std::size_t in, std::size_t out, Rng& rng, double init_std = 0.02)
        : weight(params.add(name + ".weight", truncated_normal_tensor({in, out}, init_std, rng))),
          bias(params.add(name + ".bias", Tensor::zeros({out}), false)) {}

    std::size_t in_dim() const { return weight.dim(0); }
    std::size_t out_dim() const { return weight.dim(1); }

    Tensor operator()(const Tensor& x) const {
        if (x.rank() != 2 || x.dim(1) != in_dim()) {
            throw DimensionError("linear: input " + shape_str(x.shape()) + " does not match weight " +
                                 shape_str(weight.shape()));
        }
        return add_row(matmul(x, weight), bias);
    }
};

struct LayerNorm {
    Tensor gain;
    Tensor bias;

    LayerNorm() = default;
    LayerNorm(ParameterSet& params, const std::string& name, std::size_t dim)
        : gain(params.add(name + ".gain", Tensor::filled({dim}, 1.0), false)),
          bias(params.add(name + ".bias", Tensor::zeros({dim}), false)) {}

    Tensor operator()(const Tensor& x) const { return layer_norm(x, gain, bias, 1e-5); }
};

// 1-D sin/cos table: first half sin(pos * w_i), second half cos(pos * w_i), w_i = 10000^(-i / (dim/2)).
inline std::vector<double> sincos_1d(std::size_t pos, std::size_t dim) {
    std::vector<double> out(dim);
    const std::size_t half = dim / 2;
    for (std::size_t i = 0; i < half; ++i) {
        const double omega = 1.0 / std::pow(10000.0, static_cast<double>(i) / static_cast<double>(half));
        out[i] = std::sin(static_cast<double>(pos) * omega);
        out[half + i] = std::cos(static_cast<double>(pos) * omega);
    }
    return out;
}

// Fixed 2-D table over the patch grid: first half of the width encodes the time index, second
// half the frequency index. Width must be divisible by 4.
inline Tensor sincos_position_table(const PatchGrid& grid, std::size_t dim) {
    if (dim % 4 != 0) throw ConfigError("position table width " + std::to_string(dim) + " must be divisible by 4");
    std::vector<double> table;
    table.reserve(grid.size() * dim);
    for (std::size_t i = 0; i < grid.size(); ++i) {
        const auto t = sincos_1d(grid.time_of(i), dim / 2);
        const auto f = sincos_1d(grid.freq_of(i), dim / 2);
        table.insert(table.end(), t.begin(), t.end());
        table.insert(table.end(), f.begin(), f.end());
    }
    return Tensor::matrix(grid.size(), dim, std::move(table));
}

// Tokens attend within contiguous windows of the flattened sequence. With offset s, token i sits
// in window ((i - s) mod N) / window, so boundaries move by s and the tail wraps to the front.
// Returns null (global attention) when one window spans the sequence.
inline AttentionMask local_attention_mask(std::size_t n, std::size_t window, std::size_t shift) {
    if (window == 0) throw ParameterError("attention window must be at least 1");
    if (window > n) {
        static std::atomic<bool> noted{false};
        if (!noted.exchange(true)) spdlog::info("local attention: window {} exceeds {} tokens, using global attention", window, n);
        return nullptr;
    }
    if (window == n && shift % n == 0) return nullptr;
    std::vector<std::size_t> group(n);
    const std::size_t s = shift % n;
    for (std::size_t i = 0; i < n; ++i) group[i] = ((i + n - s) % n) / window;
    auto mask = std::make_shared<std::vector<std::uint8_t>>(n * n);
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < n; ++j) (*mask)[i * n + j] = group[i] == group[j];
    }
    return mask;
}

struct SelfAttention {
    Linear q, k, v, proj;
    std::size_t heads = 1;

    SelfAttention() = default;
    SelfAttention(ParameterSet& params, const std::string& name, std::size_t dim, std::size_t heads_, Rng& rng,
                  double init_std)
        : q(params, name + ".q", dim, dim, rng, init_std),
          k(params, name + ".k", dim, dim, rng, init_std),
          v(params, name + ".v", dim, dim, rng, init_std),
          proj(params, name + ".proj", dim, dim, rng, init_std),
          heads(heads_) {}

    Tensor operator()(const Tensor& x, const AttentionMask& mask = nullptr) const {
        return proj(attention(q(x), k(x), v(x), heads, mask));
    }
};

// Windowed self-attention sublayer (projections + attention + output projection).
inline Tensor shifted_local_attention(const Tensor& tokens, std::size_t window, std::size_t shift, const SelfAttention& attn) {
    return attn(tokens, local_attention_mask(tokens.dim(0), window, shift));
}

// Pre-norm transformer block: x + attn(norm(x)), then x + mlp(norm(x)).
struct TransformerBlock {
    LayerNorm norm1;
    SelfAttention attn;
    LayerNorm norm2;
    Linear fc1, fc2;

    TransformerBlock() = default;
    TransformerBlock(ParameterSet& params, const std::string& name, std::size_t dim, std::size_t heads,
                     std::size_t mlp_ratio, Rng& rng, double init_std = 0.02)
        : norm1(params, name + ".norm1", dim),
          attn(params, name + ".attn", dim, heads, rng, init_std),
          norm2(params, name + ".norm2", dim),
          fc1(params, name + ".mlp.fc1", dim, dim * mlp_ratio, rng, init_std),
          fc2(params, name + ".mlp.fc2", dim * mlp_ratio, dim, rng, init_std) {}

    Tensor operator()(const Tensor& x, const AttentionMask& mask = nullptr) const {
        Tensor h = add(x, attn(norm1(x), mask));
        return add(h, fc2(gelu(fc1(norm2(h)))));
    }
};

} // namespace mamlab
